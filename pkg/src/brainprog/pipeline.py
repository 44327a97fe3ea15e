"""Stage orchestration shared by the CLI and the acceptance suite.

Connects phantom data, the segmenters, the two training stages, and the
evaluation battery, with hash-verified checkpoints between stages. Each
artifact records the content hashes of the artifacts it was trained
against, and loading refuses mismatched chains.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import io as bio
from .autoencoder import (
    PatchDiscriminator3D,
    Stage1Config,
    Stage1Weights,
    VAE3D,
    LatentScale,
    compute_scale_factor,
    train_autoencoder_phase,
)
from .config import ExperimentConfig, from_jsonable, to_jsonable
from .core import EncodingConfig, ScanPair, Volume
from .diffusion import NoisePredictor, Stage2Config, freeze_module, train_ldm
from .diffusionmath import build_schedule
from .errors import ConfigError, DependencyError
from .evaluation import ModelBundle, SplitEvalReport, evaluate_pairs
from .phantom import Cohort, PhantomConfig, build_cohort, default_roi_map
from .segteacher import (
    EVAL_ARCH,
    TEACHER_ARCH,
    SegmenterHandle,
    SegTrainConfig,
    build_segmenter,
    train_segmenter,
)

VARIANTS = ("base", "ae-seg", "full")


def derive_encoding(base: EncodingConfig, pairs: Sequence[ScanPair]) -> EncodingConfig:
    """Fill the dataset medians used as null values for continuous covariates."""
    if not pairs:
        return base
    return replace(
        base,
        median_age_baseline=float(np.median([p.covariates.age_baseline for p in pairs])),
        median_age_followup=float(np.median([p.covariates.age_followup for p in pairs])),
    )


def build_dataset(cfg: ExperimentConfig, log=None) -> tuple[Cohort, EncodingConfig]:
    if log:
        log(
            f"generating cohort: {cfg.cohort.n_subjects} subjects x "
            f"{cfg.cohort.visits_per_subject} visits, seed {cfg.seed}"
        )
    cohort = build_cohort(cfg.cohort.n_subjects, cfg.cohort.visits_per_subject, cfg.phantom, cfg.seed)
    enc = derive_encoding(cfg.encoding, cohort.pairs["train"])
    return cohort, enc


def train_teachers(cohort: Cohort, cfg: ExperimentConfig, log=None) -> tuple[SegmenterHandle, SegmenterHandle]:
    scans = cohort.split_volumes("train")
    teacher = train_segmenter(scans, cfg.teacher, TEACHER_ARCH, seed=cfg.seed + 101, log=log)
    eval_seg = train_segmenter(scans, cfg.eval_segmenter, EVAL_ARCH, seed=cfg.seed + 202, log=log)
    return teacher, eval_seg


def stage1_volumes(cohort: Cohort, cfg: ExperimentConfig) -> list[Volume]:
    vols = [v for v, _ in cohort.split_volumes("train")]
    cap = cfg.cohort.ae_volume_cap
    return vols[:cap] if cap else vols


def train_stage1(
    volumes: Sequence[Volume],
    teacher: SegmenterHandle,
    s1: Stage1Config,
    lambda_seg: float,
    scale_samples: int,
    seed: int,
    log=None,
) -> tuple[VAE3D, LatentScale]:
    """Pretrain (no anatomical term) then fine-tune the autoencoder.

    ``lambda_seg`` controls the fine-tuning phase only; the pretraining
    phase always runs the baseline objective. Returns the frozen VAE and
    the latent scale factor computed from sampled training latents.
    """
    torch.manual_seed(seed)
    vae = VAE3D(s1.vae_channels)
    disc = PatchDiscriminator3D(s1.disc_channels)
    pre_w = replace(s1.weights, lambda_seg=0.0)
    ft_w = replace(s1.weights, lambda_seg=lambda_seg)
    if log:
        log(f"stage1: pretraining {s1.pretrain_epochs} epochs on {len(volumes)} volumes")
    train_autoencoder_phase(
        vae, disc, None, teacher, volumes, pre_w, s1.pretrain_epochs, s1.lr_pretrain, s1,
        seed=seed, log=log,
    )
    if log:
        log(f"stage1: fine-tuning {s1.finetune_epochs} epochs (lambda_seg={lambda_seg})")
    train_autoencoder_phase(
        vae, disc, teacher if lambda_seg != 0 else None, teacher, volumes, ft_w,
        s1.finetune_epochs, s1.lr_finetune, s1, seed=seed + 1, log=log,
    )
    freeze_module(vae)
    scale = compute_scale_factor(vae, volumes, n=scale_samples, seed=seed + 2)
    if log:
        log(f"stage1 done: latent scale s={scale.s:.4f}")
    return vae, scale


def train_stage2(
    pairs: Sequence[ScanPair],
    vae: VAE3D,
    scale: LatentScale,
    teacher: SegmenterHandle,
    enc_cfg: EncodingConfig,
    s2: Stage2Config,
    gamma: float,
    seed: int,
    log=None,
) -> tuple[NoisePredictor, object]:
    """Train the conditional noise predictor; gamma=0 disables guidance."""
    torch.manual_seed(seed)
    eps_net = NoisePredictor(s2.channels)
    sched = build_schedule(s2.T, s2.beta_1, s2.beta_T)
    guidance = replace(s2.guidance, gamma=gamma)
    cfg = replace(s2, guidance=guidance)
    if log:
        log(f"stage2: {s2.epochs} epochs over {len(pairs)} pairs (gamma={gamma})")
    train_ldm(eps_net, vae, teacher if gamma > 0 else None, scale, pairs, enc_cfg, sched, cfg,
              seed=seed, log=log)
    freeze_module(eps_net)
    return eps_net, sched


def make_bundle(
    cfg: ExperimentConfig,
    vae: VAE3D,
    scale: LatentScale,
    eps_net: NoisePredictor | None,
    teacher: SegmenterHandle,
    eval_seg: SegmenterHandle,
    sched,
    enc_cfg: EncodingConfig,
) -> ModelBundle:
    return ModelBundle(
        vae=vae,
        scale=scale,
        eps_net=eps_net,
        teacher=teacher,
        eval_seg=eval_seg,
        sched=sched,
        enc_cfg=enc_cfg,
        roi_map=default_roi_map(cfg.phantom),
        inference_steps=cfg.protocol.inference_steps,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_segmenter(path, handle: SegmenterHandle, train_cfg: SegTrainConfig, seed: int) -> str:
    cfg = {
        "arch_id": handle.arch_id,
        "grid_shape": list(handle.grid_shape),
        "class_count": handle.class_count,
        "train": to_jsonable(train_cfg),
        "seed": seed,
    }
    return bio.save_checkpoint(path, "segmenter", bio.state_dict_arrays(handle.net), cfg)


def load_segmenter(path, expect_arch: str | None = None) -> tuple[SegmenterHandle, str]:
    ckpt = bio.load_checkpoint(path, expect_module="segmenter")
    arch = ckpt.config["arch_id"]
    if expect_arch and arch != expect_arch:
        raise DependencyError(f"{path}: segmenter arch {arch!r}, expected {expect_arch!r}")
    train_cfg = from_jsonable(SegTrainConfig, ckpt.config["train"])
    handle = build_segmenter(arch, tuple(ckpt.config["grid_shape"]), train_cfg, seed=0)
    bio.load_state_arrays(handle.net, ckpt.arrays)
    handle.freeze()
    return handle, ckpt.content_hash


def save_vae(
    path, vae: VAE3D, scale: LatentScale, s1: Stage1Config, variant: str,
    enc_cfg: EncodingConfig, teacher_hash: str,
) -> str:
    cfg = {
        "channels": list(vae.channels),
        "variant": variant,
        "scale_s": scale.s,
        "l1_reduction": "mean",
        "stage1": to_jsonable(s1),
        "encoding": to_jsonable(enc_cfg),
    }
    return bio.save_checkpoint(
        path, "autoencoder", bio.state_dict_arrays(vae), cfg, upstream={"teacher": teacher_hash}
    )


def load_vae(path) -> tuple[VAE3D, LatentScale, bio.Checkpoint]:
    ckpt = bio.load_checkpoint(path, expect_module="autoencoder")
    vae = VAE3D(tuple(ckpt.config["channels"]))
    bio.load_state_arrays(vae, ckpt.arrays)
    freeze_module(vae)
    return vae, LatentScale(s=float(ckpt.config["scale_s"])), ckpt


def save_ldm(
    path, eps_net: NoisePredictor, s2: Stage2Config, variant: str,
    enc_cfg: EncodingConfig, vae_hash: str, teacher_hash: str,
) -> str:
    cfg = {
        "channels": list(eps_net.channels),
        "variant": variant,
        "stage2": to_jsonable(s2),
        "encoding": to_jsonable(enc_cfg),
    }
    return bio.save_checkpoint(
        path, "diffusion", bio.state_dict_arrays(eps_net), cfg,
        upstream={"vae": vae_hash, "teacher": teacher_hash},
    )


def load_ldm(path) -> tuple[NoisePredictor, Stage2Config, EncodingConfig, bio.Checkpoint]:
    ckpt = bio.load_checkpoint(path, expect_module="diffusion")
    eps_net = NoisePredictor(tuple(ckpt.config["channels"]))
    bio.load_state_arrays(eps_net, ckpt.arrays)
    freeze_module(eps_net)
    s2 = from_jsonable(Stage2Config, ckpt.config["stage2"])
    enc = from_jsonable(EncodingConfig, ckpt.config["encoding"])
    return eps_net, s2, enc, ckpt


def load_bundle(
    cfg: ExperimentConfig, teacher_path, eval_seg_path, vae_path, ldm_path
) -> ModelBundle:
    """Load a full model chain, verifying every upstream hash."""
    teacher, teacher_hash = load_segmenter(teacher_path, expect_arch=TEACHER_ARCH)
    eval_seg, _ = load_segmenter(eval_seg_path, expect_arch=EVAL_ARCH)
    vae, scale, vae_ckpt = load_vae(vae_path)
    bio.require_upstream(vae_ckpt, "teacher", teacher_hash)
    eps_net, s2, enc, ldm_ckpt = load_ldm(ldm_path)
    bio.require_upstream(ldm_ckpt, "vae", vae_ckpt.content_hash)
    bio.require_upstream(ldm_ckpt, "teacher", teacher_hash)
    sched = build_schedule(s2.T, s2.beta_1, s2.beta_T)
    return make_bundle(cfg, vae, scale, eps_net, teacher, eval_seg, sched, enc)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def apply_stage1_overrides(base: Stage1Config, overrides: dict) -> Stage1Config:
    """Merge a partial override dict into a Stage1Config, strictly."""
    merged = to_jsonable(base)

    def merge(dst: dict, src: dict, path: str):
        for k, v in src.items():
            if k not in dst:
                raise ConfigError(f"unknown override key {path + k!r}")
            if isinstance(v, dict) and isinstance(dst[k], dict):
                merge(dst[k], v, path + k + ".")
            else:
                dst[k] = v

    merge(merged, overrides, "stage1.")
    return from_jsonable(Stage1Config, merged)


def variant_settings(variant: str, s1: Stage1Config, s2: Stage2Config) -> tuple[float, float]:
    """(lambda_seg, gamma) for one ablation variant."""
    if variant == "base":
        return 0.0, 0.0
    if variant == "ae-seg":
        return s1.weights.lambda_seg, 0.0
    if variant == "full":
        return s1.weights.lambda_seg, s2.guidance.gamma
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def cohort_signature(cfg: ExperimentConfig) -> str:
    payload = {
        "phantom": to_jsonable(cfg.phantom),
        "cohort": to_jsonable(cfg.cohort),
        "seed": cfg.seed,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(eq=False)
class AblationCell:
    config_name: str
    variant: str
    bundle: ModelBundle
    report: SplitEvalReport


def run_ablation(
    cohort: Cohort,
    enc_cfg: EncodingConfig,
    cfg: ExperimentConfig,
    teacher: SegmenterHandle,
    eval_seg: SegmenterHandle,
    eval_pairs_list: Sequence[ScanPair],
    log=None,
    cache_dir: str | Path | None = None,
) -> list[AblationCell]:
    """Train and evaluate the {base, ae-seg, full} x configuration grid.

    The guided autoencoder is shared between ae-seg and full (they differ
    only in Stage 2). With a cache directory, trained stages are reused
    across runs keyed by their full configuration.
    """
    if len(cfg.ablation) < 1:
        raise ConfigError("ablation grid is empty")
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    volumes = stage1_volumes(cohort, cfg)
    sig = cohort_signature(cfg)
    teacher_hash = teacher.fingerprint()
    cells = []
    for ci, entry in enumerate(cfg.ablation):
        s1 = apply_stage1_overrides(cfg.stage1, entry.stage1)
        seed1 = cfg.seed + 10_000 + 1000 * ci
        stage1_cache: dict[float, tuple[VAE3D, LatentScale]] = {}

        def get_stage1(lambda_seg: float):
            if lambda_seg in stage1_cache:
                return stage1_cache[lambda_seg]
            key = None
            if cache_dir is not None:
                payload = {"s1": to_jsonable(s1), "seg": lambda_seg, "seed": seed1,
                           "cohort": sig, "teacher": teacher_hash,
                           "scale_samples": cfg.stage2.scale_samples}
                key = Path(cache_dir) / (
                    "vae-" + hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20] + ".ckpt"
                )
                if key.exists():
                    if log:
                        log(f"stage1 cache hit: {key.name}")
                    vae, scale, _ = load_vae(key)
                    stage1_cache[lambda_seg] = (vae, scale)
                    return vae, scale
            vae, scale = train_stage1(
                volumes, teacher, s1, lambda_seg, cfg.stage2.scale_samples, seed1, log=log
            )
            if key is not None:
                save_vae(key, vae, scale, s1, f"lseg{lambda_seg}", enc_cfg, teacher_hash)
            stage1_cache[lambda_seg] = (vae, scale)
            return vae, scale

        for variant in VARIANTS:
            lambda_seg, gamma = variant_settings(variant, s1, cfg.stage2)
            if log:
                log(f"=== ablation {entry.name} / {variant} ===")
            vae, scale = get_stage1(lambda_seg)
            seed2 = cfg.seed + 20_000 + 1000 * ci + VARIANTS.index(variant)
            eps_net = None
            sched = build_schedule(cfg.stage2.T, cfg.stage2.beta_1, cfg.stage2.beta_T)
            key = None
            if cache_dir is not None:
                payload = {"s2": to_jsonable(cfg.stage2), "gamma": gamma, "seed": seed2,
                           "cohort": sig, "vae_seed": seed1, "s1": to_jsonable(s1),
                           "lseg": lambda_seg, "teacher": teacher_hash}
                key = Path(cache_dir) / (
                    "ldm-" + hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20] + ".ckpt"
                )
                if key.exists():
                    if log:
                        log(f"stage2 cache hit: {key.name}")
                    eps_net, _, _, _ = load_ldm(key)
            if eps_net is None:
                eps_net, sched = train_stage2(
                    cohort.pairs["train"], vae, scale, teacher, enc_cfg, cfg.stage2, gamma,
                    seed2, log=log,
                )
                if key is not None:
                    save_ldm(key, eps_net, cfg.stage2, variant, enc_cfg, "unpinned", teacher_hash)
            bundle = make_bundle(cfg, vae, scale, eps_net, teacher, eval_seg, sched, enc_cfg)
            report = evaluate_pairs(bundle, eval_pairs_list, seed=cfg.seed + 500)
            if log:
                log(
                    f"{entry.name}/{variant}: mse={report.mean_mse:.5f} "
                    f"vent_mae={report.mean_volume_mae_pp['ventricles']:.4f} "
                    f"gm_dice={report.mean_dice['gm']:.4f} wm_dice={report.mean_dice['wm']:.4f}"
                )
            cells.append(AblationCell(entry.name, variant, bundle, report))
    return cells
