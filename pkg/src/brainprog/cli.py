"""Command-line pipeline: reproducible experiments from a config file.

Every command runs inside a fresh run directory under
``<workspace>/runs/`` containing the exact config snapshot, a log, and the
command's outputs. Stage order is enforced through checkpoint dependency
hashes. Exit codes: 0 success, 1 usage, 2 dependency/format, 3 numerical
or training failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as bio
from .config import ExperimentConfig, desk_config, dump_config, load_config, to_jsonable
from .core import Covariates, Diagnosis, ScanPair, Volume
from .errors import (
    BrainprogError,
    ConfigError,
    DependencyError,
    FormatError,
    NumericalError,
    TrainingError,
)
from .evaluation import (
    ROI_ORDER,
    SENSITIVITY_VARIABLES,
    TrajectoryStat,
    counterfactual_run,
    evaluate_pairs,
    identity_stub,
    sensitivity_study,
)
from .phantom import build_cohort, build_eval_pairs, default_roi_map
from .pipeline import (
    VARIANTS,
    build_dataset,
    derive_encoding,
    load_bundle,
    load_segmenter,
    load_vae,
    make_bundle,
    run_ablation,
    save_ldm,
    save_segmenter,
    save_vae,
    stage1_volumes,
    train_stage1,
    train_stage2,
    train_teachers,
)
from .segteacher import EVAL_ARCH, TEACHER_ARCH


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors -> exit code 1, not argparse's 2
        raise ConfigError(message)


def _run_dir(ws: Path, command: str) -> Path:
    runs = ws / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    n = 0
    while (runs / f"{command}-{n:03d}").exists():
        n += 1
    out = runs / f"{command}-{n:03d}"
    out.mkdir()
    return out


class _RunLog:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "log.txt"
        self.fh = open(self.path, "w")
        self.t0 = time.perf_counter()

    def __call__(self, msg: str):
        line = f"[{time.perf_counter() - self.t0:8.1f}s] {msg}"
        print(line)
        self.fh.write(line + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _start(args, command: str) -> tuple[ExperimentConfig, Path, Path, _RunLog]:
    cfg = load_config(args.config) if args.config else desk_config()
    ws = Path(args.workspace)
    ws.mkdir(parents=True, exist_ok=True)
    run_dir = _run_dir(ws, command)
    dump_config(cfg, run_dir / "config.json")
    log = _RunLog(run_dir)
    log(f"{command}: workspace={ws} run_dir={run_dir}")
    return cfg, ws, run_dir, log


# ---------------------------------------------------------------------------
# Cohort on disk
# ---------------------------------------------------------------------------

def _scan_paths(ws: Path, sid: str, visit: int) -> tuple[Path, Path]:
    d = ws / "cohort"
    return d / f"{sid}_v{visit}.nii", d / f"{sid}_v{visit}_labels.nii"


def cmd_gen_data(args):
    cfg, ws, run_dir, log = _start(args, "gen-data")
    cohort, enc = build_dataset(cfg, log)
    d = ws / "cohort"
    d.mkdir(exist_ok=True)
    records = []
    for split, sids in cohort.splits.items():
        for sid in sids:
            for vi in range(len(cohort.visits[sid])):
                vol, labels = cohort.scans[(sid, vi)]
                vp, lp = _scan_paths(ws, sid, vi)
                bio.write_nifti(vol, vp)
                bio.write_nifti(labels, lp)
    for split, pairs in cohort.pairs.items():
        for p in pairs:
            sid = p.subject_id
            vs = cohort.visits[sid]
            bi = next(i for i, v in enumerate(vs) if v.age == p.covariates.age_baseline)
            fi = next(i for i, v in enumerate(vs) if v.age == p.covariates.age_followup)
            bv, bl = _scan_paths(ws, sid, bi)
            fv, fl = _scan_paths(ws, sid, fi)
            records.append(
                bio.PairRecord(sid, split, str(bv), str(fv), str(bl), str(fl), p.covariates)
            )
    bio.write_manifest(records, d / "manifest.tsv")
    import json

    (d / "encoding.json").write_text(json.dumps(to_jsonable(enc), indent=2, sort_keys=True) + "\n")
    log(f"wrote {len(cohort.scans)} scans, {len(records)} pairs -> {d}")
    log_counts = {s: len(p) for s, p in cohort.pairs.items()}
    log(f"pairs per split: {log_counts}")
    return 0


def _load_disk_cohort(ws: Path):
    manifest = ws / "cohort" / "manifest.tsv"
    if not manifest.exists():
        raise DependencyError(f"no cohort manifest at {manifest}; run gen-data first")
    records = bio.read_manifest(manifest)
    cache: dict[str, object] = {}

    def load(path: str):
        if path not in cache:
            cache[path] = bio.read_nifti(path)
        return cache[path]

    pairs: dict[str, list[ScanPair]] = {}
    for r in records:
        pairs.setdefault(r.split, []).append(
            ScanPair(
                subject_id=r.subject_id,
                baseline=load(r.baseline_path),
                followup=load(r.followup_path),
                baseline_labels=load(r.baseline_labels_path),
                followup_labels=load(r.followup_labels_path),
                covariates=r.covariates,
            )
        )
    return pairs


def _disk_encoding(ws: Path):
    import json

    from .config import from_jsonable
    from .core import EncodingConfig

    path = ws / "cohort" / "encoding.json"
    if not path.exists():
        raise DependencyError(f"missing {path}; run gen-data first")
    return from_jsonable(EncodingConfig, json.loads(path.read_text()))


def _train_scans(pairs_by_split):
    seen, out = set(), []
    for p in pairs_by_split.get("train", []):
        for vol, labels, tag in (
            (p.baseline, p.baseline_labels, (p.subject_id, p.covariates.age_baseline)),
            (p.followup, p.followup_labels, (p.subject_id, p.covariates.age_followup)),
        ):
            if tag not in seen:
                seen.add(tag)
                out.append((vol, labels))
    return out


def cmd_train_teacher(args):
    cfg, ws, run_dir, log = _start(args, "train-teacher")
    pairs = _load_disk_cohort(ws)
    scans = _train_scans(pairs)
    log(f"training segmenters on {len(scans)} labeled scans")
    from .segteacher import train_segmenter

    teacher = train_segmenter(scans, cfg.teacher, TEACHER_ARCH, seed=cfg.seed + 101, log=log)
    eval_seg = train_segmenter(scans, cfg.eval_segmenter, EVAL_ARCH, seed=cfg.seed + 202, log=log)
    th = save_segmenter(ws / "teacher.ckpt", teacher, cfg.teacher, cfg.seed + 101)
    eh = save_segmenter(ws / "evalseg.ckpt", eval_seg, cfg.eval_segmenter, cfg.seed + 202)
    log(f"teacher {th[:12]} evalseg {eh[:12]}")
    return 0


def cmd_train_ae(args):
    cfg, ws, run_dir, log = _start(args, "train-ae")
    if args.variant not in ("base", "ae-seg"):
        raise ConfigError(f"--variant must be base or ae-seg, got {args.variant}")
    pairs = _load_disk_cohort(ws)
    enc = _disk_encoding(ws)
    teacher, teacher_hash = load_segmenter(ws / "teacher.ckpt", expect_arch=TEACHER_ARCH)
    vols = [v for v, _ in _train_scans(pairs)]
    cap = cfg.cohort.ae_volume_cap
    if cap:
        vols = vols[:cap]
    lam = 0.0 if args.variant == "base" else cfg.stage1.weights.lambda_seg
    vae, scale = train_stage1(
        vols, teacher, cfg.stage1, lam, cfg.stage2.scale_samples, cfg.seed + 10_000, log=log
    )
    path = ws / f"vae-{args.variant}.ckpt"
    h = save_vae(path, vae, scale, cfg.stage1, args.variant, enc, teacher_hash)
    log(f"saved {path} ({h[:12]})")
    return 0


_LDM_AE = {"base": "base", "ae-seg": "ae-seg", "full": "ae-seg"}


def cmd_train_ldm(args):
    cfg, ws, run_dir, log = _start(args, "train-ldm")
    if args.variant not in VARIANTS:
        raise ConfigError(f"--variant must be one of {VARIANTS}, got {args.variant}")
    ae_variant = args.ae_variant or _LDM_AE[args.variant]
    pairs = _load_disk_cohort(ws)
    teacher, teacher_hash = load_segmenter(ws / "teacher.ckpt", expect_arch=TEACHER_ARCH)
    vae_path = ws / f"vae-{ae_variant}.ckpt"
    if not vae_path.exists():
        raise DependencyError(f"missing {vae_path}; run train-ae --variant {ae_variant} first")
    vae, scale, vae_ckpt = load_vae(vae_path)
    bio.require_upstream(vae_ckpt, "teacher", teacher_hash)
    enc = _disk_encoding(ws)
    gamma = cfg.stage2.guidance.gamma if args.variant == "full" else 0.0
    eps_net, sched = train_stage2(
        pairs["train"], vae, scale, teacher, enc, cfg.stage2, gamma, cfg.seed + 20_000, log=log
    )
    path = ws / f"ldm-{args.variant}.ckpt"
    h = save_ldm(path, eps_net, cfg.stage2, args.variant, enc, vae_ckpt.content_hash, teacher_hash)
    log(f"saved {path} ({h[:12]})")
    return 0


def _bundle_from_ws(cfg, ws: Path, variant: str):
    ae_variant = _LDM_AE[variant]
    return load_bundle(
        cfg, ws / "teacher.ckpt", ws / "evalseg.ckpt",
        ws / f"vae-{ae_variant}.ckpt", ws / f"ldm-{variant}.ckpt",
    )


_EVAL_COLUMNS = (
    ["method", "n_pairs", "mse", "psnr", "wasabi"]
    + [f"volmae_{r}" for r in ROI_ORDER]
    + ["dice_wm", "dice_gm", "dice_csf"]
)


def _eval_row(method: str, report) -> list:
    return (
        [method, len(report.per_pair), report.mean_mse, report.mean_psnr, report.wasabi]
        + [report.mean_volume_mae_pp[r] for r in ROI_ORDER]
        + [report.mean_dice["wm"], report.mean_dice["gm"], report.mean_dice["csf"]]
    )


def cmd_evaluate(args):
    cfg, ws, run_dir, log = _start(args, "evaluate")
    pairs = _load_disk_cohort(ws)
    split_pairs = pairs.get(args.split, [])
    if args.cap:
        split_pairs = split_pairs[: args.cap]
    if not split_pairs:
        raise ConfigError(f"split {args.split!r} has no pairs")
    if args.stub == "identity":
        teacher, _ = load_segmenter(ws / "teacher.ckpt", expect_arch=TEACHER_ARCH)
        eval_seg, _ = load_segmenter(ws / "evalseg.ckpt", expect_arch=EVAL_ARCH)
        from .diffusionmath import build_schedule

        bundle = make_bundle(
            cfg, None, None, None, teacher, eval_seg,
            build_schedule(cfg.stage2.T, cfg.stage2.beta_1, cfg.stage2.beta_T), _disk_encoding(ws),
        )
        report = evaluate_pairs(bundle, split_pairs, seed=cfg.seed + 500, generate_fn=identity_stub)
        method = "identity-stub"
    else:
        bundle = _bundle_from_ws(cfg, ws, args.variant)
        report = evaluate_pairs(bundle, split_pairs, seed=cfg.seed + 500)
        method = args.variant
    bio.write_table(run_dir / "metrics.tsv", _EVAL_COLUMNS, [_eval_row(method, report)])
    log(f"{method} on {args.split}: mse={report.mean_mse:.5f} psnr={report.mean_psnr:.2f}")
    log(f"wrote {run_dir / 'metrics.tsv'}")
    return 0


def cmd_ablate(args):
    cfg, ws, run_dir, log = _start(args, "ablate")
    cohort, enc = build_dataset(cfg, log)
    teacher, _ = load_segmenter(ws / "teacher.ckpt", expect_arch=TEACHER_ARCH)
    eval_seg, _ = load_segmenter(ws / "evalseg.ckpt", expect_arch=EVAL_ARCH)
    test_pairs = cohort.pairs["test"]
    if cfg.protocol.eval_pairs_cap:
        test_pairs = test_pairs[: cfg.protocol.eval_pairs_cap]
    cells = run_ablation(
        cohort, enc, cfg, teacher, eval_seg, test_pairs, log=log, cache_dir=ws / "cache"
    )
    rows = [_eval_row(f"{c.config_name}/{c.variant}", c.report) for c in cells]
    bio.write_table(run_dir / "metrics.tsv", _EVAL_COLUMNS, rows)
    log(f"wrote {len(rows)} rows -> {run_dir / 'metrics.tsv'}")
    return 0


def cmd_generate(args):
    cfg, ws, run_dir, log = _start(args, "generate")
    bundle = _bundle_from_ws(cfg, ws, args.variant)
    baseline = bio.read_nifti(args.baseline)
    if not isinstance(baseline, Volume):
        raise ConfigError(f"{args.baseline} is a label map, not an intensity volume")
    cov = Covariates(
        age_baseline=args.age_baseline,
        age_followup=args.age_followup,
        sex=args.sex,
        dx_baseline=Diagnosis(args.dx_baseline),
        dx_followup=Diagnosis(args.dx_followup),
    )
    gen = bundle.generate(baseline, cov, seed=args.seed)
    out = Path(args.out) if args.out else run_dir / "followup.nii"
    bio.write_nifti(gen, out)
    log(f"wrote {out}")
    return 0


def cmd_sensitivity(args):
    cfg, ws, run_dir, log = _start(args, "sensitivity")
    bundle = _bundle_from_ws(cfg, ws, args.variant)
    phantom_cfg = replace(cfg.phantom, visit_interval_range=cfg.protocol.sensitivity_interval)
    probe = build_cohort(cfg.protocol.sensitivity_subjects, 2, phantom_cfg, cfg.seed + 900)
    pairs = [p for split in ("train", "val", "test") for p in probe.pairs[split]]
    log(f"sensitivity over {len(pairs)} fresh held-out subjects")
    results = sensitivity_study(bundle, pairs, seed=cfg.seed + 700)
    rows = [[v, r.mean, r.sd, len(r.per_subject)] for v, r in results.items()]
    bio.write_table(run_dir / "sensitivity.tsv", ["variable", "mean_pct", "sd_pct", "n"], rows)
    for v, r in results.items():
        log(f"{v}: {r.mean:+.1f} +/- {r.sd:.1f} %")
    return 0


def _trajectory_rows(stat: TrajectoryStat) -> list[list]:
    return [
        [stat.label, roi, stat.mean[roi], stat.sd[roi], stat.median[roi], len(stat.samples[roi])]
        for roi in ROI_ORDER
    ]


def cmd_counterfactual(args):
    cfg, ws, run_dir, log = _start(args, "counterfactual")
    bundle = _bundle_from_ws(cfg, ws, args.variant)
    eval_pairs = build_eval_pairs(
        cfg.protocol.counterfactual_subjects, cfg.phantom, cfg.seed,
        interval_range=cfg.protocol.counterfactual_interval,
    )
    pairs = [p for p, _ in eval_pairs]
    log(f"counterfactual over {len(pairs)} CN pairs (interval > {cfg.protocol.counterfactual_min_interval}y)")
    cn, ad = counterfactual_run(
        bundle, pairs, cfg.protocol.counterfactual_min_interval, seed=cfg.seed + 800
    )
    # real phantom trajectories for reference, including the real AD conversion
    from .evaluation import delta_v_rel, roi_volumes

    real_cn: dict[str, list[float]] = {r: [] for r in ROI_ORDER}
    real_ad: dict[str, list[float]] = {r: [] for r in ROI_ORDER}
    ad_pairs = build_eval_pairs(
        cfg.protocol.counterfactual_subjects, cfg.phantom, cfg.seed,
        dx_followup=Diagnosis.AD, interval_range=cfg.protocol.counterfactual_interval,
    )
    for (p, _), (q, _) in zip(eval_pairs, ad_pairs):
        for pair, sink in ((p, real_cn), (q, real_ad)):
            base = roi_volumes(pair.baseline, bundle.eval_seg, bundle.roi_map)
            follow = roi_volumes(pair.followup, bundle.eval_seg, bundle.roi_map)
            for roi in ROI_ORDER:
                if base.normalized_pct[roi] > 0:
                    sink[roi].append(delta_v_rel(base.normalized_pct[roi], follow.normalized_pct[roi]))
    rows = (
        _trajectory_rows(TrajectoryStat.from_samples("real-cn-to-cn", real_cn))
        + _trajectory_rows(TrajectoryStat.from_samples("real-cn-to-ad", real_ad))
        + _trajectory_rows(cn)
        + _trajectory_rows(ad)
    )
    bio.write_table(
        run_dir / "trajectories.tsv", ["cohort", "roi", "mean_pct", "sd_pct", "median_pct", "n"], rows
    )
    for roi in ("ventricles", "hippocampus"):
        log(f"{roi}: median cn->cn {cn.median[roi]:+.1f}% vs cn->ad {ad.median[roi]:+.1f}%")
    if args.plots:
        _write_trajectory_plots(run_dir, {"cn-to-cn": cn, "cn-to-ad": ad})
        log("wrote trajectory plots")
    return 0


def _write_trajectory_plots(run_dir: Path, stats: dict[str, TrajectoryStat]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(ROI_ORDER), figsize=(3 * len(ROI_ORDER), 3.2))
    for ax, roi in zip(axes, ROI_ORDER):
        data = [stats[k].samples[roi] for k in stats]
        ax.boxplot(data, tick_labels=list(stats))
        ax.set_title(roi)
        ax.axhline(0.0, color="gray", lw=0.5)
    fig.tight_layout()
    fig.savefig(run_dir / "trajectories.png", dpi=120)
    plt.close(fig)


def cmd_init_config(args):
    cfg = desk_config(seed=args.seed)
    dump_config(cfg, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="brainprog", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="experiment config JSON (default: desk profile)")
        sp.add_argument("--workspace", default="workspace", help="artifact directory")

    sp = sub.add_parser("init-config", help="write the desk-profile config")
    sp.add_argument("--out", default="experiment.json")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_init_config)

    sp = sub.add_parser("gen-data", help="generate the phantom cohort and manifest")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-teacher", help="train and freeze both segmenters")
    common(sp)
    sp.set_defaults(fn=cmd_train_teacher)

    sp = sub.add_parser("train-ae", help="stage 1: pretrain + fine-tune the autoencoder")
    common(sp)
    sp.add_argument("--variant", required=True, choices=["base", "ae-seg"])
    sp.set_defaults(fn=cmd_train_ae)

    sp = sub.add_parser("train-ldm", help="stage 2: conditional diffusion")
    common(sp)
    sp.add_argument("--variant", required=True, choices=list(VARIANTS))
    sp.add_argument("--ae-variant", default=None, choices=["base", "ae-seg"])
    sp.set_defaults(fn=cmd_train_ldm)

    sp = sub.add_parser("generate", help="synthesize a follow-up scan from a baseline NIfTI")
    common(sp)
    sp.add_argument("--variant", default="full", choices=list(VARIANTS))
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--age-baseline", type=float, required=True)
    sp.add_argument("--age-followup", type=float, required=True)
    sp.add_argument("--sex", type=int, required=True, choices=[0, 1])
    sp.add_argument("--dx-baseline", required=True, choices=[d.value for d in Diagnosis])
    sp.add_argument("--dx-followup", required=True, choices=[d.value for d in Diagnosis])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("evaluate", help="image-fidelity and anatomy report over a split")
    common(sp)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--variant", default="full", choices=list(VARIANTS))
    sp.add_argument("--stub", default=None, choices=["identity"])
    sp.add_argument("--cap", type=int, default=0, help="evaluate at most N pairs")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("ablate", help="run the variant x configuration grid")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("sensitivity", help="covariate-removal sensitivity study")
    common(sp)
    sp.add_argument("--variant", default="full", choices=list(VARIANTS))
    sp.set_defaults(fn=cmd_sensitivity)

    sp = sub.add_parser("counterfactual", help="natural vs counterfactual trajectory comparison")
    common(sp)
    sp.add_argument("--variant", default="full", choices=list(VARIANTS))
    sp.add_argument("--plots", action="store_true")
    sp.set_defaults(fn=cmd_counterfactual)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DependencyError, FormatError) as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, TrainingError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
