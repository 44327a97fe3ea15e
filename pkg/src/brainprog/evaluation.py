"""Quantitative evaluation: image fidelity, anatomical precision, cohort
plausibility, conditioning sensitivity, and counterfactual trajectories.

All metrics are pure functions; cohort protocols derive per-subject seeds
deterministically so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autoencoder import VAE3D, LatentScale
from .core import Covariates, EncodingConfig, NoiseSchedule, ScanPair, Volume, encode_covariates, null_covariate
from .diffusion import NoisePredictor, generate_followup
from .errors import ConfigError, ContractError, NumericalError
from .phantom import ROISpec
from .segteacher import SegmenterHandle, TEACHER_ARCH, hard_dice, segment_labels

ROI_ORDER = ("ventricles", "gm", "wm", "deep_gm", "hippocampus", "amygdala")
SENSITIVITY_VARIABLES = ("age_baseline", "age_followup", "sex", "diagnosis")


# ---------------------------------------------------------------------------
# Image fidelity
# ---------------------------------------------------------------------------

def mse(x: Volume, y: Volume) -> float:
    """Mean squared voxel difference."""
    if x.shape != y.shape:
        raise ConfigError(f"volume shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean((x.data.astype(np.float64) - y.data.astype(np.float64)) ** 2))


def psnr(x: Volume, y: Volume, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical volumes."""
    m = mse(x, y)
    if m == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / m)


# ---------------------------------------------------------------------------
# ROI volumes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ROIVolumeReport:
    """Per-ROI absolute (mm^3) and head-normalized (%) volumes."""

    volumes_mm3: dict[str, float]
    normalized_pct: dict[str, float]
    segmenter_arch: str


def roi_volumes(
    x: Volume, eval_seg: SegmenterHandle, roi_map: dict[str, ROISpec]
) -> ROIVolumeReport:
    """Segment a volume and report ROI volumes, normalized by head size.

    The training teacher is rejected: evaluation must stay independent of
    the supervision signal.
    """
    if eval_seg.arch_id == TEACHER_ARCH:
        raise ContractError("roi_volumes requires the independent evaluation segmenter")
    labels = segment_labels(eval_seg, x)
    head_vox = int((labels != 0).sum())
    if head_vox == 0:
        raise ContractError("zero head size: segmentation found no foreground")
    vox_mm3 = x.voxel_mm3()
    vols, norm = {}, {}
    for name, spec in roi_map.items():
        n = int(spec.mask(labels).sum())
        vols[name] = n * vox_mm3
        norm[name] = 100.0 * n / head_vox
    return ROIVolumeReport(volumes_mm3=vols, normalized_pct=norm, segmenter_arch=eval_seg.arch_id)


def volume_mae(pred: ROIVolumeReport, truth: ROIVolumeReport, relative: bool = False) -> dict[str, float]:
    """Per-ROI absolute error between head-normalized volumes.

    Default unit is percentage points of head volume; ``relative=True``
    divides by the true normalized volume instead (percent error).
    """
    out = {}
    for name in pred.normalized_pct:
        diff = abs(pred.normalized_pct[name] - truth.normalized_pct[name])
        if relative:
            t = truth.normalized_pct[name]
            if t == 0:
                raise NumericalError(f"ROI {name} has zero true volume; relative error undefined")
            diff = 100.0 * diff / t
        out[name] = diff
    return out


# ---------------------------------------------------------------------------
# Cohort-level anatomy distance (closed-form Gaussian 2-Wasserstein)
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def wasabi_lite(cohort_a: np.ndarray, cohort_b: np.ndarray) -> float:
    """Squared 2-Wasserstein distance between Gaussian fits of two cohorts.

    Inputs are (n, d) matrices of normalized ROI-volume vectors. Uses the
    Bures form |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2) with
    symmetric PSD square roots via eigendecomposition.
    """
    a = np.atleast_2d(np.asarray(cohort_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(cohort_b, dtype=np.float64))
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigError("cohorts must be (n, d) matrices")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigError("need at least 2 samples per cohort")
    if a.shape[1] != b.shape[1]:
        raise ConfigError("cohorts must share dimensionality")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise NumericalError("non-finite covariance")
    sq_b = _sqrtm_psd(cov_b)
    cross = _sqrtm_psd(sq_b @ cov_a @ sq_b)
    bures = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return float(np.sum((mu_a - mu_b) ** 2) + max(bures, 0.0))


# ---------------------------------------------------------------------------
# Trajectory statistics
# ---------------------------------------------------------------------------

def delta_v_rel(v_baseline: float, v_followup: float) -> float:
    """Relative volume change in percent; positive means expansion."""
    if v_baseline <= 0:
        raise ConfigError(f"baseline volume must be positive, got {v_baseline}")
    return 100.0 * (v_followup - v_baseline) / v_baseline


def iqr_filter(samples: Sequence[float]) -> np.ndarray:
    """Drop values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR]; quartiles interpolated.

    Applied to a fixpoint so the filter is idempotent: removing an extreme
    outlier can expose another, and a single pass would leave the output
    dependent on how many outliers happened to coexist.
    """
    arr = np.asarray(samples, dtype=np.float64)
    while arr.size:
        q1, q3 = np.quantile(arr, 0.25), np.quantile(arr, 0.75)
        iqr = q3 - q1
        keep = (arr >= q1 - 1.5 * iqr) & (arr <= q3 + 1.5 * iqr)
        if keep.all():
            break
        arr = arr[keep]
    return arr


@dataclass(frozen=True)
class TrajectoryStat:
    """Per-ROI relative volume changes of one cohort, after IQR filtering."""

    label: str
    samples: dict[str, np.ndarray]
    mean: dict[str, float]
    sd: dict[str, float]
    median: dict[str, float]
    raw_counts: dict[str, int]

    @classmethod
    def from_samples(cls, label: str, raw: dict[str, Sequence[float]]) -> "TrajectoryStat":
        samples, mean, sd, median, counts = {}, {}, {}, {}, {}
        for roi, vals in raw.items():
            filt = iqr_filter(vals)
            samples[roi] = filt
            counts[roi] = len(vals)
            mean[roi] = float(filt.mean()) if filt.size else float("nan")
            sd[roi] = float(filt.std(ddof=1)) if filt.size > 1 else 0.0
            median[roi] = float(np.median(filt)) if filt.size else float("nan")
        return cls(label=label, samples=samples, mean=mean, sd=sd, median=median, raw_counts=counts)


# ---------------------------------------------------------------------------
# Model bundle and cohort protocols
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ModelBundle:
    """Everything needed to generate and evaluate follow-up scans."""

    vae: VAE3D
    scale: LatentScale
    eps_net: NoisePredictor | None
    teacher: SegmenterHandle
    eval_seg: SegmenterHandle
    sched: NoiseSchedule
    enc_cfg: EncodingConfig
    roi_map: dict[str, ROISpec]
    inference_steps: int = 50

    def generate(self, baseline: Volume, cov: Covariates, seed: int, cov_vector=None) -> Volume:
        if self.eps_net is None:
            raise ConfigError("bundle has no trained noise predictor")
        return generate_followup(
            self.eps_net, self.vae, self.scale, baseline, cov, self.enc_cfg,
            self.sched, n_steps=self.inference_steps, seed=seed, cov_vector=cov_vector,
        )


GenerateFn = Callable[[ScanPair, int], Volume]


def _default_generate(bundle: ModelBundle) -> GenerateFn:
    def fn(pair: ScanPair, seed: int) -> Volume:
        return bundle.generate(pair.baseline, pair.covariates, seed)

    return fn


def identity_stub(pair: ScanPair, seed: int) -> Volume:
    """No-change baseline: predicts the follow-up to equal the baseline scan."""
    return pair.baseline


@dataclass(frozen=True)
class PairEvalResult:
    subject_id: str
    mse: float
    psnr: float
    volume_mae_pp: dict[str, float]
    dice: dict[str, float]


@dataclass(frozen=True)
class SplitEvalReport:
    """Aggregate evaluation over a split: Table-style fidelity and anatomy rows."""

    per_pair: list[PairEvalResult]
    mean_mse: float
    mean_psnr: float
    wasabi: float
    mean_volume_mae_pp: dict[str, float]
    mean_dice: dict[str, float]


_DICE_TISSUES = {"wm": 1, "gm": 2, "csf": 4}


def evaluate_pairs(
    bundle: ModelBundle,
    pairs: Sequence[ScanPair],
    seed: int = 0,
    generate_fn: GenerateFn | None = None,
) -> SplitEvalReport:
    """Generate a follow-up per pair and compare against the real one.

    Reports MSE/PSNR, per-ROI volume MAE (percentage points), per-tissue
    Dice of evaluation-segmenter labels, and the cohort anatomy distance
    between generated and real normalized ROI vectors.
    """
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    gen_fn = generate_fn or _default_generate(bundle)
    results = []
    gen_vecs, real_vecs = [], []
    for i, pair in enumerate(pairs):
        gen = gen_fn(pair, seed + i)
        real = pair.followup
        rep_gen = roi_volumes(gen, bundle.eval_seg, bundle.roi_map)
        rep_real = roi_volumes(real, bundle.eval_seg, bundle.roi_map)
        gen_vecs.append([rep_gen.normalized_pct[r] for r in ROI_ORDER])
        real_vecs.append([rep_real.normalized_pct[r] for r in ROI_ORDER])
        gen_labels = segment_labels(bundle.eval_seg, gen)
        real_labels = segment_labels(bundle.eval_seg, real)
        dice = {t: hard_dice(gen_labels, real_labels, k) for t, k in _DICE_TISSUES.items()}
        results.append(
            PairEvalResult(
                subject_id=pair.subject_id,
                mse=mse(gen, real),
                psnr=psnr(gen, real),
                volume_mae_pp=volume_mae(rep_gen, rep_real),
                dice=dice,
            )
        )
    mean_mae = {
        r: float(np.mean([p.volume_mae_pp[r] for p in results])) for r in results[0].volume_mae_pp
    }
    mean_dice = {t: float(np.mean([p.dice[t] for p in results])) for t in _DICE_TISSUES}
    finite_psnr = [p.psnr for p in results if math.isfinite(p.psnr)]
    return SplitEvalReport(
        per_pair=results,
        mean_mse=float(np.mean([p.mse for p in results])),
        mean_psnr=float(np.mean(finite_psnr)) if finite_psnr else float("inf"),
        wasabi=wasabi_lite(np.asarray(gen_vecs), np.asarray(real_vecs)) if len(pairs) >= 2 else float("nan"),
        mean_volume_mae_pp=mean_mae,
        mean_dice=mean_dice,
    )


def sensitivity_percent(mse_full: float, mse_removed: float) -> float:
    """Relative MSE change caused by removing a covariate, in percent."""
    if mse_full == 0.0:
        raise NumericalError("degenerate denominator: MSE with full covariates is 0")
    return 100.0 * (mse_removed - mse_full) / mse_full


@dataclass(frozen=True)
class SensitivityResult:
    variable: str
    mean: float
    sd: float
    per_subject: np.ndarray


def sensitivity_analysis(
    bundle: ModelBundle,
    pairs: Sequence[ScanPair],
    variable: str,
    seed: int = 0,
    full_mses: np.ndarray | None = None,
) -> SensitivityResult:
    """Percentage change in MSE when one covariate is nulled.

    Per subject: generate with full covariates and with ``variable``
    replaced by its null (dataset median for ages, zero for categoricals),
    using the same generation seed, then report
    (MSE_removed - MSE_full) / MSE_full * 100 across subjects.
    """
    if variable not in SENSITIVITY_VARIABLES:
        raise ConfigError(f"unknown sensitivity variable {variable!r}")
    senses = []
    for i, pair in enumerate(pairs):
        vec = encode_covariates(pair.covariates, bundle.enc_cfg)
        if full_mses is None:
            gen_full = bundle.generate(pair.baseline, pair.covariates, seed + i)
            m_full = mse(gen_full, pair.followup)
        else:
            m_full = float(full_mses[i])
        vec_null = null_covariate(vec, variable, bundle.enc_cfg)
        gen_null = bundle.generate(pair.baseline, pair.covariates, seed + i, cov_vector=vec_null)
        senses.append(sensitivity_percent(m_full, mse(gen_null, pair.followup)))
    arr = np.asarray(senses, dtype=np.float64)
    return SensitivityResult(
        variable=variable,
        mean=float(arr.mean()),
        sd=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        per_subject=arr,
    )


def sensitivity_study(
    bundle: ModelBundle,
    pairs: Sequence[ScanPair],
    variables: Sequence[str] = SENSITIVITY_VARIABLES,
    seed: int = 0,
) -> dict[str, SensitivityResult]:
    """Run the covariate-removal analysis for several variables.

    The full-covariate generations are shared across variables, with seeds
    fixed per subject, exactly as the protocol requires.
    """
    full = []
    for i, pair in enumerate(pairs):
        gen_full = bundle.generate(pair.baseline, pair.covariates, seed + i)
        full.append(mse(gen_full, pair.followup))
    full_arr = np.asarray(full)
    return {
        v: sensitivity_analysis(bundle, pairs, v, seed=seed, full_mses=full_arr) for v in variables
    }


def counterfactual_run(
    bundle: ModelBundle,
    cn_pairs: Sequence[ScanPair],
    min_interval_years: float = 7.0,
    seed: int = 0,
) -> tuple[TrajectoryStat, TrajectoryStat]:
    """Natural (CN -> CN) vs counterfactual (CN -> AD) synthesized trajectories.

    Both generations share the baseline scan, actual follow-up age, and
    seed; they differ only in the follow-up diagnosis channel. Relative
    volume changes are measured on evaluation-segmenter volumes normalized
    by head size, then IQR-filtered.
    """
    from .core import Diagnosis

    eligible = [p for p in cn_pairs if p.covariates.interval_years > min_interval_years]
    if not eligible:
        raise ConfigError(f"no pairs with interval above {min_interval_years} years")
    raw_cn: dict[str, list[float]] = {r: [] for r in ROI_ORDER}
    raw_ad: dict[str, list[float]] = {r: [] for r in ROI_ORDER}
    for i, pair in enumerate(eligible):
        base_rep = roi_volumes(pair.baseline, bundle.eval_seg, bundle.roi_map)
        cov_cn = pair.covariates
        cov_ad = Covariates(
            age_baseline=cov_cn.age_baseline,
            age_followup=cov_cn.age_followup,
            sex=cov_cn.sex,
            dx_baseline=cov_cn.dx_baseline,
            dx_followup=Diagnosis.AD,
        )
        for cov, sink in ((cov_cn, raw_cn), (cov_ad, raw_ad)):
            gen = bundle.generate(pair.baseline, cov, seed + i)
            rep = roi_volumes(gen, bundle.eval_seg, bundle.roi_map)
            for roi in ROI_ORDER:
                v0 = base_rep.normalized_pct[roi]
                if v0 <= 0:
                    continue
                sink[roi].append(delta_v_rel(v0, rep.normalized_pct[roi]))
    return (
        TrajectoryStat.from_samples("cn-to-cn", raw_cn),
        TrajectoryStat.from_samples("cn-to-ad", raw_ad),
    )
