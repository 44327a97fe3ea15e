"""Procedural longitudinal brain phantoms with analytically known volumes.

A subject is a nested set of ellipsoids (CSF shell, GM shell, WM interior,
paired ventricles and deep-gray blobs) whose semi-axes evolve with age and
diagnosis under per-structure annual volume-change rates. Everything is a
pure function of (seed, arguments), so renders are bit-reproducible and the
label map doubles as a volume oracle for the evaluation battery.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Covariates, Diagnosis, LabelMap, ScanPair, Volume
from .errors import ConfigError

# Tissue class ids in label maps.
BG, WM, GM, VENT, CSF, DEEP = 0, 1, 2, 3, 4, 5

#: Structures that receive an atrophy rate. "gm" and "wm" refer to the
#: generating ellipsoid boundaries (outer cortical surface and WM surface);
#: the rest are solid structures.
STRUCTURES = ("ventricles", "gm", "wm", "deep_gm", "hippocampus", "amygdala")

#: Solid structures whose label-map voxel count follows the volume law directly.
SOLID_STRUCTURES = ("ventricles", "deep_gm", "hippocampus", "amygdala")

_LIMBIC = ("hippocampus", "amygdala")

# Canonical geometry as fractions of the half-grid, before per-subject
# jitter and head scaling. Centers are mirrored in x for paired structures.
# The ventricles sit in the z ~ 0 band while the deep-gray blob families
# live at |z| well away from it, so ventricular growth up to the atrophy
# horizon cannot collide with them under worst-case jitter.
_SHELL_FRACTIONS = {
    "head": (0.80, 0.82, 0.80),
    "gm": (0.72, 0.74, 0.72),
    "wm": (0.63, 0.65, 0.63),
}
_PAIR_GEOMETRY = {
    # name: (center fractions, radius fractions)
    "ventricles": ((0.16, 0.03, 0.0), (0.085, 0.20, 0.075)),
    "deep_gm": ((0.40, -0.07, 0.28), (0.085, 0.095, 0.085)),
    "hippocampus": ((0.26, 0.26, -0.28), (0.10, 0.11, 0.095)),
    "amygdala": ((0.28, -0.30, -0.28), (0.085, 0.085, 0.0825)),
}

_DX_INDEX = {Diagnosis.CN: 0, Diagnosis.MCI: 1, Diagnosis.AD: 2}


@dataclass(frozen=True)
class AtrophyParams:
    """Per-diagnosis annual volume-change rates, percent per year.

    Positive rates expand, negative rates shrink. MCI defaults to the CN/AD
    midpoint. Magnitudes are configurable desk-scale choices, not claims.
    """

    rates: Mapping[str, Mapping[Diagnosis, float]] = field(
        default_factory=lambda: {
            "ventricles": {Diagnosis.CN: 1.5, Diagnosis.MCI: 3.25, Diagnosis.AD: 5.0},
            "gm": {Diagnosis.CN: -0.3, Diagnosis.MCI: -0.6, Diagnosis.AD: -0.9},
            "wm": {Diagnosis.CN: -0.1, Diagnosis.MCI: -0.2, Diagnosis.AD: -0.3},
            "deep_gm": {Diagnosis.CN: -0.2, Diagnosis.MCI: -0.4, Diagnosis.AD: -0.6},
            "hippocampus": {Diagnosis.CN: -0.5, Diagnosis.MCI: -1.0, Diagnosis.AD: -1.5},
            "amygdala": {Diagnosis.CN: -0.4, Diagnosis.MCI: -0.8, Diagnosis.AD: -1.2},
        }
    )

    def __post_init__(self):
        for s in STRUCTURES:
            if s not in self.rates:
                raise ConfigError(f"missing atrophy rate for structure {s!r}")
            cn, ad = self.rates[s][Diagnosis.CN], self.rates[s][Diagnosis.AD]
            if abs(ad) < abs(cn):
                raise ConfigError(f"AD rate magnitude below CN for {s!r}")
        if self.rates["ventricles"][Diagnosis.CN] <= 0:
            raise ConfigError("ventricle rates must be positive (expansion)")
        for s in _LIMBIC:
            if self.rates[s][Diagnosis.CN] >= 0:
                raise ConfigError(f"{s} rates must be negative (shrinkage)")

    def volume_factor(self, structure: str, dx: Diagnosis, dt_years: float, mult: float = 1.0) -> float:
        """Cumulative volume scale (1 + rate)^dt for dt years under dx."""
        rate = self.rates[structure][dx] / 100.0 * mult
        return float((1.0 + rate) ** dt_years)


@dataclass(frozen=True)
class PhantomConfig:
    """Grid, intensity, and population parameters of the generator."""

    dims: tuple[int, int, int] = (32, 40, 32)
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    rates: AtrophyParams = field(default_factory=AtrophyParams)
    # population variation
    radius_jitter: float = 0.08
    head_scale_sigma: float = 0.03
    head_scale_limit: float = 0.05
    sex_head_scale: float = 0.03
    sex_rate_factor: float = 0.15  # sex=1 progresses faster, sex=0 slower
    intensity_jitter: float = 0.03
    # rendering
    tissue_means: tuple[float, ...] = (0.0, 0.80, 0.55, 0.12, 0.30, 0.65)
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.04
    # cohort dynamics
    age0_range: tuple[float, float] = (55.0, 82.0)
    visit_interval_range: tuple[float, float] = (3.0, 7.0)
    max_pair_interval: float = 14.0
    dx_start_probs: tuple[float, float, float] = (0.45, 0.35, 0.20)
    dx_promote_prob: float = 0.30

    def __post_init__(self):
        if len(self.tissue_means) != 6:
            raise ConfigError("tissue_means must have 6 entries")
        if min(self.dims) < 4:
            raise ConfigError(f"grid dims {self.dims} too small")

    @property
    def half_dims(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) / 2.0

    @property
    def grid_center(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class SubjectSpec:
    """All per-subject randomness, fixed at generation time.

    Radii are in voxels. Paired structures store two mirrored centers; the
    bias field is subject-level so both visits share it.
    """

    seed: int
    sex: int
    age0: float
    head_scale: float
    base_radii: dict[str, np.ndarray]
    centers: dict[str, list[np.ndarray]]
    tissue_intensities: np.ndarray
    noise_sigma: float
    bias_field_coeffs: np.ndarray
    rate_multiplier: float


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    f = (
        ((x - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((z - center[2]) / radii[2]) ** 2
    )
    return f <= 1.0


def generate_subject(seed: int, cfg: PhantomConfig) -> SubjectSpec:
    """Draw a subject deterministically and validate its geometry.

    Raises ConfigError if the grid cannot nest all structures with the
    configured jitter and atrophy horizon.
    """
    rng = np.random.default_rng(seed)
    sex = int(rng.integers(0, 2))
    age0 = float(rng.uniform(*cfg.age0_range))
    hs = float(np.clip(rng.normal(0.0, cfg.head_scale_sigma), -cfg.head_scale_limit, cfg.head_scale_limit))
    head_scale = (1.0 + hs) * (1.0 + cfg.sex_head_scale * (1 if sex == 1 else -1))

    half = cfg.half_dims
    c0 = cfg.grid_center
    # One jitter vector is shared by the three nested shells so their
    # ordering can never invert; blobs jitter independently. Blob centers
    # scale with the same shell factor, keeping relative positions stable.
    shell_jit = 1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, size=3)
    base_radii: dict[str, np.ndarray] = {}
    centers: dict[str, list[np.ndarray]] = {}
    for name, frac in _SHELL_FRACTIONS.items():
        base_radii[name] = np.asarray(frac) * half * head_scale * shell_jit
        centers[name] = [c0.copy()]
    for name, (cfrac, rfrac) in _PAIR_GEOMETRY.items():
        jit = 1.0 + rng.uniform(-cfg.radius_jitter, cfg.radius_jitter, size=3)
        base_radii[name] = np.asarray(rfrac) * half * head_scale * jit
        offs = np.asarray(cfrac) * half * head_scale * shell_jit
        left = c0 + offs * np.array([-1.0, 1.0, 1.0])
        right = c0 + offs
        centers[name] = [left, right]

    means = np.asarray(cfg.tissue_means, dtype=np.float64).copy()
    means[1:] += rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter, size=5)
    means = np.clip(means, 0.0, 0.97)

    coeffs = rng.uniform(-cfg.bias_amplitude, cfg.bias_amplitude, size=9)
    rate_mult = 1.0 + cfg.sex_rate_factor * (1 if sex == 1 else -1)

    spec = SubjectSpec(
        seed=seed,
        sex=sex,
        age0=age0,
        head_scale=head_scale,
        base_radii=base_radii,
        centers=centers,
        tissue_intensities=means,
        noise_sigma=cfg.noise_sigma,
        bias_field_coeffs=coeffs,
        rate_multiplier=rate_mult,
    )
    _validate_geometry(spec, cfg)
    return spec


def _radii_at(spec: SubjectSpec, cfg: PhantomConfig, name: str, age: float, dx: Diagnosis) -> np.ndarray:
    base = spec.base_radii[name]
    if name == "head":
        return base
    vf = cfg.rates.volume_factor(name, dx, age - spec.age0, spec.rate_multiplier)
    return base * vf ** (1.0 / 3.0)


def structure_masks(spec: SubjectSpec, cfg: PhantomConfig, age: float, dx: Diagnosis) -> dict[str, np.ndarray]:
    """Boolean occupancy per generating structure (shells as full ellipsoids)."""
    if age < spec.age0 - 1e-9:
        raise ConfigError(f"age {age} precedes subject baseline {spec.age0}")
    if age > spec.age0 + cfg.max_pair_interval + 1e-9:
        raise ConfigError(f"age {age} beyond validated horizon {spec.age0 + cfg.max_pair_interval}")
    masks = {}
    for name in ("head", "gm", "wm", *list(_PAIR_GEOMETRY)):
        radii = _radii_at(spec, cfg, name, age, dx)
        m = np.zeros(cfg.dims, dtype=bool)
        for center in spec.centers[name]:
            m |= _ellipsoid_mask(cfg.dims, center, radii)
        masks[name] = m
    return masks


def _paint_labels(masks: dict[str, np.ndarray]) -> np.ndarray:
    labels = np.zeros(masks["head"].shape, dtype=np.int16)
    labels[masks["head"]] = CSF
    labels[masks["gm"]] = GM
    labels[masks["wm"]] = WM
    labels[masks["ventricles"]] = VENT
    labels[masks["deep_gm"] | masks["hippocampus"] | masks["amygdala"]] = DEEP
    return labels


def _validate_geometry(spec: SubjectSpec, cfg: PhantomConfig) -> None:
    """Reject configurations whose structures collide or fall below voxel scale.

    Checks the two extreme states: baseline (inner solids largest except
    ventricles) and the atrophy horizon under AD (ventricles largest).
    """
    for name in _PAIR_GEOMETRY:
        if spec.base_radii[name].min() < 0.8:
            raise ConfigError(
                f"structure {name!r} semi-axis {spec.base_radii[name].min():.2f} vox "
                f"below renderable scale; grid {cfg.dims} too small"
            )
    inner = list(_PAIR_GEOMETRY)
    for age, dx in ((spec.age0, Diagnosis.CN), (spec.age0 + cfg.max_pair_interval, Diagnosis.AD)):
        masks = _apply_horizon_override(spec, cfg, age, dx)
        for a, b in itertools.combinations(inner, 2):
            if (masks[a] & masks[b]).any():
                raise ConfigError(f"structures {a!r} and {b!r} overlap; adjust geometry or rates")
        for child, parent in [("wm", "gm"), ("gm", "head")] + [(s, "wm") for s in inner]:
            if (masks[child] & ~masks[parent]).any():
                raise ConfigError(f"structure {child!r} escapes {parent!r}; adjust geometry")


def _apply_horizon_override(spec, cfg, age, dx):
    # structure_masks rejects ages past the horizon; the validator probes
    # exactly the horizon so reuse it directly.
    return structure_masks(spec, cfg, age, dx)


def render_labels(spec: SubjectSpec, cfg: PhantomConfig, age: float, dx: Diagnosis) -> LabelMap:
    """Analytic 6-class label map at the given age and diagnosis."""
    return LabelMap(data=_paint_labels(structure_masks(spec, cfg, age, dx)), spacing=cfg.spacing)


def _bias_field(spec: SubjectSpec, cfg: PhantomConfig) -> np.ndarray:
    half = cfg.half_dims
    c0 = cfg.grid_center
    u = [
        (np.arange(cfg.dims[i], dtype=np.float64) - c0[i]) / half[i]
        for i in range(3)
    ]
    ux = u[0][:, None, None]
    uy = u[1][None, :, None]
    uz = u[2][None, None, :]
    t = spec.bias_field_coeffs
    return (
        t[0] * ux + t[1] * uy + t[2] * uz
        + t[3] * ux**2 + t[4] * uy**2 + t[5] * uz**2
        + t[6] * ux * uy + t[7] * ux * uz + t[8] * uy * uz
    )


def render_scan(spec: SubjectSpec, cfg: PhantomConfig, age: float, dx: Diagnosis) -> tuple[Volume, LabelMap]:
    """Render the intensity volume and its label map.

    Intensity = per-tissue mean + subject bias field + scan noise, clipped
    to [0, 1]. The noise stream is keyed by (subject, age, dx) so repeated
    calls are bit-identical.
    """
    labels = render_labels(spec, cfg, age, dx)
    intensity = spec.tissue_intensities[labels.data]
    intensity = intensity + _bias_field(spec, cfg)
    noise_rng = np.random.default_rng([spec.seed & 0x7FFFFFFF, int(round(age * 12)), _DX_INDEX[dx], 97])
    intensity = intensity + noise_rng.normal(0.0, spec.noise_sigma, size=cfg.dims)
    vol = Volume(
        data=np.clip(intensity, 0.0, 1.0).astype(np.float32),
        spacing=cfg.spacing,
    ).assert_normalized()
    return vol, labels


def true_roi_volumes(
    spec: SubjectSpec, cfg: PhantomConfig, age: float, dx: Diagnosis, normalized: bool = False
) -> dict[str, float]:
    """Oracle ROI volumes from the analytic label map, in mm^3.

    ``normalized=True`` returns percentages of total head (non-background)
    volume instead.
    """
    masks = structure_masks(spec, cfg, age, dx)
    inner = masks["ventricles"] | masks["deep_gm"] | masks["hippocampus"] | masks["amygdala"]
    vox = float(np.prod(cfg.spacing))
    counts = {
        "ventricles": int(masks["ventricles"].sum()),
        "gm": int((masks["gm"] & ~masks["wm"]).sum()),
        "wm": int((masks["wm"] & ~inner).sum()),
        "deep_gm": int(masks["deep_gm"].sum()),
        "hippocampus": int(masks["hippocampus"].sum()),
        "amygdala": int(masks["amygdala"].sum()),
    }
    if normalized:
        head = float(masks["head"].sum())
        return {k: 100.0 * v / head for k, v in counts.items()}
    return {k: v * vox for k, v in counts.items()}


def solid_structure_voxels(spec: SubjectSpec, cfg: PhantomConfig, age: float, dx: Diagnosis) -> dict[str, int]:
    """Voxel counts of the solid structures; used by volume-law tests."""
    masks = structure_masks(spec, cfg, age, dx)
    return {s: int(masks[s].sum()) for s in SOLID_STRUCTURES}


# ---------------------------------------------------------------------------
# ROI map for the evaluation segmenter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ROISpec:
    """A named ROI: a label class, optionally restricted to an axis-aligned box."""

    class_id: int
    box: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] | None = None

    def mask(self, labels: np.ndarray) -> np.ndarray:
        m = labels == self.class_id
        if self.box is not None:
            for axis, (lo, hi) in enumerate(self.box):
                idx = np.arange(labels.shape[axis])
                keep = (idx >= lo) & (idx <= hi)
                sl = [None, None, None]
                sl[axis] = slice(None)
                m = m & keep[tuple(sl)]
        return m


def default_roi_map(cfg: PhantomConfig) -> dict[str, ROISpec]:
    """ROIs for phantom evaluation.

    The three deep-gray blob families share label class 5; they are told
    apart by axis-aligned boxes derived from worst-case structure extents
    (jitter, head scale, atrophy horizon), which are mutually separated
    along at least one axis by construction.
    """
    half = cfg.half_dims
    c0 = cfg.grid_center
    hs_max = (1.0 + cfg.head_scale_limit) * (1.0 + cfg.sex_head_scale)
    hs_min = (1.0 - cfg.head_scale_limit) * (1.0 - cfg.sex_head_scale)
    # Centers scale with head_scale * shell jitter, radii with
    # head_scale * blob jitter; blobs only shrink with age.
    s_max = hs_max * (1.0 + cfg.radius_jitter)
    s_min = hs_min * (1.0 - cfg.radius_jitter)

    def blob_box(name: str) -> tuple:
        cfrac, rfrac = _PAIR_GEOMETRY[name]
        out = []
        for i in range(3):
            ext = rfrac[i] * half[i] * s_max
            cc = cfrac[i] * half[i]
            if i == 0:
                out.append((c0[0] - (abs(cc) * s_max + ext), c0[0] + abs(cc) * s_max + ext))
            else:
                lo_c = min(cc * s_min, cc * s_max)
                hi_c = max(cc * s_min, cc * s_max)
                out.append((c0[i] + lo_c - ext, c0[i] + hi_c + ext))
        return tuple(out)

    return {
        "ventricles": ROISpec(VENT),
        "gm": ROISpec(GM),
        "wm": ROISpec(WM),
        "deep_gm": ROISpec(DEEP, blob_box("deep_gm")),
        "hippocampus": ROISpec(DEEP, blob_box("hippocampus")),
        "amygdala": ROISpec(DEEP, blob_box("amygdala")),
    }


# ---------------------------------------------------------------------------
# Cohorts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Visit:
    age: float
    dx: Diagnosis


@dataclass(frozen=True, eq=False)
class Cohort:
    """Subject specs, visit schedules, and exhaustively paired scans by split."""

    config: PhantomConfig
    subjects: dict[str, SubjectSpec]
    visits: dict[str, list[Visit]]
    splits: dict[str, list[str]]  # split -> subject ids
    pairs: dict[str, list[ScanPair]]  # split -> scan pairs
    scans: dict[tuple[str, int], tuple[Volume, LabelMap]]

    def split_volumes(self, split: str) -> list[tuple[Volume, LabelMap]]:
        """Unique per-visit scans for the subjects of one split."""
        out = []
        for sid in self.splits[split]:
            for vi in range(len(self.visits[sid])):
                out.append(self.scans[(sid, vi)])
        return out

    @property
    def n_pairs(self) -> int:
        return sum(len(v) for v in self.pairs.values())


def _subject_seed(cohort_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([cohort_seed, index]).generate_state(1)[0])


def _draw_visits(rng: np.random.Generator, spec: SubjectSpec, cfg: PhantomConfig, n_visits: int) -> list[Visit]:
    lo, hi = cfg.visit_interval_range
    steps = rng.uniform(lo, hi, size=n_visits - 1)
    total = float(steps.sum())
    span = cfg.max_pair_interval
    if total > span:
        # compress proportionally so the full visit history stays inside the
        # validated atrophy horizon
        steps *= 0.999 * span / total
    ages = [spec.age0]
    for step in steps:
        ages.append(ages[-1] + float(step))
    dx_i = int(rng.choice(3, p=cfg.dx_start_probs))
    dxs = [dx_i]
    for _ in range(n_visits - 1):
        if dx_i < 2 and rng.random() < cfg.dx_promote_prob:
            dx_i += 1
        dxs.append(dx_i)
    order = [Diagnosis.CN, Diagnosis.MCI, Diagnosis.AD]
    return [Visit(age=a, dx=order[d]) for a, d in zip(ages, dxs)]


def build_cohort(
    n_subjects: int,
    visits_per_subject: int,
    cfg: PhantomConfig,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> Cohort:
    """Generate subjects, render every visit once, and emit all ordered pairs.

    v visits yield v(v-1)/2 pairs per subject. Subjects are split
    train/val/test by the given fractions; no subject crosses splits.
    """
    if visits_per_subject < 2:
        raise ConfigError("need at least 2 visits per subject to form pairs")
    subjects: dict[str, SubjectSpec] = {}
    visits: dict[str, list[Visit]] = {}
    scans: dict[tuple[str, int], tuple[Volume, LabelMap]] = {}
    sids = []
    for i in range(n_subjects):
        sid = f"sub-{i:04d}"
        spec = generate_subject(_subject_seed(seed, i), cfg)
        rng = np.random.default_rng([seed, i, 11])
        vs = _draw_visits(rng, spec, cfg, visits_per_subject)
        subjects[sid] = spec
        visits[sid] = vs
        for vi, v in enumerate(vs):
            scans[(sid, vi)] = render_scan(spec, cfg, v.age, v.dx)
        sids.append(sid)

    shuffle_rng = np.random.default_rng([seed, 7])
    order = list(shuffle_rng.permutation(len(sids)))
    n_val = max(1, round(split_fractions[1] * n_subjects))
    n_test = max(1, round(split_fractions[2] * n_subjects))
    test_ids = [sids[j] for j in order[:n_test]]
    val_ids = [sids[j] for j in order[n_test : n_test + n_val]]
    train_ids = [sids[j] for j in order[n_test + n_val :]]
    splits = {"train": train_ids, "val": val_ids, "test": test_ids}

    pairs: dict[str, list[ScanPair]] = {}
    for split, ids in splits.items():
        rows = []
        for sid in ids:
            spec = subjects[sid]
            vs = visits[sid]
            for i, j in itertools.combinations(range(len(vs)), 2):
                cov = Covariates(
                    age_baseline=vs[i].age,
                    age_followup=vs[j].age,
                    sex=spec.sex,
                    dx_baseline=vs[i].dx,
                    dx_followup=vs[j].dx,
                )
                rows.append(
                    ScanPair(
                        subject_id=sid,
                        baseline=scans[(sid, i)][0],
                        followup=scans[(sid, j)][0],
                        baseline_labels=scans[(sid, i)][1],
                        followup_labels=scans[(sid, j)][1],
                        covariates=cov,
                    )
                )
        pairs[split] = rows
    return Cohort(config=cfg, subjects=subjects, visits=visits, splits=splits, pairs=pairs, scans=scans)


def build_eval_pairs(
    n_subjects: int,
    cfg: PhantomConfig,
    seed: int,
    dx_baseline: Diagnosis = Diagnosis.CN,
    dx_followup: Diagnosis = Diagnosis.CN,
    interval_range: tuple[float, float] = (8.0, 13.5),
    seed_offset: int = 1_000_000,
) -> list[tuple[ScanPair, SubjectSpec]]:
    """Fresh two-visit subjects for protocol studies (held out by construction).

    Follow-up scans are rendered under ``dx_followup``, so the pair's real
    trajectory matches the requested diagnosis path.
    """
    out = []
    for i in range(n_subjects):
        spec = generate_subject(_subject_seed(seed, seed_offset + i), cfg)
        rng = np.random.default_rng([seed, seed_offset + i, 13])
        lo, hi = interval_range
        dt = float(rng.uniform(lo, min(hi, cfg.max_pair_interval)))
        base = render_scan(spec, cfg, spec.age0, dx_baseline)
        follow = render_scan(spec, cfg, spec.age0 + dt, dx_followup)
        cov = Covariates(
            age_baseline=spec.age0,
            age_followup=spec.age0 + dt,
            sex=spec.sex,
            dx_baseline=dx_baseline,
            dx_followup=dx_followup,
        )
        out.append(
            (
                ScanPair(
                    subject_id=f"eval-{i:04d}",
                    baseline=base[0],
                    followup=follow[0],
                    baseline_labels=base[1],
                    followup_labels=follow[1],
                    covariates=cov,
                ),
                spec,
            )
        )
    return out
