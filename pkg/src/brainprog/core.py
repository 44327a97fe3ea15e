"""Domain types shared across the pipeline, plus clinical covariate encoding.

All types here are immutable value objects: construct once, share freely
across workers. Arrays are validated at construction so downstream code can
assume the invariants hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeError


class Diagnosis(str, Enum):
    """Cognitive status categories, ordered by severity."""

    CN = "CN"
    MCI = "MCI"
    AD = "AD"


#: Ordinal encoding of diagnosis. 0 is reserved as the "removed" null value
#: used by the conditioning-sensitivity protocol, so CN maps to 1/3 rather
#: than 0.
DX_CODE = {Diagnosis.CN: 1.0 / 3.0, Diagnosis.MCI: 2.0 / 3.0, Diagnosis.AD: 1.0}

#: Names of the individually removable conditioning variables.
COVARIATE_NAMES = ("age_baseline", "age_followup", "sex", "diagnosis")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar intensity grid with voxel spacing in millimetres."""

    data: np.ndarray  # (H, W, D) float32
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    kind: str = "intensity"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"Volume data must be 3D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("Volume contains non-finite values")
        if self.kind not in ("intensity", "label"):
            raise ConfigError(f"unknown volume kind: {self.kind!r}")

    def assert_normalized(self, tol: float = 1e-6) -> "Volume":
        """Require intensities in [0, 1]; files straight off disk may not be."""
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < -tol or hi > 1.0 + tol:
            raise ValueError(f"intensity volume outside [0, 1]: min={lo}, max={hi}")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def voxel_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def as_tensor(self) -> torch.Tensor:
        """Float32 tensor with a leading channel axis, shape (1, H, W, D)."""
        return torch.from_numpy(np.ascontiguousarray(self.data, dtype=np.float32)).unsqueeze(0)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer tissue-class grid; values in 0..5.

    0=background, 1=WM, 2=GM, 3=ventricles, 4=CSF, 5=deep gray matter.
    """

    data: np.ndarray  # (H, W, D) int
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)

    N_CLASSES = 6

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"LabelMap data must be 3D, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"LabelMap requires an integer dtype, got {self.data.dtype}")
        lo, hi = int(self.data.min()), int(self.data.max())
        if lo < 0 or hi >= self.N_CLASSES:
            raise ValueError(f"label values outside 0..{self.N_CLASSES - 1}: [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def validate_prob_map(probs: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    """Check a (6, H, W, D) per-voxel class probability map.

    Each channel must lie in [0, 1] and channels must sum to 1 per voxel
    within ``tol``. Returns the array unchanged so calls can be inlined.
    """
    if probs.ndim != 4 or probs.shape[0] != LabelMap.N_CLASSES:
        raise ShapeError(f"probability map must be (6, H, W, D), got {probs.shape}")
    if probs.min() < -tol or probs.max() > 1.0 + tol:
        raise ValueError("probabilities outside [0, 1]")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > tol:
        raise ValueError("per-voxel probabilities do not sum to 1")
    return probs


@dataclass(frozen=True, eq=False)
class LatentGrid:
    """3-channel compressed representation produced by the encoder.

    ``scale_applied`` records whether the global latent scale factor has been
    multiplied in; the decoder refuses scaled latents.
    """

    data: torch.Tensor  # (3, H', W', D')
    scale_applied: bool = False

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise ShapeError(f"latent must be (3, H', W', D'), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("latent contains non-finite values")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def scaled(self, s: float) -> "LatentGrid":
        if self.scale_applied:
            raise ConfigError("latent scale factor already applied")
        return LatentGrid(self.data * s, scale_applied=True)

    def unscaled(self, s: float) -> "LatentGrid":
        if not self.scale_applied:
            raise ConfigError("latent scale factor not applied")
        return LatentGrid(self.data / s, scale_applied=False)


@dataclass(frozen=True)
class Covariates:
    """Clinical conditioning variables for one longitudinal scan pair."""

    age_baseline: float
    age_followup: float
    sex: int
    dx_baseline: Diagnosis
    dx_followup: Diagnosis

    def __post_init__(self):
        if self.age_followup <= self.age_baseline:
            raise ConfigError(
                f"follow-up age {self.age_followup} must exceed baseline age {self.age_baseline}"
            )
        if self.sex not in (0, 1):
            raise ConfigError(f"sex must be 0 or 1, got {self.sex}")

    @property
    def interval_years(self) -> float:
        return self.age_followup - self.age_baseline


@dataclass(frozen=True, eq=False)
class ScanPair:
    """One temporally ordered pair of scans from a single subject."""

    subject_id: str
    baseline: Volume
    followup: Volume
    baseline_labels: LabelMap
    followup_labels: LabelMap
    covariates: Covariates

    def __post_init__(self):
        if self.baseline.shape != self.followup.shape:
            raise ShapeError("baseline and follow-up grids differ in shape")
        if self.baseline.spacing != self.followup.spacing:
            raise ValueError("baseline and follow-up spacing differ")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep variance plan of the forward diffusion process.

    Arrays are 1-indexed conceptually: ``beta[0]`` is beta_1. ``alpha_bar``
    is the cumulative product of ``alpha`` and is strictly decreasing.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if not (len(self.beta) == len(self.alpha) == len(self.alpha_bar) == self.T):
            raise ShapeError("schedule arrays must all have length T")
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValueError("beta values must lie in (0, 1)")
        if not np.array_equal(self.alpha, 1.0 - self.beta):
            raise ValueError("alpha must equal 1 - beta exactly")
        if not np.array_equal(self.alpha_bar, np.cumprod(self.alpha)):
            raise ValueError("alpha_bar must be the cumulative product of alpha")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    def abar(self, t: int) -> float:
        """Cumulative signal retention at timestep t, with abar(0) == 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class EncodingConfig:
    """Numeric encoding of covariates for the conditioning channels.

    Ages are min-max scaled to [0, 1]. Null replacement (used by the
    sensitivity protocol) maps continuous variables to the dataset median and
    categorical variables to 0.
    """

    age_min: float = 40.0
    age_max: float = 100.0
    median_age_baseline: float = 70.0
    median_age_followup: float = 78.0

    def __post_init__(self):
        if not self.age_min < self.age_max:
            raise ConfigError("age_min must be below age_max")

    def scale_age(self, age: float) -> float:
        if not self.age_min <= age <= self.age_max:
            raise ConfigError(f"age {age} outside configured range [{self.age_min}, {self.age_max}]")
        return (age - self.age_min) / (self.age_max - self.age_min)


def encode_covariates(cov: Covariates, cfg: EncodingConfig) -> np.ndarray:
    """Encode covariates into the 5-vector feeding the conditioning channels.

    Layout: [age_baseline, age_followup, sex, dx_baseline, dx_followup] with
    ages min-max scaled to [0, 1], sex in {0, 1} and diagnoses mapped
    ordinally CN -> 1/3, MCI -> 2/3, AD -> 1.
    """
    return np.array(
        [
            cfg.scale_age(cov.age_baseline),
            cfg.scale_age(cov.age_followup),
            float(cov.sex),
            DX_CODE[cov.dx_baseline],
            DX_CODE[cov.dx_followup],
        ],
        dtype=np.float64,
    )


def null_covariate(vec: np.ndarray, variable: str, cfg: EncodingConfig) -> np.ndarray:
    """Replace one conditioning variable with its non-informative null value.

    Continuous variables go to the encoded dataset median; categorical
    variables go to 0. ``diagnosis`` nulls both the baseline and follow-up
    diagnosis channels. Idempotent.
    """
    if variable not in COVARIATE_NAMES:
        raise ConfigError(f"unknown covariate {variable!r}; expected one of {COVARIATE_NAMES}")
    out = np.array(vec, dtype=np.float64, copy=True)
    if variable == "age_baseline":
        out[0] = cfg.scale_age(cfg.median_age_baseline)
    elif variable == "age_followup":
        out[1] = cfg.scale_age(cfg.median_age_followup)
    elif variable == "sex":
        out[2] = 0.0
    else:
        out[3] = 0.0
        out[4] = 0.0
    return out


def broadcast_covariates(values: Sequence[float], dims: tuple[int, int, int]) -> np.ndarray:
    """Spatially broadcast a 5-vector to a constant (5, H', W', D') grid."""
    vec = np.asarray(values, dtype=np.float32)
    if vec.shape != (5,):
        raise ShapeError(f"expected 5 covariate values, got shape {vec.shape}")
    h, w, d = dims
    if h <= 0 or w <= 0 or d <= 0:
        raise ConfigError(f"grid dims must be positive, got {dims}")
    return np.ascontiguousarray(np.broadcast_to(vec[:, None, None, None], (5, h, w, d)))
