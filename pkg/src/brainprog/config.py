"""Experiment configuration: one serializable object drives every stage.

Configs round-trip through JSON with a schema version; unknown keys are
hard errors so that drift between a config file and the code is loud.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_origin, get_type_hints

from .autoencoder import Stage1Config, Stage1Weights
from .core import Diagnosis, EncodingConfig
from .diffusion import GuidanceConfig, Stage2Config
from .errors import ConfigError
from .phantom import AtrophyParams, PhantomConfig
from .segteacher import SegTrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 84
    visits_per_subject: int = 3
    ae_volume_cap: int = 0  # 0 = use every training volume


@dataclass(frozen=True)
class ProtocolConfig:
    """Evaluation-protocol sizes and thresholds."""

    inference_steps: int = 50
    eval_pairs_cap: int = 0  # 0 = whole split
    sensitivity_subjects: int = 24
    sensitivity_interval: tuple[float, float] = (4.0, 13.5)
    counterfactual_subjects: int = 50
    counterfactual_interval: tuple[float, float] = (8.0, 13.5)
    counterfactual_min_interval: float = 7.0


@dataclass(frozen=True)
class AblationEntry:
    """One named hyperparameter configuration for the ablation grid."""

    name: str
    stage1: dict = field(default_factory=dict)  # partial Stage1Config overrides


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    teacher: SegTrainConfig = field(default_factory=SegTrainConfig)
    eval_segmenter: SegTrainConfig = field(default_factory=SegTrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    ablation: tuple[AblationEntry, ...] = ()

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"config schema v{self.schema_version} unsupported (expected v{SCHEMA_VERSION})"
            )


# ---------------------------------------------------------------------------
# Strict (de)serialization
# ---------------------------------------------------------------------------

def to_jsonable(obj: Any) -> Any:
    """Recursively convert dataclasses/tuples/enums to JSON-ready values."""
    if isinstance(obj, AtrophyParams):
        return {"rates": {s: {dx.value: float(r) for dx, r in m.items()} for s, m in obj.rates.items()}}
    if is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, Diagnosis):
        return obj.value
    return obj


def from_jsonable(cls: type, data: Any, path: str = "") -> Any:
    """Rebuild a dataclass from JSON data, rejecting unknown keys."""
    if cls is AtrophyParams:
        extra = set(data) - {"rates"}
        if extra:
            raise ConfigError(f"unknown config keys at {path or '<root>'}: {sorted(extra)}")
        rates = {
            s: {Diagnosis(dx): float(r) for dx, r in m.items()} for s, m in data["rates"].items()
        }
        return AtrophyParams(rates=rates)
    if not is_dataclass(cls):
        raise ConfigError(f"cannot deserialize into {cls!r} at {path or '<root>'}")
    if not isinstance(data, dict):
        raise ConfigError(f"expected object at {path or '<root>'}, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = hints[name]
        sub_path = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(ftype, value, sub_path)
    return cls(**kwargs)


def _coerce(ftype: Any, value: Any, path: str) -> Any:
    origin = get_origin(ftype)
    if is_dataclass(ftype):
        return from_jsonable(ftype, value, path)
    if origin is tuple:
        args = getattr(ftype, "__args__", ())
        if args and args[-1] is Ellipsis:
            inner = args[0]
            return tuple(_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
        return tuple(
            _coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value))
        ) if args else tuple(value)
    if origin in (list,):
        return [v for v in value]
    if origin is dict or ftype is dict:
        return dict(value)
    return value


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_jsonable(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_jsonable(ExperimentConfig, data)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """The calibrated desk-scale profile used by the acceptance suite.

    Published training settings (Stage-1 lr 5e-6 over 10 epochs, Stage-2 lr
    2.5e-5 over 20 epochs) assume pretrained initializations and GPU-scale
    data; the desk profile trains everything from scratch on a single CPU,
    so optimizer settings and epoch counts are retuned while loss weights,
    the noise schedule, and the guidance cadence keep their published
    values.
    """
    return ExperimentConfig(
        seed=seed,
        cohort=CohortConfig(n_subjects=84, visits_per_subject=3, ae_volume_cap=204),
        teacher=SegTrainConfig(epochs=4, lr=2e-3, batch_size=4),
        eval_segmenter=SegTrainConfig(epochs=5, lr=3e-3, batch_size=4),
        stage1=Stage1Config(
            pretrain_epochs=8,
            finetune_epochs=8,
            lr_pretrain=1e-3,
            lr_finetune=3e-4,
            lr_disc=2e-4,
            effective_batch=16,
            micro_batch=2,
            weights=Stage1Weights(),
        ),
        stage2=Stage2Config(
            T=1000,
            beta_1=0.0015,
            beta_T=0.0205,
            lr=2e-4,
            weight_decay=0.01,
            batch_size=8,
            epochs=60,
            guidance=GuidanceConfig(f_seg=100, gamma=1e-5, fast_steps=10),
        ),
        protocol=ProtocolConfig(),
        ablation=(
            AblationEntry(name="cfg-a", stage1={}),
            AblationEntry(
                name="cfg-b",
                stage1={"weights": {"beta_kl": 1e-4, "lambda_perc": 0.02}, "lr_finetune": 1e-4},
            ),
        ),
    )
