import json

import pytest

from brainprog.autoencoder import Stage1Config
from brainprog.config import (
    AblationEntry,
    ExperimentConfig,
    desk_config,
    dump_config,
    from_jsonable,
    load_config,
    to_jsonable,
)
from brainprog.errors import ConfigError
from brainprog.pipeline import apply_stage1_overrides, variant_settings


def test_roundtrip_identity(tmp_path):
    cfg = desk_config(seed=7)
    p = tmp_path / "cfg.json"
    dump_config(cfg, p)
    assert load_config(p) == cfg


def test_unknown_top_level_key_rejected(tmp_path):
    cfg = to_jsonable(desk_config())
    cfg["typo_key"] = 1
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="typo_key"):
        load_config(p)


def test_unknown_nested_key_rejected(tmp_path):
    cfg = to_jsonable(desk_config())
    cfg["stage1"]["weights"]["lambda_bogus"] = 0.5
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="stage1.weights"):
        load_config(p)


def test_schema_version_gate(tmp_path):
    cfg = to_jsonable(desk_config())
    cfg["schema_version"] = 99
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="schema"):
        load_config(p)


def test_invalid_json_rejected(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_atrophy_rates_roundtrip():
    cfg = desk_config()
    data = to_jsonable(cfg.phantom)
    assert data["rates"]["rates"]["ventricles"]["AD"] == 5.0
    back = from_jsonable(type(cfg.phantom), data)
    assert back == cfg.phantom


def test_stage1_overrides_strict():
    base = Stage1Config()
    out = apply_stage1_overrides(base, {"weights": {"beta_kl": 1e-4}, "lr_finetune": 1e-4})
    assert out.weights.beta_kl == 1e-4
    assert out.lr_finetune == 1e-4
    assert out.weights.lambda_fm == base.weights.lambda_fm
    with pytest.raises(ConfigError):
        apply_stage1_overrides(base, {"weights": {"nope": 1}})
    with pytest.raises(ConfigError):
        apply_stage1_overrides(base, {"lr_bogus": 1})


def test_variant_settings():
    cfg = desk_config()
    assert variant_settings("base", cfg.stage1, cfg.stage2) == (0.0, 0.0)
    lam, gam = variant_settings("ae-seg", cfg.stage1, cfg.stage2)
    assert lam == cfg.stage1.weights.lambda_seg and gam == 0.0
    lam, gam = variant_settings("full", cfg.stage1, cfg.stage2)
    assert lam == cfg.stage1.weights.lambda_seg and gam == cfg.stage2.guidance.gamma
    with pytest.raises(ConfigError):
        variant_settings("mystery", cfg.stage1, cfg.stage2)


def test_desk_profile_keeps_published_constants():
    cfg = desk_config()
    # the values that are budget-neutral keep their published settings
    assert cfg.stage2.T == 1000
    assert cfg.stage2.beta_1 == 0.0015
    assert cfg.stage2.beta_T == 0.0205
    assert cfg.stage2.guidance.f_seg == 100
    assert cfg.stage2.guidance.gamma == 1e-5
    assert cfg.stage2.guidance.fast_steps == 10
    assert cfg.stage1.weights.beta_kl == 1e-6
    assert cfg.stage1.weights.lambda_perc == 0.08
    assert cfg.stage1.weights.lambda_adv == 0.1
    assert cfg.stage1.weights.lambda_fm == 10.0
    assert cfg.stage1.weights.lambda_seg == 1.0
    assert cfg.stage1.effective_batch == 16
    assert cfg.stage1.micro_batch == 2
    assert cfg.protocol.inference_steps == 50
    assert len(cfg.ablation) >= 2


def test_published_defaults_on_dataclasses():
    # dataclass defaults document the published training configuration
    from brainprog.diffusion import Stage2Config

    s1, s2 = Stage1Config(), Stage2Config()
    assert s1.lr_finetune == 5e-6
    assert s2.lr == 2.5e-5
    assert s2.batch_size == 8
    assert s2.epochs == 20
