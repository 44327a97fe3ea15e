import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainprog.core import (
    COVARIATE_NAMES,
    Covariates,
    Diagnosis,
    EncodingConfig,
    LabelMap,
    LatentGrid,
    NoiseSchedule,
    Volume,
    broadcast_covariates,
    encode_covariates,
    null_covariate,
    validate_prob_map,
)
from brainprog.errors import ConfigError, ShapeError


CFG = EncodingConfig(age_min=40.0, age_max=100.0, median_age_baseline=70.0, median_age_followup=78.0)


def test_encode_age_lower_bound_is_zero():
    cov = Covariates(40.0, 50.0, 0, Diagnosis.CN, Diagnosis.CN)
    vec = encode_covariates(cov, CFG)
    assert vec[0] == 0.0


def test_encode_dx_ordinal_map():
    cov = Covariates(50.0, 60.0, 0, Diagnosis.CN, Diagnosis.AD)
    vec = encode_covariates(cov, CFG)
    assert vec[3] == pytest.approx(1.0 / 3.0)
    assert vec[4] == 1.0


def test_encode_full_example():
    # ages 70/80 on [40, 100] scale to 0.5 and 2/3; CN -> 1/3, AD -> 1
    cov = Covariates(70.0, 80.0, 1, Diagnosis.CN, Diagnosis.AD)
    vec = encode_covariates(cov, CFG)
    np.testing.assert_allclose(vec, [0.5, 2.0 / 3.0, 1.0, 1.0 / 3.0, 1.0])


def test_encode_rejects_out_of_range_age():
    cov = Covariates(30.0, 50.0, 0, Diagnosis.CN, Diagnosis.CN)
    with pytest.raises(ConfigError):
        encode_covariates(cov, CFG)


def test_covariates_reject_non_increasing_age():
    with pytest.raises(ConfigError):
        Covariates(70.0, 70.0, 0, Diagnosis.CN, Diagnosis.CN)
    with pytest.raises(ConfigError):
        Covariates(70.0, 65.0, 0, Diagnosis.CN, Diagnosis.CN)


@pytest.mark.parametrize("variable", COVARIATE_NAMES)
def test_null_replacement_idempotent(variable):
    cov = Covariates(63.0, 71.5, 1, Diagnosis.MCI, Diagnosis.AD)
    vec = encode_covariates(cov, CFG)
    once = null_covariate(vec, variable, CFG)
    twice = null_covariate(once, variable, CFG)
    np.testing.assert_array_equal(once, twice)


def test_null_values():
    cov = Covariates(63.0, 71.5, 1, Diagnosis.MCI, Diagnosis.AD)
    vec = encode_covariates(cov, CFG)
    assert null_covariate(vec, "age_baseline", CFG)[0] == pytest.approx(0.5)  # median 70
    assert null_covariate(vec, "sex", CFG)[2] == 0.0
    nulled = null_covariate(vec, "diagnosis", CFG)
    assert nulled[3] == 0.0 and nulled[4] == 0.0
    # untouched channels stay put
    assert nulled[0] == vec[0] and nulled[1] == vec[1] and nulled[2] == vec[2]


def test_null_unknown_variable():
    vec = np.zeros(5)
    with pytest.raises(ConfigError):
        null_covariate(vec, "shoe_size", CFG)


def test_broadcast_zero_case():
    grid = broadcast_covariates([0, 0, 0, 0, 0], (2, 2, 2))
    assert grid.shape == (5, 2, 2, 2)
    assert (grid == 0).all()


def test_broadcast_constancy_and_zero_variance():
    grid = broadcast_covariates([0.5, 0.1, 1.0, 2.0 / 3.0, 0.25], (3, 4, 5))
    assert (grid[0] == np.float32(0.5)).all()
    for c in range(5):
        # exact constancy: spatial variance is zero
        assert np.ptp(grid[c]) == 0.0
        assert grid[c].astype(np.float64).var() == 0.0


@given(
    vals=st.lists(st.floats(min_value=-5, max_value=5, allow_nan=False), min_size=5, max_size=5),
    dims=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
)
@settings(max_examples=30, deadline=None)
def test_broadcast_property(vals, dims):
    grid = broadcast_covariates(vals, dims)
    assert grid.shape == (5, *dims)
    for c in range(5):
        assert grid[c].min() == grid[c].max()


def test_broadcast_bad_inputs():
    with pytest.raises(ShapeError):
        broadcast_covariates([1, 2, 3], (2, 2, 2))
    with pytest.raises(ConfigError):
        broadcast_covariates([0, 0, 0, 0, 0], (0, 2, 2))


def test_volume_validation():
    with pytest.raises(ShapeError):
        Volume(data=np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        Volume(data=np.full((2, 2, 2), np.nan, dtype=np.float32))
    v = Volume(data=np.full((2, 2, 2), 1.5, dtype=np.float32))
    with pytest.raises(ValueError):
        v.assert_normalized()


def test_labelmap_validation():
    with pytest.raises(ValueError):
        LabelMap(data=np.full((2, 2, 2), 6, dtype=np.int16))
    with pytest.raises(ValueError):
        LabelMap(data=np.zeros((2, 2, 2), dtype=np.float32))


def test_prob_map_validation():
    probs = np.full((6, 2, 2, 2), 1.0 / 6.0)
    validate_prob_map(probs)
    with pytest.raises(ValueError):
        validate_prob_map(probs * 1.2)
    with pytest.raises(ShapeError):
        validate_prob_map(np.zeros((5, 2, 2, 2)))


def test_latent_grid_scale_flags():
    z = LatentGrid(data=torch.ones(3, 2, 2, 2))
    scaled = z.scaled(2.0)
    assert scaled.scale_applied
    with pytest.raises(ConfigError):
        scaled.scaled(2.0)
    back = scaled.unscaled(2.0)
    assert not back.scale_applied
    torch.testing.assert_close(back.data, z.data)
    with pytest.raises(ConfigError):
        z.unscaled(2.0)


def test_noise_schedule_invariants_enforced():
    beta = np.array([0.1, 0.2])
    alpha = 1.0 - beta
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, beta=beta, alpha=alpha, alpha_bar=np.array([0.9, 0.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(T=2, beta=np.array([0.1, 1.5]), alpha=1 - np.array([0.1, 1.5]),
                      alpha_bar=np.cumprod(1 - np.array([0.1, 1.5])))
