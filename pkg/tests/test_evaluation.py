import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainprog.core import Volume
from brainprog.errors import ConfigError, ContractError, NumericalError
from brainprog.evaluation import (
    ROIVolumeReport,
    TrajectoryStat,
    delta_v_rel,
    iqr_filter,
    mse,
    psnr,
    roi_volumes,
    sensitivity_percent,
    volume_mae,
    wasabi_lite,
)
from brainprog.phantom import PhantomConfig, ROISpec, default_roi_map
from brainprog.segteacher import EVAL_ARCH, TEACHER_ARCH, SegTrainConfig, build_segmenter


def _vol(data):
    return Volume(data=np.asarray(data, dtype=np.float32))


def test_mse_basics():
    x = _vol(np.zeros((3, 3, 3)))
    y = _vol(np.full((3, 3, 3), 0.1))
    assert mse(x, x) == 0.0
    assert mse(x, y) == pytest.approx(0.01)
    assert mse(x, y) == mse(y, x)


def test_psnr_cases():
    x = _vol(np.zeros((4, 4, 4)))
    y = _vol(np.full((4, 4, 4), 0.1))
    assert psnr(x, y) == pytest.approx(20.0)  # mse 0.01, peak 1
    assert psnr(x, x) == float("inf")
    # mse 0.003 -> 10 log10(1/0.003) = 25.2288 dB
    rng = np.random.default_rng(0)
    base = rng.random((8, 8, 8)).astype(np.float32) * 0.5
    delta = math.sqrt(0.003)
    noisy = np.clip(base + delta, 0.0, 1.0)
    assert psnr(_vol(base), _vol(noisy)) == pytest.approx(10 * math.log10(1 / 0.003), rel=1e-6)


def test_psnr_decreasing_in_mse():
    x = _vol(np.zeros((4, 4, 4)))
    vals = [psnr(x, _vol(np.full((4, 4, 4), v))) for v in (0.05, 0.1, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_wasabi_identical_cohorts_zero():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20, 4))
    assert wasabi_lite(a, a.copy()) == pytest.approx(0.0, abs=1e-9)


def test_wasabi_1d_unit_shift():
    # exact sample stats: {-1,0,1} has mean 0, sample var 1; {0,1,2} mean 1, var 1
    a = np.array([[-1.0], [0.0], [1.0]])
    b = np.array([[0.0], [1.0], [2.0]])
    assert wasabi_lite(a, b) == pytest.approx(1.0, abs=1e-12)


def test_wasabi_1d_scale_difference():
    a = np.array([[-2.0], [0.0], [2.0]])  # sd 2
    b = np.array([[-1.0], [0.0], [1.0]])  # sd 1
    assert wasabi_lite(a, b) == pytest.approx(1.0, abs=1e-12)  # (2 - 1)^2


def test_wasabi_matches_1d_closed_form():
    rng = np.random.default_rng(2)
    a = rng.normal(0.3, 1.7, size=(40, 1))
    b = rng.normal(-0.5, 0.6, size=(35, 1))
    expected = (a.mean() - b.mean()) ** 2 + (a.std(ddof=1) - b.std(ddof=1)) ** 2
    assert wasabi_lite(a, b) == pytest.approx(float(expected), abs=1e-8)


def test_wasabi_symmetric_and_diagonal_consistency():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(30, 3)) * np.array([1.0, 2.0, 0.5])
    b = rng.normal(size=(25, 3)) * np.array([0.5, 1.0, 1.5]) + 1.0
    assert wasabi_lite(a, b) == pytest.approx(wasabi_lite(b, a), rel=1e-10)
    assert wasabi_lite(a, b) > 0


def test_wasabi_input_validation():
    with pytest.raises(ConfigError):
        wasabi_lite(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ConfigError):
        wasabi_lite(np.zeros((5, 3)), np.zeros((5, 2)))


def test_delta_v_rel_cases():
    assert delta_v_rel(1000.0, 900.0) == pytest.approx(-10.0)
    assert delta_v_rel(123.4, 123.4) == 0.0
    assert delta_v_rel(1000.0, 1620.0) == pytest.approx(62.0)
    with pytest.raises(ConfigError):
        delta_v_rel(0.0, 1.0)


def test_iqr_filter_example():
    out = iqr_filter([1, 2, 3, 4, 100])
    np.testing.assert_array_equal(out, [1, 2, 3, 4])


def test_iqr_filter_all_equal_unchanged():
    out = iqr_filter([5.0] * 7)
    np.testing.assert_array_equal(out, [5.0] * 7)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
@settings(max_examples=50, deadline=None)
def test_iqr_filter_subset_and_idempotent(xs):
    arr = np.asarray(xs)
    once = iqr_filter(arr)
    assert set(once.tolist()) <= set(arr.tolist())
    np.testing.assert_array_equal(iqr_filter(once), once)


def test_sensitivity_percent_arithmetic():
    assert sensitivity_percent(0.004, 0.006) == pytest.approx(50.0)
    assert sensitivity_percent(0.004, 0.004) == 0.0
    with pytest.raises(NumericalError):
        sensitivity_percent(0.0, 0.1)


def test_volume_mae_units():
    a = ROIVolumeReport({"v": 10.0}, {"v": 0.50}, EVAL_ARCH)
    b = ROIVolumeReport({"v": 9.0}, {"v": 0.47}, EVAL_ARCH)
    assert volume_mae(a, a)["v"] == 0.0
    assert volume_mae(a, b)["v"] == pytest.approx(0.03)
    assert volume_mae(a, b, relative=True)["v"] == pytest.approx(100 * 0.03 / 0.47)


def test_roi_volumes_rejects_training_teacher():
    cfg = PhantomConfig()
    teacher = build_segmenter(TEACHER_ARCH, cfg.dims, SegTrainConfig(unet_channels=(4, 8, 8)), 0).freeze()
    vol = Volume(data=np.zeros(cfg.dims, dtype=np.float32))
    with pytest.raises(ContractError):
        roi_volumes(vol, teacher, default_roi_map(cfg))


class _ConstNet(torch.nn.Module):
    def __init__(self, class_id):
        super().__init__()
        self.class_id = class_id
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        logits = torch.zeros(x.shape[0], 6, *x.shape[2:])
        logits[:, self.class_id] = 50.0
        return logits + 0.0 * self.dummy


def _const_segmenter(class_id, dims):
    from brainprog.segteacher import SegmenterHandle

    return SegmenterHandle(net=_ConstNet(class_id), arch_id=EVAL_ARCH, grid_shape=dims).freeze()


def test_roi_volumes_zero_head_contract_error():
    cfg = PhantomConfig()
    seg = _const_segmenter(0, cfg.dims)  # everything background
    vol = Volume(data=np.zeros(cfg.dims, dtype=np.float32))
    with pytest.raises(ContractError):
        roi_volumes(vol, seg, default_roi_map(cfg))


def test_roi_volumes_normalization():
    cfg = PhantomConfig()
    seg = _const_segmenter(2, cfg.dims)  # everything GM
    vol = Volume(data=np.zeros(cfg.dims, dtype=np.float32))
    rep = roi_volumes(vol, seg, default_roi_map(cfg))
    assert rep.normalized_pct["gm"] == pytest.approx(100.0)
    assert sum(rep.normalized_pct.values()) <= 100.0 + 1e-9
    assert rep.volumes_mm3["gm"] == pytest.approx(np.prod(cfg.dims) * vol.voxel_mm3())


def test_trajectory_stat_filtering():
    stat = TrajectoryStat.from_samples("demo", {"roi": [1.0, 1.1, 0.9, 50.0]})
    assert stat.raw_counts["roi"] == 4
    assert len(stat.samples["roi"]) == 3
    assert stat.median["roi"] == pytest.approx(1.0)


def test_roispec_box_masking():
    labels = np.zeros((4, 4, 4), dtype=np.int16)
    labels[1, 1, 1] = 5
    labels[3, 3, 3] = 5
    spec = ROISpec(5, box=((0, 2), (0, 2), (0, 2)))
    m = spec.mask(labels)
    assert m[1, 1, 1] and not m[3, 3, 3]
    assert ROISpec(5).mask(labels).sum() == 2
