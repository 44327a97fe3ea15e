import numpy as np
import pytest
import torch

from brainprog.core import Diagnosis, Volume
from brainprog.errors import ConfigError, ContractError, ShapeError, TrainingError
from brainprog.phantom import PhantomConfig, generate_subject, render_scan, _subject_seed
from brainprog.segteacher import (
    EVAL_ARCH,
    TEACHER_ARCH,
    SegTrainConfig,
    boundary_loss,
    boundary_loss_probs,
    build_segmenter,
    dice_loss,
    dice_loss_probs,
    hard_dice,
    seg_loss,
    seg_probs,
    segment,
    segment_labels,
    train_segmenter,
)

GRID = (8, 8, 8)


@pytest.fixture()
def phi():
    handle = build_segmenter(TEACHER_ARCH, GRID, SegTrainConfig(unet_channels=(4, 8, 8)), seed=0)
    return handle.freeze()


def _vol(seed=0):
    rng = np.random.default_rng(seed)
    return Volume(data=rng.random(GRID, dtype=np.float32))


def test_segment_output_is_valid_prob_map(phi):
    probs = segment(phi, _vol())
    assert probs.shape == (6, *GRID)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)


def test_segment_deterministic(phi):
    a = segment(phi, _vol())
    b = segment(phi, _vol())
    np.testing.assert_array_equal(a, b)


def test_segment_shape_mismatch(phi):
    bad = Volume(data=np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        segment(phi, bad)


def test_unknown_arch_rejected():
    with pytest.raises(ConfigError):
        build_segmenter("mystery-net", GRID, SegTrainConfig(), seed=0)


def _binary_probe(n_fg=100, overlap=50, grid=(10, 10, 10)):
    """Binary WM/GM maps with |s_k| = |s_hat_k| = n_fg and given overlap."""
    n = int(np.prod(grid))
    s = torch.zeros(6, n, dtype=torch.float64)
    sh = torch.zeros(6, n, dtype=torch.float64)
    for k in (1, 2):
        base = 200 * (k - 1)
        s[k, base : base + n_fg] = 1.0
        sh[k, base + n_fg - overlap : base + 2 * n_fg - overlap] = 1.0
    # remaining mass to background so maps stay valid distributions
    s[0] = 1.0 - s[1:].sum(dim=0)
    sh[0] = 1.0 - sh[1:].sum(dim=0)
    return s.reshape(6, *grid), sh.reshape(6, *grid)


def test_dice_hand_case_half():
    # |s_k| = |s_hat_k| = 100 with overlap 50 in both classes:
    # per class (2*50)/(200) = 0.5, loss = 1 - 0.5 = 0.5
    s, sh = _binary_probe()
    assert dice_loss_probs(s, sh).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_identity_zero():
    s, _ = _binary_probe()
    assert dice_loss_probs(s, s).item() == pytest.approx(0.0, abs=1e-6)


def test_dice_disjoint_one():
    s, sh = _binary_probe(overlap=0)
    assert dice_loss_probs(s, sh).item() == pytest.approx(1.0, abs=1e-6)


def test_dice_symmetric():
    gen = torch.Generator().manual_seed(0)
    s = torch.softmax(torch.randn(6, 5, 5, 5, generator=gen, dtype=torch.float64), dim=0)
    sh = torch.softmax(torch.randn(6, 5, 5, 5, generator=gen, dtype=torch.float64), dim=0)
    assert dice_loss_probs(s, sh).item() == pytest.approx(dice_loss_probs(sh, s).item(), rel=1e-12)


def test_boundary_hand_case():
    # single WM voxel with s=1 and s_hat=e^-1: -(1/2) * 1 * log(e^-1) = 1/2
    s = torch.zeros(6, 2, 2, 2, dtype=torch.float64)
    sh = torch.full((6, 2, 2, 2), 1e-12, dtype=torch.float64)
    s[1, 0, 0, 0] = 1.0
    sh[1, 0, 0, 0] = float(np.exp(-1.0))
    assert boundary_loss_probs(s, sh).item() == pytest.approx(0.5, rel=1e-9)


def test_boundary_identity_zero():
    s, _ = _binary_probe()
    assert boundary_loss_probs(s, s).item() == pytest.approx(0.0, abs=1e-9)


def test_boundary_monotone_in_prediction():
    s = torch.zeros(6, 2, 2, 2, dtype=torch.float64)
    s[1, 0, 0, 0] = 1.0
    vals = []
    for p in (0.1, 0.5, 0.9):
        sh = torch.full((6, 2, 2, 2), 1e-12, dtype=torch.float64)
        sh[1, 0, 0, 0] = p
        vals.append(boundary_loss_probs(s, sh).item())
    assert vals[0] > vals[1] > vals[2] >= 0.0


def test_boundary_voxel_normalize_switch():
    s, sh = _binary_probe(grid=(10, 10, 10))
    raw = boundary_loss_probs(s, sh).item()
    normed = boundary_loss_probs(s, sh, voxel_normalize=True).item()
    assert normed == pytest.approx(raw / 1000.0, rel=1e-9)


def test_seg_loss_is_sum_of_components(phi):
    x = _vol(1).as_tensor().unsqueeze(0)
    x_hat = _vol(2).as_tensor().unsqueeze(0)
    total = seg_loss(x, x_hat, phi)
    parts = dice_loss(x, x_hat, phi) + boundary_loss(x, x_hat, phi)
    assert total.item() == pytest.approx(parts.item(), rel=1e-6)


def test_seg_loss_identity_zero_for_one_hot_maps():
    # both terms vanish exactly (up to delta) when the teacher's maps are
    # one-hot and identical, which is the saturated-teacher regime
    s, _ = _binary_probe()
    assert (dice_loss_probs(s, s) + boundary_loss_probs(s, s)).item() == pytest.approx(0.0, abs=1e-6)


def test_gradients_flow_into_generated_only(phi):
    x = _vol(1).as_tensor().unsqueeze(0).requires_grad_(True)
    x_hat = _vol(2).as_tensor().unsqueeze(0).requires_grad_(True)
    loss = seg_loss(x, x_hat, phi)
    loss.backward()
    assert x.grad is None or torch.count_nonzero(x.grad) == 0
    assert x_hat.grad is not None and torch.count_nonzero(x_hat.grad) > 0
    # frozen teacher receives no gradients
    assert all(p.grad is None for p in phi.net.parameters())


def test_unfrozen_teacher_rejected():
    handle = build_segmenter(TEACHER_ARCH, GRID, SegTrainConfig(unet_channels=(4, 8, 8)), seed=0)
    x = _vol(1).as_tensor().unsqueeze(0)
    with pytest.raises(ContractError):
        dice_loss(x, x, handle)


def _fd_grad(f, x: torch.Tensor, indices, h=1e-5):
    grads = []
    for idx in indices:
        xp = x.clone()
        xm = x.clone()
        xp[idx] += h
        xm[idx] -= h
        grads.append((f(xp) - f(xm)) / (2 * h))
    return np.array(grads)


@pytest.mark.parametrize("loss_name", ["dice", "boundary"])
def test_gradcheck_against_finite_differences(loss_name):
    # analytic vs central finite differences on a 4x4x4 probe, float64
    torch.manual_seed(0)
    handle = build_segmenter(
        TEACHER_ARCH, (4, 4, 4), SegTrainConfig(unet_channels=(4, 8, 8)), seed=3
    )
    handle.net.double()
    handle.freeze()
    fn = dice_loss if loss_name == "dice" else boundary_loss
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(1, 1, 4, 4, 4, dtype=torch.float64, generator=gen)
    x_hat = torch.rand(1, 1, 4, 4, 4, dtype=torch.float64, generator=gen).requires_grad_(True)
    loss = fn(x, x_hat, handle)
    loss.backward()
    rng = np.random.default_rng(0)
    idx = [
        (0, 0, int(a), int(b), int(c))
        for a, b, c in rng.integers(0, 4, size=(12, 3))
    ]
    fd = _fd_grad(lambda v: fn(x, v, handle).item(), x_hat.detach(), idx)
    analytic = np.array([x_hat.grad[i].item() for i in idx])
    scale = np.abs(fd).max() + 1e-12
    np.testing.assert_allclose(analytic, fd, atol=1e-3 * scale, rtol=1e-3)


def test_hard_dice_basics():
    a = np.zeros((4, 4, 4), dtype=np.int16)
    b = np.zeros((4, 4, 4), dtype=np.int16)
    a[:2], b[:2] = 1, 1
    assert hard_dice(a, b, 1) == 1.0
    b[:] = 0
    assert hard_dice(a, b, 1) == 0.0
    assert hard_dice(a, b, 5) == 1.0  # both empty


MICRO_CFG = PhantomConfig(dims=(24, 32, 24))


def _micro_scans(n=14, seed=50):
    out = []
    for i in range(n):
        spec = generate_subject(_subject_seed(seed, i), MICRO_CFG)
        out.append(render_scan(spec, MICRO_CFG, spec.age0, Diagnosis.CN))
    return out


def test_train_segmenter_reaches_floor_and_freezes():
    scans = _micro_scans(n=18)
    cfg = SegTrainConfig(epochs=14, lr=3e-3, batch_size=4, dice_floor=0.90, unet_channels=(8, 16, 32))
    teacher = train_segmenter(scans, cfg, TEACHER_ARCH, seed=1)
    assert teacher.frozen
    before = teacher.fingerprint()
    # inference never mutates the frozen handle
    segment(teacher, scans[0][0])
    assert teacher.fingerprint() == before
    pred = segment_labels(teacher, scans[-1][0])
    assert np.mean(pred == scans[-1][1].data) > 0.85


def test_train_segmenter_floor_failure():
    scans = _micro_scans(n=12)
    cfg = SegTrainConfig(epochs=0, dice_floor=0.90)
    with pytest.raises(TrainingError):
        train_segmenter(scans, cfg, EVAL_ARCH, seed=1)


def test_teacher_and_eval_architectures_distinct():
    scans = _micro_scans(n=12)
    t = build_segmenter(TEACHER_ARCH, MICRO_CFG.dims, SegTrainConfig(), seed=1)
    e = build_segmenter(EVAL_ARCH, MICRO_CFG.dims, SegTrainConfig(), seed=1)
    assert t.arch_id != e.arch_id
    assert type(t.net) is not type(e.net)
