import math

import numpy as np
import pytest
import torch

from brainprog.autoencoder import LatentScale, VAE3D
from brainprog.core import Covariates, Diagnosis, EncodingConfig, Volume
from brainprog.diffusion import (
    GuidanceConfig,
    LatentBatch,
    NoisePredictor,
    build_full_latent,
    cov_grid_from_vector,
    freeze_module,
    generate_followup,
    ldm_train_step,
    noise_loss,
    prepare_pair_batch,
)
from brainprog.diffusionmath import build_schedule, forward_diffuse, denoise_from_intermediate
from brainprog.errors import ConfigError, ContractError, ShapeError
from brainprog.io import net_fingerprint
from brainprog.segteacher import SegTrainConfig, TEACHER_ARCH, build_segmenter, dice_loss_probs, seg_probs

SCHED = build_schedule(1000)


def test_build_full_latent_channel_layout():
    gen = torch.Generator().manual_seed(0)
    z_t = torch.randn(3, 2, 3, 2, generator=gen)
    z_a = torch.randn(3, 2, 3, 2, generator=gen)
    cov = torch.zeros(5, 2, 3, 2)
    full = build_full_latent(z_t, z_a, cov)
    assert full.shape == (11, 2, 3, 2)
    torch.testing.assert_close(full[0:3], z_t)
    torch.testing.assert_close(full[3:6], z_a)
    assert (full[6:11] == 0).all()


def test_build_full_latent_batched_and_errors():
    z_t = torch.zeros(2, 3, 2, 2, 2)
    z_a = torch.zeros(2, 3, 2, 2, 2)
    cov = torch.zeros(2, 5, 2, 2, 2)
    assert build_full_latent(z_t, z_a, cov).shape == (2, 11, 2, 2, 2)
    with pytest.raises(ShapeError):
        build_full_latent(z_t, z_a, torch.zeros(2, 4, 2, 2, 2))
    with pytest.raises(ShapeError):
        build_full_latent(z_t, torch.zeros(2, 3, 2, 2, 1), cov)


def test_noise_predictor_shapes():
    torch.manual_seed(0)
    net = NoisePredictor(channels=(8, 16, 16), heads=2)
    z = torch.randn(2, 11, 4, 5, 4)
    out = net(z, torch.tensor([3, 998]))
    assert out.shape == (2, 3, 4, 5, 4)
    with pytest.raises(ShapeError):
        net(torch.randn(2, 7, 4, 5, 4), 3)


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(f_seg=0)
    with pytest.raises(ConfigError):
        GuidanceConfig(gamma=-1.0)


class _OracleNet(torch.nn.Module):
    """Recovers the exact forward-process noise when the clean signal is 0."""

    def __init__(self, sched):
        super().__init__()
        self.abar = torch.from_numpy(sched.alpha_bar).float()

    def forward(self, z_full, t):
        z_t = z_full[:, 0:3]
        ab = self.abar[torch.as_tensor(t) - 1].view(-1, 1, 1, 1, 1)
        return z_t / torch.sqrt(1.0 - ab)


def test_noise_loss_oracle_zero():
    z0 = torch.zeros(4, 3, 4, 5, 4)
    z_a = torch.zeros(4, 3, 4, 5, 4)
    cov = torch.zeros(4, 5, 4, 5, 4)
    loss = noise_loss(_OracleNet(SCHED), z0, z_a, cov, SCHED, torch.Generator().manual_seed(0))
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


class _ZeroNet(torch.nn.Module):
    def forward(self, z_full, t):
        return torch.zeros_like(z_full[:, 0:3])


def test_noise_loss_zero_net_expectation():
    # predicting 0 leaves the unit-Gaussian noise: E[loss] = 1 per element
    z0 = torch.zeros(8, 3, 4, 5, 4)
    cov = torch.zeros(8, 5, 4, 5, 4)
    losses = [
        noise_loss(_ZeroNet(), z0, z0, cov, SCHED, torch.Generator().manual_seed(s)).item()
        for s in range(3)
    ]
    assert np.mean(losses) == pytest.approx(1.0, rel=0.05)
    assert min(losses) >= 0.0


def _mini_world(grid=(8, 8, 8), latent_ch=(2, 4, 4)):
    torch.manual_seed(3)
    vae = VAE3D(latent_ch)
    freeze_module(vae)
    teacher = build_segmenter(TEACHER_ARCH, grid, SegTrainConfig(unet_channels=(2, 4, 4)), seed=1).freeze()
    eps_net = NoisePredictor(channels=(8, 16, 16), heads=2)
    h = w = d = grid[0] // 8
    b = 4
    gen = torch.Generator().manual_seed(5)
    batch = LatentBatch(
        z0_followup=torch.randn(b, 3, h, w, d, generator=gen),
        z_baseline=torch.randn(b, 3, h, w, d, generator=gen),
        cov_grid=torch.rand(b, 5, h, w, d, generator=gen),
        x_followup=torch.rand(b, 1, *grid, generator=gen),
    )
    return vae, teacher, eps_net, batch


def test_ldm_step_gamma_zero_collapses_to_noise_loss():
    vae, teacher, eps_net, batch = _mini_world()
    opt = torch.optim.AdamW(eps_net.parameters(), lr=1e-4)
    guidance = GuidanceConfig(f_seg=1, gamma=0.0)
    report = ldm_train_step(
        eps_net, vae, teacher, LatentScale(1.0), batch, SCHED, guidance, 1, opt,
        torch.Generator().manual_seed(0),
    )
    assert report["total"] == report["noise"]
    assert "dice" not in report


def test_ldm_step_guidance_cadence_and_decomposition():
    vae, teacher, eps_net, batch = _mini_world()
    opt = torch.optim.AdamW(eps_net.parameters(), lr=1e-4)
    guidance = GuidanceConfig(f_seg=3, gamma=1e-2)
    for it in (1, 2):
        r = ldm_train_step(eps_net, vae, teacher, LatentScale(1.0), batch, SCHED, guidance, it, opt,
                           torch.Generator().manual_seed(it))
        assert "dice" not in r
    r = ldm_train_step(eps_net, vae, teacher, LatentScale(1.0), batch, SCHED, guidance, 3, opt,
                       torch.Generator().manual_seed(3))
    assert "dice" in r
    assert r["total"] == pytest.approx(r["noise"] + guidance.gamma * r["dice"], rel=1e-6, abs=1e-6)


def test_ldm_step_keeps_vae_and_teacher_frozen():
    vae, teacher, eps_net, batch = _mini_world()
    fp_v, fp_t = net_fingerprint(vae), net_fingerprint(teacher.net)
    opt = torch.optim.AdamW(eps_net.parameters(), lr=1e-3)
    guidance = GuidanceConfig(f_seg=1, gamma=1e-2)
    ldm_train_step(eps_net, vae, teacher, LatentScale(1.0), batch, SCHED, guidance, 1, opt,
                   torch.Generator().manual_seed(0))
    assert net_fingerprint(vae) == fp_v
    assert net_fingerprint(teacher.net) == fp_t


def test_ldm_step_requires_frozen_vae():
    vae, teacher, eps_net, batch = _mini_world()
    for p in vae.parameters():
        p.requires_grad_(True)
    opt = torch.optim.AdamW(eps_net.parameters(), lr=1e-4)
    with pytest.raises(ContractError):
        ldm_train_step(eps_net, vae, teacher, LatentScale(1.0), batch, SCHED,
                       GuidanceConfig(), 1, opt)


def test_guidance_gradient_reaches_eps_net_finite_difference():
    # the Dice guidance term alone must have nonzero, FD-consistent gradient
    # with respect to noise-predictor parameters, through all DDIM steps
    torch.manual_seed(11)
    grid = (16, 16, 16)
    vae = VAE3D((2, 4, 4)).double()
    freeze_module(vae)
    teacher = build_segmenter(TEACHER_ARCH, grid, SegTrainConfig(unet_channels=(2, 4, 4)), seed=2)
    teacher.net.double()
    teacher.freeze()
    eps_net = NoisePredictor(channels=(8, 8, 8), heads=1).double()
    sched = build_schedule(50)
    gen = torch.Generator().manual_seed(7)
    z0 = torch.randn(1, 3, 2, 2, 2, generator=gen, dtype=torch.float64)
    z_a = torch.randn(1, 3, 2, 2, 2, generator=gen, dtype=torch.float64)
    cov = torch.rand(1, 5, 2, 2, 2, generator=gen, dtype=torch.float64)
    x_b = torch.rand(1, 1, *grid, generator=gen, dtype=torch.float64)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    z_t = forward_diffuse(z0, 30, eps, sched)
    with torch.no_grad():
        s_ref = seg_probs(teacher, x_b)

    def guidance_loss():
        z0_tilde = denoise_from_intermediate(
            z_t, 30, lambda z, t: eps_net(build_full_latent(z, z_a, cov), t), sched, 10
        )
        x_tilde = vae.decode_raw(z0_tilde)
        return dice_loss_probs(s_ref, seg_probs(teacher, x_tilde))

    loss = guidance_loss()
    params = list(eps_net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    nz = sum(int(g.abs().sum() > 0) for g in grads if g is not None)
    assert nz > 0
    # FD confirmation on one influential parameter
    target = eps_net.out_conv.weight
    gi = [i for i, p in enumerate(params) if p is target][0]
    flat = target.detach().reshape(-1)
    k = int(torch.argmax(grads[gi].abs()).item())
    h = 1e-6
    orig = flat[k].item()
    with torch.no_grad():
        flat[k] = orig + h
    up = guidance_loss().item()
    with torch.no_grad():
        flat[k] = orig - h
    down = guidance_loss().item()
    with torch.no_grad():
        flat[k] = orig
    fd = (up - down) / (2 * h)
    analytic = grads[gi].reshape(-1)[k].item()
    assert fd != 0.0
    assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-9)


def _world_for_generation():
    torch.manual_seed(4)
    grid = (16, 16, 16)
    vae = VAE3D((2, 4, 4))
    freeze_module(vae)
    eps_net = NoisePredictor(channels=(8, 16, 16), heads=2)
    freeze_module(eps_net)
    enc = EncodingConfig()
    cov = Covariates(60.0, 70.0, 1, Diagnosis.CN, Diagnosis.AD)
    vol = Volume(data=np.random.default_rng(0).random(grid, dtype=np.float32))
    return eps_net, vae, vol, cov, enc


def test_generate_followup_deterministic_given_seed():
    eps_net, vae, vol, cov, enc = _world_for_generation()
    a = generate_followup(eps_net, vae, LatentScale(0.7), vol, cov, enc, SCHED, n_steps=8, seed=5)
    b = generate_followup(eps_net, vae, LatentScale(0.7), vol, cov, enc, SCHED, n_steps=8, seed=5)
    np.testing.assert_array_equal(a.data, b.data)
    c = generate_followup(eps_net, vae, LatentScale(0.7), vol, cov, enc, SCHED, n_steps=8, seed=6)
    assert not np.array_equal(a.data, c.data)
    assert a.shape == vol.shape
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


def test_prepare_pair_batch_scales_latents():
    torch.manual_seed(5)
    grid = (16, 16, 16)
    vae = VAE3D((2, 4, 4))
    freeze_module(vae)
    from brainprog.core import LabelMap, ScanPair

    rng = np.random.default_rng(1)
    vols = [Volume(data=rng.random(grid, dtype=np.float32)) for _ in range(2)]
    labels = LabelMap(data=np.zeros(grid, dtype=np.int16))
    pair = ScanPair("s0", vols[0], vols[1], labels, labels,
                    Covariates(60.0, 68.0, 0, Diagnosis.CN, Diagnosis.CN))
    enc = EncodingConfig()
    b1 = prepare_pair_batch(vae, LatentScale(1.0), enc, [pair])
    b2 = prepare_pair_batch(vae, LatentScale(2.0), enc, [pair])
    torch.testing.assert_close(b2.z0_followup, 2.0 * b1.z0_followup)
    torch.testing.assert_close(b2.z_baseline, 2.0 * b1.z_baseline)
    torch.testing.assert_close(b2.cov_grid, b1.cov_grid)
    # covariate channels constant over space
    assert b1.cov_grid[0, 2].min() == b1.cov_grid[0, 2].max()
