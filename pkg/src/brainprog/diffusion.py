"""Stage 2: conditional latent diffusion with input-level covariate fusion.

The noise predictor sees an 11-channel composite: 3 channels of noisy
follow-up latent, 3 of clean baseline latent, and 5 spatially broadcast
covariates. Training minimizes noise-prediction MSE, with a periodic
anatomical pass that denoises an intermediate state in 10 DDIM steps,
decodes it, and adds a teacher Dice penalty whose gradient reaches the
noise predictor through all 10 steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import VAE3D, LatentScale, encode
from .core import (
    Covariates,
    EncodingConfig,
    LatentGrid,
    NoiseSchedule,
    ScanPair,
    Volume,
    broadcast_covariates,
    encode_covariates,
)
from .diffusionmath import ddim_sample, denoise_from_intermediate, forward_diffuse
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .segteacher import SegmenterHandle, dice_loss_probs, seg_probs

COMPOSITE_CHANNELS = 11  # 3 noisy follow-up + 3 baseline + 5 covariates


def _gn(ch: int) -> nn.GroupNorm:
    # keep >= 2 channels per group so batch-1 inference at 1x1x1 latents
    # stays well-posed; 32 groups at the published widths
    return nn.GroupNorm(math.gcd(32, max(1, ch // 2)), ch)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard transformer-style timestep embedding, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _TimeResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = _gn(ch_in)
        self.conv1 = nn.Conv3d(ch_in, ch_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch_out)
        self.norm2 = _gn(ch_out)
        self.conv2 = nn.Conv3d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv3d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _SelfAttention3D(nn.Module):
    """Single-layer multi-head self-attention over flattened voxels."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.heads = heads if ch % heads == 0 else 1
        self.norm = _gn(ch)
        self.qkv = nn.Conv3d(ch, 3 * ch, 1)
        self.proj = nn.Conv3d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w, d = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w * d)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        attn = torch.softmax(q.transpose(-1, -2) @ k / math.sqrt(c // self.heads), dim=-1)
        out = (v @ attn.transpose(-1, -2)).reshape(b, c, h, w, d)
        return x + self.proj(out)


class NoisePredictor(nn.Module):
    """3-level U-Net over the 11-channel composite latent.

    Self-attention runs at the two deepest levels; every level has two
    residual blocks conditioned on a sinusoidal timestep embedding.
    """

    input_channels = COMPOSITE_CHANNELS
    output_channels = 3

    def __init__(self, channels: tuple[int, int, int] = (64, 128, 192), heads: int = 4):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.temb_dim = 4 * c0
        self.temb_mlp = nn.Sequential(
            nn.Linear(c0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.temb_base = c0
        self.stem = nn.Conv3d(COMPOSITE_CHANNELS, c0, 3, padding=1)
        self.enc0 = nn.ModuleList([_TimeResBlock(c0, c0, self.temb_dim) for _ in range(2)])
        self.down0 = nn.Conv3d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = nn.ModuleList([_TimeResBlock(c1, c1, self.temb_dim) for _ in range(2)])
        self.attn1 = nn.ModuleList([_SelfAttention3D(c1, heads) for _ in range(2)])
        self.down1 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = nn.ModuleList([_TimeResBlock(c2, c2, self.temb_dim) for _ in range(2)])
        self.attn2 = nn.ModuleList([_SelfAttention3D(c2, heads) for _ in range(2)])
        self.mid1 = _TimeResBlock(c2, c2, self.temb_dim)
        self.mid_attn = _SelfAttention3D(c2, heads)
        self.mid2 = _TimeResBlock(c2, c2, self.temb_dim)
        self.fuse2 = nn.Conv3d(2 * c2, c2, 1)
        self.dec2 = nn.ModuleList([_TimeResBlock(c2, c2, self.temb_dim) for _ in range(2)])
        self.dattn2 = nn.ModuleList([_SelfAttention3D(c2, heads) for _ in range(2)])
        self.up1 = nn.Conv3d(c2, c1, 3, padding=1)
        self.fuse1 = nn.Conv3d(2 * c1, c1, 1)
        self.dec1 = nn.ModuleList([_TimeResBlock(c1, c1, self.temb_dim) for _ in range(2)])
        self.dattn1 = nn.ModuleList([_SelfAttention3D(c1, heads) for _ in range(2)])
        self.up0 = nn.Conv3d(c1, c0, 3, padding=1)
        self.fuse0 = nn.Conv3d(2 * c0, c0, 1)
        self.dec0 = nn.ModuleList([_TimeResBlock(c0, c0, self.temb_dim) for _ in range(2)])
        self.out_norm = _gn(c0)
        self.out_conv = nn.Conv3d(c0, self.output_channels, 3, padding=1)

    def forward(self, z_full: torch.Tensor, t) -> torch.Tensor:
        if z_full.ndim != 5 or z_full.shape[1] != COMPOSITE_CHANNELS:
            raise ShapeError(f"expected (B, 11, h, w, d), got {tuple(z_full.shape)}")
        if isinstance(t, int):
            t = torch.full((z_full.shape[0],), t, dtype=torch.long)
        temb = self.temb_mlp(sinusoidal_embedding(t, self.temb_base).to(z_full.dtype))

        h0 = self.stem(z_full)
        for blk in self.enc0:
            h0 = blk(h0, temb)
        h1 = self.down0(h0)
        for blk, attn in zip(self.enc1, self.attn1):
            h1 = attn(blk(h1, temb))
        h2 = self.down1(h1)
        for blk, attn in zip(self.enc2, self.attn2):
            h2 = attn(blk(h2, temb))
        m = self.mid2(self.mid_attn(self.mid1(h2, temb)), temb)
        d2 = self.fuse2(torch.cat([m, h2], dim=1))
        for blk, attn in zip(self.dec2, self.dattn2):
            d2 = attn(blk(d2, temb))
        d1 = self.up1(F.interpolate(d2, size=h1.shape[2:], mode="nearest"))
        d1 = self.fuse1(torch.cat([d1, h1], dim=1))
        for blk, attn in zip(self.dec1, self.dattn1):
            d1 = attn(blk(d1, temb))
        d0 = self.up0(F.interpolate(d1, size=h0.shape[2:], mode="nearest"))
        d0 = self.fuse0(torch.cat([d0, h0], dim=1))
        for blk in self.dec0:
            d0 = blk(d0, temb)
        return self.out_conv(F.silu(self.out_norm(d0)))


@dataclass(frozen=True)
class GuidanceConfig:
    """Periodic anatomical supervision settings for diffusion training."""

    f_seg: int = 100
    gamma: float = 1e-5
    fast_steps: int = 10

    def __post_init__(self):
        if self.f_seg < 1:
            raise ConfigError("f_seg must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


def build_full_latent(z_t_b: torch.Tensor, z_a: torch.Tensor, cov_grid: torch.Tensor) -> torch.Tensor:
    """Concatenate [noisy follow-up, baseline, covariates] along channels.

    Accepts (C, h, w, d) or batched (B, C, h, w, d) tensors; channel counts
    must be 3 + 3 + 5 and spatial dims must match.
    """
    ch_axis = z_t_b.ndim - 4
    if z_t_b.shape[ch_axis] != 3 or z_a.shape[ch_axis] != 3 or cov_grid.shape[ch_axis] != 5:
        raise ShapeError(
            f"channel counts must be 3/3/5, got {z_t_b.shape[ch_axis]}/{z_a.shape[ch_axis]}/{cov_grid.shape[ch_axis]}"
        )
    if z_t_b.shape[-3:] != z_a.shape[-3:] or z_t_b.shape[-3:] != cov_grid.shape[-3:]:
        raise ShapeError("spatial dims of latents and covariate grid differ")
    return torch.cat([z_t_b, z_a, cov_grid], dim=ch_axis)


def cov_grid_from_vector(vec: np.ndarray, spatial: tuple[int, int, int]) -> torch.Tensor:
    """Torch view of the broadcast covariate channels."""
    return torch.from_numpy(broadcast_covariates(vec, spatial))


def _assert_frozen(net: nn.Module, name: str):
    if any(p.requires_grad for p in net.parameters()):
        raise ContractError(f"{name} must be frozen during diffusion training")


def freeze_module(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@dataclass(eq=False)
class LatentBatch:
    """Precomputed training tensors for a batch of scan pairs.

    Latents are already scaled by the global latent factor; ``x_followup``
    keeps the image-space target for the anatomical pass.
    """

    z0_followup: torch.Tensor  # (B, 3, h, w, d), scaled
    z_baseline: torch.Tensor  # (B, 3, h, w, d), scaled
    cov_grid: torch.Tensor  # (B, 5, h, w, d)
    x_followup: torch.Tensor  # (B, 1, H, W, D)


def prepare_pair_batch(
    vae: VAE3D,
    scale: LatentScale,
    enc_cfg: EncodingConfig,
    pairs: Sequence[ScanPair],
    sample_latents: bool = False,
    generator=None,
) -> LatentBatch:
    """Encode scan pairs into scaled latents plus covariate grids."""
    z0s, zas, covs, xbs = [], [], [], []
    for p in pairs:
        zb = encode(vae, p.followup, sample=sample_latents, generator=generator)
        za = encode(vae, p.baseline, sample=sample_latents, generator=generator)
        vec = encode_covariates(p.covariates, enc_cfg)
        z0s.append(zb.data * scale.s)
        zas.append(za.data * scale.s)
        covs.append(cov_grid_from_vector(vec, zb.spatial_shape))
        xbs.append(p.followup.as_tensor())
    return LatentBatch(
        z0_followup=torch.stack(z0s),
        z_baseline=torch.stack(zas),
        cov_grid=torch.stack(covs),
        x_followup=torch.stack(xbs),
    )


def noise_loss(
    eps_net: NoisePredictor,
    z0_b: torch.Tensor,
    z_a: torch.Tensor,
    cov_grid: torch.Tensor,
    sched: NoiseSchedule,
    generator=None,
) -> torch.Tensor:
    """Noise-prediction MSE with t ~ U{1..T} and eps ~ N(0, I) per sample."""
    b = z0_b.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(z0_b.shape, generator=generator, dtype=z0_b.dtype)
    z_t = forward_diffuse(z0_b, t, eps, sched)
    eps_hat = eps_net(build_full_latent(z_t, z_a, cov_grid), t)
    return F.mse_loss(eps_hat, eps)


def ldm_train_step(
    eps_net: NoisePredictor,
    vae: VAE3D,
    teacher: SegmenterHandle | None,
    scale: LatentScale,
    batch: LatentBatch,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    iteration: int,
    opt: torch.optim.Optimizer,
    generator=None,
) -> dict[str, float]:
    """One optimizer step of the diffusion objective.

    Always computes the noise-prediction loss; on iterations divisible by
    ``f_seg`` (and gamma > 0) it additionally denoises an intermediate state
    with fast DDIM, decodes it through the frozen VAE, and adds the weighted
    teacher Dice loss. The returned report carries each component.
    """
    _assert_frozen(vae, "VAE")
    loss = noise_loss(eps_net, batch.z0_followup, batch.z_baseline, batch.cov_grid, sched, generator)
    report = {"noise": loss.item()}
    guided = guidance.gamma > 0 and iteration % guidance.f_seg == 0
    if guided:
        if teacher is None:
            raise ConfigError("guidance enabled but no segmentation teacher provided")
        teacher.assert_frozen()
        t_guid = int(torch.randint(1, sched.T + 1, (1,), generator=generator))
        eps = torch.randn(batch.z0_followup.shape, generator=generator)
        z_t = forward_diffuse(batch.z0_followup, t_guid, eps, sched)

        def predict(z, t):
            return eps_net(build_full_latent(z, batch.z_baseline, batch.cov_grid), t)

        z0_tilde = denoise_from_intermediate(z_t, t_guid, predict, sched, guidance.fast_steps)
        x_tilde = vae.decode_raw(z0_tilde / scale.s)
        with torch.no_grad():
            s_ref = seg_probs(teacher, batch.x_followup)
        dice = dice_loss_probs(s_ref, seg_probs(teacher, x_tilde))
        loss = loss + guidance.gamma * dice
        report["dice"] = dice.item()
        report["guidance_t"] = float(t_guid)
    report["total"] = loss.item()
    if not math.isfinite(report["total"]):
        raise NumericalError(f"non-finite diffusion loss: {report}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return report


@dataclass(frozen=True)
class Stage2Config:
    """Diffusion training configuration; defaults follow the published setup."""

    T: int = 1000
    beta_1: float = 0.0015
    beta_T: float = 0.0205
    lr: float = 2.5e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 20
    channels: tuple[int, int, int] = (64, 128, 192)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sample_latents: bool = False
    scale_samples: int = 1000
    inference_steps: int = 50


def train_ldm(
    eps_net: NoisePredictor,
    vae: VAE3D,
    teacher: SegmenterHandle | None,
    scale: LatentScale,
    pairs: Sequence[ScanPair],
    enc_cfg: EncodingConfig,
    sched: NoiseSchedule,
    cfg: Stage2Config,
    seed: int = 0,
    log=None,
) -> list[dict[str, float]]:
    """Train the conditional noise predictor over scan pairs."""
    freeze_module(vae)
    gen = torch.Generator().manual_seed(seed)
    data = prepare_pair_batch(vae, scale, enc_cfg, pairs, cfg.sample_latents, gen)
    opt = torch.optim.AdamW(eps_net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    iteration = 0
    eps_net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[i : i + cfg.batch_size].copy())
            iteration += 1
            sub = LatentBatch(
                z0_followup=data.z0_followup[idx],
                z_baseline=data.z_baseline[idx],
                cov_grid=data.cov_grid[idx],
                x_followup=data.x_followup[idx],
            )
            report = ldm_train_step(
                eps_net, vae, teacher, scale, sub, sched, cfg.guidance, iteration, opt, gen
            )
            history.append(report)
            if log and (iteration % 50 == 0 or "dice" in report):
                log(
                    f"ldm epoch {epoch + 1}/{cfg.epochs} iter {iteration}: "
                    + " ".join(f"{k}={v:.5f}" for k, v in sorted(report.items()))
                )
    eps_net.eval()
    return history


def generate_followup(
    eps_net: NoisePredictor,
    vae: VAE3D,
    scale: LatentScale,
    x_baseline: Volume,
    cov: Covariates,
    enc_cfg: EncodingConfig,
    sched: NoiseSchedule,
    n_steps: int = 50,
    seed: int = 0,
    cov_vector: np.ndarray | None = None,
) -> Volume:
    """Synthesize the follow-up scan for one baseline and covariate set.

    Deterministic given the seed: the initial Gaussian latent comes from a
    dedicated generator, and conditioning channels are re-fused unchanged at
    every DDIM step. ``cov_vector`` overrides the encoded covariates (used
    by the sensitivity protocol's null replacements).
    """
    with torch.no_grad():
        z_a = encode(vae, x_baseline, sample=False)
        z_a_scaled = z_a.data * scale.s
        vec = cov_vector if cov_vector is not None else encode_covariates(cov, enc_cfg)
        cov_grid = cov_grid_from_vector(np.asarray(vec, dtype=np.float64), z_a.spatial_shape)

        def predict(z_t, t):
            zt = z_t if z_t.ndim == 5 else z_t.unsqueeze(0)
            full = build_full_latent(zt, z_a_scaled.unsqueeze(0), cov_grid.unsqueeze(0))
            return eps_net(full, t)[0] if z_t.ndim == 4 else eps_net(full, t)

        gen = torch.Generator().manual_seed(seed)
        z0_scaled = ddim_sample(predict, tuple(z_a.data.shape), n_steps, sched, generator=gen)
        latent = LatentGrid(data=z0_scaled, scale_applied=True).unscaled(scale.s)
    from .autoencoder import decode

    return decode(vae, latent, spacing=x_baseline.spacing)
