"""Stage 1: the 3D variational autoencoder and its composite training loss.

The encoder compresses a volume to a 3-channel latent at 1/8 spatial
resolution; training balances L1 reconstruction, KL regularization,
perceptual similarity (features of the frozen segmentation teacher's
encoder), patch-adversarial realism with feature matching, and optional
anatomical supervision from the teacher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm

from .core import LatentGrid, Volume
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .segteacher import SegmenterHandle, dice_loss_probs, boundary_loss_probs, seg_probs

LATENT_CHANNELS = 3


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, max(1, ch // 2)), ch)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = _gn(ch)
        self.conv = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


class VAE3D(nn.Module):
    """Encoder/decoder pair with 3 downsampling levels (8x total).

    The encoder head emits 6 channels: per-channel mean and log-variance of
    the 3-channel latent posterior.
    """

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.latent_channels = LATENT_CHANNELS
        # encoder
        self.stem = nn.Conv3d(1, c0, 3, padding=1)
        self.down0 = nn.Conv3d(c0, c1, 3, stride=2, padding=1)
        self.eblock0 = _ResBlock(c1)
        self.down1 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.eblock1 = _ResBlock(c2)
        self.down2 = nn.Conv3d(c2, c2, 3, stride=2, padding=1)
        self.eblock2 = _ResBlock(c2)
        self.enorm = _gn(c2)
        self.ehead = nn.Conv3d(c2, 2 * LATENT_CHANNELS, 3, padding=1)
        # decoder
        self.dstem = nn.Conv3d(LATENT_CHANNELS, c2, 3, padding=1)
        self.dblock2 = _ResBlock(c2)
        self.up2 = nn.Conv3d(c2, c2, 3, padding=1)
        self.dblock1 = _ResBlock(c2)
        self.up1 = nn.Conv3d(c2, c1, 3, padding=1)
        self.dblock0 = _ResBlock(c1)
        self.up0 = nn.Conv3d(c1, c0, 3, padding=1)
        self.dblock_out = _ResBlock(c0)
        self.dnorm = _gn(c0)
        self.dhead = nn.Conv3d(c0, 1, 3, padding=1)

    def encode_params(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior mean and log-variance, each (B, 3, H/8, W/8, D/8)."""
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W, D), got {tuple(x.shape)}")
        h = self.stem(x)
        h = self.eblock0(self.down0(h))
        h = self.eblock1(self.down1(h))
        h = self.eblock2(self.down2(h))
        out = self.ehead(F.silu(self.enorm(h)))
        return out[:, :LATENT_CHANNELS], out[:, LATENT_CHANNELS:]

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Reconstruction without clipping; gradients intact."""
        if z.ndim != 5 or z.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"expected (B, 3, h, w, d) latent, got {tuple(z.shape)}")
        h = self.dblock2(self.dstem(z))
        h = self.dblock1(self.up2(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.dblock0(self.up1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = self.dblock_out(self.up0(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.dhead(F.silu(self.dnorm(h)))

    def forward(self, x, generator=None):
        mu, logvar = self.encode_params(x)
        z = reparameterize(mu, logvar, generator)
        return self.decode_raw(z), mu, logvar


class PatchDiscriminator3D(nn.Module):
    """PatchGAN discriminator; spectral normalization on every layer."""

    def __init__(self, channels: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        c0, c1, c2 = channels
        # last tap keeps stride 1 so even 4x4x4 gradient-check probes
        # survive both downsamplings
        self.layers = nn.ModuleList(
            [
                spectral_norm(nn.Conv3d(1, c0, 4, stride=2, padding=1)),
                spectral_norm(nn.Conv3d(c0, c1, 4, stride=2, padding=1)),
                spectral_norm(nn.Conv3d(c1, c2, 3, stride=1, padding=1)),
            ]
        )
        self.head = spectral_norm(nn.Conv3d(c2, 1, 3, padding=1))

    @property
    def n_taps(self) -> int:
        return len(self.layers)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
            taps.append(h)
        return taps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)[-1])


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator=None) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


@dataclass(frozen=True)
class LatentScale:
    """Global latent normalizer s = 1 / std(z) over sampled training latents."""

    s: float

    def __post_init__(self):
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ConfigError(f"latent scale must be a positive finite real, got {self.s}")


def encode(vae: VAE3D, x: Volume | torch.Tensor, sample: bool = False, generator=None) -> LatentGrid:
    """Encode one volume; deterministic mode returns the posterior mean."""
    if isinstance(x, Volume):
        x = x.as_tensor()
    if x.ndim == 4:
        x = x.unsqueeze(0)
    with torch.no_grad():
        mu, logvar = vae.encode_params(x)
        z = reparameterize(mu, logvar, generator) if sample else mu
    return LatentGrid(data=z[0], scale_applied=False)


def decode(vae: VAE3D, z: LatentGrid, spacing=(1.5, 1.5, 1.5)) -> Volume:
    """Decode an unscaled latent to an intensity volume, clipped to [0, 1].

    Refuses latents that still carry the global scale factor.
    """
    if z.scale_applied:
        raise ContractError("latent still carries the scale factor; unscale before decoding")
    with torch.no_grad():
        x = vae.decode_raw(z.data.unsqueeze(0))[0, 0]
    return Volume(data=x.clamp(0.0, 1.0).numpy().astype(np.float32), spacing=spacing)


def kl_term(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)), summed per sample, batch mean."""
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar must share a shape")
    per_sample = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).flatten(1).sum(dim=1)
    return per_sample.mean()


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor: SegmenterHandle | None) -> torch.Tensor:
    """Mean absolute feature difference across the extractor's tap layers.

    The reference branch runs without gradient tracking; the extractor stays
    frozen.
    """
    if extractor is None:
        raise ConfigError("perceptual loss requires a configured feature extractor")
    extractor.assert_frozen()
    with torch.no_grad():
        ref = extractor.net.encoder_features(x)
    gen = extractor.net.encoder_features(x_hat)
    terms = [F.l1_loss(g, r) for g, r in zip(gen, ref)]
    return torch.stack(terms).mean()


def feature_matching_loss(x: torch.Tensor, x_hat: torch.Tensor, disc: PatchDiscriminator3D) -> torch.Tensor:
    """(1/L) sum_l |D_l(x) - D_l(x_hat)|_1 with the real branch detached."""
    with torch.no_grad():
        ref = disc.features(x)
    gen = disc.features(x_hat)
    terms = [F.l1_loss(g, r) for g, r in zip(gen, ref)]
    return torch.stack(terms).mean()


def adversarial_losses(
    x: torch.Tensor, x_hat: torch.Tensor, disc: PatchDiscriminator3D
) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares GAN objectives on patch logits.

    Discriminator targets 1 on real and 0 on fake; the generator drives fake
    logits toward 1. Returns (generator_loss, discriminator_loss).
    """
    fake_logits = disc(x_hat)
    gen_loss = (fake_logits - 1.0).pow(2).mean()
    real_logits = disc(x)
    disc_loss = 0.5 * ((real_logits - 1.0).pow(2).mean() + disc(x_hat.detach()).pow(2).mean())
    return gen_loss, disc_loss


@dataclass(frozen=True)
class Stage1Weights:
    """Loss weights for the composite autoencoder objective."""

    beta_kl: float = 1e-6
    lambda_perc: float = 0.08
    lambda_adv: float = 0.1
    lambda_fm: float = 10.0
    lambda_seg: float = 1.0


def ae_loss_components(
    vae: VAE3D,
    disc: PatchDiscriminator3D | None,
    teacher: SegmenterHandle | None,
    extractor: SegmenterHandle | None,
    x: torch.Tensor,
    weights: Stage1Weights,
    generator=None,
    voxel_normalize: bool = False,
) -> tuple[torch.Tensor, dict[str, torch.Tensor], torch.Tensor]:
    """Compute the composite objective and its components for one batch.

    Returns (total, components, x_hat). Component tensors are unweighted;
    the total applies the weights. Terms with zero weight are skipped and
    reported as 0.
    """
    mu, logvar = vae.encode_params(x)
    z = reparameterize(mu, logvar, generator)
    x_hat = vae.decode_raw(z)

    zero = x.new_zeros(())
    comps: dict[str, torch.Tensor] = {}
    comps["recon"] = F.l1_loss(x_hat, x)
    comps["kl"] = kl_term(mu, logvar) if weights.beta_kl != 0 else zero
    comps["perceptual"] = (
        perceptual_loss(x, x_hat, extractor) if weights.lambda_perc != 0 else zero
    )
    need_disc = disc is not None and (weights.lambda_adv != 0 or weights.lambda_fm != 0)
    if need_disc:
        comps["feature_matching"] = (
            feature_matching_loss(x, x_hat, disc) if weights.lambda_fm != 0 else zero
        )
        comps["adversarial"] = (
            (disc(x_hat) - 1.0).pow(2).mean() if weights.lambda_adv != 0 else zero
        )
    else:
        comps["feature_matching"] = zero
        comps["adversarial"] = zero
    if weights.lambda_seg != 0:
        if teacher is None:
            raise ConfigError("segmentation guidance requested but no teacher provided")
        teacher.assert_frozen()
        with torch.no_grad():
            s = seg_probs(teacher, x)
        s_hat = seg_probs(teacher, x_hat)
        comps["seg_dice"] = dice_loss_probs(s, s_hat)
        comps["seg_boundary"] = boundary_loss_probs(s, s_hat, voxel_normalize=voxel_normalize)
    else:
        comps["seg_dice"] = zero
        comps["seg_boundary"] = zero

    total = (
        comps["recon"]
        + weights.beta_kl * comps["kl"]
        + weights.lambda_perc * comps["perceptual"]
        + weights.lambda_adv * comps["adversarial"]
        + weights.lambda_fm * comps["feature_matching"]
        + weights.lambda_seg * (comps["seg_dice"] + comps["seg_boundary"])
    )
    return total, comps, x_hat


def ae_finetune_step(
    vae: VAE3D,
    disc: PatchDiscriminator3D | None,
    teacher: SegmenterHandle | None,
    extractor: SegmenterHandle | None,
    batch: torch.Tensor,
    weights: Stage1Weights,
    opt_g: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer | None,
    micro_batch: int = 2,
    generator=None,
) -> dict[str, float]:
    """One alternating generator/discriminator update with gradient accumulation.

    ``batch`` is the effective batch (B, 1, H, W, D); it is split into
    micro-batches of ``micro_batch`` samples whose gradients accumulate into
    a single optimizer step. The report carries every loss component.
    """
    n = batch.shape[0]
    chunks = [batch[i : i + micro_batch] for i in range(0, n, micro_batch)]
    report: dict[str, float] = {}
    fakes = []
    opt_g.zero_grad(set_to_none=True)
    for chunk in chunks:
        frac = chunk.shape[0] / n
        total, comps, x_hat = ae_loss_components(
            vae, disc, teacher, extractor, chunk, weights, generator=generator
        )
        if not torch.isfinite(total):
            raise NumericalError(
                "non-finite autoencoder loss: "
                + ", ".join(f"{k}={v.item():.4g}" for k, v in comps.items())
            )
        (total * frac).backward()
        fakes.append(x_hat.detach())
        report["total"] = report.get("total", 0.0) + total.item() * frac
        for k, v in comps.items():
            report[k] = report.get(k, 0.0) + v.item() * frac
    opt_g.step()

    if disc is not None and opt_d is not None and weights.lambda_adv != 0:
        opt_d.zero_grad(set_to_none=True)
        d_total = 0.0
        for chunk, fake in zip(chunks, fakes):
            frac = chunk.shape[0] / n
            real_logits = disc(chunk)
            fake_logits = disc(fake)
            d_loss = 0.5 * ((real_logits - 1.0).pow(2).mean() + fake_logits.pow(2).mean())
            (d_loss * frac).backward()
            d_total += d_loss.item() * frac
        opt_d.step()
        report["disc"] = d_total
    return report


def compute_scale_factor(
    vae: VAE3D, volumes: Sequence[Volume], n: int = 1000, seed: int = 0
) -> LatentScale:
    """Latent scale s = 1/std over the elements of n sampled training latents."""
    if len(volumes) < 1:
        raise ConfigError("need at least one training volume")
    if n < 2:
        raise ConfigError("need at least 2 sampled latents")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    idx = rng.integers(0, len(volumes), size=n)
    vals = []
    for i in idx:
        z = encode(vae, volumes[int(i)], sample=True, generator=gen)
        vals.append(z.data.flatten())
    flat = torch.cat(vals)
    std = float(flat.std(correction=0))
    if std <= 0 or not math.isfinite(std):
        raise NumericalError(f"degenerate latent std {std}")
    return LatentScale(s=1.0 / std)


@dataclass(frozen=True)
class Stage1Config:
    """Training configuration for both autoencoder phases.

    The published defaults (lr 5e-6, 10 epochs, physical batch 2 with
    accumulation to 16) assume a pretrained initialization; desk runs train
    from scratch and override lr/epochs in the experiment config.
    """

    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    lr_pretrain: float = 1e-3
    lr_finetune: float = 5e-6
    lr_disc: float = 1e-4
    effective_batch: int = 16
    micro_batch: int = 2
    weights: Stage1Weights = field(default_factory=Stage1Weights)
    vae_channels: tuple[int, int, int] = (16, 32, 64)
    disc_channels: tuple[int, int, int] = (16, 32, 64)
    mixed_precision: bool = False


def train_autoencoder_phase(
    vae: VAE3D,
    disc: PatchDiscriminator3D | None,
    teacher: SegmenterHandle | None,
    extractor: SegmenterHandle | None,
    volumes: Sequence[Volume],
    weights: Stage1Weights,
    epochs: int,
    lr: float,
    cfg: Stage1Config,
    seed: int = 0,
    log=None,
) -> list[dict[str, float]]:
    """Run one training phase (pretraining or fine-tuning) over the volumes."""
    xs = torch.stack([v.as_tensor() for v in volumes])
    opt_g = torch.optim.Adam(vae.parameters(), lr=lr)
    opt_d = (
        torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc)
        if disc is not None and weights.lambda_adv != 0
        else None
    )
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    history = []
    vae.train()
    for epoch in range(epochs):
        order = rng.permutation(len(volumes))
        for i in range(0, len(order) - cfg.effective_batch + 1, cfg.effective_batch):
            idx = torch.from_numpy(order[i : i + cfg.effective_batch].copy())
            report = ae_finetune_step(
                vae, disc, teacher, extractor, xs[idx], weights,
                opt_g, opt_d, micro_batch=cfg.micro_batch, generator=gen,
            )
            history.append(report)
            if log:
                log(
                    f"ae epoch {epoch + 1}/{epochs} step {len(history)}: "
                    + " ".join(f"{k}={v:.4f}" for k, v in sorted(report.items()))
                )
    vae.eval()
    return history
