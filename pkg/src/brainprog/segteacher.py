"""Frozen tissue-segmentation networks and the anatomical loss functions.

Two architecturally distinct segmenters exist: a small 3D U-Net used as the
frozen training teacher (its encoder doubles as the perceptual feature
extractor) and a dilated CNN used only for evaluation, so that evaluation
stays independent of the supervision signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LabelMap, Volume, validate_prob_map
from .errors import ConfigError, ContractError, ShapeError, TrainingError
from .io import fingerprint_arrays

N_CLASSES = 6
WM_GM_CLASSES = (1, 2)  # k=1 white matter, k=2 gray matter

TEACHER_ARCH = "tissue-unet-v1"
EVAL_ARCH = "dilated-ctx-v1"


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(4, max(1, ch // 2)), ch)


class _ConvBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = _gn(ch)
        self.conv = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


class TissueUNet(nn.Module):
    """3-level encoder-decoder with skips; ~0.15M parameters at (12, 24, 48)."""

    arch_id = TEACHER_ARCH

    def __init__(self, channels: tuple[int, int, int] = (12, 24, 48)):
        super().__init__()
        c0, c1, c2 = channels
        self.stem = nn.Conv3d(1, c0, 3, padding=1)
        self.enc0 = _ConvBlock(c0)
        self.down0 = nn.Conv3d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = _ConvBlock(c1)
        self.down1 = nn.Conv3d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = _ConvBlock(c2)
        self.up1 = nn.Conv3d(c2, c1, 3, padding=1)
        self.fuse1 = nn.Conv3d(2 * c1, c1, 3, padding=1)
        self.up0 = nn.Conv3d(c1, c0, 3, padding=1)
        self.fuse0 = nn.Conv3d(2 * c0, c0, 3, padding=1)
        self.head = nn.Conv3d(c0, N_CLASSES, 3, padding=1)

    def encoder_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale encoder taps; serves as the perceptual extractor."""
        f0 = self.enc0(self.stem(x))
        f1 = self.enc1(self.down0(f0))
        f2 = self.enc2(self.down1(f1))
        return [f0, f1, f2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f0, f1, f2 = self.encoder_features(x)
        u1 = self.up1(F.interpolate(f2, size=f1.shape[2:], mode="nearest"))
        u1 = F.silu(self.fuse1(torch.cat([u1, f1], dim=1)))
        u0 = self.up0(F.interpolate(u1, size=f0.shape[2:], mode="nearest"))
        u0 = F.silu(self.fuse0(torch.cat([u0, f0], dim=1)))
        return self.head(u0)


class DilatedSegNet(nn.Module):
    """Flat dilated CNN; no downsampling, different family from the U-Net."""

    arch_id = EVAL_ARCH

    def __init__(self, width: int = 14, dilations: Sequence[int] = (1, 2, 4, 1)):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv3d(1, width, 3, padding=1), nn.LeakyReLU(0.1)]
        for d in dilations:
            layers += [nn.Conv3d(width, width, 3, padding=d, dilation=d), nn.LeakyReLU(0.1)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv3d(width, N_CLASSES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


@dataclass(eq=False)
class SegmenterHandle:
    """A segmentation network plus its freeze state and identity."""

    net: nn.Module
    arch_id: str
    grid_shape: tuple[int, int, int]
    frozen: bool = False
    class_count: int = N_CLASSES

    def freeze(self) -> "SegmenterHandle":
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def assert_frozen(self):
        if not self.frozen:
            raise ContractError(f"segmenter {self.arch_id} must be frozen for this operation")

    def fingerprint(self) -> str:
        return fingerprint_arrays({k: v.detach().numpy() for k, v in self.net.state_dict().items()})

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def seg_probs(phi: SegmenterHandle, x: torch.Tensor) -> torch.Tensor:
    """Differentiable softmax probability maps, shape (B, 6, H, W, D)."""
    if x.ndim == 4:
        x = x.unsqueeze(0)
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W, D) input, got {tuple(x.shape)}")
    if tuple(x.shape[2:]) != phi.grid_shape:
        raise ShapeError(f"grid {tuple(x.shape[2:])} != segmenter grid {phi.grid_shape}")
    return torch.softmax(phi.net(x), dim=1)


def segment(phi: SegmenterHandle, vol: Volume) -> np.ndarray:
    """Inference-mode class probabilities for one volume, shape (6, H, W, D)."""
    with torch.no_grad():
        probs = seg_probs(phi, vol.as_tensor().unsqueeze(0))[0]
    return validate_prob_map(probs.numpy())


def segment_labels(phi: SegmenterHandle, vol: Volume) -> np.ndarray:
    """Argmax label map from the segmenter, as an int16 array."""
    return np.argmax(segment(phi, vol), axis=0).astype(np.int16)


# ---------------------------------------------------------------------------
# Anatomical losses
# ---------------------------------------------------------------------------

def dice_loss_probs(s: torch.Tensor, s_hat: torch.Tensor, delta: float = 1e-7) -> torch.Tensor:
    """Soft Dice loss over the WM and GM probability channels.

    1 - (1/2) * sum_k (2 <s_k, s_hat_k> + delta) / (|s_k| + |s_hat_k| + delta),
    averaged over the batch; 0 at perfect overlap, -> 1 at disjoint support.
    """
    if s.shape != s_hat.shape:
        raise ShapeError(f"probability maps differ in shape: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if s.ndim == 4:
        s, s_hat = s.unsqueeze(0), s_hat.unsqueeze(0)
    total = 0.0
    for k in WM_GM_CLASSES:
        sk = s[:, k].flatten(1)
        shk = s_hat[:, k].flatten(1)
        inter = (sk * shk).sum(dim=1)
        denom = sk.sum(dim=1) + shk.sum(dim=1)
        total = total + (2.0 * inter + delta) / (denom + delta)
    return (1.0 - 0.5 * total).mean()


def boundary_loss_probs(
    s: torch.Tensor,
    s_hat: torch.Tensor,
    clamp: float = 1e-12,
    voxel_normalize: bool = False,
) -> torch.Tensor:
    """Cross-entropy boundary loss over WM/GM: -(1/2) sum_k sum_i s_ki log s_hat_ki.

    Summed over voxels as written; ``voxel_normalize`` divides by the voxel
    count instead. Predictions are clamped at ``clamp`` before the log.
    """
    if s.shape != s_hat.shape:
        raise ShapeError(f"probability maps differ in shape: {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if s.ndim == 4:
        s, s_hat = s.unsqueeze(0), s_hat.unsqueeze(0)
    total = 0.0
    for k in WM_GM_CLASSES:
        term = -(s[:, k] * torch.log(s_hat[:, k].clamp_min(clamp))).flatten(1).sum(dim=1)
        if voxel_normalize:
            term = term / s[:, k].flatten(1).shape[1]
        total = total + term
    return (0.5 * total).mean()


def _teacher_pair(x: torch.Tensor, x_hat: torch.Tensor, phi: SegmenterHandle):
    phi.assert_frozen()
    with torch.no_grad():
        s = seg_probs(phi, x)
    s_hat = seg_probs(phi, x_hat)
    return s, s_hat


def dice_loss(x: torch.Tensor, x_hat: torch.Tensor, phi: SegmenterHandle) -> torch.Tensor:
    """Teacher-measured Dice loss; gradients flow into ``x_hat`` only."""
    s, s_hat = _teacher_pair(x, x_hat, phi)
    return dice_loss_probs(s, s_hat)


def boundary_loss(
    x: torch.Tensor, x_hat: torch.Tensor, phi: SegmenterHandle, voxel_normalize: bool = False
) -> torch.Tensor:
    """Teacher-measured boundary loss; gradients flow into ``x_hat`` only."""
    s, s_hat = _teacher_pair(x, x_hat, phi)
    return boundary_loss_probs(s, s_hat, voxel_normalize=voxel_normalize)


def seg_loss(
    x: torch.Tensor, x_hat: torch.Tensor, phi: SegmenterHandle, voxel_normalize: bool = False
) -> torch.Tensor:
    """Combined anatomical supervision: dice_loss + boundary_loss."""
    s, s_hat = _teacher_pair(x, x_hat, phi)
    return dice_loss_probs(s, s_hat) + boundary_loss_probs(s, s_hat, voxel_normalize=voxel_normalize)


def hard_dice(pred_labels: np.ndarray, true_labels: np.ndarray, class_id: int) -> float:
    """Binary Dice coefficient of one class between two label maps."""
    a = pred_labels == class_id
    b = true_labels == class_id
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * (a & b).sum() / denom)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegTrainConfig:
    epochs: int = 4
    lr: float = 2e-3
    batch_size: int = 4
    dice_floor: float = 0.90
    val_fraction: float = 0.1
    unet_channels: tuple[int, int, int] = (8, 16, 32)
    dilated_width: int = 14


def build_segmenter(arch: str, grid_shape: tuple[int, int, int], cfg: SegTrainConfig, seed: int) -> SegmenterHandle:
    torch.manual_seed(seed)
    if arch == TEACHER_ARCH:
        net: nn.Module = TissueUNet(cfg.unet_channels)
    elif arch == EVAL_ARCH:
        net = DilatedSegNet(cfg.dilated_width)
    else:
        raise ConfigError(f"unknown segmenter architecture {arch!r}")
    return SegmenterHandle(net=net, arch_id=arch, grid_shape=grid_shape)


def _soft_dice_all_classes(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    probs = torch.softmax(logits, dim=1)
    inter = (probs * onehot).flatten(2).sum(dim=2)
    denom = probs.flatten(2).sum(dim=2) + onehot.flatten(2).sum(dim=2)
    return 1.0 - (2.0 * inter / (denom + 1e-7)).mean()


def train_segmenter(
    scans: Sequence[tuple[Volume, LabelMap]],
    cfg: SegTrainConfig,
    arch: str = TEACHER_ARCH,
    seed: int = 0,
    log=None,
) -> SegmenterHandle:
    """Train a segmenter on labeled phantoms and return it frozen.

    The last ``val_fraction`` of scans are held out; mean WM/GM Dice on them
    must reach ``dice_floor`` or a TrainingError is raised.
    """
    if len(scans) < 10:
        raise ConfigError("need at least 10 labeled scans to train a segmenter")
    grid = scans[0][0].shape
    handle = build_segmenter(arch, grid, cfg, seed)
    n_val = max(2, int(round(cfg.val_fraction * len(scans))))
    train, val = scans[: len(scans) - n_val], scans[len(scans) - n_val :]

    xs = torch.stack([v.as_tensor() for v, _ in train])
    ys = torch.stack([torch.from_numpy(np.ascontiguousarray(l.data)).long() for _, l in train])
    opt = torch.optim.Adam(handle.net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    handle.net.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[i : i + cfg.batch_size].copy())
            x, y = xs[idx], ys[idx]
            onehot = F.one_hot(y, N_CLASSES).permute(0, 4, 1, 2, 3).float()
            logits = handle.net(x)
            loss = F.cross_entropy(logits, y) + _soft_dice_all_classes(logits, onehot)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if log:
            log(f"segmenter {arch} epoch {epoch + 1}/{cfg.epochs} loss {loss.item():.4f}")

    handle.freeze()
    dices = []
    for vol, labels in val:
        pred = segment_labels(handle, vol)
        dices.append(np.mean([hard_dice(pred, labels.data, k) for k in WM_GM_CLASSES]))
    mean_dice = float(np.mean(dices))
    if log:
        log(
            f"segmenter {arch}: {handle.parameter_count()} params, "
            f"held-out WM/GM dice {mean_dice:.4f} over {len(val)} scans"
        )
    if mean_dice < cfg.dice_floor:
        raise TrainingError(
            f"segmenter {arch} held-out WM/GM dice {mean_dice:.4f} below floor {cfg.dice_floor}"
        )
    return handle
