"""Differentiable structural similarity (SSIM) map and the label-retention loss built on it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tensor_core import ShapeError, Tensor, no_grad, ops


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window: str = "gaussian"
    gaussian_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and positive, got {self.window_size}")
        if self.window not in ("gaussian", "uniform"):
            raise ValueError(f"window must be 'gaussian' or 'uniform', got {self.window!r}")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if not (0 < self.k1 < 1 and 0 < self.k2 < 1):
            raise ValueError("k1 and k2 must lie in (0, 1)")
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")

    def window_1d(self) -> np.ndarray:
        """Separable window; its outer product with itself sums to 1."""
        if self.window == "uniform":
            return np.full(self.window_size, 1.0 / self.window_size)
        r = np.arange(self.window_size) - self.window_size // 2
        g = np.exp(-(r ** 2) / (2.0 * self.gaussian_sigma ** 2))
        return g / g.sum()

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _window_mean(x: Tensor, w: np.ndarray) -> Tensor:
    r = len(w) // 2
    x = ops.pad2d(x, r, "symmetric")
    x = ops.depthwise_filter(x, w[:, None])
    return ops.depthwise_filter(x, w[None, :])


def ssim_map(a: Tensor, b: Tensor, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Per-pixel SSIM of two N,C,H,W images, each channel handled independently.

    Window sums near the border see a symmetrically mirrored image.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ssim_map: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 4:
        raise ShapeError(f"ssim_map: expected N,C,H,W images, got {a.shape}")
    H, W = a.shape[2], a.shape[3]
    if cfg.window_size > H or cfg.window_size > W:
        raise ShapeError(f"ssim window {cfg.window_size} larger than image {H}x{W}")
    C = a.shape[1]
    stats = _window_mean(ops.concat([a, b, a * a, b * b, a * b], axis=1), cfg.window_1d())
    ch = lambda i: ops.channel_slice(stats, i * C, (i + 1) * C)
    mu_a, mu_b, e_aa, e_bb, e_ab = (ch(i) for i in range(5))
    mu_ab = mu_a * mu_b
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_ab
    num = (mu_ab * 2.0 + cfg.c1) * (cov * 2.0 + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def ssim_loss(pairs: Iterable[tuple[Tensor, Tensor]], cfg: SsimConfig = SsimConfig(),
              lambda_ssim: float = 0.02) -> Tensor:
    """lambda_ssim times the mean of (1 - SSIM) over every pixel of every pair."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("ssim_loss needs at least one image pair")
    if lambda_ssim < 0:
        raise ValueError("lambda_ssim must be non-negative")
    shape = pairs[0][0].shape
    total = None
    count = 0
    for a, b in pairs:
        if a.shape != shape or b.shape != shape:
            raise ShapeError("ssim_loss: all pairs must share one shape")
        s = ops.sum(ssim_map(a, b, cfg))
        total = s if total is None else total + s
        count += a.size
    return (float(count) - total) * (lambda_ssim / count)


def mean_ssim(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM of two C,H,W or N,C,H,W arrays (no gradient)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a, b = a[None], b[None]
    with no_grad():
        return float(ssim_map(Tensor(a), Tensor(b), cfg).data.mean())


def pairwise_mean_ssim(xs: Sequence[np.ndarray], zs: Sequence[np.ndarray], cfg: SsimConfig = SsimConfig(),
                       chunk: int = 64) -> np.ndarray:
    """Mean SSIM of each (x, z) pair, computed in batches."""
    out = []
    for i in range(0, len(xs), chunk):
        a = np.stack(xs[i:i + chunk]).astype(np.float64)
        b = np.stack(zs[i:i + chunk]).astype(np.float64)
        with no_grad():
            m = ssim_map(Tensor(a), Tensor(b), cfg).data
        out.extend(m.reshape(len(a), -1).mean(axis=1))
    return np.asarray(out)
