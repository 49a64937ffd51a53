"""Residual encoder/decoder generator and PatchGAN discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_core import RngState, ShapeError, Tensor, no_grad, ops
from .tensor_core.layers import ParamSet, add_residual_block, bn, conv, residual_block

PIXEL_MAX = 255.0
GEN_OUTER_KERNEL = 7
GEN_KERNEL = 3
UP_KERNEL = 4
DISC_KERNEL = 4
LEAK = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    in_channels: int = 3
    base_channels: int = 16
    n_residual_blocks: int = 3
    n_down: int = 2
    image_size: int = 32
    pad_mode: str = "zeros"

    def __post_init__(self):
        for name in ("in_channels", "base_channels", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"generator.{name} must be positive")
        if self.n_residual_blocks < 1:
            raise ConfigError("generator.n_residual_blocks must be >= 1")
        if self.n_down < 0:
            raise ConfigError("generator.n_down must be >= 0")
        if self.image_size % (2 ** self.n_down):
            raise ConfigError(f"generator.image_size={self.image_size} not divisible by 2^{self.n_down}")
        if self.pad_mode not in ("zeros", "reflect"):
            raise ConfigError(f"generator.pad_mode must be zeros or reflect, got {self.pad_mode!r}")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.n_down


@dataclass(frozen=True)
class DiscriminatorConfig:
    """``n_layers`` counts the stride-2 convolutions; two stride-1 layers follow."""

    in_channels: int = 3
    n_layers: int = 2
    base_channels: int = 16

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ConfigError("discriminator channels must be positive")
        if self.n_layers < 1:
            raise ConfigError("discriminator.n_layers must be >= 1")

    @property
    def strides(self) -> list[int]:
        return [2] * self.n_layers + [1, 1]

    @property
    def receptive_field(self) -> int:
        """Closed form: rf = 1 + sum_l (k - 1) * prod(strides before l)."""
        rf, jump = 1, 1
        for s in self.strides:
            rf += (DISC_KERNEL - 1) * jump
            jump *= s
        return rf


PRESETS = {
    "desk": (GeneratorConfig(), DiscriminatorConfig()),
    "paper-256": (GeneratorConfig(base_channels=64, n_residual_blocks=5, n_down=2, image_size=256),
                  DiscriminatorConfig(n_layers=3, base_channels=64)),
}


@dataclass
class GeneratorParams:
    cfg: GeneratorConfig
    params: ParamSet = field(default_factory=ParamSet)
    identity: bool = False

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()


@dataclass
class DiscriminatorParams:
    cfg: DiscriminatorConfig
    params: ParamSet = field(default_factory=ParamSet)

    @property
    def receptive_field(self) -> int:
        return self.cfg.receptive_field

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()


def _channels(cfg: GeneratorConfig) -> list[int]:
    return [cfg.base_channels * 2 ** i for i in range(cfg.n_down + 1)]


def build_generator(cfg: GeneratorConfig, rng: RngState) -> GeneratorParams:
    gen = rng.generator()
    p = ParamSet()
    ch = _channels(cfg)
    p.add_conv("in", cfg.in_channels, ch[0], GEN_OUTER_KERNEL, gen)
    p.add_bn("in_bn", ch[0])
    for i in range(cfg.n_down):
        p.add_conv(f"down{i}", ch[i], ch[i + 1], GEN_KERNEL, gen)
        p.add_bn(f"down{i}_bn", ch[i + 1])
    for i in range(cfg.n_residual_blocks):
        add_residual_block(p, f"res{i}", ch[-1], gen)
    for i in range(cfg.n_down):
        cin, cout = ch[cfg.n_down - i], ch[cfg.n_down - i - 1]
        p.add_conv(f"up{i}", cin, cout, UP_KERNEL, gen, transpose=True)
        p.add_bn(f"up{i}_bn", cout)
    p.add_conv("out", ch[0], cfg.in_channels, GEN_OUTER_KERNEL, gen)
    return GeneratorParams(cfg, p)


def identity_generator(cfg: GeneratorConfig) -> GeneratorParams:
    """A generator that returns its input; the null pipeline for ablations."""
    return GeneratorParams(cfg, ParamSet(), identity=True)


def _normalize(x: Tensor) -> Tensor:
    return x * (2.0 / PIXEL_MAX) - 1.0


def generator_forward(g: GeneratorParams, x: Tensor, training: bool = True) -> Tensor:
    """Images in [0, 255] -> images in (0, 255), same shape."""
    cfg = g.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"generator expects N,{cfg.in_channels},H,W input, got {x.shape}")
    if x.shape[2] % 2 ** cfg.n_down or x.shape[3] % 2 ** cfg.n_down:
        raise ShapeError(f"generator input {x.shape[2]}x{x.shape[3]} not divisible by 2^{cfg.n_down}")
    if g.identity:
        return x
    p = g.params
    pad = GEN_OUTER_KERNEL // 2
    h = conv(p, "in", _normalize(x), padding=pad, pad_mode=cfg.pad_mode)
    h = ops.relu(bn(p, "in_bn", h, training))
    for i in range(cfg.n_down):
        h = conv(p, f"down{i}", h, stride=2, padding=1, pad_mode=cfg.pad_mode)
        h = ops.relu(bn(p, f"down{i}_bn", h, training))
    for i in range(cfg.n_residual_blocks):
        h = residual_block(h, p, f"res{i}", training, cfg.pad_mode)
    for i in range(cfg.n_down):
        h = ops.conv_transpose2d(h, p[f"up{i}.weight"], p[f"up{i}.bias"], stride=2, padding=1)
        h = ops.relu(bn(p, f"up{i}_bn", h, training))
    h = conv(p, "out", h, padding=pad, pad_mode=cfg.pad_mode)
    return ops.scaled_atan(h, PIXEL_MAX)


def build_discriminator(cfg: DiscriminatorConfig, rng: RngState) -> DiscriminatorParams:
    gen = rng.generator()
    p = ParamSet()
    cin, c = cfg.in_channels, cfg.base_channels
    for i, _stride in enumerate(cfg.strides[:-1]):
        cout = cfg.base_channels * min(2 ** i, 8)
        p.add_conv(f"c{i}", cin, cout, DISC_KERNEL, gen)
        if i > 0:
            p.add_bn(f"c{i}_bn", cout)
        cin, c = cout, cout
    p.add_conv("head", c, 1, DISC_KERNEL, gen)
    return DiscriminatorParams(cfg, p)


def discriminator_logits(d: DiscriminatorParams, x: Tensor, training: bool = True) -> Tensor:
    cfg = d.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"discriminator expects N,{cfg.in_channels},H,W input, got {x.shape}")
    p = d.params
    h = _normalize(x)
    for i, stride in enumerate(cfg.strides[:-1]):
        h = conv(p, f"c{i}", h, stride=stride, padding=1)
        if i > 0:
            h = bn(p, f"c{i}_bn", h, training)
        h = ops.leaky_relu(h, LEAK)
    return conv(p, "head", h, stride=1, padding=1)


def discriminator_forward(d: DiscriminatorParams, x: Tensor, training: bool = True) -> Tensor:
    """Patch grid of real-image probabilities, shape N,1,H',W'."""
    return ops.sigmoid(discriminator_logits(d, x, training))


def generate(g: GeneratorParams, images: np.ndarray, training: bool = False) -> np.ndarray:
    """Run the generator without recording a graph."""
    with no_grad():
        return generator_forward(g, Tensor(np.asarray(images, np.float32)), training).data


def config_dict(cfg) -> dict:
    return asdict(cfg)
