"""Named parameter sets and the composite layers built from core ops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


@dataclass
class ParamSet:
    """Ordered trainable tensors plus non-trainable buffers (batch-norm statistics)."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def add_conv(self, name: str, cin: int, cout: int, k: int, gen: np.random.Generator,
                 transpose: bool = False) -> None:
        shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
        w = gen.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        self.tensors[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.tensors[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")

    def add_bn(self, name: str, c: int) -> None:
        self.tensors[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True, name=f"{name}.gamma")
        self.tensors[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True, name=f"{name}.beta")
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": t.data for k, t in self.tensors.items()}
        out.update({f"{prefix}{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self.tensors.items():
            a = arrays[f"{prefix}{k}"]
            if a.shape != t.shape:
                raise ShapeError(f"{prefix}{k}: stored shape {a.shape} != expected {t.shape}")
            t.data = a.astype(t.dtype, copy=True)
        for k, v in self.buffers.items():
            self.buffers[k] = arrays[f"{prefix}{k}"].astype(v.dtype, copy=True)

    def astype(self, dtype) -> "ParamSet":
        """Deep copy in another precision (float64 for gradient checks)."""
        return ParamSet({k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.tensors.items()},
                        {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self) -> "ParamSet":
        return self.astype(np.float32)


def conv(params: ParamSet, name: str, x: Tensor, stride: int = 1, padding: int = 0,
         pad_mode: str = "zeros") -> Tensor:
    if padding and pad_mode != "zeros":
        x = ops.pad2d(x, padding, pad_mode)
        padding = 0
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=padding)


def bn(params: ParamSet, name: str, x: Tensor, training: bool) -> Tensor:
    return ops.batch_norm2d(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                            params.buffers[f"{name}.running_mean"], params.buffers[f"{name}.running_var"],
                            training=training)


def add_residual_block(params: ParamSet, name: str, channels: int, gen: np.random.Generator) -> None:
    params.add_conv(f"{name}.conv1", channels, channels, 3, gen)
    params.add_bn(f"{name}.bn1", channels)
    params.add_conv(f"{name}.conv2", channels, channels, 3, gen)
    params.add_bn(f"{name}.bn2", channels)


def residual_block(x: Tensor, params: ParamSet, name: str, training: bool = True,
                   pad_mode: str = "zeros") -> Tensor:
    """x + bn(conv(relu(bn(conv(x))))) with 3x3 kernels; shape preserving."""
    channels = params[f"{name}.conv1.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"residual block {name!r} expects {channels} channels, got input shape {x.shape}")
    h = conv(params, f"{name}.conv1", x, padding=1, pad_mode=pad_mode)
    h = ops.relu(bn(params, f"{name}.bn1", h, training))
    h = conv(params, f"{name}.conv2", h, padding=1, pad_mode=pad_mode)
    h = bn(params, f"{name}.bn2", h, training)
    return x + h
