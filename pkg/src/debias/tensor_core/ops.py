"""Differentiable operations over :class:`Tensor`.

Elementwise binary ops require equal shapes (or a Python scalar on one side);
there is no general broadcasting.
"""

from __future__ import annotations

import builtins
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tensor, make_result

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + a.dtype.type(c), "add", (a,), lambda g: (g,))
    _check_same("add", a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same("sub", a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.dtype.type(float(b))
        return make_result(a.data * c, "mul", (a,), lambda g: (g * c,))
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        gb = g / bd
        return gb, -gb * out

    return make_result(out, "div", (a, b), rule)


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    ad = a.data
    out = ad ** p

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * ad ** (p - 1.0),)

    return make_result(out, "pow", (a,), rule)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    ad = a.data
    return make_result(np.abs(ad), "abs", (a,), lambda g: (g * np.sign(ad),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = x.dtype.type(slope)
    factor = np.where(x.data > 0, x.dtype.type(1), s)
    return make_result(x.data * factor, "leaky_relu", (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = out.astype(x.dtype, copy=False)
    return make_result(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def scaled_atan(x: Tensor, pixel_max: float = 255.0) -> Tensor:
    """Map reals into (0, pixel_max) via pixel_max * (atan(x)/pi + 1/2)."""
    if pixel_max <= 0:
        raise ValueError("pixel_max must be positive")
    xd = x.data
    out = (pixel_max * (np.arctan(xd) / np.pi + 0.5)).astype(x.dtype, copy=False)
    scale = pixel_max / np.pi

    def rule(g):
        return (g * (scale / (1.0 + xd * xd)).astype(x.dtype, copy=False),)

    return make_result(out, "scaled_atan", (x,), rule)


def log(x: Tensor, eps: float = 1e-7) -> Tensor:
    """Natural log with inputs clamped into [eps, 1 - eps].

    Meant for probabilities. Exact 0 or 1 triggers a warning; the clamped
    region passes no gradient.
    """
    xd = x.data
    if np.any(xd <= 0) or np.any(xd >= 1):
        warnings.warn("probability hit 0 or 1; clamping before log", RuntimeWarning, stacklevel=2)
    lo = x.dtype.type(eps)
    hi = x.dtype.type(1.0) - lo
    clamped = np.clip(xd, lo, hi)
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.log(clamped), "log", (x,), lambda g: (g * inside / clamped,))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=dtype)
    return make_result(out, "sum", (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    shape, dtype, n = x.shape, x.dtype, x.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=dtype)
    return make_result(out, "mean", (x,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), rule)


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Channels lo:hi of an N,C,... tensor."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, lo:hi] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, lo:hi]), "channel_slice", (x,), rule)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the two spatial axes of an N,C,H,W tensor.

    ``mode`` is ``zeros``, ``reflect`` (edge not repeated) or ``symmetric``
    (edge repeated).
    """
    if pad == 0:
        return x
    H, W = x.shape[2], x.shape[3]
    np_mode = {"zeros": "constant", "reflect": "reflect", "symmetric": "symmetric"}[mode]
    if mode != "zeros" and pad > (H - 1 if mode == "reflect" else H):
        raise ShapeError(f"pad {pad} too large for {mode} padding of {H}x{W}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=np_mode)
    if mode == "zeros":
        return make_result(out, "pad2d", (x,), lambda g: (g[:, :, pad:-pad, pad:-pad],))

    idx_h = _pad_index(H, pad, np_mode)
    idx_w = _pad_index(W, pad, np_mode)

    def rule(g):
        gh = np.zeros(g.shape[:2] + (H, g.shape[3]), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), idx_h), g)
        gx = np.zeros(g.shape[:2] + (H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), idx_w), gh)
        return (gx,)

    return make_result(out, "pad2d", (x,), rule)


def _pad_index(n: int, pad: int, mode: str) -> np.ndarray:
    return np.pad(np.arange(n), pad, mode=mode)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, kh, kw


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """N,C,Hp,Wp -> (C*kh*kw, N*Ho*Wo) patch matrix, channel-major."""
    N, C = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(C * kh * kw, N * Ho * Wo)


def _col2im(cols: np.ndarray, C: int, kh: int, kw: int, N: int, Ho: int, Wo: int,
            Hp: int, Wp: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into a C,N,Hp,Wp buffer."""
    cols = cols.reshape(C, kh, kw, N, Ho, Wo)
    out = np.zeros((C, N, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j]
    return out


def _to_cm(a: np.ndarray) -> np.ndarray:
    """N,C,H,W -> contiguous (C, N*H*W)."""
    N, C, H, W = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(C, N * H * W)


def _from_cm(a2: np.ndarray, N: int, H: int, W: int) -> np.ndarray:
    """(C, N*H*W) -> contiguous N,C,H,W."""
    return np.ascontiguousarray(a2.reshape(-1, N, H, W).transpose(1, 0, 2, 3))


# Stride-1 convolutions with at least this many input channels skip the patch
# matrix: on the flattened padded NHWC grid every kernel tap is a contiguous
# row offset, so the convolution is a sum of kh*kw plain matmuls.
IMPLICIT_MIN_CHANNELS = 8


def _flat_nhwc(a: np.ndarray, pad: int, slack: int) -> np.ndarray:
    """N,C,H,W -> (N*Hp*Wp + slack, C), zero padded, rows in N,Hp,Wp order."""
    N, C, H, W = a.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    flat = np.zeros((N * Hp * Wp + slack, C), dtype=a.dtype)
    flat[:N * Hp * Wp].reshape(N, Hp, Wp, C)[:, pad:pad + H, pad:pad + W] = a.transpose(0, 2, 3, 1)
    return flat


def _check_conv(op, x: Tensor, w: Tensor, b: Tensor | None, cin: int, cout: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be N,C,H,W, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"{op}: weight must be 4-D, got shape {w.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"{op}: input channels (dim 1) = {x.shape[1]} but weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{op}: bias shape {b.shape} != ({cout},)")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; weight is Cout, Cin, kH, kW."""
    cout, cin, kh, kw = weight.shape
    _check_conv("conv2d", x, weight, bias, cin, cout)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    N, _, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {Hp}")
    if kw > Wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if stride == 1 and cin >= IMPLICIT_MIN_CHANNELS:
        return _conv2d_implicit(x, weight, bias, padding, Ho, Wo)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    w2 = weight.data.reshape(cout, -1)
    out2 = w2 @ cols
    if bias is not None:
        out2 += bias.data[:, None]
    out = _from_cm(out2, N, Ho, Wo)

    def rule(g):
        gx = gw = gb = None
        g2 = _to_cm(g)
        if x.requires_grad:
            buf = _col2im(w2.T @ g2, cin, kh, kw, N, Ho, Wo, Hp, Wp, stride)
            if padding:
                buf = buf[:, :, padding:padding + H, padding:padding + W]
            gx = np.ascontiguousarray(buf.transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, rule)


def _conv2d_implicit(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int, Ho: int, Wo: int) -> Tensor:
    cout, cin, kh, kw = weight.shape
    N, _, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    L = N * Hp * Wp
    slack = (kh - 1) * Wp + kw - 1
    xf = _flat_nhwc(x.data, padding, slack)
    wt = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # kh, kw, Cin, Cout
    full = np.zeros((L, cout), dtype=xf.dtype)
    for i in range(kh):
        for j in range(kw):
            o = i * Wp + j
            full += xf[o:o + L] @ wt[i, j]
    if bias is not None:
        full += bias.data
    out = np.ascontiguousarray(full.reshape(N, Hp, Wp, cout)[:, :Ho, :Wo].transpose(0, 3, 1, 2))

    def rule(g):
        gx = gw = gb = None
        gf = np.zeros((N, Hp, Wp, cout), dtype=g.dtype)
        gf[:, :Ho, :Wo] = g.transpose(0, 2, 3, 1)
        gf = gf.reshape(L, cout)
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for i in range(kh):
                for j in range(kw):
                    o = i * Wp + j
                    gxf[o:o + L] += gf @ wt[i, j].T
            gx = np.ascontiguousarray(
                gxf[:L].reshape(N, Hp, Wp, cin)[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gwt = np.empty_like(wt)
            for i in range(kh):
                for j in range(kw):
                    o = i * Wp + j
                    gwt[i, j] = xf[o:o + L].T @ gf
            gw = np.ascontiguousarray(gwt.transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, rule)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` (fractionally strided convolution).

    Weight is Cin, Cout, kH, kW, i.e. the same array a conv2d going the
    other way would use. Output side is (H - 1) * stride - 2 * padding + kH.
    """
    cin, cout, kh, kw = weight.shape
    _check_conv("conv_transpose2d", x, weight, bias, cin, cout)
    if stride < 1 or padding < 0:
        raise ValueError("conv_transpose2d needs stride >= 1 and padding >= 0")
    N, _, H, W = x.shape
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves empty output")
    w2 = weight.data.reshape(cin, -1)
    x2 = _to_cm(x.data)
    full = _col2im(w2.T @ x2, cout, kh, kw, N, H, W, Hf, Wf, stride)
    out = full[:, :, padding:padding + Ho, padding:padding + Wo]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3), dtype=x.dtype)

    def rule(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gp, kh, kw, stride, H, W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _from_cm(w2 @ cols, N, H, W)
        if weight.requires_grad:
            gw = (x2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv_transpose2d", inputs, rule)


def depthwise_filter(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Valid 2-D correlation of every channel with one fixed kernel (no gradient to the kernel)."""
    kh, kw = kernel.shape
    N, C, H, W = x.shape
    if kh > H or kw > W:
        raise ShapeError(f"filter {kernel.shape} larger than image {H}x{W}")
    k = kernel.astype(x.dtype)
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    out = np.ascontiguousarray(np.tensordot(win, k, axes=([4, 5], [0, 1])), dtype=x.dtype)
    Ho, Wo = out.shape[2], out.shape[3]

    def rule(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + Ho, j:j + Wo] += k[i, j] * g
        return (gx,)

    return make_result(out, "depthwise_filter", (x,), rule)


# ---------------------------------------------------------------------------
# normalization, pooling, dense
# ---------------------------------------------------------------------------

class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (a single value per channel)."""


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
                 running_var: np.ndarray | None = None, training: bool = True,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers
    (if given) are updated in place with ``momentum``; in eval mode the
    running buffers are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d: input must be N,C,H,W, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm2d: channel dim is {C} but gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    dt = x.dtype
    if training:
        if m == 1:
            raise DegenerateBatchError("batch_norm2d: N*H*W == 1 in train mode")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
        if running_var is not None:
            running_var *= 1 - momentum
            running_var += momentum * (var * m / (m - 1)).astype(running_var.dtype)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch_norm2d needs running statistics")
        mu = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    gd, bd = gamma.data, beta.data
    out = (xhat * gd[None, :, None, None] + bd[None, :, None, None]).astype(dt, copy=False)

    def rule(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            gx = (inv_std / m)[None, :, None, None] * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx.astype(dt, copy=False), gg, gb

    return make_result(out, "batch_norm2d", (x, gamma, beta), rule)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (kernel == stride); trailing rows/cols are dropped."""
    N, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise ShapeError(f"max_pool2d: input {H}x{W} smaller than pool {size}")
    xc = x.data[:, :, :Ho * size, :Wo * size]
    blocks = xc.reshape(N, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * size, Wo * size)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :Ho * size, :Wo * size] = gb
        return (gx,)

    return make_result(np.ascontiguousarray(out), "max_pool2d", (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, with x of shape N, Din and weight Dout, Din."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.astype(x.dtype, copy=False)

    def rule(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "linear", inputs, rule)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of N, K logits against integer labels."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    n = z.shape[0]
    loss = np.asarray(-logp[np.arange(n), labels].mean(), dtype=z.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p).astype(z.dtype, copy=False),

    return make_result(loss, "cross_entropy", (logits,), rule)


def all_finite(*tensors: Tensor) -> bool:
    return builtins.all(bool(np.all(np.isfinite(t.data))) for t in tensors)


__all__ = [
    "NonFiniteError", "DegenerateBatchError", "add", "sub", "neg", "mul", "div", "power", "abs",
    "relu", "leaky_relu", "sigmoid", "scaled_atan", "log", "sum", "mean", "reshape", "concat", "channel_slice",
    "pad2d", "conv2d", "conv_transpose2d", "depthwise_filter", "batch_norm2d", "max_pool2d",
    "linear", "cross_entropy", "all_finite",
]
