"""Convolution / dense layer kernels and per-layer parameter and FLOP counts.

FLOP convention: one multiply-accumulate is 2 FLOPs; a bias add, an
activation, a pooling output or an elementwise skip add is 1 FLOP per output
element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, apply_primitive, register_primitive

LAYER_KINDS = (
    "conv2d", "depthwise2d", "pointwise1x1", "dense",
    "relu", "global_avg_pool", "softmax", "add_skip",
)
PARAM_KINDS = ("conv2d", "depthwise2d", "pointwise1x1", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}", module="layers")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError(f"{self.kind}: channel counts must be positive", module="layers")
        if self.stride < 1 or self.padding < 0 or min(self.kernel) < 1:
            raise ShapeError(f"{self.kind}: invalid kernel/stride/padding", module="layers")
        if self.kind == "depthwise2d" and self.in_channels != self.out_channels:
            raise ShapeError("depthwise2d requires in_channels == out_channels", module="layers")
        if self.kind == "pointwise1x1" and (
                tuple(self.kernel) != (1, 1) or self.stride != 1 or self.padding != 0):
            raise ShapeError("pointwise1x1 requires kernel (1,1), stride 1, padding 0",
                             module="layers")


# --------------------------------------------------------------------------
# convolution kernels, registered as differentiable primitives


def _out_hw(h, w, kh, kw, stride, padding):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)])


def _check_conv(arrs, stride, padding):
    x, w = arrs
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ShapeError(f"conv2d: expected input (C,H,W) or (N,C,H,W) and weights "
                         f"(C_out,C_in,kh,kw), got {list(x.shape)} vs {list(w.shape)}")
    if x.shape[-3] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch {list(x.shape)} vs {list(w.shape)}")
    if x.shape[-2] + 2 * padding < w.shape[2] or x.shape[-1] + 2 * padding < w.shape[3]:
        raise ShapeError(f"conv2d: kernel larger than padded input {list(x.shape)} vs {list(w.shape)}")


def _check_depthwise(arrs, stride, padding):
    x, w = arrs
    if x.ndim not in (3, 4) or w.ndim != 3:
        raise ShapeError(f"depthwise_conv2d: expected input (C,H,W) or (N,C,H,W) and weights "
                         f"(C,kh,kw), got {list(x.shape)} vs {list(w.shape)}")
    if x.shape[-3] != w.shape[0]:
        raise ShapeError(f"depthwise_conv2d: channel mismatch {list(x.shape)} vs {list(w.shape)}")
    if x.shape[-2] + 2 * padding < w.shape[1] or x.shape[-1] + 2 * padding < w.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernel larger than padded input "
                         f"{list(x.shape)} vs {list(w.shape)}")


def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    return win[..., ::stride, ::stride, :, :][..., :ho, :wo, :, :]


def _conv_fwd(x, w, stride, padding):
    _, _, kh, kw = w.shape
    ho, wo = _out_hw(x.shape[-2], x.shape[-1], kh, kw, stride, padding)
    if kh == kw == 1 and stride == 1 and padding == 0:
        return np.moveaxis(np.tensordot(w[:, :, 0, 0], x, axes=([1], [x.ndim - 3])), 0, -3)
    win = _windows(_pad_hw(x, padding), kh, kw, stride, ho, wo)
    nd = win.ndim
    out = np.tensordot(win, w, axes=([nd - 5, nd - 2, nd - 1], [1, 2, 3]))
    return np.moveaxis(out, -1, -3)


def _conv_bwd(g, ins, out, stride, padding):
    x, w = ins
    _, _, kh, kw = w.shape
    ho, wo = g.shape[-2], g.shape[-1]
    batch = tuple(range(x.ndim - 3))
    if kh == kw == 1 and stride == 1 and padding == 0:
        w2 = w[:, :, 0, 0]
        dx = np.moveaxis(np.tensordot(w2, g, axes=([0], [g.ndim - 3])), 0, -3)
        gi = batch + (g.ndim - 2, g.ndim - 1)
        dw = np.tensordot(g, x, axes=(gi, gi)).reshape(w.shape)
        return dx, dw
    xp = _pad_hw(x, padding)
    win = _windows(xp, kh, kw, stride, ho, wo)
    gax = batch + (g.ndim - 2, g.ndim - 1)
    wax = batch + (win.ndim - 4, win.ndim - 3)
    dw = np.tensordot(g, win, axes=(gax, wax))
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            contrib = np.moveaxis(np.tensordot(w[:, :, i, j], g, axes=([0], [g.ndim - 3])), 0, -3)
            dxp[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    if padding:
        dxp = dxp[..., padding:-padding, padding:-padding]
    return dxp, dw


def _depthwise_fwd(x, w, stride, padding):
    _, kh, kw = w.shape
    ho, wo = _out_hw(x.shape[-2], x.shape[-1], kh, kw, stride, padding)
    xp = _pad_hw(x, padding)
    out = np.zeros(x.shape[:-2] + (ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + stride * (ho - 1) + 1:stride,
                      j:j + stride * (wo - 1) + 1:stride] * w[:, i, j, None, None]
    return out


def _depthwise_bwd(g, ins, out, stride, padding):
    x, w = ins
    _, kh, kw = w.shape
    ho, wo = g.shape[-2], g.shape[-1]
    xp = _pad_hw(x, padding)
    batch = tuple(range(x.ndim - 3))
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (..., slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            dw[:, i, j] = (g * xp[sl]).sum(axis=batch + (g.ndim - 2, g.ndim - 1))
            dxp[sl] += g * w[:, i, j, None, None]
    if padding:
        dxp = dxp[..., padding:-padding, padding:-padding]
    return dxp, dw


def _check_linear(arrs):
    x, w = arrs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: dimension mismatch {list(x.shape)} vs {list(w.shape)}")


register_primitive("conv2d", _conv_fwd, _conv_bwd, _check_conv)
# y = x W^T for x (N,in), W (out,in)
register_primitive("linear", lambda x, w: x @ w.T,
                   lambda g, ins, out: (g @ ins[1], g.T @ ins[0]), _check_linear)
register_primitive("depthwise_conv2d", _depthwise_fwd, _depthwise_bwd, _check_depthwise)


def conv2d(input, weights, bias=None, stride=1, padding=0) -> Tensor:
    """Direct 2-D cross-correlation with symmetric zero padding."""
    out = apply_primitive("conv2d", [input, weights], stride=int(stride), padding=int(padding))
    return out if bias is None else T.bias_add(out, bias)


def depthwise_conv2d(input, weights, bias=None, stride=1, padding=0) -> Tensor:
    """Per-channel convolution: output channel c reads only input channel c."""
    out = apply_primitive("depthwise_conv2d", [input, weights],
                          stride=int(stride), padding=int(padding))
    return out if bias is None else T.bias_add(out, bias)


# --------------------------------------------------------------------------
# layer application


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    kh, kw = spec.kernel
    if spec.kind == "conv2d":
        shapes = {"weight": (spec.out_channels, spec.in_channels, kh, kw)}
    elif spec.kind == "pointwise1x1":
        shapes = {"weight": (spec.out_channels, spec.in_channels, 1, 1)}
    elif spec.kind == "depthwise2d":
        shapes = {"weight": (spec.in_channels, kh, kw)}
    elif spec.kind == "dense":
        shapes = {"weight": (spec.out_channels, spec.in_channels)}
    else:
        return {}
    if spec.has_bias:
        shapes["bias"] = (spec.out_channels,)
    return shapes


def fan_in(spec: LayerSpec) -> int:
    kh, kw = spec.kernel
    return {
        "conv2d": spec.in_channels * kh * kw,
        "pointwise1x1": spec.in_channels,
        "depthwise2d": kh * kw,
        "dense": spec.in_channels,
    }[spec.kind]


def apply_layer(spec: LayerSpec, input, params=None) -> Tensor:
    """Run one layer. ``params`` maps "weight"/"bias" to tensors.

    ``input`` is a single tensor, or a pair of tensors for ``add_skip``.
    Image inputs may be (C,H,W) or batched (N,C,H,W); vectors (F,) or (N,F).
    """
    params = params or {}
    kind = spec.kind
    bias = params.get("bias") if spec.has_bias else None
    if kind in ("conv2d", "pointwise1x1"):
        return conv2d(input, params["weight"], bias, spec.stride, spec.padding)
    if kind == "depthwise2d":
        return depthwise_conv2d(input, params["weight"], bias, spec.stride, spec.padding)
    if kind == "dense":
        x = T.as_tensor(input)
        vector = len(x.dims) == 1
        if vector:
            x = T.reshape(x, (1, x.dims[0]))
        if x.dims[-1] != spec.in_channels:
            raise ShapeError(f"dense: expected {spec.in_channels} features, got {list(x.dims)}",
                             module="layers")
        y = apply_primitive("linear", [x, params["weight"]])
        if bias is not None:
            y = T.bias_add(y, bias)
        return T.reshape(y, (spec.out_channels,)) if vector else y
    if kind == "relu":
        return T.relu(input)
    if kind == "global_avg_pool":
        return T.mean(input, axis=(-2, -1))
    if kind == "softmax":
        return T.softmax(input)
    if kind == "add_skip":
        a, b = input
        a, b = T.as_tensor(a), T.as_tensor(b)
        if a.dims != b.dims:
            raise ShapeError(f"add_skip: dimension mismatch {list(a.dims)} vs {list(b.dims)}",
                             module="layers")
        return T.add(a, b)
    raise ShapeError(f"unknown layer kind {kind!r}", module="layers")


# --------------------------------------------------------------------------
# complexity accounting


def output_dims(spec: LayerSpec, input_dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in input_dims)
    kind = spec.kind
    if kind in ("conv2d", "pointwise1x1", "depthwise2d"):
        c, h, w = dims
        if c != spec.in_channels:
            raise ShapeError(f"{kind}: expected {spec.in_channels} input channels, got {c}",
                             module="layers")
        kh, kw = spec.kernel
        if h + 2 * spec.padding < kh or w + 2 * spec.padding < kw:
            raise ShapeError(f"{kind}: kernel {spec.kernel} larger than padded input {dims}",
                             module="layers")
        return (spec.out_channels,) + _out_hw(h, w, kh, kw, spec.stride, spec.padding)
    if kind == "dense":
        return (spec.out_channels,)
    if kind == "global_avg_pool":
        return (dims[0],)
    return dims


def count_params(spec: LayerSpec) -> int:
    kh, kw = spec.kernel
    b = spec.out_channels if spec.has_bias else 0
    if spec.kind == "conv2d":
        return kh * kw * spec.in_channels * spec.out_channels + b
    if spec.kind == "pointwise1x1":
        return spec.in_channels * spec.out_channels + b
    if spec.kind == "depthwise2d":
        return kh * kw * spec.in_channels + b
    if spec.kind == "dense":
        return spec.in_channels * spec.out_channels + b
    return 0


def count_flops(spec: LayerSpec, input_dims) -> int:
    out = output_dims(spec, input_dims)
    n_out = int(np.prod(out))
    kh, kw = spec.kernel
    kind = spec.kind
    if kind in ("conv2d", "pointwise1x1"):
        macs = kh * kw * spec.in_channels * spec.out_channels * out[1] * out[2]
    elif kind == "depthwise2d":
        macs = kh * kw * spec.in_channels * out[1] * out[2]
    elif kind == "dense":
        macs = spec.in_channels * spec.out_channels
    else:
        return n_out
    return 2 * macs + (n_out if spec.has_bias else 0)
