"""Numeric kernels for the layer types used by PeleeNet, Pelee-SSD and MobileNet.

Tensors are float32 numpy arrays laid out as (N, C, H, W). Every kernel is a
pure function of its arguments. ``conv2d`` has a vectorised im2col path and a
naive loop form (``conv2d_naive``) that serves as its oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor or parameter dimensions are inconsistent."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, field) < 1:
                raise ShapeError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.pad < 0:
            raise ShapeError(f"ConvSpec.pad must be non-negative, got {self.pad}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.pad - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"convolution {self} on {h}x{w} input gives empty output {ho}x{wo}")
        return ho, wo


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise ShapeError("batch-norm parameter arrays differ in length")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be non-negative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) so that bn(x) == scale * x + shift."""
        var = np.asarray(self.running_var, dtype=np.float64)
        scale = np.asarray(self.gamma, dtype=np.float64) / np.sqrt(var + self.epsilon)
        shift = np.asarray(self.beta, dtype=np.float64) - np.asarray(self.running_mean, dtype=np.float64) * scale
        return scale, shift


def as_tensor(x, ndim: int = 4) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-D tensor, got shape {arr.shape}")
    return arr


def _check_conv(x: np.ndarray, weights: np.ndarray, bias, spec: ConvSpec):
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weights.shape)} != expected {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or np.shape(bias) != (spec.out_channels,):
            raise ShapeError(f"bias must have shape ({spec.out_channels},), got {np.shape(bias)}")
    elif bias is not None:
        raise ShapeError("bias given for a conv declared without bias")
    return spec.output_hw(x.shape[2], x.shape[3])


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (N, C, H, W) into (N, C*kh*kw, Ho*Wo); rows are channel-major, then kernel row, then column."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = _pad(x, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            cols[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x, weights, bias: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with symmetric zero padding, via im2col and a matrix product."""
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float32)
    ho, wo = _check_conv(x, weights, bias, spec)
    n = x.shape[0]
    g = spec.groups
    cin_g = spec.in_channels // g
    cout_g = spec.out_channels // g

    if spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and spec.pad == 0 and g == 1:
        # pointwise fast path: no unfolding needed
        out = np.matmul(weights.reshape(spec.out_channels, -1), x.reshape(n, spec.in_channels, -1))
    elif g == 1:
        cols = im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
        out = np.matmul(weights.reshape(spec.out_channels, -1), cols)
    elif cin_g == 1 and cout_g == 1:
        # depthwise: per-channel weighted sum of shifted views
        xp = _pad(x, spec.pad)
        out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.float32)
        s = spec.stride
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                window = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
                out += window * weights[None, :, 0, i, j, None, None]
    else:
        cols = im2col(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad)
        cols = cols.reshape(n, g, cin_g * spec.kernel_h * spec.kernel_w, ho * wo)
        wg = weights.reshape(g, cout_g, -1)
        out = np.matmul(wg[None], cols)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if spec.has_bias:
        out = out + np.asarray(bias, dtype=np.float32)[None, :, None, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def conv2d_naive(x, weights, bias: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Direct seven-loop convolution. Slow; used as the oracle for ``conv2d``.

    Each output element accumulates in float64, channel-major, then kernel row,
    then kernel column.
    """
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float32)
    ho, wo = _check_conv(x, weights, bias, spec)
    n, _, h, w = x.shape
    cin_g = spec.in_channels // spec.groups
    cout_g = spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.float32)
    for b in range(n):
        for co in range(spec.out_channels):
            g = co // cout_g
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ky in range(spec.kernel_h):
                            iy = oy * spec.stride + ky - spec.pad
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(spec.kernel_w):
                                ix = ox * spec.stride + kx - spec.pad
                                if 0 <= ix < w:
                                    acc += float(x[b, g * cin_g + ci, iy, ix]) * float(weights[co, ci, ky, kx])
                    if spec.has_bias:
                        acc += float(bias[co])
                    out[b, co, oy, ox] = acc
    return out


def batch_norm_infer(x, params: BnParams) -> np.ndarray:
    x = as_tensor(x)
    if params.channels != x.shape[1]:
        raise ShapeError(f"batch norm has {params.channels} channels, input has {x.shape[1]}")
    scale, shift = params.scale_shift()
    out = x * scale.astype(np.float32)[None, :, None, None] + shift.astype(np.float32)[None, :, None, None]
    return out.astype(np.float32, copy=False)


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), np.float32(0))


def pool_output_size(size: int, kernel: int, stride: int, pad: int = 0, ceil_mode: bool = False) -> int:
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeError(f"pool kernel {kernel} larger than padded extent {size + 2 * pad}")
    out = (math.ceil(span / stride) if ceil_mode else span // stride) + 1
    # a ceil-mode window must start inside the input (or left padding)
    if ceil_mode and (out - 1) * stride >= size + pad:
        out -= 1
    return out


def pool2d(x, mode: str, kernel: int, stride: int, ceil_mode: bool = False, pad: int = 0) -> np.ndarray:
    """Max or average pooling. Average divides by the number of in-bounds cells in each window."""
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pool mode {mode!r}")
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho = pool_output_size(h, kernel, stride, pad, ceil_mode)
    wo = pool_output_size(w, kernel, stride, pad, ceil_mode)
    # pad far enough on the bottom/right to cover every window
    extra_h = max(0, (ho - 1) * stride + kernel - h - pad)
    extra_w = max(0, (wo - 1) * stride + kernel - w - pad)
    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (pad, extra_h), (pad, extra_w)), constant_values=fill)
    if mode == "max":
        out = np.full((n, c, ho, wo), -np.inf, dtype=np.float32)
        for i in range(kernel):
            for j in range(kernel):
                np.maximum(out, xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride], out=out)
        return out
    out = np.zeros((n, c, ho, wo), dtype=np.float32)
    for i in range(kernel):
        for j in range(kernel):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    ys = np.arange(ho) * stride - pad
    xs = np.arange(wo) * stride - pad
    count_y = np.minimum(ys + kernel, h) - np.maximum(ys, 0)
    count_x = np.minimum(xs + kernel, w) - np.maximum(xs, 0)
    out /= (count_y[:, None] * count_x[None, :]).astype(np.float32)
    return out


def global_avg_pool(x) -> np.ndarray:
    x = as_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ShapeError("concat needs at least one input")
    tensors = [as_tensor(t) for t in inputs]
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat spatial mismatch: {tensors[0].shape} vs {t.shape}")
    if len(tensors) == 1:
        return tensors[0]
    return np.concatenate(tensors, axis=1)


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def linear(x, weights, bias: Optional[np.ndarray]) -> np.ndarray:
    x = as_tensor(x)
    weights = np.asarray(weights, dtype=np.float32)
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"linear expects 1x1 spatial input, got {h}x{w}")
    if weights.ndim != 2 or weights.shape[1] != c:
        raise ShapeError(f"linear weights {weights.shape} incompatible with {c} input features")
    out = x.reshape(n, c) @ weights.T
    if bias is not None:
        if np.shape(bias) != (weights.shape[0],):
            raise ShapeError(f"linear bias shape {np.shape(bias)} != ({weights.shape[0]},)")
        out = out + np.asarray(bias, dtype=np.float32)
    return out.reshape(n, weights.shape[0], 1, 1).astype(np.float32, copy=False)


def softmax(x, axis: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
