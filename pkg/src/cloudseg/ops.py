"""Forward and backward kernels for every network primitive.

Convolution is cross-correlation (no kernel flip). "same" padding is
symmetric zero padding with the extra pixel on the bottom/right, chosen so
the output spatial size is ceil(input / stride) for any dilation. The
gather/scatter between image and column layout iterates over the k*k
kernel taps (a handful of strided slice copies) instead of output
positions, which keeps both directions vectorized.

Gradients are exact adjoints of the forward computations; see gradcheck
for the finite-difference validation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, make_node
from .errors import ConfigError, ShapeError

BN_EPSILON = 1e-5
BN_DECAY = 0.9


@dataclass
class ConvParams:
    """Kernel (c_out, c_in_per_group, kh, kw) plus geometry."""

    kernel: Tensor
    bias: Tensor | None = None
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: str = "same"  # "same" | "valid"

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ConfigError(
                f"stride/dilation/groups must be positive, got "
                f"{self.stride}/{self.dilation}/{self.groups}"
            )
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    decay: float = BN_DECAY
    mode: str = "train"  # "train" | "inference"


def _same_pad(in_size: int, k: int, s: int, d: int) -> tuple[int, int, int]:
    """(pad_before, pad_after, out_size) with out = ceil(in / s)."""
    out = -(-in_size // s)
    eff = d * (k - 1) + 1
    total = max((out - 1) * s + eff - in_size, 0)
    return total // 2, total - total // 2, out


def _valid_out(in_size: int, k: int, s: int, d: int) -> int:
    eff = d * (k - 1) + 1
    if in_size < eff:
        raise ShapeError(f"input size {in_size} smaller than effective kernel {eff}")
    return (in_size - eff) // s + 1


def _conv_geometry(h, w, kh, kw, stride, dilation, padding):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding requires odd kernel dims, got {kh}x{kw}")
        pt, pb, oh = _same_pad(h, kh, stride, dilation)
        pl, pr, ow = _same_pad(w, kw, stride, dilation)
    else:
        pt = pb = pl = pr = 0
        oh = _valid_out(h, kh, stride, dilation)
        ow = _valid_out(w, kw, stride, dilation)
    return (pt, pb, pl, pr), (oh, ow)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped strided/dilated cross-correlation with optional bias."""
    n, c_in, h, w = x.shape
    c_out, c_pg, kh, kw = p.kernel.shape
    if c_in != p.groups * c_pg:
        raise ShapeError(
            f"input channels {c_in} != groups {p.groups} x kernel depth {c_pg}"
        )
    if c_out % p.groups != 0:
        raise ShapeError(f"output channels {c_out} not divisible by groups {p.groups}")
    if p.bias is not None and p.bias.shape != (c_out,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({c_out},)")
    s, d, g = p.stride, p.dilation, p.groups
    (pt, pb, pl, pr), (oh, ow) = _conv_geometry(h, w, kh, kw, s, d, p.padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c_in, kh * kw, oh, ow), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u * kw + v] = xp[
                :, :, u * d : u * d + (oh - 1) * s + 1 : s,
                v * d : v * d + (ow - 1) * s + 1 : s,
            ]
    # (n, g, c_pg*kh*kw, L) x (g, o_pg, c_pg*kh*kw)^T per group
    colsg = cols.reshape(n, g, c_pg * kh * kw, oh * ow)
    kmat = p.kernel.data.reshape(g, c_out // g, c_pg * kh * kw)
    out = np.matmul(kmat, colsg).reshape(n, c_out, oh, ow)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, c_out, 1, 1)

    kernel, bias = p.kernel, p.bias
    xp_shape = xp.shape

    def backward(gout: np.ndarray) -> None:
        g4 = gout.reshape(n, g, c_out // g, oh * ow)
        if kernel.requires_grad:
            dk = np.matmul(g4, colsg.transpose(0, 1, 3, 2)).sum(axis=0)
            kernel.accumulate_grad(dk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gout.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(kmat.transpose(0, 2, 1), g4)
            dcols = dcols.reshape(n, c_in, kh * kw, oh, ow)
            dxp = np.zeros(xp_shape, dtype=gout.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxp[
                        :, :, u * d : u * d + (oh - 1) * s + 1 : s,
                        v * d : v * d + (ow - 1) * s + 1 : s,
                    ] += dcols[:, :, u * kw + v]
            x.accumulate_grad(dxp[:, :, pt : pt + h, pl : pl + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Per-channel convolution, one kernel plane per channel.

    Deliberately a different computational route than grouped conv2d
    (per-tap multiply/accumulate, no column matrix), so the two can serve
    as oracles for each other.
    """
    n, c_in, h, w = x.shape
    c_out, c_pg, kh, kw = p.kernel.shape
    if p.groups != c_in or c_pg != 1:
        raise ShapeError(
            f"depthwise requires groups == input channels, got groups {p.groups}, "
            f"channels {c_in}, kernel depth {c_pg}"
        )
    if c_out != c_in:
        raise ShapeError(f"depthwise output channels {c_out} != input channels {c_in}")
    s, d = p.stride, p.dilation
    (pt, pb, pl, pr), (oh, ow) = _conv_geometry(h, w, kh, kw, s, d, p.padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((n, c_in, oh, ow), dtype=x.data.dtype)
    taps = p.kernel.data[:, 0]  # (c, kh, kw)
    for u in range(kh):
        for v in range(kw):
            out += taps[None, :, u, v, None, None] * xp[
                :, :, u * d : u * d + (oh - 1) * s + 1 : s,
                v * d : v * d + (ow - 1) * s + 1 : s,
            ]
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, c_out, 1, 1)

    kernel, bias = p.kernel, p.bias

    def backward(gout: np.ndarray) -> None:
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            for u in range(kh):
                for v in range(kw):
                    sl = xp[
                        :, :, u * d : u * d + (oh - 1) * s + 1 : s,
                        v * d : v * d + (ow - 1) * s + 1 : s,
                    ]
                    dk[:, 0, u, v] = (gout * sl).sum(axis=(0, 2, 3))
            kernel.accumulate_grad(dk)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gout.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=gout.dtype)
            for u in range(kh):
                for v in range(kw):
                    dxp[
                        :, :, u * d : u * d + (oh - 1) * s + 1 : s,
                        v * d : v * d + (ow - 1) * s + 1 : s,
                    ] += taps[None, :, u, v, None, None] * gout
            x.accumulate_grad(dxp[:, :, pt : pt + h, pl : pl + w])

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, backward)


def batchnorm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Channelwise batch normalization.

    Train mode normalizes by batch statistics over (n, h, w) and updates the
    running stats in place by EMA; inference mode reads the running stats.
    Variance is the biased estimator in both the normalization and the EMA.
    """
    n, c, h, w = x.shape
    for name, arr in (("gamma", p.gamma.data), ("beta", p.beta.data),
                      ("running_mean", p.running_mean), ("running_var", p.running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {arr.shape} != ({c},)")
    if p.mode not in ("train", "inference"):
        raise ConfigError(f"batchnorm mode must be train or inference, got {p.mode!r}")
    gamma, beta = p.gamma, p.beta
    cview = (1, c, 1, 1)

    if p.mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        p.running_mean *= p.decay
        p.running_mean += (1.0 - p.decay) * mean
        p.running_var *= p.decay
        p.running_var += (1.0 - p.decay) * var
        inv = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x.data - mean.reshape(cview)) * inv.reshape(cview)
        out = gamma.data.reshape(cview) * xhat + beta.data.reshape(cview)
        m = n * h * w

        def backward(gout: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((gout * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(gout.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = gout * gamma.data.reshape(cview)
                sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(cview)
                sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(cview)
                dx = (inv.reshape(cview) / m) * (m * dxhat - sum_d - xhat * sum_dx)
                x.accumulate_grad(dx)

    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (x.data - p.running_mean.reshape(cview)) * inv.reshape(cview)
        out = gamma.data.reshape(cview) * xhat + beta.data.reshape(cview)

        def backward(gout: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate_grad((gout * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta.accumulate_grad(gout.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x.accumulate_grad(gout * (gamma.data * inv).reshape(cview))

    return make_node(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(gout * (x.data > 0))

    return make_node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # clamp the exponent so float32 never overflows; sigmoid saturates anyway
    z = np.clip(x.data, -60.0, 60.0)
    out = 1.0 / (1.0 + np.exp(-z))
    out = out.astype(x.data.dtype, copy=False)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(gout * out * (1.0 - out))

    return make_node(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(gout: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(gout)
        if b.requires_grad:
            b.accumulate_grad(gout)

    return make_node(out, (a, b), backward)


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat spatial/batch mismatch: {(tn, th, tw)} vs {(n, h, w)}"
            )
    out = np.concatenate([t.data for t in xs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(gout: np.ndarray) -> None:
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(gout[:, lo:hi])

    return make_node(out, tuple(xs), backward)


@lru_cache(maxsize=128)
def _interp_matrix(in_size: int, factor: int) -> np.ndarray:
    """Row-stochastic (factor*in, in) bilinear weights, align_corners=False."""
    out_size = in_size * factor
    w = np.zeros((out_size, in_size), dtype=np.float64)
    for o in range(out_size):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        w[o, i0] += 1.0 - frac
        w[o, i1] += frac
    return w


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample spatial dims by an integer factor (sample-center convention)."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        def backward_id(gout: np.ndarray) -> None:
            if x.requires_grad:
                x.accumulate_grad(gout)
        return make_node(x.data.copy(), (x,), backward_id)

    n, c, h, w = x.shape
    wh = _interp_matrix(h, factor).astype(x.data.dtype)
    ww = _interp_matrix(w, factor).astype(x.data.dtype)
    out = np.matmul(np.matmul(wh, x.data), ww.T)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.matmul(np.matmul(wh.T, gout), ww))

    return make_node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims, keeping (n, c, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(gout / (h * w), x.shape).copy())

    return make_node(out, (x,), backward)


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Tile a (n, c, 1, 1) tensor out to (n, c, h, w)."""
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial expects (n, c, 1, 1), got {x.shape}")
    out = np.broadcast_to(x.data, (x.shape[0], x.shape[1], h, w)).copy()

    def backward(gout: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(gout.sum(axis=(2, 3), keepdims=True))

    return make_node(out, (x,), backward)
