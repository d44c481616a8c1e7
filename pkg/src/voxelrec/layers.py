"""Neural layers: 2D/3D convolution, max pooling, nearest upsampling,
batch normalization, RReLU, PReLU and fully connected.

The functional ops work for any spatial rank (``x`` is ``N x C x *spatial``)
so the 2D and 3D variants share one kernel. For stride 1 the padded input
is flattened to ``C x (N * prod(padded))``; every kernel offset is then a
constant column shift, so the convolution is one GEMM per offset on the
padded lattice followed by a crop. No im2col matrix is built.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_node

RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0
PRELU_INIT = 0.25


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"conv: input size {size} with kernel {k}, stride {stride}, padding {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _offset_slices(offset, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out_sp)
    )


def conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N x C x *S) with ``weight`` (O x C x *K)."""
    nd = x.ndim - 2
    if nd < 1 or weight.ndim != nd + 2:
        raise ValueError(f"conv: input {x.shape} and weight {weight.shape} ranks disagree")
    c = x.shape[1]
    wc = weight.shape[1]
    if c != wc:
        raise ValueError(f"conv: input has {c} channels, weight expects {wc}")
    ksize = weight.shape[2:]
    out_sp = tuple(_conv_out_size(s, k, stride, padding) for s, k in zip(x.shape[2:], ksize))
    if stride == 1:
        out, grad_fn = _conv_shifted(x, weight, bias, padding, out_sp)
    else:
        out, grad_fn = _conv_strided(x, weight, bias, stride, padding, out_sp)
    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn)


def _conv_shifted(x, weight, bias, padding, out_sp):
    # Flatten the padded input to C x (N * prod(Sp)). For stride 1 every
    # kernel offset is then a constant shift along the flat axis, so each
    # offset costs one GEMM on a contiguous column window. Outputs are
    # computed on the padded lattice and cropped afterwards.
    nd = x.ndim - 2
    n, c = x.shape[:2]
    o = weight.shape[0]
    ksize = weight.shape[2:]
    xd, wd = x.data, weight.data
    dt = np.result_type(xd, wd)
    sp = tuple(s + 2 * padding for s in x.shape[2:])
    strides = [int(np.prod(sp[i + 1:])) for i in range(nd)]
    vol = int(np.prod(sp))
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    shifts = [sum(a * b for a, b in zip(off, strides)) for off in offsets]
    length = n * vol - shifts[-1]

    xp = np.zeros((c, n) + sp, dtype=dt)
    xp[(slice(None), slice(None)) + tuple(slice(padding, padding + s) for s in x.shape[2:])] = xd.transpose(
        (1, 0) + tuple(range(2, 2 + nd)))
    xf = xp.reshape(c, n * vol)
    wks = [np.ascontiguousarray(wd[(slice(None), slice(None)) + off]) for off in offsets]

    acc = np.zeros((o, n * vol), dtype=dt)
    for wk, sh in zip(wks, shifts):
        acc[:, :length] += wk @ xf[:, sh:sh + length]
    crop = (slice(None), slice(None)) + tuple(slice(0, s) for s in out_sp)
    out = acc.reshape((o, n) + sp)[crop].transpose((1, 0) + tuple(range(2, 2 + nd)))
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape((1, o) + (1,) * nd)

    def grad_fn(g):
        gfull = np.zeros((o, n) + sp, dtype=g.dtype)
        gfull[crop] = g.transpose((1, 0) + tuple(range(2, 2 + nd)))
        gf = gfull.reshape(o, n * vol)[:, :length]
        gx = gw = gb = None
        if x.requires_grad:
            gxf = np.zeros((c, n * vol), dtype=g.dtype)
            for wk, sh in zip(wks, shifts):
                gxf[:, sh:sh + length] += wk.T @ gf
            inner = (slice(None), slice(None)) + tuple(slice(padding, padding + s) for s in x.shape[2:])
            gx = gxf.reshape((c, n) + sp)[inner].transpose((1, 0) + tuple(range(2, 2 + nd)))
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = np.empty_like(wd, dtype=g.dtype)
            for off, sh in zip(offsets, shifts):
                gw[(slice(None), slice(None)) + off] = gf @ xf[:, sh:sh + length].T
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return gx, gw, gb

    return out, grad_fn


def _conv_strided(x, weight, bias, stride, padding, out_sp):
    nd = x.ndim - 2
    n = x.shape[0]
    o = weight.shape[0]
    ksize = weight.shape[2:]
    xd, wd = x.data, weight.data
    pad_spec = [(0, 0), (0, 0)] + [(padding, padding)] * nd
    xp = np.pad(xd, pad_spec) if padding else xd
    out = np.zeros((n, o) + out_sp, dtype=np.result_type(xd, wd))
    offsets = list(itertools.product(*(range(k) for k in ksize)))
    for off in offsets:
        wk = wd[(slice(None), slice(None)) + off]
        out += np.einsum("oc,nc...->no...", wk, xp[_offset_slices(off, out_sp, stride)], optimize=True)
    if bias is not None:
        out += bias.data.reshape((1, o) + (1,) * nd)

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp, dtype=g.dtype)
            for off in offsets:
                wk = wd[(slice(None), slice(None)) + off]
                gxp[_offset_slices(off, out_sp, stride)] += np.einsum("oc,no...->nc...", wk, g, optimize=True)
            inner = (slice(None), slice(None)) + tuple(slice(padding, padding + s) for s in x.shape[2:])
            gx = gxp[inner]
        if weight.requires_grad:
            gw = np.empty_like(wd, dtype=g.dtype)
            for off in offsets:
                patch = xp[_offset_slices(off, out_sp, stride)]
                gw[(slice(None), slice(None)) + off] = np.einsum("no...,nc...->oc", g, patch, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        return gx, gw, gb

    return out, grad_fn


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects N x C x H x W, got {x.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"conv3d expects N x C x D x H x W, got {x.shape}")
    return conv_nd(x, weight, bias, stride, padding)


# ---------------------------------------------------------------------------
# pooling and upsampling


def _blocked(a: np.ndarray, factor: int) -> np.ndarray:
    """View N x C x *S as N x C x S1/f x f x S2/f x f x ..."""
    shape = list(a.shape[:2])
    for s in a.shape[2:]:
        shape += [s // factor, factor]
    return a.reshape(shape)


def maxpool(x: Tensor, window: int = 2) -> tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling (stride == window).

    Returns the pooled tensor and, per output cell, the flat index of the
    winning element within its window. Ties go to the lowest index.
    """
    nd = x.ndim - 2
    for s in x.shape[2:]:
        if s % window:
            raise ValueError(f"maxpool: spatial dims {x.shape[2:]} not divisible by {window}")
    n, c = x.shape[:2]
    out_sp = tuple(s // window for s in x.shape[2:])
    blocks = _blocked(x.data, window)
    # move window axes last: N, C, o1..od, w1..wd
    perm = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
    win = blocks.transpose(perm).reshape((n, c) + out_sp + (window**nd,))
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    src_shape = x.shape

    def grad_fn(g):
        gw = np.zeros((n, c) + out_sp + (window**nd,), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape((n, c) + out_sp + (window,) * nd)
        inv = np.argsort(perm)
        return (gw.transpose(inv).reshape(src_shape),)

    return make_node(out, (x,), grad_fn), arg


def maxpool2d(x: Tensor, window: int = 2) -> tuple[Tensor, np.ndarray]:
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects N x C x H x W, got {x.shape}")
    return maxpool(x, window)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate every spatial element ``factor`` times along each axis."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    nd = x.ndim - 2
    out = x.data
    for ax in range(2, 2 + nd):
        out = np.repeat(out, factor, axis=ax)

    def grad_fn(g):
        summed = _blocked(g, factor).sum(axis=tuple(3 + 2 * i for i in range(nd)))
        return (summed,)

    return make_node(out, (x,), grad_fn)


def avgpool(x: Tensor, window: int = 2) -> Tensor:
    nd = x.ndim - 2
    axes = tuple(3 + 2 * i for i in range(nd))
    out = _blocked(x.data, window).mean(axis=axes)
    cells = window**nd

    def grad_fn(g):
        up = g
        for ax in range(2, 2 + nd):
            up = np.repeat(up, window, axis=ax)
        return (up / cells,)

    return make_node(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x *S -> N x C."""
    axes = tuple(range(2, x.ndim))
    count = math.prod(x.shape[2:])
    shape = x.shape
    out = x.data.mean(axis=axes)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)) / count, shape).copy(),)

    return make_node(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> BatchNormState:
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


def batchnorm(x: Tensor, s: BatchNormState) -> Tensor:
    """Per-channel normalization over batch and spatial axes."""
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gamma, beta = s.gamma.data.reshape(bshape), s.beta.data.reshape(bshape)
    if not s.training:
        inv = 1.0 / np.sqrt(s.running_var.reshape(bshape) + s.epsilon)
        xhat = (x.data - s.running_mean.reshape(bshape)) * inv
        out = xhat * gamma + beta

        def grad_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_node(out.astype(x.dtype, copy=False), (x, s.gamma, s.beta), grad_eval)

    if x.shape[0] < 2:
        raise ValueError("batchnorm in training mode needs a batch of at least 2")
    m = x.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + s.epsilon)
    xhat = xc * inv
    out = xhat * gamma + beta

    mom = s.momentum
    s.running_mean[...] = (1 - mom) * s.running_mean + mom * mu.reshape(c)
    s.running_var[...] = (1 - mom) * s.running_var + mom * var.reshape(c) * (m / max(m - 1, 1))

    def grad_fn(g):
        gxhat = g * gamma
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_node(out, (x, s.gamma, s.beta), grad_fn)


@dataclass
class RReluConfig:
    lower: float = RRELU_LOWER
    upper: float = RRELU_UPPER
    training: bool = True

    def __post_init__(self):
        if not 0 < self.lower <= self.upper < 1:
            raise ValueError(f"RReLU bounds must satisfy 0 < lower <= upper < 1, got {self.lower}, {self.upper}")


def rrelu(x: Tensor, c: RReluConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Randomized leaky rectifier; slopes are sampled per element in training."""
    neg = x.data < 0
    if c.training:
        if rng is None:
            raise ValueError("rrelu in training mode needs an rng")
        slope = rng.uniform(c.lower, c.upper, size=x.shape).astype(x.dtype)
        factor = np.where(neg, slope, 1).astype(x.dtype)
    else:
        factor = np.where(neg, (c.lower + c.upper) / 2, 1).astype(x.dtype)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Leaky rectifier with one learnable shared slope."""
    a = slope.data.reshape(())
    xd = x.data
    neg = xd < 0
    out = np.where(neg, a * xd, xd)

    def grad_fn(g):
        gs = np.asarray((g * xd * neg).sum(), dtype=slope.dtype).reshape(slope.shape)
        return np.where(neg, a * g, g), gs

    return make_node(out, (x, slope), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x of shape N x in, weight in x out."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ValueError(f"linear: bias shape {bias.shape} does not match {wd.shape[1]} outputs")
        out = out + bias.data

    def grad_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# parameterised layers


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base for layers holding named parameters and buffers."""

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def set_training(self, training: bool):
        pass


class Conv(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rank: int, rng, padding: int | None = None,
                 stride: int = 1, dtype=np.float32):
        if in_ch < 1 or out_ch < 1:
            raise ValueError("conv needs at least one input and output channel")
        self.rank = rank
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = in_ch * k**rank
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch) + (k,) * rank, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != self.rank + 2:
            raise ValueError(f"conv{self.rank}d got input of shape {x.shape}")
        return conv_nd(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class BatchNorm(Layer):
    def __init__(self, channels: int, dtype=np.float32):
        self.state = BatchNormState.create(channels, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.state)

    def parameters(self):
        return {"gamma": self.state.gamma, "beta": self.state.beta}

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_training(self, training):
        self.state.training = training


class RReLU(Layer):
    def __init__(self, rng, lower: float = RRELU_LOWER, upper: float = RRELU_UPPER):
        self.config = RReluConfig(lower, upper)
        self.rng = rng

    def __call__(self, x):
        return rrelu(x, self.config, self.rng)

    def set_training(self, training):
        self.config.training = training


class PReLU(Layer):
    def __init__(self, init: float = PRELU_INIT, dtype=np.float32):
        self.slope = Tensor(np.array([init], dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return prelu(x, self.slope)

    def parameters(self):
        return {"slope": self.slope}


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32):
        self.weight = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}
