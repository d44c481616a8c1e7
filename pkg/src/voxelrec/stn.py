"""Spatial transformer: localisation net, affine grid and bilinear sampler.

Coordinates are normalized to [-1, 1] with the extreme values sitting on
the centres of the corner pixels, so an identity transform samples every
pixel exactly. Samples falling outside the input read zeros.
"""

from __future__ import annotations

import numpy as np

from .layers import BatchNorm, Conv, Layer, global_avg_pool, linear, maxpool
from .tensor import Tensor, make_node

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _target_coords(out_h: int, out_w: int, dtype) -> np.ndarray:
    """Homogeneous target grid, shape (H*W, 3), rows ``(x_t, y_t, 1)``."""
    xs = np.linspace(-1.0, 1.0, out_w) if out_w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, out_h) if out_h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel(), np.ones(out_h * out_w)], axis=1).astype(dtype)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Map each target point through the 2 x 3 matrix in ``theta``.

    ``theta`` is N x 6 (row-major ``[t11, t12, t13, t21, t22, t23]``);
    the result is N x H x W x 2 holding ``(x_s, y_s)``.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("affine_grid output size must be positive")
    if theta.ndim != 2 or theta.shape[1] != 6:
        raise ValueError(f"theta must be N x 6, got {theta.shape}")
    n = theta.shape[0]
    tgt = _target_coords(out_h, out_w, theta.dtype)
    mats = theta.data.reshape(n, 2, 3)
    src = np.einsum("pk,njk->npj", tgt, mats)

    def grad_fn(g):
        g2 = g.reshape(n, out_h * out_w, 2)
        return (np.einsum("npj,pk->njk", g2, tgt).reshape(n, 6),)

    return make_node(src.reshape(n, out_h, out_w, 2), (theta,), grad_fn)


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample N x C x H x W input at normalized grid points (N x H' x W' x 2)."""
    n, c, h, w = x.shape
    if grid.shape[0] != n or grid.ndim != 4 or grid.shape[3] != 2:
        raise ValueError(f"grid {grid.shape} does not match input batch {x.shape}")
    oh, ow = grid.shape[1:3]
    gd = grid.data
    # pixel-space coordinates
    px = (gd[..., 0] + 1.0) * (w - 1) / 2.0
    py = (gd[..., 1] + 1.0) * (h - 1) / 2.0
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    fx = px - x0
    fy = py - y0

    flat = x.data.reshape(n, c, h * w)

    def corner(yi, xi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, yi * w + xi, 0)
        # vals: N x C x H' x W'
        vals = np.take_along_axis(flat, idx.reshape(n, 1, -1).repeat(c, axis=1), axis=2).reshape(n, c, oh, ow)
        vals = vals * valid[:, None]
        return idx, valid, vals

    corners = [corner(y0, x0), corner(y0, x1), corner(y1, x0), corner(y1, x1)]
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    out = sum(wt[:, None] * cv[2] for wt, cv in zip(wts, corners))

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            # one bincount over (batch, channel, pixel) flattened indices
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            gflat = np.zeros(n * c * h * w, dtype=np.float64)
            for wt, (idx, valid, _) in zip(wts, corners):
                contrib = (g * (wt * valid)[:, None]).reshape(n, c, -1)
                keys = base + idx.reshape(n, 1, -1)
                gflat += np.bincount(keys.ravel(), weights=contrib.ravel(), minlength=gflat.size)
            gx = gflat.reshape(n, c, h, w).astype(g.dtype, copy=False)
        gg = None
        if grid.requires_grad:
            v00, v01, v10, v11 = (cv[2] for cv in corners)
            # d out / d fx and d fy, summed over channels against g
            dfx = ((v01 - v00) * (1 - fy)[:, None] + (v11 - v10) * fy[:, None])
            dfy = ((v10 - v00) * (1 - fx)[:, None] + (v11 - v01) * fx[:, None])
            gpx = (g * dfx).sum(axis=1)
            gpy = (g * dfy).sum(axis=1)
            gg = np.stack([gpx * (w - 1) / 2.0, gpy * (h - 1) / 2.0], axis=-1)
        return gx, gg

    return make_node(out.astype(np.result_type(x.dtype, grid.dtype), copy=False), (x, grid), grad_fn)


class Localisation(Layer):
    """Conv stack + global average pool + linear head regressing 6 values.

    ``plan`` lists ``(kernel, padding, pool_after)`` per conv layer.
    """

    STN1 = ((5, 2, True), (5, 2, True), (5, 2, True), (5, 2, False))
    STN2 = ((5, 2, False), (5, 1, True), (6, 2, True))

    def __init__(self, in_ch: int, plan, rng, channels: int = 16, batchnorm: bool = True, dtype=np.float32):
        self.plan = tuple(plan)
        self.convs = []
        self.norms = []
        ch = in_ch
        for k, pad, _ in self.plan:
            self.convs.append(Conv(ch, channels, k, 2, rng, padding=pad, dtype=dtype))
            self.norms.append(BatchNorm(channels, dtype) if batchnorm else None)
            ch = channels
        self.head_weight = Tensor(np.zeros((channels, 6), dtype=dtype), requires_grad=True)
        self.head_bias = Tensor(IDENTITY_THETA.astype(dtype), requires_grad=True)

    def output_size(self, size: int) -> int:
        for k, pad, pool in self.plan:
            size = size + 2 * pad - k + 1
            if pool:
                if size % 2:
                    raise ValueError(f"localisation: feature size {size} cannot be pooled by 2")
                size //= 2
        if size < 1:
            raise ValueError("localisation: input too small for the conv plan")
        return size

    def __call__(self, x: Tensor) -> Tensor:
        for conv, norm, (_, _, pool) in zip(self.convs, self.norms, self.plan):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            if pool:
                x, _ = maxpool(x, 2)
        return linear(global_avg_pool(x), self.head_weight, self.head_bias)

    def parameters(self):
        params = {}
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            for k, v in conv.parameters().items():
                params[f"conv{i}.{k}"] = v
            if norm is not None:
                for k, v in norm.parameters().items():
                    params[f"bn{i}.{k}"] = v
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def buffers(self):
        return {f"bn{i}.{k}": v for i, norm in enumerate(self.norms) if norm is not None
                for k, v in norm.buffers().items()}

    def set_training(self, training):
        for norm in self.norms:
            if norm is not None:
                norm.set_training(training)


def localisation_forward(x: Tensor, net: Localisation) -> Tensor:
    return net(x)


class SpatialTransformer(Layer):
    """Learned down-sampling: output grid is half the input resolution."""

    def __init__(self, in_ch: int, in_size: int, plan, rng, channels: int = 16, batchnorm: bool = True,
                 dtype=np.float32):
        if in_size % 2:
            raise ValueError("spatial transformer input size must be even")
        self.in_size = in_size
        self.out_size = in_size // 2
        self.loc = Localisation(in_ch, plan, rng, channels, batchnorm, dtype)
        self.loc.output_size(in_size)
        self.last_theta: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2:] != (self.in_size, self.in_size):
            raise ValueError(f"spatial transformer expects {self.in_size}x{self.in_size} input, got {x.shape[2:]}")
        theta = self.loc(x)
        self.last_theta = theta.data
        grid = affine_grid(theta, self.out_size, self.out_size)
        return bilinear_sample(x, grid)

    def parameters(self):
        return self.loc.parameters()

    def buffers(self):
        return self.loc.buffers()

    def set_training(self, training):
        self.loc.set_training(training)
