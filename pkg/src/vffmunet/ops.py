"""Neural-network layer primitives with forward and backward rules.

Convolution is cross-correlation (no kernel flip) with zero padding; all
"same" convolutions in this project use padding (k-1)/2.  Bilinear resizing
uses the align-corners convention throughout: the source coordinate of output
index i is i*(h-1)/(H-1), so endpoints are preserved exactly and resizing to
the same size is the identity.  That convention is what makes the factored
attention path in ``attention`` an exact refactoring of the naive one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeMismatchError
from .tensor import Tensor, _as_tensor, apply_op, reduce_max, reduce_mean

# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """Weights for a 2D convolution: weight (C_out, C_in, k, k), bias (C_out,)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int | None = None  # None -> same padding (k-1)//2

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[-1] != self.weight.shape[-2]:
            raise ShapeMismatchError(f"conv weight must be (Cout, Cin, k, k), got {self.weight.shape}")
        k = self.weight.shape[-1]
        if k % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {k}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError("bias shape must be (Cout,)")
        if self.padding is None:
            self.padding = (k - 1) // 2

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BNState:
    """Per-channel batch-norm parameters and running statistics.

    ``running_mean``/``running_var`` are plain numpy buffers mutated in place
    during training (training-thread only); None means never initialized, in
    which case eval mode is a contract error.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ContractError("epsilon must be positive")
        if self.running_var is not None and np.any(self.running_var < 0):
            raise ContractError("running variance must be non-negative")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*k*k, out_h*out_w) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, out_h, out_w),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(n, c * k * k, out_h * out_w)


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """2D cross-correlation of (N, C_in, H, W) with zero padding."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects (N, C, H, W), got {x.shape}")
    c_out, c_in, k, _ = params.weight.shape
    if x.shape[1] != c_in:
        raise ShapeMismatchError(f"input has {x.shape[1]} channels, weights expect {c_in}")
    stride, pad = params.stride, params.padding
    h, w = x.shape[2], x.shape[3]
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"kernel {k} does not fit input {h}x{w}")

    def fwd(xv, wv, bv):
        n = xv.shape[0]
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
        cols = _im2col(xp, k, stride, out_h, out_w)
        w2 = wv.reshape(c_out, c_in * k * k)
        out = np.matmul(w2, cols) + bv[:, None]
        return np.ascontiguousarray(out.reshape(n, c_out, out_h, out_w))

    def bwd(g, ins, out):
        xv, wv, bv = ins
        n = xv.shape[0]
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
        cols = _im2col(xp, k, stride, out_h, out_w)
        g2 = g.reshape(n, c_out, out_h * out_w)
        dw = np.einsum("nop,nkp->ok", g2, cols, optimize=True).reshape(wv.shape)
        db = g2.sum(axis=(0, 2))
        w2 = wv.reshape(c_out, c_in * k * k)
        dcols = np.matmul(w2.T, g2).reshape(n, c_in, k, k, out_h, out_w)
        hp, wp = h + 2 * pad, w + 2 * pad
        dxp = np.zeros((n, c_in, hp, wp), dtype=xv.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + out_h * stride : stride,
                    kj : kj + out_w * stride : stride] += dcols[:, :, ki, kj]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return [np.ascontiguousarray(dx), dw, db]

    return apply_op("conv2d", [x, params.weight, params.bias], fwd, bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 mean pooling over the trailing two axes; dims must be even."""
    x = _as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ContractError(f"avg_pool2d requires even spatial dims, got {h}x{w}")
    lead = x.shape[:-2]

    def fwd(xv):
        return np.ascontiguousarray(
            xv.reshape(lead + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))
        )

    def bwd(g, ins, out):
        gx = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * np.asarray(0.25, dtype=g.dtype)
        return [np.ascontiguousarray(gx)]

    return apply_op("avg_pool2d", [x], fwd, bwd)


def _pool_bounds(length: int, target: int) -> np.ndarray:
    return np.array([(j * length) // target for j in range(target + 1)], dtype=np.int64)


def adaptive_avg_pool_seq(x: Tensor, target: int, axis: int = -2) -> Tensor:
    """Mean-pool a sequence axis down to ``target`` bins.

    Bin j covers indices [floor(j*L/target), floor((j+1)*L/target)).  When the
    axis is already no longer than ``target`` the input passes through
    unchanged.
    """
    if target < 1:
        raise ContractError("target length must be >= 1")
    x = _as_tensor(x)
    ax = axis if axis >= 0 else axis + x.ndim
    length = x.shape[ax]
    if length <= target:
        return x
    bounds = _pool_bounds(length, target)
    counts = np.diff(bounds)
    shape = [1] * x.ndim
    shape[ax] = target
    counts_b = counts.reshape(shape)

    def fwd(xv):
        sums = np.add.reduceat(xv, bounds[:-1], axis=ax)
        return np.ascontiguousarray(sums / counts_b)

    def bwd(g, ins, out):
        return [np.ascontiguousarray(np.repeat(g / counts_b, counts, axis=ax))]

    return apply_op("adaptive_avg_pool_seq", [x], fwd, bwd)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Per-pixel mean or max over the channel axis of (..., C, H, W)."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeMismatchError(f"channel_pool expects (..., C, H, W), got {x.shape}")
    if kind == "avg":
        return reduce_mean(x, axes=(x.ndim - 3,), keepdims=True)
    if kind == "max":
        return reduce_max(x, axes=(x.ndim - 3,), keepdims=True)
    raise ContractError(f"unknown channel_pool kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing two spatial axes, kept as size-1 dims."""
    x = _as_tensor(x)
    return reduce_mean(x, axes=(x.ndim - 2, x.ndim - 1), keepdims=True)


# ---------------------------------------------------------------------------
# bilinear interpolation
# ---------------------------------------------------------------------------

_interp_cache: dict = {}


def interp_matrix(out_len: int, in_len: int, dtype=np.float64) -> np.ndarray:
    """Align-corners 1D linear-interpolation matrix B with B @ v resampling.

    Each row carries at most two nonzeros summing to 1; for out_len == in_len
    the matrix is exactly the identity.  Matrices are cached read-only.
    """
    if out_len < 1 or in_len < 1:
        raise ContractError("interpolation lengths must be >= 1")
    key = (out_len, in_len, np.dtype(dtype))
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    mat = np.zeros((out_len, in_len), dtype=dtype)
    if in_len == 1:
        mat[:, 0] = 1.0
    else:
        step = 0.0 if out_len == 1 else (in_len - 1) / (out_len - 1)
        for i in range(out_len):
            src = i * step
            lo = min(int(np.floor(src)), in_len - 1)
            t = src - lo
            mat[i, lo] += 1.0 - t
            if t > 0.0:
                mat[i, lo + 1] += t
    mat.flags.writeable = False
    _interp_cache[key] = mat
    return mat


def bilinear_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Align-corners bilinear resize of the trailing two axes to ``size``."""
    x = _as_tensor(x)
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target size must be >= 1, got {size}")
    h, w = x.shape[-2], x.shape[-1]
    if (out_h, out_w) == (h, w):
        return x
    br = interp_matrix(out_h, h, x.dtype)
    bc = interp_matrix(out_w, w, x.dtype)

    def fwd(xv):
        return np.ascontiguousarray(np.matmul(np.matmul(br, xv), bc.T))

    def bwd(g, ins, out):
        return [np.ascontiguousarray(np.matmul(np.matmul(br.T, g), bc))]

    return apply_op("bilinear_resize", [x], fwd, bwd)


# ---------------------------------------------------------------------------
# activations and normalization
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    ax = axis if axis >= 0 else axis + x.ndim

    def fwd(xv):
        shifted = xv - xv.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=ax, keepdims=True)

    def bwd(g, ins, out):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return [out * (g - inner)]

    return apply_op("softmax", [x], fwd, bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def fwd(xv):
        out = np.empty_like(xv)
        pos = xv >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
        e = np.exp(xv[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def bwd(g, ins, out):
        return [g * out * (1.0 - out)]

    return apply_op("sigmoid", [x], fwd, bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def bwd(g, ins, out):
        return [g * (ins[0] > 0)]

    return apply_op("relu", [x], lambda xv: np.maximum(xv, 0), bwd)


def batchnorm(x: Tensor, state: BNState, training: bool = False) -> Tensor:
    """Channel-wise batch normalization over (N, C, ...).

    Training normalizes by batch statistics (biased variance) and updates the
    running statistics with momentum (unbiased variance, torch convention);
    eval normalizes by the stored running statistics.
    """
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatchError(f"batchnorm expects (N, C, ...), got {x.shape}")
    channels = x.shape[1]
    if state.gamma.shape != (channels,):
        raise ShapeMismatchError(f"gamma has shape {state.gamma.shape}, input has {channels} channels")
    red_axes = (0,) + tuple(range(2, x.ndim))
    count = int(np.prod([x.shape[i] for i in red_axes], dtype=np.int64))
    pshape = (1, channels) + (1,) * (x.ndim - 2)
    eps = state.eps

    if training:
        if count < 2:
            raise ContractError("training-mode batchnorm needs >= 2 values per channel")
        # running-stat update happens once here, not in the replayable closure
        batch_mean = x.array.mean(axis=red_axes)
        batch_var = x.array.var(axis=red_axes)
        unbiased = batch_var * (count / (count - 1))
        if state.running_mean is None:
            state.running_mean = np.zeros(channels, dtype=np.float64)
            state.running_var = np.ones(channels, dtype=np.float64)
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * batch_mean
        state.running_var *= 1.0 - m
        state.running_var += m * unbiased

        def fwd(xv, gv, bv):
            mu = xv.mean(axis=red_axes, keepdims=True)
            var = xv.var(axis=red_axes, keepdims=True)
            xhat = (xv - mu) / np.sqrt(var + eps)
            return xhat * gv.reshape(pshape) + bv.reshape(pshape)

        def bwd(g, ins, out):
            xv, gv, bv = ins
            mu = xv.mean(axis=red_axes, keepdims=True)
            var = xv.var(axis=red_axes, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (xv - mu) * inv
            dgamma = (g * xhat).sum(axis=red_axes)
            dbeta = g.sum(axis=red_axes)
            gmean = g.mean(axis=red_axes, keepdims=True)
            gx_mean = (g * xhat).mean(axis=red_axes, keepdims=True)
            dx = gv.reshape(pshape) * inv * (g - gmean - xhat * gx_mean)
            return [np.ascontiguousarray(dx), dgamma, dbeta]

        return apply_op("batchnorm_train", [x, state.gamma, state.beta], fwd, bwd)

    if state.running_mean is None or state.running_var is None:
        raise ContractError("eval-mode batchnorm with uninitialized running statistics")
    mean = state.running_mean.astype(x.dtype).reshape(pshape).copy()
    inv = (1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype).reshape(pshape).copy()

    def fwd(xv, gv, bv):
        return (xv - mean) * inv * gv.reshape(pshape) + bv.reshape(pshape)

    def bwd(g, ins, out):
        xv, gv, bv = ins
        xhat = (xv - mean) * inv
        return [
            np.ascontiguousarray(g * gv.reshape(pshape) * inv),
            (g * xhat).sum(axis=red_axes),
            g.sum(axis=red_axes),
        ]

    return apply_op("batchnorm_eval", [x, state.gamma, state.beta], fwd, bwd)
