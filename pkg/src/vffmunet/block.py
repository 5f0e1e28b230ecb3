"""Multi-granularity attention block: three attention passes plus two fusions.

One block runs the attention operator at full, half, and quarter resolution
(pixel / patch / window granularity), brings the coarse maps back to full size
by bilinear interpolation, and fuses them twice:

* granularity fusion: per-pixel sigmoid masks (from channel-pooled statistics
  of the mixed maps) blend the three granularities, multiplied by the block
  input as a product residual;
* channel fusion: a squeeze/excite-style gate produces complementary
  per-channel weights w and 1-w that convexly combine the patch- and
  window-level maps.

The block output is the sum of the two fusion outputs.

Granularity pooling halves each spatial dimension when it is even; a
dimension that is odd or already 1 passes through unchanged, so blocks work
at any spatial size (the deepest network stages can reach 2x2 or 1x1 on
small inputs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, make_params, vf_forward
from .errors import ContractError, ShapeMismatchError
from .ops import (
    BNState,
    ConvParams,
    avg_pool2d,
    batchnorm,
    bilinear_resize,
    channel_pool,
    conv2d,
    global_avg_pool,
    relu,
    sigmoid,
)
from .tensor import Tensor, _as_tensor, concat, narrow, reshape


@dataclass
class GranularityMaps:
    """The three attention outputs, all resized back to the block input size."""

    pixel: Tensor
    patch: Tensor
    window: Tensor


@dataclass
class GranularityFusionParams:
    mix: ConvParams   # 1x1, 3C -> C channel mixing
    mask: ConvParams  # 7x7, 2 -> 3 spatial mask head

    def __post_init__(self):
        if self.mix.in_channels != 3 * self.mix.out_channels:
            raise ShapeMismatchError("mix convolution must map 3C -> C")
        if self.mask.in_channels != 2 or self.mask.out_channels != 3:
            raise ShapeMismatchError("mask convolution must map 2 -> 3 channels")


@dataclass
class ChannelFusionParams:
    squeeze: ConvParams  # 1x1, C -> C/2
    bn: BNState          # on C/2
    excite: ConvParams   # 1x1, C/2 -> C

    def __post_init__(self):
        c = self.squeeze.in_channels
        if c % 2:
            raise ContractError(f"channel fusion needs an even channel count, got {c}")
        if self.squeeze.out_channels != c // 2 or self.excite.in_channels != c // 2 \
                or self.excite.out_channels != c:
            raise ShapeMismatchError("squeeze/excite convolutions must map C -> C/2 -> C")


@dataclass
class BlockParams:
    pixel_attn: AttentionParams
    patch_attn: AttentionParams
    window_attn: AttentionParams
    gf: GranularityFusionParams
    cf: ChannelFusionParams

    def __post_init__(self):
        c = self.pixel_attn.channels
        h = self.pixel_attn.heads
        for p in (self.patch_attn, self.window_attn):
            if p.channels != c or p.heads != h:
                raise ContractError("the three attention instances must share channels and heads")

    @property
    def channels(self) -> int:
        return self.pixel_attn.channels


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")


def _halve_if_possible(x: Tensor) -> Tensor:
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2:
        return avg_pool2d(x)
    return x


def mgvf_forward(x: Tensor, params: BlockParams, mode: str = "factored") -> GranularityMaps:
    """Run the three granularity attention passes sequentially.

    The patch pass sees the pooled pixel output; the window pass sees the
    pooled (pre-resize) patch output.  Both coarse results are resized back to
    the input size.
    """
    x = _as_tensor(x)
    xb, squeeze = _ensure_batched(x)
    h, w = xb.shape[-2], xb.shape[-1]

    pixel = vf_forward(xb, params.pixel_attn, mode)
    patch_raw = vf_forward(_halve_if_possible(pixel), params.patch_attn, mode)
    window_raw = vf_forward(_halve_if_possible(patch_raw), params.window_attn, mode)
    patch = bilinear_resize(patch_raw, (h, w))
    window = bilinear_resize(window_raw, (h, w))
    if squeeze:
        pixel = reshape(pixel, pixel.shape[1:])
        patch = reshape(patch, patch.shape[1:])
        window = reshape(window, window.shape[1:])
    return GranularityMaps(pixel, patch, window)


def gf_masks(maps: GranularityMaps, params: GranularityFusionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-pixel sigmoid masks for the three granularities, each (..., 1, H, W)."""
    pixel, squeeze = _ensure_batched(maps.pixel)
    patch, _ = _ensure_batched(maps.patch)
    window, _ = _ensure_batched(maps.window)
    mixed = conv2d(concat([pixel, patch, window], axis=1), params.mix)
    stats = concat([channel_pool(mixed, "avg"), channel_pool(mixed, "max")], axis=1)
    masks = sigmoid(conv2d(stats, params.mask))
    out = [narrow(masks, 1, i, 1) for i in range(3)]
    if squeeze:
        out = [reshape(m, m.shape[1:]) for m in out]
    return out[0], out[1], out[2]


def gf_combine(maps: GranularityMaps, masks: tuple[Tensor, Tensor, Tensor], x: Tensor) -> Tensor:
    """Mask-weighted sum of the granularity maps, multiplied by the input."""
    m1, m2, m3 = masks
    blended = maps.pixel * m1 + maps.patch * m2 + maps.window * m3
    return blended * x


def cf_weights(maps: GranularityMaps, params: ChannelFusionParams,
               training: bool = False) -> tuple[Tensor, Tensor]:
    """Complementary per-channel gates (..., C, 1, 1) with w1 + w2 = 1 exactly."""
    patch, squeeze = _ensure_batched(maps.patch)
    window, _ = _ensure_batched(maps.window)
    pooled = global_avg_pool(patch + window)
    hidden = relu(batchnorm(conv2d(pooled, params.squeeze), params.bn, training))
    gate = conv2d(hidden, params.excite)
    w1 = sigmoid(gate)
    w2 = 1.0 - w1
    if squeeze:
        w1 = reshape(w1, w1.shape[1:])
        w2 = reshape(w2, w2.shape[1:])
    return w1, w2


def cf_combine(maps: GranularityMaps, w1: Tensor, w2: Tensor) -> Tensor:
    """Convex per-channel combination of the patch- and window-level maps."""
    return maps.patch * w1 + maps.window * w2


def vffm_block_forward(x: Tensor, params: BlockParams, mode: str = "factored",
                       training: bool = False) -> Tensor:
    """One full block: granularity attention, then both fusions, summed."""
    x = _as_tensor(x)
    maps = mgvf_forward(x, params, mode)
    masks = gf_masks(maps, params.gf)
    gf_out = gf_combine(maps, masks, x)
    w1, w2 = cf_weights(maps, params.cf, training)
    cf_out = cf_combine(maps, w1, w2)
    return gf_out + cf_out


def make_block_params(channels: int, heads: int, pooled_len: int = 64,
                      rng: np.random.Generator | None = None,
                      dtype=np.float32) -> BlockParams:
    """Random block parameters with the project's standard initialization."""
    rng = rng or np.random.default_rng(0)
    if channels % 2:
        raise ContractError(f"block channel count must be even, got {channels}")

    def conv(c_out, c_in, k):
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        return ConvParams(Tensor(w), Tensor(np.zeros(c_out, dtype=dtype)))

    half = channels // 2
    return BlockParams(
        pixel_attn=make_params(channels, heads, pooled_len, rng, dtype),
        patch_attn=make_params(channels, heads, pooled_len, rng, dtype),
        window_attn=make_params(channels, heads, pooled_len, rng, dtype),
        gf=GranularityFusionParams(conv(channels, 3 * channels, 1), conv(3, 2, 7)),
        cf=ChannelFusionParams(
            conv(half, channels, 1),
            BNState(
                Tensor(np.ones(half, dtype=dtype)),
                Tensor(np.zeros(half, dtype=dtype)),
                running_mean=np.zeros(half, dtype=np.float64),
                running_var=np.ones(half, dtype=np.float64),
            ),
            conv(channels, half, 1),
        ),
    )
