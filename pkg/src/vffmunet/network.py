"""Six-stage encoder/decoder segmentation network, with cost accounting.

Encoder stages 1-6 each apply a 3x3 convolution (C_{l-1} -> C_l) with batch
norm and ReLU; the three deepest stages follow it with a multi-granularity
attention block.  A 2x2 average pool sits after stages 1-5, so a 256x256
input reaches 8x8 at the bottleneck.  The decoder mirrors this: the three
deepest decoder stages upsample bilinearly, convolve 3x3 down to the skip
width, add the encoder skip, and run an attention block (the bottleneck
stage runs its block directly); the three shallowest use the same
conv/BN/ReLU + additive skip without a block.  A final 1x1 convolution and
sigmoid produce per-pixel foreground probabilities.

Weight files: little-endian, magic "VFFM", u32 version=1, u32 tensor count;
per tensor a u32 name length, the UTF-8 name, a dtype byte (0 = float32), a
ndim byte, u32 dims, then raw row-major float32 data with no padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams
from .block import (
    BlockParams,
    ChannelFusionParams,
    GranularityFusionParams,
    vffm_block_forward,
)
from .errors import ConfigError, ContractError, FormatError, ShapeMismatchError
from .ops import BNState, ConvParams, avg_pool2d, batchnorm, bilinear_resize, conv2d, relu, sigmoid
from .tensor import Tensor, _as_tensor

MAGIC = b"VFFM"
FORMAT_VERSION = 1

_BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    heads: int = 12
    pooled_len: int = 64
    in_channels: int = 3
    input_size: tuple[int, int] = (256, 256)
    vf_mode: str = "factored"

    def validate(self):
        if len(self.stage_channels) != 6:
            raise ConfigError(f"need exactly 6 stage widths, got {len(self.stage_channels)}")
        if any(c < 2 or c % 2 for c in self.stage_channels):
            raise ConfigError(f"stage widths must be even and >= 2: {self.stage_channels}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.heads > min(self.stage_channels[3:]):
            raise ConfigError(
                f"heads ({self.heads}) exceed the narrowest attention stage "
                f"({min(self.stage_channels[3:])})"
            )
        if self.pooled_len < 1:
            raise ConfigError("pooled_len must be >= 1")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        h, w = self.input_size
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError(f"input size must be a multiple of 32, got {self.input_size}")
        if self.vf_mode not in ("naive", "factored"):
            raise ConfigError(f"vf_mode must be naive or factored, got {self.vf_mode!r}")


@dataclass
class StageCost:
    name: str
    params: int
    flops: int


@dataclass
class Summary:
    total_params: int
    total_flops: int
    stages: list[StageCost] = field(default_factory=list)


def is_buffer(name: str) -> bool:
    """Running statistics are serialized state, not trainable parameters."""
    return name.endswith(_BUFFER_SUFFIXES)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Create the full named weight map, deterministically from the seed.

    Convolution weights are uniform[-1/sqrt(fan_in), 1/sqrt(fan_in)], biases
    zero; batch-norm scale 1, shift 0, running stats (0, 1).  The returned
    dict iterates in lexicographic name order.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}

    def add_conv(name, c_out, c_in, k):
        bound = 1.0 / np.sqrt(c_in * k * k)
        weights[f"{name}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        )
        weights[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype))

    def add_bn(name, c):
        weights[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype))
        weights[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype))
        weights[f"{name}.running_mean"] = Tensor(np.zeros(c, dtype=dtype))
        weights[f"{name}.running_var"] = Tensor(np.ones(c, dtype=dtype))

    def add_block(prefix, c):
        for sub in ("pixel", "patch", "window"):
            add_conv(f"{prefix}.{sub}.query", cfg.heads, c, 1)
            add_conv(f"{prefix}.{sub}.key", cfg.heads, c, 1)
            add_conv(f"{prefix}.{sub}.value", c, c, 1)
        add_conv(f"{prefix}.mix", c, 3 * c, 1)
        add_conv(f"{prefix}.mask", 3, 2, 7)
        add_conv(f"{prefix}.squeeze", c // 2, c, 1)
        add_bn(f"{prefix}.squeeze_bn", c // 2)
        add_conv(f"{prefix}.excite", c, c // 2, 1)

    ch = cfg.stage_channels
    for l in range(1, 7):
        c_in = cfg.in_channels if l == 1 else ch[l - 2]
        add_conv(f"enc{l}.conv", ch[l - 1], c_in, 3)
        add_bn(f"enc{l}.bn", ch[l - 1])
        if l >= 4:
            add_block(f"enc{l}.block", ch[l - 1])

    add_block("dec6.block", ch[5])
    for l in (5, 4):
        add_conv(f"dec{l}.conv", ch[l - 1], ch[l], 3)
        add_bn(f"dec{l}.bn", ch[l - 1])
        add_block(f"dec{l}.block", ch[l - 1])
    for l in (3, 2, 1):
        add_conv(f"dec{l}.conv", ch[l - 1], ch[l], 3)
        add_bn(f"dec{l}.bn", ch[l - 1])
    add_conv("head", 1, ch[0], 1)

    return dict(sorted(weights.items()))


def _bind_conv(weights, name) -> ConvParams:
    return ConvParams(weights[f"{name}.weight"], weights[f"{name}.bias"])


def _bind_bn(weights, name) -> BNState:
    return BNState(
        weights[f"{name}.gamma"],
        weights[f"{name}.beta"],
        running_mean=weights[f"{name}.running_mean"].array,
        running_var=weights[f"{name}.running_var"].array,
    )


def _bind_block(weights, prefix, cfg) -> BlockParams:
    def attn(sub):
        return AttentionParams(
            _bind_conv(weights, f"{prefix}.{sub}.query"),
            _bind_conv(weights, f"{prefix}.{sub}.key"),
            _bind_conv(weights, f"{prefix}.{sub}.value"),
            cfg.heads,
            cfg.pooled_len,
        )

    return BlockParams(
        pixel_attn=attn("pixel"),
        patch_attn=attn("patch"),
        window_attn=attn("window"),
        gf=GranularityFusionParams(
            _bind_conv(weights, f"{prefix}.mix"), _bind_conv(weights, f"{prefix}.mask")
        ),
        cf=ChannelFusionParams(
            _bind_conv(weights, f"{prefix}.squeeze"),
            _bind_bn(weights, f"{prefix}.squeeze_bn"),
            _bind_conv(weights, f"{prefix}.excite"),
        ),
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def forward(weights: dict[str, Tensor], cfg: NetworkConfig, x,
            training: bool = False) -> Tensor:
    """Full network forward: (N, C_in, H, W) -> (N, 1, H, W) in (0, 1).

    H and W must be multiples of 32 but are otherwise free; the architecture
    is size-polymorphic.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected (N, C, H, W), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[2], x.shape[3]
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ContractError(f"spatial size must be a multiple of 32, got {h}x{w}")
    mode = cfg.vf_mode

    skips = []
    t = x
    for l in range(1, 7):
        t = relu(batchnorm(conv2d(t, _bind_conv(weights, f"enc{l}.conv")),
                           _bind_bn(weights, f"enc{l}.bn"), training))
        if l >= 4:
            t = vffm_block_forward(t, _bind_block(weights, f"enc{l}.block", cfg), mode, training)
        skips.append(t)
        if l <= 5:
            t = avg_pool2d(t)

    t = vffm_block_forward(skips[5], _bind_block(weights, "dec6.block", cfg), mode, training)
    for l in (5, 4, 3, 2, 1):
        skip = skips[l - 1]
        t = bilinear_resize(t, (skip.shape[-2], skip.shape[-1]))
        t = relu(batchnorm(conv2d(t, _bind_conv(weights, f"dec{l}.conv")),
                           _bind_bn(weights, f"dec{l}.bn"), training))
        t = t + skip
        if l >= 4:
            t = vffm_block_forward(t, _bind_block(weights, f"dec{l}.block", cfg), mode, training)
    return sigmoid(conv2d(t, _bind_conv(weights, "head")))


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def count_params(weights: dict[str, Tensor]) -> int:
    """Total trainable parameter count (running statistics excluded)."""
    return sum(t.size for name, t in weights.items() if not is_buffer(name))


def _conv_flops(k: int, c_in: int, c_out: int, h: int, w: int) -> int:
    # multiply-add = 2 FLOPs; bias adds are not counted
    return 2 * k * k * c_in * c_out * h * w


def _conv_params(k: int, c_in: int, c_out: int) -> int:
    return c_out * c_in * k * k + c_out


def _halved(h: int, w: int) -> tuple[int, int]:
    nh = h // 2 if h % 2 == 0 and h >= 2 else h
    nw = w // 2 if w % 2 == 0 and w >= 2 else w
    return nh, nw


def _attention_flops(c: int, h: int, w: int, heads: int, d: int) -> int:
    """Factored-path cost of one attention instance at a given resolution."""
    hw = h * w
    dp = min(hw, d)
    f = 2 * _conv_flops(1, c, heads, h, w)  # query + key projections
    f += _conv_flops(1, c, c, h, w)         # value projection
    f += heads * hw                         # query softmax
    f += 2 * heads * hw                     # weighted head sum
    f += heads * hw                         # query (x) key
    f += heads * hw                         # key softmax
    f += 2 * heads * dp                     # two sequence pools
    f += 2 * dp * heads * dp                # pooled outer-product summary
    f += 2 * dp * hw * c                    # interp^T @ values
    f += 2 * dp * dp * c                    # summary @ (.)
    f += 2 * hw * dp * c                    # interp @ (.)
    f += c * hw                             # positional averaging of the output
    return f


def _block_flops(c: int, h: int, w: int, heads: int, d: int) -> int:
    hw = h * w
    f = _attention_flops(c, h, w, heads, d)
    h2, w2 = _halved(h, w)
    if (h2, w2) != (h, w):
        f += c * h2 * w2                            # granularity pool
    f += _attention_flops(c, h2, w2, heads, d)
    h3, w3 = _halved(h2, w2)
    if (h3, w3) != (h2, w2):
        f += c * h3 * w3
    f += _attention_flops(c, h3, w3, heads, d)
    if (h2, w2) != (h, w):
        f += c * hw                                 # resize patch map back
    if (h3, w3) != (h, w):
        f += c * hw                                 # resize window map back
    f += _conv_flops(1, 3 * c, c, h, w)             # mix
    f += 2 * hw                                     # channel avg + max pools
    f += _conv_flops(7, 2, 3, h, w)                 # mask head
    f += 3 * hw                                     # mask sigmoid
    f += 6 * c * hw                                 # blend: 3 muls, 2 adds, residual mul
    f += c * hw                                     # patch + window sum
    f += c                                          # global average pool
    f += _conv_flops(1, c, c // 2, 1, 1) + 2 * (c // 2) + c // 2  # squeeze + BN + relu
    f += _conv_flops(1, c // 2, c, 1, 1) + c        # excite + sigmoid
    f += c                                          # complementary weight
    f += 3 * c * hw                                 # channel combine
    f += c * hw                                     # fusion sum
    return f


def _block_params(c: int, heads: int) -> int:
    attn = 2 * _conv_params(1, c, heads) + _conv_params(1, c, c)
    gf = _conv_params(1, 3 * c, c) + _conv_params(7, 2, 3)
    cf = _conv_params(1, c, c // 2) + 2 * (c // 2) + _conv_params(1, c // 2, c)
    return 3 * attn + gf + cf


def network_summary(cfg: NetworkConfig) -> Summary:
    """Analytic parameter and FLOP budget at the configured input size.

    FLOP conventions: one multiply-add costs 2 FLOPs; convolutions cost
    2*k^2*C_in*C_out*H_out*W_out (bias excluded); batch norm costs 2 per
    element; pooling, resizing, activations, and elementwise arithmetic cost
    1 per output element; attention is counted along the factored path.
    """
    cfg.validate()
    ch = cfg.stage_channels
    h, w = cfg.input_size
    stages: list[StageCost] = []

    sizes = [(h >> s, w >> s) for s in range(6)]
    for l in range(1, 7):
        sh, sw = sizes[l - 1]
        c_in = cfg.in_channels if l == 1 else ch[l - 2]
        c = ch[l - 1]
        params = _conv_params(3, c_in, c) + 2 * c
        flops = _conv_flops(3, c_in, c, sh, sw) + 3 * c * sh * sw  # conv + BN + relu
        if l >= 4:
            params += _block_params(c, cfg.heads)
            flops += _block_flops(c, sh, sw, cfg.heads, cfg.pooled_len)
        if l <= 5:
            flops += c * (sh // 2) * (sw // 2)  # downsample pool
        stages.append(StageCost(f"enc{l}", params, flops))

    for l in (6, 5, 4, 3, 2, 1):
        sh, sw = sizes[l - 1]
        c = ch[l - 1]
        params = 0
        flops = 0
        if l < 6:
            params += _conv_params(3, ch[l], c) + 2 * c
            flops += c * sh * sw                       # bilinear upsample
            flops += _conv_flops(3, ch[l], c, sh, sw) + 3 * c * sh * sw
            flops += c * sh * sw                       # skip addition
        if l >= 4:
            params += _block_params(c, cfg.heads)
            flops += _block_flops(c, sh, sw, cfg.heads, cfg.pooled_len)
        stages.append(StageCost(f"dec{l}", params, flops))

    head_params = _conv_params(1, ch[0], 1)
    head_flops = _conv_flops(1, ch[0], 1, h, w) + h * w  # conv + sigmoid
    stages.append(StageCost("head", head_params, head_flops))

    return Summary(
        total_params=sum(s.params for s in stages),
        total_flops=sum(s.flops for s in stages),
        stages=stages,
    )


def count_flops(cfg: NetworkConfig) -> int:
    """Analytic forward-pass FLOPs at the configured input size."""
    return network_summary(cfg).total_flops


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_weights(weights: dict[str, Tensor], path):
    """Write the weight map in the binary format described in the module docs."""
    names = sorted(weights)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(names)))
        for name in names:
            t = weights[name]
            if t.dtype != np.float32:
                raise FormatError(f"weight file stores float32 only; {name!r} is {t.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", 0, t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.array.astype("<f4", copy=False).tobytes())


def load_weights(path) -> dict[str, Tensor]:
    with open(path, "rb") as f:
        blob = f.read()

    def need(offset, n, what):
        if offset + n > len(blob):
            raise FormatError(f"truncated file: {what} at offset {offset}")
        return blob[offset : offset + n], offset + n

    raw, off = need(0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad magic {raw!r} at offset 0")
    raw, off = need(off, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4")

    weights: dict[str, Tensor] = {}
    for _ in range(count):
        raw, off = need(off, 4, "name length")
        (name_len,) = struct.unpack("<I", raw)
        raw, off = need(off, name_len, "name")
        name = raw.decode("utf-8")
        if name in weights:
            raise FormatError(f"duplicate tensor name {name!r} at offset {off - name_len}")
        raw, off = need(off, 2, "dtype/ndim")
        dtype_code, ndim = struct.unpack("<BB", raw)
        if dtype_code != 0:
            raise FormatError(f"unknown dtype code {dtype_code} at offset {off - 2}")
        raw, off = need(off, 4 * ndim, "dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        raw, off = need(off, n_bytes, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        weights[name] = Tensor(arr)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes at offset {off}")
    return dict(sorted(weights.items()))
