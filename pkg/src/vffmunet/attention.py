"""Additive attention with a pooled global key, in two equivalent evaluations.

The operator projects an input feature map into per-head query/key sequences
and per-channel value sequences, compresses the queries into a single global
query by a softmax over heads at each position, mixes it elementwise with the
keys, and builds a global key operator from head-wise outer products of
sequence-pooled interaction/weight vectors, upsampled back to full length by
align-corners linear interpolation.

Two evaluation strategies produce the same values (up to rounding):

* ``naive`` materializes the full HW x HW global key and multiplies it with
  each value sequence, costing O(HW^2) time and memory.  It is the oracle
  path and is refused above ``NAIVE_HW_LIMIT`` positions.
* ``factored`` never materializes the big matrix.  Because the 2D resize of
  the small key is separable (B @ k_small @ B^T for the 1D interpolation
  matrix B), applying the global key to values is three thin matmuls,
  costing O(HW * d) per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ResourceLimitError, ShapeMismatchError
from .ops import ConvParams, adaptive_avg_pool_seq, bilinear_resize, conv2d, interp_matrix, softmax
from .tensor import Tensor, _as_tensor, matmul, reduce_sum, reshape, swap_last_axes

NAIVE_HW_LIMIT = 4096  # 64 MB single-precision guard on the HW x HW key


@dataclass
class AttentionParams:
    """Projections for one attention instance.

    ``query``/``key`` are 1x1 convolutions C -> heads (the channel reduction
    that keeps the operator cheap), ``value`` is 1x1 C -> C.
    """

    query: ConvParams
    key: ConvParams
    value: ConvParams
    heads: int
    pooled_len: int = 64

    def __post_init__(self):
        if self.heads < 1:
            raise ContractError("heads must be >= 1")
        if self.pooled_len < 1:
            raise ContractError("pooled length must be >= 1")
        c = self.value.in_channels
        if self.query.out_channels != self.heads or self.key.out_channels != self.heads:
            raise ShapeMismatchError("query/key projections must emit one channel per head")
        if self.query.in_channels != c or self.key.in_channels != c or self.value.out_channels != c:
            raise ShapeMismatchError("projection channel counts disagree")
        if self.heads > c:
            raise ContractError(f"heads ({self.heads}) must not exceed channels ({c})")

    @property
    def channels(self) -> int:
        return self.value.in_channels


@dataclass
class InterpOperator:
    """The 1D align-corners interpolation matrix as an explicit operator."""

    matrix: np.ndarray  # (out_len, in_len)

    @classmethod
    def for_lengths(cls, out_len: int, in_len: int, dtype=np.float64) -> "InterpOperator":
        return cls(interp_matrix(out_len, in_len, dtype))

    @property
    def out_len(self) -> int:
        return self.matrix.shape[0]

    @property
    def in_len(self) -> int:
        return self.matrix.shape[1]


@dataclass
class AttentionTrace:
    """Every intermediate of one attention evaluation, for inspection/tests."""

    head_queries: Tensor      # (..., heads, HW, 1)
    query_weights: Tensor     # softmax over heads, per position
    merged_query: Tensor      # (..., 1, HW, 1)
    head_keys: Tensor         # (..., heads, HW, 1)
    interactions: Tensor      # merged query (x) keys, per head
    key_weights: Tensor       # softmax over heads, per position
    key_summary: Tensor       # (..., d', d') pooled outer-product sum
    key_full: Tensor | None   # (..., HW, HW), naive path only
    values: Tensor            # (..., C, HW, 1)
    attended: Tensor          # (..., C, HW, 1)


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeMismatchError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")


def project_qkv(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Project a feature map into flattened query, key, value sequences.

    The spatial grid flattens row-major (position = i * W + j).  Queries and
    keys come out (..., heads, HW, 1); values (..., C, HW, 1).
    """
    x = _as_tensor(x)
    xb, squeeze = _ensure_batched(x)
    n, _, h, w = xb.shape
    hw = h * w

    def seq(t: Tensor, rows: int) -> Tensor:
        t = reshape(t, (n, rows, hw, 1))
        if squeeze:
            t = reshape(t, (rows, hw, 1))
        return t

    q = seq(conv2d(xb, params.query), params.heads)
    k = seq(conv2d(xb, params.key), params.heads)
    v = seq(conv2d(xb, params.value), params.channels)
    return q, k, v


def global_query(head_queries: Tensor) -> tuple[Tensor, Tensor]:
    """Compress per-head queries into one sequence.

    Weights are a softmax across the head axis, taken independently at every
    sequence position; the merged query is the weight-averaged head query.
    """
    weights = softmax(head_queries, axis=-3)
    merged = reduce_sum(weights * head_queries, axes=(-3,), keepdims=True)
    return weights, merged


def key_interaction(merged_query: Tensor, head_keys: Tensor) -> tuple[Tensor, Tensor]:
    """Mix the merged query into every head key elementwise, then reweight.

    Returns the per-head interaction sequences and their head-softmax weights.
    """
    interactions = merged_query * head_keys
    weights = softmax(interactions, axis=-3)
    return interactions, weights


def _pooled_key_summary(interactions: Tensor, key_weights: Tensor, pooled_len: int) -> Tensor:
    """Sum over heads of pooled-interaction (outer) pooled-weight, (..., d', d')."""
    p = adaptive_avg_pool_seq(interactions, pooled_len, axis=-2)
    b = adaptive_avg_pool_seq(key_weights, pooled_len, axis=-2)
    dp = p.shape[-2]
    lead = p.shape[:-3]
    heads = p.shape[-3]
    p_mat = reshape(p, lead + (heads, dp))
    b_mat = reshape(b, lead + (heads, dp))
    return matmul(swap_last_axes(p_mat), b_mat)


def global_key_naive(interactions: Tensor, key_weights: Tensor, pooled_len: int,
                     seq_len: int | None = None) -> Tensor:
    """Materialize the full global key matrix (..., HW, HW).

    Refused for sequences longer than ``NAIVE_HW_LIMIT``; use the factored
    application instead.
    """
    interactions = _as_tensor(interactions)
    hw = interactions.shape[-2] if seq_len is None else int(seq_len)
    if hw > NAIVE_HW_LIMIT:
        raise ResourceLimitError(
            f"naive path materializes a {hw}x{hw} matrix; limit is {NAIVE_HW_LIMIT}"
        )
    summary = _pooled_key_summary(interactions, _as_tensor(key_weights), pooled_len)
    return bilinear_resize(summary, (hw, hw))


def global_key_factored_apply(interactions: Tensor, key_weights: Tensor, pooled_len: int,
                              values: Tensor, interp: InterpOperator) -> Tensor:
    """Apply the global key to value columns without materializing it.

    Computes B @ (k_small @ (B^T @ v)); identical to resizing the pooled key
    summary to HW x HW and multiplying, because the 2D align-corners resize is
    separable.
    """
    interactions = _as_tensor(interactions)
    values = _as_tensor(values)
    hw = interactions.shape[-2]
    dp = min(hw, pooled_len)
    if interp.matrix.shape != (hw, dp):
        raise ShapeMismatchError(
            f"interpolation operator is {interp.matrix.shape}, need ({hw}, {dp})"
        )
    if values.shape[-2] != hw:
        raise ShapeMismatchError(f"values have {values.shape[-2]} rows, expected {hw}")
    summary = _pooled_key_summary(interactions, _as_tensor(key_weights), pooled_len)
    up = Tensor(interp.matrix)
    down = Tensor(np.ascontiguousarray(interp.matrix.T))
    return matmul(up, matmul(summary, matmul(down, values)))


def vf_forward(x: Tensor, params: AttentionParams, mode: str = "factored") -> Tensor:
    """Full attention pipeline; output shape equals input shape."""
    out, _ = vf_forward_trace(x, params, mode)
    return out


def vf_forward_trace(x: Tensor, params: AttentionParams,
                     mode: str = "factored") -> tuple[Tensor, AttentionTrace]:
    if mode not in ("naive", "factored"):
        raise ContractError(f"unknown mode {mode!r}")
    x = _as_tensor(x)
    xb, squeeze = _ensure_batched(x)
    n, c, h, w = xb.shape
    hw = h * w

    head_q, head_k, values = project_qkv(xb, params)
    q_weights, merged = global_query(head_q)
    interactions, k_weights = key_interaction(merged, head_k)

    v_mat = swap_last_axes(reshape(values, (n, c, hw)))  # (N, HW, C)
    key_full = None
    if mode == "naive":
        key_full = global_key_naive(interactions, k_weights, params.pooled_len, hw)
        attended_mat = matmul(key_full, v_mat)
    else:
        dp = min(hw, params.pooled_len)
        interp = InterpOperator.for_lengths(hw, dp, xb.dtype)
        attended_mat = global_key_factored_apply(
            interactions, k_weights, params.pooled_len, v_mat, interp
        )
    # average (not sum) over positions: keeps activation scale independent of
    # HW so stacked blocks cannot amplify each other into overflow
    attended_mat = attended_mat * (1.0 / hw)
    attended = reshape(swap_last_axes(attended_mat), (n, c, hw, 1))
    out = reshape(attended, (n, c, h, w))

    summary = _pooled_key_summary(interactions, k_weights, params.pooled_len)
    if squeeze:
        out = reshape(out, (c, h, w))
    trace = AttentionTrace(
        head_queries=head_q,
        query_weights=q_weights,
        merged_query=merged,
        head_keys=head_k,
        interactions=interactions,
        key_weights=k_weights,
        key_summary=summary,
        key_full=key_full,
        values=values,
        attended=attended,
    )
    return out, trace


def make_params(channels: int, heads: int, pooled_len: int = 64,
                rng: np.random.Generator | None = None, dtype=np.float32) -> AttentionParams:
    """Random attention projections: uniform[-1/sqrt(C), 1/sqrt(C)], zero bias."""
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / np.sqrt(channels)

    def conv(c_out):
        w = rng.uniform(-bound, bound, size=(c_out, channels, 1, 1)).astype(dtype)
        return ConvParams(Tensor(w), Tensor(np.zeros(c_out, dtype=dtype)))

    return AttentionParams(conv(heads), conv(heads), conv(channels), heads, pooled_len)
