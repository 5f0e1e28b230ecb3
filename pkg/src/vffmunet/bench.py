"""Wall-clock scaling benchmark for the attention operator.

One record per (mode, sequence length): the median of at least three timed
repeats after a warm-up call, plus the analytic FLOP count of a forward.
Fitting a line to log(time) against log(HW) separates the near-linear
factored path (slope around 1) from the quadratic naive path (slope around
2).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import NAIVE_HW_LIMIT, make_params, vf_forward
from .errors import ContractError, ResourceLimitError
from .network import _attention_flops
from .tensor import Tensor


@dataclass
class BenchRecord:
    mode: str
    hw: int
    channels: int
    heads: int
    pooled_len: int
    wall_ms: float
    flops: int


CSV_HEADER = "mode,hw,channels,heads,d,wall_ms,flops"


def record_csv(rec: BenchRecord) -> str:
    return (
        f"{rec.mode},{rec.hw},{rec.channels},{rec.heads},{rec.pooled_len},"
        f"{rec.wall_ms:.4f},{rec.flops}"
    )


def run_attention_bench(sizes, channels: int = 8, heads: int = 12, pooled_len: int = 64,
                        mode: str = "factored", repeats: int = 5,
                        seed: int = 0) -> list[BenchRecord]:
    """Time ``vf_forward`` at each HW in ``sizes`` (HW must be a square)."""
    if repeats < 3:
        raise ContractError(f"need at least 3 repeats for a stable median, got {repeats}")
    if mode == "naive" and max(sizes) > NAIVE_HW_LIMIT:
        raise ResourceLimitError(
            f"naive mode is limited to HW <= {NAIVE_HW_LIMIT}, requested {max(sizes)}"
        )
    records = []
    for hw in sizes:
        side = math.isqrt(hw)
        if side * side != hw:
            raise ContractError(f"HW must be a perfect square, got {hw}")
        rng = np.random.default_rng(seed)
        params = make_params(channels, heads, pooled_len, rng, np.float32)
        x = Tensor(rng.normal(0, 1, (channels, side, side)).astype(np.float32))
        vf_forward(x, params, mode)  # warm-up
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            vf_forward(x, params, mode)
            times.append((time.perf_counter() - start) * 1e3)
        records.append(
            BenchRecord(mode, hw, channels, heads, pooled_len,
                        float(np.median(times)),
                        _attention_flops(channels, side, side, heads, pooled_len))
        )
    return records


def fit_loglog_slope(sizes, times_ms) -> float:
    """Least-squares slope of log(time) vs log(size)."""
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times_ms, dtype=np.float64))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
