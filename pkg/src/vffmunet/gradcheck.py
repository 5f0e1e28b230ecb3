"""Analytic-vs-finite-difference verification of every backward rule.

Each target builds a small double-precision instance with seeded random
inputs, takes a fixed random linear functional of the target's output as the
scalar loss, and compares tape gradients against central differences.  The
``corrupt`` hook scales one analytic gradient group so the harness can prove
it would catch a broken backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import block as blk
from .attention import AttentionParams
from .errors import ContractError
from .losses import combined_loss
from .network import NetworkConfig, build_network, forward, is_buffer
from .ops import BNState, ConvParams
from .tensor import Graph, Tensor, backward, finite_diff_grad, grads_by_name, reduce_sum

TOLERANCE = 1e-5
TARGETS = ("vf", "gf", "cf", "block", "net")


@dataclass
class GroupResult:
    name: str
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())


def _check_all_groups(loss_fn, values: dict[str, np.ndarray], eps: float,
                      corrupt: str | None) -> list[GroupResult]:
    """Full-tensor finite differences for every named group."""
    graph = Graph()
    taped = {k: graph.parameter(v, k) for k, v in values.items()}
    analytic = grads_by_name(graph, backward(graph, loss_fn(taped)))

    results = []
    for name in values:
        a = analytic[name].array.copy()
        if corrupt in (name, "*"):
            a = a * 1.001 + 1e-6
        plain = {k: Tensor(v) for k, v in values.items()}

        def f(theta: Tensor, _n=name):
            return loss_fn({**plain, _n: theta})

        numeric = finite_diff_grad(f, Tensor(values[name]), eps).array
        results.append(GroupResult(name, _max_rel_err(a, numeric)))
    return results


def _random_conv(rng, c_out, c_in, k) -> ConvParams:
    bound = 1.0 / np.sqrt(c_in * k * k)
    return ConvParams(
        Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k))),
        Tensor(rng.normal(0, 0.05, c_out)),
    )


def _check_vf(eps, corrupt):
    rng = np.random.default_rng(11)
    c, h, w, heads, d = 4, 8, 8, 2, 4
    x = rng.normal(0, 1, (c, h, w))
    coef = rng.normal(0, 1, (c, h, w))
    base = {
        "query.weight": _random_conv(rng, heads, c, 1).weight.array,
        "key.weight": _random_conv(rng, heads, c, 1).weight.array,
        "value.weight": _random_conv(rng, c, c, 1).weight.array,
        "input": x,
    }
    biases = {k: rng.normal(0, 0.05, heads if "value" not in k else c)
              for k in ("query", "key", "value")}

    def loss_fn(v):
        params = AttentionParams(
            ConvParams(v["query.weight"], Tensor(biases["query"])),
            ConvParams(v["key.weight"], Tensor(biases["key"])),
            ConvParams(v["value.weight"], Tensor(biases["value"])),
            heads, d,
        )
        from .attention import vf_forward

        return reduce_sum(vf_forward(v["input"], params, "factored") * Tensor(coef))

    return _check_all_groups(loss_fn, base, eps, corrupt)


def _random_maps(rng, n, c, h, w) -> dict[str, np.ndarray]:
    return {
        "pixel": rng.normal(0, 1, (n, c, h, w)),
        "patch": rng.normal(0, 1, (n, c, h, w)),
        "window": rng.normal(0, 1, (n, c, h, w)),
    }


def _check_gf(eps, corrupt):
    rng = np.random.default_rng(12)
    n, c, h, w = 1, 4, 8, 8
    maps_v = _random_maps(rng, n, c, h, w)
    x = rng.normal(0, 1, (n, c, h, w))
    coef = rng.normal(0, 1, (n, c, h, w))
    base = {
        "mix.weight": _random_conv(rng, c, 3 * c, 1).weight.array,
        "mask.weight": _random_conv(rng, 3, 2, 7).weight.array,
        "input": x,
        **{f"map.{k}": v for k, v in maps_v.items()},
    }
    bias_mix = rng.normal(0, 0.05, c)
    bias_mask = rng.normal(0, 0.05, 3)

    def loss_fn(v):
        gf = blk.GranularityFusionParams(
            ConvParams(v["mix.weight"], Tensor(bias_mix)),
            ConvParams(v["mask.weight"], Tensor(bias_mask)),
        )
        maps = blk.GranularityMaps(v["map.pixel"], v["map.patch"], v["map.window"])
        masks = blk.gf_masks(maps, gf)
        return reduce_sum(blk.gf_combine(maps, masks, v["input"]) * Tensor(coef))

    return _check_all_groups(loss_fn, base, eps, corrupt)


def _check_cf(eps, corrupt):
    rng = np.random.default_rng(13)
    n, c, h, w = 2, 4, 8, 8
    maps_v = _random_maps(rng, n, c, h, w)
    # separate the per-sample scales so the batch statistics inside channel
    # fusion are well-conditioned for finite differences
    for v in maps_v.values():
        v[1] *= 2.5
    coef = rng.normal(0, 1, (n, c, h, w))
    base = {
        "squeeze.weight": _random_conv(rng, c // 2, c, 1).weight.array,
        "bn.gamma": rng.uniform(0.5, 1.5, c // 2),
        "bn.beta": rng.normal(0, 0.1, c // 2),
        "excite.weight": _random_conv(rng, c, c // 2, 1).weight.array,
        "map.patch": maps_v["patch"],
        "map.window": maps_v["window"],
    }
    bias_s = rng.normal(0, 0.05, c // 2)
    bias_e = rng.normal(0, 0.05, c)

    def loss_fn(v):
        cf = blk.ChannelFusionParams(
            ConvParams(v["squeeze.weight"], Tensor(bias_s)),
            BNState(v["bn.gamma"] if isinstance(v["bn.gamma"], Tensor) else Tensor(v["bn.gamma"]),
                    v["bn.beta"] if isinstance(v["bn.beta"], Tensor) else Tensor(v["bn.beta"])),
            ConvParams(v["excite.weight"], Tensor(bias_e)),
        )
        maps = blk.GranularityMaps(Tensor(maps_v["pixel"]), v["map.patch"], v["map.window"])
        w1, w2 = blk.cf_weights(maps, cf, training=True)
        return reduce_sum(blk.cf_combine(maps, w1, w2) * Tensor(coef))

    return _check_all_groups(loss_fn, base, eps, corrupt)


def _check_block(eps, corrupt):
    rng = np.random.default_rng(14)
    n, c, h, w, heads, d = 2, 4, 8, 8, 2, 4
    x = rng.normal(0, 1, (n, c, h, w))
    x[1] *= 2.5  # conditions the channel-fusion batch statistics
    coef = rng.normal(0, 1, (n, c, h, w))
    template = blk.make_block_params(c, heads, d, np.random.default_rng(15), np.float64)
    base = {
        "pixel.query.weight": template.pixel_attn.query.weight.array,
        "pixel.value.weight": template.pixel_attn.value.weight.array,
        "patch.key.weight": template.patch_attn.key.weight.array,
        "window.value.weight": template.window_attn.value.weight.array,
        "mix.weight": template.gf.mix.weight.array,
        "mask.weight": template.gf.mask.weight.array,
        "squeeze.weight": template.cf.squeeze.weight.array,
        "bn.gamma": np.ones(c // 2),
        "excite.weight": template.cf.excite.weight.array,
        "input": x,
    }

    def loss_fn(v):
        t = template

        def attn(inst, qw, kw, vw):
            return AttentionParams(
                ConvParams(qw, inst.query.bias), ConvParams(kw, inst.key.bias),
                ConvParams(vw, inst.value.bias), heads, d,
            )

        params = blk.BlockParams(
            pixel_attn=attn(t.pixel_attn, v["pixel.query.weight"], t.pixel_attn.key.weight,
                            v["pixel.value.weight"]),
            patch_attn=attn(t.patch_attn, t.patch_attn.query.weight, v["patch.key.weight"],
                            t.patch_attn.value.weight),
            window_attn=attn(t.window_attn, t.window_attn.query.weight, t.window_attn.key.weight,
                             v["window.value.weight"]),
            gf=blk.GranularityFusionParams(
                ConvParams(v["mix.weight"], t.gf.mix.bias),
                ConvParams(v["mask.weight"], t.gf.mask.bias),
            ),
            cf=blk.ChannelFusionParams(
                ConvParams(v["squeeze.weight"], t.cf.squeeze.bias),
                BNState(v["bn.gamma"] if isinstance(v["bn.gamma"], Tensor) else Tensor(v["bn.gamma"]),
                        t.cf.bn.beta),
                ConvParams(v["excite.weight"], t.cf.excite.bias),
            ),
        )
        out = blk.vffm_block_forward(v["input"], params, "factored", training=True)
        return reduce_sum(out * Tensor(coef))

    return _check_all_groups(loss_fn, base, eps, corrupt)


def _check_net(eps, corrupt, coords_per_stage: int = 3):
    """End-to-end training-loss gradients, spot-checked per stage.

    Full finite differences over a quarter-million forwards would be
    pointless; instead one tensor per stage is checked at a few random
    coordinates.
    """
    rng = np.random.default_rng(16)
    cfg = NetworkConfig(stage_channels=(4, 4, 4, 4, 4, 4), heads=2, pooled_len=8,
                        input_size=(32, 32))
    weights = build_network(cfg, seed=3, dtype=np.float64)
    x = rng.normal(0, 1, (2, 3, 32, 32))
    x[1] *= 2.5  # conditions the channel-fusion batch statistics
    target = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float64)

    def loss_value(w_map) -> Tensor:
        return combined_loss(forward(w_map, cfg, Tensor(x), training=True), Tensor(target), 0.6)

    graph = Graph()
    taped = {
        name: (t if is_buffer(name) else graph.parameter(t, name))
        for name, t in weights.items()
    }
    analytic = grads_by_name(graph, backward(graph, loss_value(taped)))

    stages = [f"enc{l}" for l in range(1, 7)] + [f"dec{l}" for l in range(6, 0, -1)] + ["head"]
    results = []
    for stage in stages:
        candidates = [n for n in weights
                      if n.split(".")[0] == stage and n.endswith(".weight")]
        name = candidates[rng.integers(len(candidates))]
        a_full = analytic[name].array
        base = weights[name].array
        coords = rng.choice(base.size, size=min(coords_per_stage, base.size), replace=False)
        worst = 0.0
        for idx in coords:
            probe = base.copy()
            probe.flat[idx] += eps
            hi = loss_value({**weights, name: Tensor(probe)}).item()
            probe.flat[idx] -= 2 * eps
            lo = loss_value({**weights, name: Tensor(probe)}).item()
            numeric = (hi - lo) / (2 * eps)
            a = float(a_full.flat[idx])
            if corrupt in (stage, "*"):
                a = a * 1.001 + 1e-6
            denom = max(abs(a), abs(numeric), 1e-3 * max(np.abs(a_full).max(), 1e-8))
            worst = max(worst, abs(a - numeric) / denom)
        results.append(GroupResult(f"{stage}:{name}", worst))
    return results


def run_gradcheck(target: str, eps: float = 1e-5, corrupt: str | None = None) -> list[GroupResult]:
    """Check one target; returns per-group worst relative errors."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    if target == "vf":
        return _check_vf(eps, corrupt)
    if target == "gf":
        return _check_gf(eps, corrupt)
    if target == "cf":
        return _check_cf(eps, corrupt)
    if target == "block":
        return _check_block(eps, corrupt)
    if target == "net":
        return _check_net(eps, corrupt)
    raise ContractError(f"unknown gradcheck target {target!r}; options: {TARGETS}")
