"""Structured sub-model masks: selection, extraction, broadcast and refresh."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .nn import (
    Conv2D,
    Dense,
    Flatten,
    LayerParams,
    ModelSpec,
    Params,
    check_params,
    param_shapes,
)


def keep_count(width: int, drop_rate: float) -> int:
    """Units kept out of ``width`` when ``floor(drop_rate * width)`` are dropped."""
    # the epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    return width - math.floor(drop_rate * width + 1e-9)


def _check_drop_rate(drop_rate: float) -> None:
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop rate must lie in [0, 1), got {drop_rate}")


@dataclass(frozen=True)
class Mask:
    """Kept unit indices per prunable layer (neurons for Dense, filters for Conv2D)."""

    kept: dict[int, tuple[int, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "kept", {int(i): tuple(sorted(int(u) for u in v)) for i, v in sorted(self.kept.items())}
        )

    def indices(self, layer: int) -> np.ndarray:
        return np.asarray(self.kept[layer], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({str(i): list(v) for i, v in self.kept.items()}, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> Mask:
        return cls({int(i): v for i, v in json.loads(text).items()})

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def identity_mask(spec: ModelSpec) -> Mask:
    return Mask({i: range(spec.width(i)) for i in spec.prunable_layers})


def validate_mask(spec: ModelSpec, mask: Mask) -> None:
    if set(mask.kept) != set(spec.prunable_layers):
        raise InputError(f"mask covers layers {sorted(mask.kept)}, model prunes {spec.prunable_layers}")
    for i, kept in mask.kept.items():
        width = spec.width(i)
        if not kept:
            raise InputError(f"mask keeps no unit of layer {i}")
        if len(set(kept)) != len(kept) or kept[0] < 0 or kept[-1] >= width:
            raise InputError(f"mask for layer {i} must hold unique indices in [0, {width})")


def random_mask(spec: ModelSpec, drop_rate: float, seed: int) -> Mask:
    _check_drop_rate(drop_rate)
    rng = np.random.default_rng(seed)
    kept = {}
    for i in spec.prunable_layers:
        width = spec.width(i)
        kept[i] = rng.choice(width, size=keep_count(width, drop_rate), replace=False)
    return Mask(kept)


# ---------------------------------------------------------------------------
# Extraction and broadcast


def _index_plan(spec: ModelSpec, mask: Mask) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """``(kept outputs, kept inputs)`` of every parameterized layer.

    Dropping a filter removes its input-channel slice downstream; after a
    Flatten that is every spatial position of the channel.
    """
    validate_mask(spec, mask)
    shapes = spec.shapes
    current = np.arange(spec.input_shape[0])
    plan = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Conv2D)):
            out = mask.indices(i) if i in mask.kept else np.arange(spec.width(i))
            plan[i] = (out, current)
            current = out
        elif isinstance(layer, Flatten):
            c, *spatial = shapes[i]
            per_channel = math.prod(spatial)
            current = (current[:, None] * per_channel + np.arange(per_channel)[None, :]).ravel()
    return plan


def _full_index(shape: tuple[int, ...], out: np.ndarray, inp: np.ndarray):
    return np.ix_(out, inp, *(np.arange(d) for d in shape[2:]))


def _sub_spec(spec: ModelSpec, plan: dict[int, tuple[np.ndarray, np.ndarray]]) -> ModelSpec:
    layers = list(spec.layers)
    for i, (out, inp) in plan.items():
        if isinstance(layers[i], Dense):
            layers[i] = Dense(len(inp), len(out))
        else:
            layers[i] = dataclasses.replace(layers[i], in_channels=len(inp), out_channels=len(out))
    return ModelSpec(spec.input_shape, tuple(layers))


def submodel_spec(spec: ModelSpec, mask: Mask) -> ModelSpec:
    return _sub_spec(spec, _index_plan(spec, mask))


def extract_submodel(spec: ModelSpec, params: Params, mask: Mask) -> tuple[ModelSpec, Params]:
    """Gather the kept rows/columns/filters into a smaller, self-contained model."""
    check_params(spec, params)
    plan = _index_plan(spec, mask)
    sub_params = {}
    for i, (out, inp) in plan.items():
        p = params[i]
        sub_params[i] = LayerParams(p.weight[_full_index(p.weight.shape, out, inp)].copy(), p.bias[out].copy())
    return _sub_spec(spec, plan), sub_params


def broadcast_submodel(spec: ModelSpec, global_params: Params, sub_params: Params, mask: Mask) -> Params:
    """Scatter sub-model weights to their global coordinates; all else keeps the global value."""
    plan = _index_plan(spec, mask)
    out_params = {}
    for i, (out, inp) in plan.items():
        g, s = global_params[i], sub_params.get(i)
        if s is None or s.weight.shape != (len(out), len(inp), *g.weight.shape[2:]) or s.bias.shape != (len(out),):
            raise InputError(f"sub-model parameters for layer {i} do not match the mask")
        w, b = g.weight.copy(), g.bias.copy()
        w[_full_index(w.shape, out, inp)] = s.weight
        b[out] = s.bias
        out_params[i] = LayerParams(w, b)
    return out_params


def trained_coordinates(spec: ModelSpec, mask: Mask) -> dict[int, LayerParams]:
    """Boolean parameter-shaped flags: True where the sub-model carries the coordinate."""
    flags = {}
    for i, (out, inp) in _index_plan(spec, mask).items():
        wshape, bshape = param_shapes(spec)[i]
        w, b = np.zeros(wshape, dtype=bool), np.zeros(bshape, dtype=bool)
        w[_full_index(wshape, out, inp)] = True
        b[out] = True
        flags[i] = LayerParams(w, b)
    return flags


def full_coordinates(spec: ModelSpec) -> dict[int, LayerParams]:
    return {
        i: LayerParams(np.ones(ws, dtype=bool), np.ones(bs, dtype=bool)) for i, (ws, bs) in param_shapes(spec).items()
    }


# ---------------------------------------------------------------------------
# Unit statistics and mask refresh


@dataclass(frozen=True)
class GroupAccumulator:
    total: np.ndarray
    count: np.ndarray

    def mean(self) -> np.ndarray:
        return np.divide(self.total, self.count, out=np.zeros_like(self.total), where=self.count > 0)


@dataclass(frozen=True)
class UnitStats:
    """Per-unit running sums of the ranking statistic, split by speed group."""

    slow: dict[int, GroupAccumulator] = field(default_factory=dict)
    fast: dict[int, GroupAccumulator] = field(default_factory=dict)

    @classmethod
    def empty(cls, spec: ModelSpec) -> UnitStats:
        def zeros():
            return {i: GroupAccumulator(np.zeros(spec.width(i)), np.zeros(spec.width(i))) for i in spec.prunable_layers}

        return cls(zeros(), zeros())


def filter_l1(params: Params, spec: ModelSpec) -> dict[int, np.ndarray]:
    """l1 norm of every filter of every prunable conv layer."""
    return {
        i: np.abs(params[i].weight).sum(axis=(1, 2, 3))
        for i in spec.prunable_layers
        if isinstance(spec.layers[i], Conv2D)
    }


def accumulate_stats(
    stats: UnitStats,
    spec: ModelSpec,
    speed: str,
    dense_activations: dict[int, np.ndarray],
    conv_filter_l1: dict[int, np.ndarray],
    mask: Mask | None = None,
) -> UnitStats:
    """Add one client's statistics to its speed group.

    Dense layers contribute mean |activation| per neuron, conv layers the l1
    norm per filter. With ``mask`` the vectors cover only the kept units
    (what a slow client trained); otherwise every unit.
    """
    if speed not in ("slow", "fast"):
        raise InputError(f"speed must be 'slow' or 'fast', got {speed!r}")
    groups = {"slow": dict(stats.slow), "fast": dict(stats.fast)}
    target = groups[speed]
    for i in spec.prunable_layers:
        source = conv_filter_l1 if isinstance(spec.layers[i], Conv2D) else dense_activations
        if i not in source:
            raise InputError(f"no statistic reported for layer {i}")
        units = mask.indices(i) if mask is not None else np.arange(spec.width(i))
        values = np.asarray(source[i], dtype=float)
        if values.shape != units.shape:
            raise InputError(f"layer {i}: {values.shape[0] if values.ndim else 0} values for {len(units)} units")
        acc = target[i]
        total, count = acc.total.copy(), acc.count.copy()
        total[units] += values
        count[units] += 1
        target[i] = GroupAccumulator(total, count)
    return UnitStats(groups["slow"], groups["fast"])


def blended_score(stats: UnitStats) -> dict[int, np.ndarray]:
    """Equal-weight blend of slow- and fast-group means; single group falls back to its mean; no samples scores 0."""
    scores = {}
    for i in stats.fast:
        slow, fast = stats.slow[i], stats.fast[i]
        has_slow, has_fast = slow.count > 0, fast.count > 0
        scores[i] = np.where(
            has_slow & has_fast,
            0.5 * slow.mean() + 0.5 * fast.mean(),
            np.where(has_slow, slow.mean(), fast.mean()),
        )
    return scores


def top_units(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest scores, ties to the lower index, returned sorted."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:keep])


def update_mask(stats: UnitStats, spec: ModelSpec, drop_rate: float) -> Mask:
    _check_drop_rate(drop_rate)
    scores = blended_score(stats)
    return Mask({i: top_units(scores[i], keep_count(spec.width(i), drop_rate)) for i in spec.prunable_layers})


def count_submodels_lower_bound(hidden_widths: list[int], drop_rate: float) -> int:
    if any(w < 1 for w in hidden_widths):
        raise InputError("widths must be >= 1")
    return math.prod(math.comb(w, math.floor(drop_rate * w + 1e-9)) for w in hidden_widths)
