"""Server-side aggregation: masked weighted averaging and Normal-sampling (CLT) aggregation.

Every rule works coordinate-wise over the flattened parameter vector. A client
only contributes at coordinates it actually trained; weights ``n_k`` are
renormalized over the clients that trained each coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigError, InputError
from .nn import LayerParams, Params, params_to_vector, vector_to_params


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: Params  # global shape
    trained: dict[int, LayerParams]  # boolean flags, same shapes as params
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise InputError(f"client {self.client_id}: n_k must be >= 1")


@dataclass(frozen=True)
class AggregationConfig:
    mode: Literal["fedavg", "clt"]
    round_index: int
    rng_seed: int

    def __post_init__(self):
        if self.mode not in ("fedavg", "clt"):
            raise ConfigError(f"unknown aggregation mode {self.mode!r}")
        if self.round_index < 1:
            raise ConfigError("round_index starts at 1")


@dataclass(frozen=True)
class _Stacked:
    values: np.ndarray  # (K, P)
    weights: np.ndarray  # (K, P), per-coordinate weights summing to 1 where covered
    covered: np.ndarray  # (P,) at least one client trained the coordinate
    like: Params


def _stack(updates: list[ClientUpdate]) -> _Stacked:
    if not updates:
        raise InputError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    values = np.stack([params_to_vector(u.params) for u in ordered])
    trained = np.stack([params_to_vector(u.trained) for u in ordered]).astype(bool)
    if trained.shape != values.shape:
        raise InputError("trained flags do not match parameter shapes")
    raw = trained * np.array([float(u.n_k) for u in ordered])[:, None]
    denom = raw.sum(axis=0)
    covered = denom > 0
    weights = np.divide(raw, denom, out=np.zeros_like(raw), where=covered)
    assert np.allclose(weights.sum(axis=0)[covered], 1.0)
    return _Stacked(values, weights, covered, ordered[0].params)


def _mean(s: _Stacked, previous: Params | None) -> np.ndarray:
    mu = (s.weights * s.values).sum(axis=0)
    if not s.covered.all():
        if previous is None:
            raise InputError("some coordinates were trained by no client and no previous value was supplied")
        mu = np.where(s.covered, mu, params_to_vector(previous))
    return mu


def _stdev(s: _Stacked, mu: np.ndarray) -> np.ndarray:
    sigma = np.sqrt((s.weights * (s.values - mu) ** 2).sum(axis=0))
    trained = s.weights > 0
    n_trainers = trained.sum(axis=0)
    hi = np.where(trained, s.values, -np.inf).max(axis=0)
    lo = np.where(trained, s.values, np.inf).min(axis=0)
    # one trainer or identical values: exactly zero, not rounding residue
    return np.where((n_trainers > 1) & (hi > lo), sigma, 0.0)


def weighted_mean(updates: list[ClientUpdate], previous: Params | None = None) -> Params:
    """Per-coordinate ``sum_k (n_k / n) * params_k`` over the clients that trained it.

    Coordinates nobody trained take their value from ``previous``.
    """
    s = _stack(updates)
    return vector_to_params(_mean(s, previous), s.like)


def weighted_stdev(updates: list[ClientUpdate], previous: Params | None = None) -> Params:
    """Weighted population standard deviation per coordinate (0 where fewer than two clients trained)."""
    s = _stack(updates)
    return vector_to_params(_stdev(s, _mean(s, previous)), s.like)


def clt_aggregate(updates: list[ClientUpdate], config: AggregationConfig, previous: Params | None = None) -> Params:
    """Draw every coordinate from Normal(mean, (stdev / sqrt(t))^2)."""
    if config.mode != "clt":
        raise ConfigError("clt_aggregate requires mode='clt'")
    s = _stack(updates)
    mu = _mean(s, previous)
    sigma = _stdev(s, mu) / math.sqrt(config.round_index)
    z = np.random.default_rng(config.rng_seed).standard_normal(mu.shape)
    return vector_to_params(np.where(sigma > 0, mu + sigma * z, mu), s.like)


def aggregate(updates: list[ClientUpdate], config: AggregationConfig, previous: Params | None = None) -> Params:
    if config.mode == "clt":
        return clt_aggregate(updates, config, previous)
    return weighted_mean(updates, previous)


def fedavg_equivalence_form(
    global_before: Params, client_gradients: list[tuple[Params, int]], lr: float
) -> Params:
    """``global - lr * sum_k (n_k / n) grad_k``: the single-step closed form of FedAvg.

    Used as an oracle against :func:`weighted_mean` of one-step client updates.
    """
    if not client_gradients:
        return {i: LayerParams(p.weight.copy(), p.bias.copy()) for i, p in global_before.items()}
    n_total = float(sum(n for _, n in client_gradients))
    avg = sum(params_to_vector(g) * (n / n_total) for g, n in client_gradients)
    return vector_to_params(params_to_vector(global_before) - lr * avg, global_before)
