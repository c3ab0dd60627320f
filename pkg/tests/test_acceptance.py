"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line; the lines are
also repeated in the pytest terminal summary. The desk-scale criteria (5 to 8)
use the 1,797-image handwritten digits set bundled with scikit-learn, written to
IDX and read back through ``load_idx``, split skewed non-IID over 30 clients.
"""

import dataclasses
import functools
import time

import numpy as np
import pytest

from fedprune.aggregation import AggregationConfig, ClientUpdate, clt_aggregate, weighted_mean
from fedprune.cli import main
from fedprune.config import DataConfig, ExperimentConfig
from fedprune.data import export_digits_idx
from fedprune.federation import run_experiment
from fedprune.nn import LayerParams, backward, count_flops, forward, init_params, params_to_vector, reference_cnn
from fedprune.pruning import broadcast_submodel, extract_submodel, random_mask, submodel_spec
from oracles import finite_difference_grads, grads_close, random_batch, random_small_spec

LOG: list[str] = []
SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    LOG.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# property criteria


def test_criterion_1_gradient_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    failures = 0
    n_models = 120
    for m in range(n_models):
        spec = random_small_spec(rng)
        params = init_params(spec, m)
        params = {i: LayerParams(p.weight, rng.normal(scale=0.1, size=p.bias.shape)) for i, p in params.items()}
        batch = random_batch(spec, rng)
        failures += not grads_close(backward(spec, params, batch), finite_difference_grads(spec, params, batch))
    elapsed = time.perf_counter() - start
    record(1, failures == 0 and elapsed < 60, f"{n_models - failures}/{n_models} models within 1e-4 rel, {elapsed:.1f}s")


def test_criterion_2_fedavg_equivalence():
    cfg = ExperimentConfig(
        rounds=20, clients_per_round=5, epochs=2, batch_size=8, lr=0.05, hidden=(16, 8), slow_fraction=0.0,
        mask_update_round=5, data=DataConfig(n_samples=600, n_features=8, classes=5, num_clients=10),
    )
    start = time.perf_counter()
    a = run_experiment(dataclasses.replace(cfg, strategy="fedavg"))
    b = run_experiment(dataclasses.replace(cfg, strategy="fedprune_no_clt"))
    elapsed = time.perf_counter() - start
    same_params = np.array_equal(params_to_vector(a.params), params_to_vector(b.params))
    same_curve = [r.acc_mean for r in a.reports] == [r.acc_mean for r in b.reports]
    record(2, same_params and same_curve and elapsed < 60, f"20 rounds bit-identical={same_params and same_curve}, {elapsed:.1f}s")


def test_criterion_3_clt_degeneracy():
    rng = np.random.default_rng(0)
    small = {0: LayerParams(rng.normal(size=(3, 4)), rng.normal(size=3))}
    ups = [ClientUpdate(k, small, {0: LayerParams(np.ones((3, 4), bool), np.ones(3, bool))}, n) for k, n in enumerate((2, 5, 9))]
    exact = np.array_equal(
        params_to_vector(clt_aggregate(ups, AggregationConfig("clt", 4, 1))), params_to_vector(weighted_mean(ups))
    )
    flags = {0: LayerParams(np.ones((1, 1), bool), np.ones(1, bool))}
    pair = [
        ClientUpdate(0, {0: LayerParams(np.array([[0.5]]), np.zeros(1))}, flags, 1),
        ClientUpdate(1, {0: LayerParams(np.array([[1.5]]), np.zeros(1))}, flags, 1),
    ]
    draws = np.array([clt_aggregate(pair, AggregationConfig("clt", 1, s))[0].weight[0, 0] for s in range(10_000)])
    mu = 1.0  # sigma = 0.5
    rel = abs(draws.mean() - mu) / mu
    record(3, exact and rel <= 0.02, f"identical updates exact={exact}, MC mean {draws.mean():.4f} (rel err {rel:.4f})")


def test_criterion_4_mask_round_trip():
    rng = np.random.default_rng(7)
    bad_trip, worst = 0, 0.0
    for pair in range(1000):
        spec = random_small_spec(rng)
        while not spec.prunable_layers:
            spec = random_small_spec(rng)
        params = {i: LayerParams(rng.normal(size=p.weight.shape), rng.normal(size=p.bias.shape))
                  for i, p in init_params(spec, pair).items()}
        mask = random_mask(spec, float(rng.choice([0.0, 0.25, 0.5, 0.75])), pair)
        _, sub = extract_submodel(spec, params, mask)
        bad_trip += not np.array_equal(
            params_to_vector(broadcast_submodel(spec, params, sub, mask)), params_to_vector(params)
        )
        zeroed = {i: LayerParams(p.weight.copy(), p.bias.copy()) for i, p in params.items()}
        for i, kept in mask.kept.items():
            dropped = np.setdiff1d(np.arange(spec.width(i)), kept)
            zeroed[i].weight[dropped] = 0.0
            zeroed[i].bias[dropped] = 0.0
        sub_spec, sub_zeroed = extract_submodel(spec, zeroed, mask)
        batch = random_batch(spec, rng)
        worst = max(worst, float(np.abs(forward(sub_spec, sub_zeroed, batch)[2] - forward(spec, zeroed, batch)[2]).max()))
    record(4, bad_trip == 0 and worst <= 1e-12, f"1000 pairs, {bad_trip} round-trip mismatches, max forward gap {worst:.2e}")


# ---------------------------------------------------------------------------
# desk-scale directional criteria


@pytest.fixture(scope="module")
def digits(tmp_path_factory):
    return export_digits_idx(tmp_path_factory.mktemp("digits"))


def desk_config(images, labels, strategy, slow_fraction, seed):
    return ExperimentConfig(
        strategy=strategy, slow_fraction=slow_fraction, seed=seed,
        rounds=50, clients_per_round=10, epochs=10, batch_size=10, lr=0.01,
        drop_rate=0.5, mask_update_round=10, hidden=(64, 32), eval_every=10,
        data=DataConfig(source="idx", images_path=str(images), labels_path=str(labels),
                        num_clients=30, partition="skewed_niid", classes_per_client=5),
    )


@pytest.fixture(scope="module")
def desk(digits):
    @functools.lru_cache(maxsize=None)
    def final(strategy, slow_fraction):
        """Mean over seeds of the final (accuracy mean, accuracy std)."""
        runs = [run_experiment(desk_config(*digits, strategy, slow_fraction, s)).final for s in SEEDS]
        return float(np.mean([r.acc_mean for r in runs])), float(np.mean([r.acc_std for r in runs]))
    return final


def test_criterion_5_fedavg_degrades_with_slow_clients(desk):
    accs = [desk("fedavg", f)[0] for f in (0.1, 0.5, 0.9)]
    ok = all(later <= earlier + 0.02 for earlier, later in zip(accs, accs[1:]))
    record(5, ok, "FedAvg final acc at slow 0.1/0.5/0.9: " + " / ".join(f"{a:.3f}" for a in accs))


def test_criterion_6_fedprune_beats_fedavg_at_90_percent_slow(desk):
    fedavg, fedprune, no_clt = (desk(s, 0.9)[0] for s in ("fedavg", "fedprune", "fedprune_no_clt"))
    gain = fedprune - fedavg
    ok = gain >= 0.05 and fedprune >= no_clt
    record(6, ok, f"FedAvg {fedavg:.3f}, FedPrune {fedprune:.3f} (+{100 * gain:.1f} pts), w/o CLT {no_clt:.3f}")


def test_criterion_7_fedprune_is_fairer(desk):
    fedavg_std, fedprune_std = desk("fedavg", 0.9)[1], desk("fedprune", 0.9)[1]
    record(7, fedprune_std <= fedavg_std, f"per-client acc std FedPrune {fedprune_std:.3f} vs FedAvg {fedavg_std:.3f}")


def test_criterion_8_differential_serving_beats_small_model(desk):
    small, differential = desk("small_model", 0.5)[0], desk("fedprune_no_clt", 0.5)[0]
    # the 90% slow setting is reported for context only
    small90, diff90 = desk("small_model", 0.9)[0], desk("fedprune_no_clt", 0.9)[0]
    record(
        8, small <= differential,
        f"slow 0.5: sub-model for all {small:.3f} vs slow-only {differential:.3f} "
        f"(slow 0.9, not asserted: {small90:.3f} vs {diff90:.3f})",
    )


# ---------------------------------------------------------------------------
# accounting and reproducibility


def test_criterion_9_flop_reduction():
    spec = reference_cnn(62)
    full = count_flops(spec)
    sub = count_flops(submodel_spec(spec, random_mask(spec, 0.5, 0)))
    ratio = full / sub
    record(9, ratio > 2.0, f"full {full:,} vs 50% sub-model {sub:,} MACs, ratio {ratio:.2f}x (reported: 3.8x)")


def test_criterion_10_manifest_replay(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        '{"rounds": 4, "epochs": 1, "clients_per_round": 3, "hidden": [8], "lr": 0.05,'
        ' "data": {"n_samples": 200, "n_features": 6, "classes": 4, "num_clients": 5}}'
    )
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["compare", "--config", str(cfg), "--slow-fraction", "0.4", "--seed", "3", "--out", str(first)]) == 0
    assert main(["replay", str(first / "manifest.json"), "--out", str(second)]) == 0
    same = all((first / n).read_bytes() == (second / n).read_bytes() for n in ("results.csv", "comparison.csv"))
    record(10, same, f"replayed results.csv and comparison.csv byte-identical={same}")

