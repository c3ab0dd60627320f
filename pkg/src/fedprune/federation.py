"""Round orchestration for FedAvg and FedPrune."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .aggregation import AggregationConfig, ClientUpdate, aggregate, weighted_mean
from .config import ExperimentConfig
from .data import Dataset, PartitionPlan, generate_synthetic, load_idx, partition
from .errors import InputError
from .nn import ModelSpec, Params, count_flops, count_params, init_params, local_train, mlp, predict_logits, reference_cnn
from .nn import Conv2D, Dense, Flatten, MaxPool2D, ReLU, SoftmaxCrossEntropyHead
from .pruning import (
    Mask,
    UnitStats,
    accumulate_stats,
    extract_submodel,
    broadcast_submodel,
    filter_l1,
    full_coordinates,
    random_mask,
    submodel_spec,
    trained_coordinates,
    update_mask,
)


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    train: Dataset
    test: Dataset
    speed: str = "fast"

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class RoundReport:
    round: int
    strategy: str
    participants: list[int]
    dropped: list[int]
    train_loss: float  # nan when nobody trained
    weight_denominator: int
    client_accuracies: dict[int, float] | None = None
    acc_mean: float | None = None
    acc_std: float | None = None
    mask_fingerprint: str | None = None
    mask_updated: bool = False

    @property
    def empty(self) -> bool:
        return not self.participants

    def to_json_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if self.client_accuracies is not None:
            out["client_accuracies"] = {str(k): v for k, v in self.client_accuracies.items()}
        out["train_loss"] = None if math.isnan(self.train_loss) else self.train_loss
        return out


@dataclass
class FedPruneState:
    global_params: Params
    mask: Mask
    stats: UnitStats


# ---------------------------------------------------------------------------
# Clients


def assign_speed_classes(clients: list[ClientProfile], slow_fraction: float, seed: int) -> list[ClientProfile]:
    """Mark exactly ``floor(slow_fraction * N)`` clients slow, chosen by ``seed``."""
    if not 0.0 <= slow_fraction < 1.0:
        raise InputError("slow_fraction must lie in [0, 1)")
    n_slow = math.floor(slow_fraction * len(clients) + 1e-9)
    slow = set(np.random.default_rng(seed).choice(len(clients), size=n_slow, replace=False).tolist())
    return [dataclasses.replace(c, speed="slow" if pos in slow else "fast") for pos, c in enumerate(clients)]


def select_round_clients(clients: list[ClientProfile], n: int, t: int, seed: int) -> list[ClientProfile]:
    """Uniform sample of ``n`` clients without replacement; depends only on ``(seed, t)``."""
    if not 1 <= n <= len(clients):
        raise InputError(f"cannot select {n} of {len(clients)} clients")
    picked = np.random.default_rng([seed, t]).choice(len(clients), size=n, replace=False)
    return sorted((clients[i] for i in picked), key=lambda c: c.client_id)


def _train_seed(cfg: ExperimentConfig, t: int, client_id: int) -> int:
    return int(np.random.SeedSequence([cfg.resolved_seed("train"), t, client_id]).generate_state(1)[0])


def _sampling_seed(cfg: ExperimentConfig, t: int) -> int:
    return int(np.random.SeedSequence([cfg.resolved_seed("sampling"), t]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Rounds


def run_round_fedavg(
    spec: ModelSpec, global_params: Params, selected: list[ClientProfile], cfg: ExperimentConfig, t: int
) -> tuple[Params, RoundReport]:
    """Slow clients are dropped; fast clients train the full model."""
    fast = [c for c in selected if c.speed == "fast"]
    dropped = [c.client_id for c in selected if c.speed != "fast"]
    updates, losses = [], []
    full = full_coordinates(spec)
    for c in fast:
        new, _, loss = local_train(spec, global_params, c.train, cfg.epochs, cfg.batch_size, cfg.lr, _train_seed(cfg, t, c.client_id))
        updates.append(ClientUpdate(c.client_id, new, full, c.n_k))
        losses.append(loss)
    new_params = weighted_mean(updates, previous=global_params) if updates else global_params
    report = RoundReport(
        round=t,
        strategy=cfg.strategy,
        participants=[c.client_id for c in fast],
        dropped=dropped,
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        weight_denominator=sum(u.n_k for u in updates),
    )
    return new_params, report


def run_round_fedprune(
    spec: ModelSpec, state: FedPruneState, selected: list[ClientProfile], cfg: ExperimentConfig, t: int
) -> tuple[FedPruneState, RoundReport]:
    """Fast clients train the full model, slow clients the masked sub-model.

    With strategy ``small_model`` every client is served the sub-model.
    """
    mask, stats, params = state.mask, state.stats, state.global_params
    sub_spec, sub_params = extract_submodel(spec, params, mask)
    sub_flags = trained_coordinates(spec, mask)
    full = full_coordinates(spec)
    updates, losses = [], []
    for c in selected:
        seed = _train_seed(cfg, t, c.client_id)
        if c.speed == "slow" or cfg.strategy == "small_model":
            trained_sub, acts, loss = local_train(sub_spec, sub_params, c.train, cfg.epochs, cfg.batch_size, cfg.lr, seed)
            new = broadcast_submodel(spec, params, trained_sub, mask)
            stats = accumulate_stats(stats, spec, "slow", acts, filter_l1(trained_sub, sub_spec), mask)
            updates.append(ClientUpdate(c.client_id, new, sub_flags, c.n_k))
        else:
            new, acts, loss = local_train(spec, params, c.train, cfg.epochs, cfg.batch_size, cfg.lr, seed)
            stats = accumulate_stats(stats, spec, "fast", acts, filter_l1(new, spec))
            updates.append(ClientUpdate(c.client_id, new, full, c.n_k))
        losses.append(loss)
    mode = "clt" if cfg.strategy == "fedprune" else "fedavg"
    new_params = aggregate(updates, AggregationConfig(mode, t, _sampling_seed(cfg, t)), previous=params)
    updated = t % cfg.mask_update_round == 0
    if updated:
        mask = update_mask(stats, spec, cfg.drop_rate)
        stats = UnitStats.empty(spec)
    report = RoundReport(
        round=t,
        strategy=cfg.strategy,
        participants=[c.client_id for c in selected],
        dropped=[],
        train_loss=float(np.mean(losses)),
        weight_denominator=sum(u.n_k for u in updates),
        mask_fingerprint=mask.fingerprint(),
        mask_updated=updated,
    )
    return FedPruneState(new_params, mask, stats), report


# ---------------------------------------------------------------------------
# Experiment


def build_model(cfg: ExperimentConfig, sample_shape: tuple[int, ...], classes: int) -> ModelSpec:
    if cfg.model == "cnn":
        if sample_shape == (1, 28, 28):
            return reference_cnn(classes)
        c, h, w = sample_shape
        # scaled-down two-conv network for small images
        flat = 16 * (h // 4) * (w // 4)
        return ModelSpec(
            sample_shape,
            (
                Conv2D(c, 8, 3, 3, padding=1), ReLU(), MaxPool2D(),
                Conv2D(8, 16, 3, 3, padding=1), ReLU(), MaxPool2D(),
                Flatten(), Dense(flat, cfg.hidden[0]), ReLU(),
                Dense(cfg.hidden[0], classes), SoftmaxCrossEntropyHead(classes),
            ),
        )
    n_in = int(np.prod(sample_shape))
    return mlp(n_in, cfg.hidden, classes)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "idx":
        ds = load_idx(d.images_path, d.labels_path)
        if d.max_samples is not None and d.max_samples < len(ds):
            keep = np.sort(np.random.default_rng(cfg.resolved_seed("data")).choice(len(ds), d.max_samples, replace=False))
            ds = ds.subset(keep)
        if cfg.model == "mlp":
            ds = Dataset(ds.inputs.reshape(len(ds), -1), ds.labels, ds.classes)
        return ds
    return generate_synthetic(
        d.n_samples, d.n_features, d.classes, cfg.resolved_seed("data"),
        spread=d.spread, separation=d.separation, clusters_per_class=d.clusters_per_class,
    )


def build_clients(cfg: ExperimentConfig, dataset: Dataset | None = None) -> list[ClientProfile]:
    dataset = load_dataset(cfg) if dataset is None else dataset
    d = cfg.data
    plan = PartitionPlan(
        d.partition, d.num_clients, d.train_fraction, d.classes_per_client, cfg.resolved_seed("partition")
    )
    clients = [ClientProfile(k, tr, te) for k, (tr, te) in enumerate(partition(dataset, plan))]
    return assign_speed_classes(clients, cfg.slow_fraction, cfg.resolved_seed("slow"))


def evaluate_clients(spec: ModelSpec, params: Params, clients: list[ClientProfile]) -> dict[int, float]:
    """Accuracy of one model on every client's test set (one batched forward pass)."""
    inputs = np.concatenate([c.test.inputs for c in clients])
    preds = predict_logits(spec, params, inputs).argmax(axis=1)
    out, pos = {}, 0
    for c in clients:
        n = len(c.test)
        out[c.client_id] = float(np.mean(preds[pos : pos + n] == c.test.labels))
        pos += n
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[RoundReport] = field(default_factory=list)
    params: Params | None = None

    @property
    def final(self) -> RoundReport:
        return [r for r in self.reports if r.acc_mean is not None][-1]


def run_experiment(
    cfg: ExperimentConfig,
    clients: list[ClientProfile] | None = None,
    on_report: Callable[[RoundReport], None] | None = None,
) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds, evaluating the global model on every client's test set."""
    cfg.validate()
    if clients is None:
        clients = build_clients(cfg)
    if cfg.clients_per_round > len(clients):
        raise InputError(f"clients_per_round={cfg.clients_per_round} exceeds {len(clients)} clients")
    first = clients[0].train
    spec = build_model(cfg, first.inputs.shape[1:], first.classes)
    params = init_params(spec, cfg.resolved_seed("init"))
    state = None
    if cfg.strategy != "fedavg":
        state = FedPruneState(params, random_mask(spec, cfg.drop_rate, cfg.resolved_seed("mask")), UnitStats.empty(spec))
    result = ExperimentResult(cfg)
    for t in range(1, cfg.rounds + 1):
        selected = select_round_clients(clients, cfg.clients_per_round, t, cfg.resolved_seed("selection"))
        if state is None:
            params, report = run_round_fedavg(spec, params, selected, cfg, t)
        else:
            state, report = run_round_fedprune(spec, state, selected, cfg, t)
            params = state.global_params
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            if cfg.strategy == "small_model":
                accs = evaluate_clients(*extract_submodel(spec, params, state.mask), clients)
            else:
                accs = evaluate_clients(spec, params, clients)
            values = np.array(list(accs.values()))
            report = dataclasses.replace(
                report, client_accuracies=accs, acc_mean=float(values.mean()), acc_std=float(values.std())
            )
        result.reports.append(report)
        if on_report is not None:
            on_report(report)
    result.params = params
    return result


def model_size_summary(spec: ModelSpec, drop_rate: float, seed: int = 0) -> dict[str, int]:
    """Parameter and FLOP counts of the full model and of a ``drop_rate`` sub-model."""
    sub_spec = submodel_spec(spec, random_mask(spec, drop_rate, seed))
    return {
        "full_params": count_params(spec),
        "sub_params": count_params(sub_spec),
        "full_flops": count_flops(spec),
        "sub_flops": count_flops(sub_spec),
    }
