"""Federated orchestration: pool broadcast, ratio assignment and weighted SGD rounds.

The server update is ``w <- w - eta_t * sum_k g_k(w)`` over the
participating clients, summed in ascending client id.  Every random draw is
keyed by ``(seed, client, round)`` so thread scheduling cannot change the
result.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import ratio_estimation as re_
from .predictors import Predictor, WeightedBatch, accuracy, default_loss, weighted_grad, weighted_loss
from .synthdata import DatasetSplit, FiniteSupportRegression, SeparableOracle, stream

SHUFFLE_STREAM = 0x5F1E
PARTICIPATION_STREAM = 0x9A27
BATCH_STREAM = 0xBA7C


class TrainMode(str, Enum):
    FTW = "FTW"
    FITW = "FITW"
    FEDAVG = "FEDAVG"
    FOCUSED = "FOCUSED"


class ProtocolError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    def __init__(self, client_id: int, round_: int):
        super().__init__(f"non-finite gradient from client {client_id} in round {round_}")
        self.client_id = client_id


@dataclass(frozen=True)
class FocusSpec:
    """Train for client ``target``'s test distribution; ``weights[k]`` scales client k."""

    target: int
    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("focus weights must be non-negative")


@dataclass
class ClientState:
    client_id: int
    split: DatasetSplit
    weights: np.ndarray | None = None
    ratio_info: dict = field(default_factory=dict)


def make_clients(splits: Sequence[DatasetSplit]) -> list[ClientState]:
    return [ClientState(s.client_id, s) for s in sorted(splits, key=lambda s: s.client_id)]


def broadcast_shuffled_pool(clients: Sequence[ClientState], seed: int) -> np.ndarray:
    """Union of every client's unlabeled test contribution, uniformly permuted."""
    sizes = {c.split.n_test for c in clients}
    if len(sizes) != 1:
        raise ProtocolError(f"clients contributed unequal test pools: {sorted(sizes)}")
    pooled = np.concatenate([c.split.test_pool for c in clients])
    return pooled[stream(seed, SHUFFLE_STREAM).permutation(len(pooled))]


# --------------------------------------------------------------------------
# ratio sources


class RatioSource(Protocol):
    def combined(self, split: DatasetSplit, pooled_test: np.ndarray, num_clients: int) -> np.ndarray: ...

    def local(self, split: DatasetSplit) -> np.ndarray: ...

    def focused(self, split: DatasetSplit, target_pool: np.ndarray, target: int) -> np.ndarray: ...


class UnitRatios:
    def combined(self, split, pooled_test, num_clients):
        return np.ones(split.n_train)

    def local(self, split):
        return np.ones(split.n_train)

    def focused(self, split, target_pool, target):
        return np.ones(split.n_train)


@dataclass
class OracleRatios:
    """Exact ratios of a separable scenario, looked up by training-cell index."""

    oracle: SeparableOracle

    def combined(self, split, pooled_test, num_clients):
        return self.oracle.combined(split.client_id, split.train_group)

    def local(self, split):
        return self.oracle.local(split.client_id, split.train_group)

    def focused(self, split, target_pool, target):
        return self.oracle.focused(split.client_id, target, split.train_group)


@dataclass
class FittedRatios:
    """Supremum estimate then HDRM fit, per client; weights clipped to ``[0, clip * r_tilde]``."""

    variant: str = "LSIF"
    method: str = "kmeans"
    num_bins: int = 20
    kmeans_iters: int = 50
    safety: float = 1.0
    model_kind: str = "linear-softplus"
    hyper: re_.RatioHyper = field(default_factory=re_.RatioHyper)
    seed: int = 0
    models: dict = field(default_factory=dict)
    suprema: dict = field(default_factory=dict)

    def _fit(self, client_id, train_x, pool, num_clients):
        if self.method == "kmeans":
            sup = re_.estimate_supremum_kmeans(
                train_x, pool, self.num_bins, self.kmeans_iters, seed=self.seed + client_id,
                num_clients=num_clients, safety=self.safety,
            )
        else:
            sup = re_.estimate_supremum_histogram(train_x, pool, self.num_bins, num_clients, self.safety)
        centroids = None
        if self.model_kind == "class-table":
            centroids, _ = re_.kmeans(np.vstack([train_x, pool]), self.num_bins, self.kmeans_iters, self.seed + client_id)
        model = re_.train_ratio_model(
            self.variant, train_x, pool, sup, num_clients, self.hyper,
            seed=self.seed * 1009 + client_id, kind=self.model_kind, centroids=centroids,
        )
        self.models[client_id], self.suprema[client_id] = model, sup
        return np.clip(model(train_x), 0.0, self.hyper.clip_factor * sup.r_tilde)

    def combined(self, split, pooled_test, num_clients):
        return self._fit(split.client_id, split.train_x, pooled_test, num_clients)

    def local(self, split):
        return self._fit(split.client_id, split.train_x, split.test_pool, 1)

    def focused(self, split, target_pool, target):
        return self._fit(split.client_id, split.train_x, target_pool, 1)


@dataclass
class PrefitRatios:
    """Previously trained models keyed by client id."""

    models: dict

    def _get(self, client_id):
        if client_id not in self.models:
            raise ConfigurationError(f"no ratio model for client {client_id}")
        return self.models[client_id]

    def _weights(self, split):
        model = self._get(split.client_id)
        r_tilde = model.meta.get("r_tilde")
        w = model(split.train_x)
        return np.clip(w, 0.0, 2.0 * r_tilde) if r_tilde else w

    def combined(self, split, pooled_test, num_clients):
        return self._weights(split)

    def local(self, split):
        return self._weights(split)

    def focused(self, split, target_pool, target):
        return self._weights(split)


def assign_ratios(
    clients: Sequence[ClientState],
    mode: TrainMode | str,
    source: RatioSource | None = None,
    pooled_test: np.ndarray | None = None,
    focus: FocusSpec | None = None,
) -> list[ClientState]:
    """Cache per-example weights on every client.

    FITW hands the source nothing but the client's own split.
    """
    mode = TrainMode(mode)
    K = len(clients)
    if mode is TrainMode.FEDAVG:
        source = UnitRatios()
    elif source is None:
        raise ConfigurationError(f"{mode.value} needs a ratio source")
    for c in clients:
        if mode is TrainMode.FEDAVG:
            w = source.local(c.split)
        elif mode is TrainMode.FITW:
            w = source.local(c.split)
        elif mode is TrainMode.FTW:
            if pooled_test is None:
                raise ConfigurationError("FTW needs the broadcast test pool")
            w = source.combined(c.split, pooled_test, K)
        else:
            if focus is None or len(focus.weights) != K:
                raise ConfigurationError("FOCUSED needs one focus weight per client")
            target_pool = clients[focus.target].split.test_pool
            w = focus.weights[c.client_id] * source.focused(c.split, target_pool, focus.target)
        w = np.asarray(w, dtype=float)
        if w.shape != (c.split.n_train,) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError(f"client {c.client_id}: invalid importance weights")
        c.weights = w
        c.ratio_info = {"mean_weight": float(w.mean()), "max_weight": float(w.max())}
    return list(clients)


# --------------------------------------------------------------------------
# rounds


@dataclass
class TrainHyper:
    rounds: int = 500
    lr: float | None = None
    batch_size: int | None = 64
    participation: float = 1.0
    schedule: str = "constant"
    aggregation: str = "sum"
    server_optimizer: str = "sgd"
    eval_every: int = 50
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def step_size(self, predictor: Predictor) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if predictor.kind == "mlp" else 0.05


@dataclass
class ServerState:
    params: np.ndarray
    lr: float
    round: int = 0
    schedule: str = "constant"
    participation: float = 1.0
    aggregation: str = "sum"
    optimizer: str = "sgd"
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation fraction must lie in (0, 1]")
        if not self.lr > 0:
            raise ConfigurationError("step size must be positive")

    def step_size(self, t: int) -> float:
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "inv_sqrt":
            return self.lr / math.sqrt(t + 1)
        raise ConfigurationError(f"unknown step-size schedule {self.schedule!r}")


@dataclass
class RoundLog:
    round: int
    participants: list[int]
    grad_norms: dict[int, float]
    loss: float
    client_accuracy: dict[int, float] | None = None

    @property
    def avg_accuracy(self) -> float | None:
        if not self.client_accuracy:
            return None
        return float(np.mean(list(self.client_accuracy.values())))


def sample_participants(num_clients: int, fraction: float, seed: int, round_: int) -> list[int]:
    if fraction >= 1.0:
        return list(range(num_clients))
    m = max(1, int(round(fraction * num_clients)))
    chosen = stream(seed, PARTICIPATION_STREAM, round_).choice(num_clients, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def client_batch(client: ClientState, batch_size: int | None, seed: int, round_: int) -> WeightedBatch:
    s = client.split
    if batch_size is None or batch_size >= s.n_train:
        idx = np.arange(s.n_train)
    else:
        idx = stream(seed, BATCH_STREAM, client.client_id, round_).choice(s.n_train, size=batch_size, replace=False)
    return WeightedBatch(s.train_x[idx], s.train_y[idx], client.weights[idx])


def run_round(
    server: ServerState,
    predictor: Predictor,
    clients: Sequence[ClientState],
    seed: int,
    batch_size: int | None = 64,
    loss_kind: str | None = None,
    executor: ThreadPoolExecutor | None = None,
    adam_betas=(0.9, 0.999),
    adam_eps: float = 1e-8,
) -> tuple[ServerState, RoundLog]:
    t = server.round
    model = predictor.with_params(server.params)
    participants = sample_participants(len(clients), server.participation, seed, t)
    loss_kind = loss_kind or default_loss(predictor)

    def work(k):
        batch = client_batch(clients[k], batch_size, seed, t)
        return weighted_grad(model, batch, loss_kind), weighted_loss(model, batch, loss_kind)

    results = list(executor.map(work, participants)) if executor else [work(k) for k in participants]

    total = np.zeros_like(server.params)
    norms, loss = {}, 0.0
    for k, (g, l) in zip(participants, results):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(k, t)
        total += g
        norms[k] = float(np.linalg.norm(g))
        loss += l
    if server.aggregation == "mean":
        total /= len(participants)
    elif server.aggregation != "sum":
        raise ConfigurationError(f"unknown aggregation {server.aggregation!r}")

    eta = server.step_size(t)
    if server.optimizer == "sgd":
        new = replace(server, params=server.params - eta * total, round=t + 1)
    elif server.optimizer == "adam":
        b1, b2 = adam_betas
        m = (server.adam_m if server.adam_m is not None else np.zeros_like(total)) * b1 + (1 - b1) * total
        v = (server.adam_v if server.adam_v is not None else np.zeros_like(total)) * b2 + (1 - b2) * total**2
        m_hat, v_hat = m / (1 - b1 ** (t + 1)), v / (1 - b2 ** (t + 1))
        step = eta * m_hat / (np.sqrt(v_hat) + adam_eps)
        new = replace(server, params=server.params - step, round=t + 1, adam_m=m, adam_v=v)
    else:
        raise ConfigurationError(f"unknown server optimizer {server.optimizer!r}")
    return new, RoundLog(t, participants, norms, loss)


def client_accuracies(predictor: Predictor, clients: Sequence[ClientState]) -> dict[int, float]:
    return {c.client_id: accuracy(predictor, c.split.eval_x, c.split.eval_y) for c in clients}


@dataclass
class TrainingResult:
    mode: TrainMode
    predictor: Predictor
    log: list[RoundLog]
    clients: list[ClientState]
    client_accuracy: dict[int, float] | None

    def summary(self) -> dict:
        out = {"mode": self.mode.value, "rounds": len(self.log)}
        if self.client_accuracy:
            accs = [self.client_accuracy[k] for k in sorted(self.client_accuracy)]
            out.update(
                per_client_accuracy=accs,
                average_accuracy=float(np.mean(accs)),
                worst_accuracy=float(np.min(accs)),
                best_accuracy=float(np.max(accs)),
            )
        return out


def run_training(
    splits: Sequence[DatasetSplit],
    mode: TrainMode | str,
    predictor: Predictor,
    hyper: TrainHyper | None = None,
    seed: int = 0,
    ratio_source: RatioSource | None = None,
    focus: FocusSpec | None = None,
    threads: int = 1,
    loss_kind: str | None = None,
) -> TrainingResult:
    """Broadcast (FTW only), ratio assignment, then ``hyper.rounds`` synchronous rounds."""
    mode = TrainMode(mode)
    hyper = hyper or TrainHyper()
    clients = make_clients(splits)
    if [c.client_id for c in clients] != list(range(len(clients))):
        raise ConfigurationError("client ids must be 0..K-1")
    pooled = broadcast_shuffled_pool(clients, seed) if mode is TrainMode.FTW else None
    assign_ratios(clients, mode, ratio_source, pooled, focus)

    server = ServerState(
        params=predictor.params.copy(),
        lr=hyper.step_size(predictor),
        schedule=hyper.schedule,
        participation=hyper.participation,
        aggregation=hyper.aggregation,
        optimizer=hyper.server_optimizer,
    )
    classify = default_loss(predictor) == "cross-entropy" if loss_kind is None else loss_kind == "cross-entropy"
    log = []
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for t in range(hyper.rounds):
            server, entry = run_round(
                server, predictor, clients, seed, hyper.batch_size, loss_kind, executor,
                hyper.adam_betas, hyper.adam_eps,
            )
            last = t == hyper.rounds - 1
            if classify and hyper.eval_every and ((t + 1) % hyper.eval_every == 0 or last):
                entry.client_accuracy = client_accuracies(predictor.with_params(server.params), clients)
            log.append(entry)
    finally:
        if executor:
            executor.shutdown()
    final = predictor.with_params(server.params)
    accs = client_accuracies(final, clients) if classify else None
    return TrainingResult(mode, final, log, clients, accs)


def write_round_log(result: TrainingResult, path) -> None:
    """CSV: round, mode, avg_loss, avg_acc, acc_client_0, ...  Accuracy cells are blank between evaluations."""
    K = len(result.clients)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "mode", "avg_loss", "avg_acc", *[f"acc_client_{k}" for k in range(K)]])
        for e in result.log:
            accs = e.client_accuracy or {}
            avg = e.avg_accuracy
            w.writerow(
                [e.round, result.mode.value, repr(e.loss / len(e.participants)), "" if avg is None else repr(avg)]
                + ["" if k not in accs else repr(accs[k]) for k in range(K)]
            )


def write_summary(result: TrainingResult, path) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2), encoding="utf-8")


# --------------------------------------------------------------------------
# consistency


def _design(x) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def true_risk_minimizer(family: FiniteSupportRegression) -> tuple[np.ndarray, np.ndarray]:
    """Affine minimizer of the average test risk and the test second moment of the design."""
    phi = _design(family.support)
    q = family.test_probs.mean(axis=0)
    A = phi.T @ (q[:, None] * phi)
    theta = np.linalg.solve(A, phi.T @ (q * family.target))
    return theta, A


def fit_weighted_least_squares(splits: Sequence[DatasetSplit], weights: Sequence[np.ndarray]) -> np.ndarray:
    """Exact minimizer of ``sum_k (1/n_k) sum_i w_i (theta . [x_i, 1] - y_i)^2``."""
    d = splits[0].train_x.shape[1] + 1
    A, b = np.zeros((d, d)), np.zeros(d)
    for s, w in zip(splits, weights):
        phi = _design(s.train_x)
        A += phi.T @ (w[:, None] * phi) / s.n_train
        b += phi.T @ (w * s.train_y) / s.n_train
    return np.linalg.lstsq(A, b, rcond=None)[0]


@dataclass
class ConsistencyRow:
    n: int
    median_excess: float
    std_excess: float
    excess: list[float]


def consistency_sweep(
    family: FiniteSupportRegression,
    mode: TrainMode | str,
    n_grid: Sequence[int],
    seeds: Sequence[int],
    ratio_source: RatioSource | None = None,
) -> list[ConsistencyRow]:
    """Excess average-test risk of the exact weighted-ERM solution, per training size.

    Ratios default to the family's exact oracle.
    """
    mode = TrainMode(mode)
    theta_star, A = true_risk_minimizer(family)
    source = ratio_source or OracleRatios(family.oracle())
    rows = []
    for n in n_grid:
        vals = []
        for seed in seeds:
            clients = make_clients(family.sample(int(n), seed))
            pooled = broadcast_shuffled_pool(clients, seed) if mode is TrainMode.FTW else None
            assign_ratios(clients, mode, source, pooled)
            theta = fit_weighted_least_squares([c.split for c in clients], [c.weights for c in clients])
            diff = theta - theta_star
            vals.append(float(diff @ A @ diff))
        rows.append(ConsistencyRow(int(n), float(np.median(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, vals))
    return rows


def strictly_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))
