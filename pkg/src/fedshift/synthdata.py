"""Synthetic multi-client datasets with controlled target and covariate shift.

Every scenario here is separable by construction (each cell of the input
space carries one label), so exact importance ratios are available from the
label proportions alone and can serve as oracles for the estimators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

# stream tags mixed into SeedSequence entropy so that pools, clients and
# rounds never share a random stream
POOL_STREAM = 0x5EED
CLIENT_STREAM = 0xC11E


class InvalidProportionsError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class UndefinedRatioError(ValueError):
    pass


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for ``(seed, *tags)``; never touches global state."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass(frozen=True)
class ClassProportions:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise InvalidProportionsError("proportions must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidProportionsError(f"negative or non-finite proportions: {w}")
        if w.sum() <= 0:
            raise InvalidProportionsError("proportions are zero for every class")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "ClassProportions":
        return cls(np.asarray(counts, dtype=float))

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    @property
    def num_classes(self) -> int:
        return self.weights.size

    def __getitem__(self, label: int) -> float:
        return float(self.normalized[label])


@dataclass
class DatasetSplit:
    """Data held by one client.

    ``train_group`` is the cell index of every training point (the class label
    for classification scenarios); separable oracles map it to a ratio.
    ``test_pool`` is unlabeled and is what the client may share with the server.
    """

    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_pool: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    train_group: np.ndarray | None = None

    def __post_init__(self):
        if len(self.train_x) == 0:
            raise ValueError(f"client {self.client_id}: empty training set")
        if self.train_group is None:
            self.train_group = np.asarray(self.train_y, dtype=int)

    @property
    def n_train(self) -> int:
        return len(self.train_x)

    @property
    def n_test(self) -> int:
        return len(self.test_pool)


# --------------------------------------------------------------------------
# base generators


@dataclass(frozen=True)
class GaussianClusters:
    """Class-conditional isotropic Gaussians.

    With ``dim >= num_classes`` the means sit on scaled basis vectors, so all
    pairs of classes are equally far apart; otherwise means are drawn once
    from ``N(0, separation^2 I)`` using ``mean_seed``.
    """

    num_classes: int
    dim: int
    separation: float = 3.0
    scale: float = 1.0
    mean_seed: int = 0

    @property
    def means(self) -> np.ndarray:
        if self.dim >= self.num_classes:
            means = np.zeros((self.num_classes, self.dim))
            means[np.arange(self.num_classes), np.arange(self.num_classes)] = self.separation
            return means
        rng = stream(self.mean_seed, 0x3EA5)
        return self.separation * rng.standard_normal((self.num_classes, self.dim))

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.means[label] + self.scale * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class OneHotBasis:
    """Every sample of class ``i`` is the basis vector ``e_i``."""

    num_classes: int

    @property
    def dim(self) -> int:
        return self.num_classes

    def sample(self, label: int, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros((n, self.num_classes))
        out[:, label] = 1.0
        return out


def sample_one_hot(proportions: ClassProportions | Sequence[float], n: int, seed: int) -> np.ndarray:
    """Draw ``n`` basis vectors, ``e_i`` with probability ``proportions[i]``."""
    if not isinstance(proportions, ClassProportions):
        proportions = ClassProportions(np.asarray(proportions, dtype=float))
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = stream(seed, 0x0E40)
    d = proportions.num_classes
    idx = rng.choice(d, size=n, p=proportions.normalized)
    out = np.zeros((n, d))
    out[np.arange(n), idx] = 1.0
    return out


# --------------------------------------------------------------------------
# target-shift scenarios


@dataclass
class ShiftScenario:
    """Per-client class counts for train, shared test pool and held-out eval.

    The eval set is disjoint from the pool and, unless given explicitly, uses
    the same per-class counts as the pool.
    """

    train_counts: np.ndarray
    test_counts: np.ndarray
    generator: GaussianClusters | OneHotBasis
    seed: int = 0
    eval_counts: np.ndarray | None = None

    def __post_init__(self):
        self.train_counts = np.asarray(self.train_counts, dtype=int)
        self.test_counts = np.asarray(self.test_counts, dtype=int)
        self.eval_counts = (
            self.test_counts.copy() if self.eval_counts is None else np.asarray(self.eval_counts, dtype=int)
        )
        shapes = {self.train_counts.shape, self.test_counts.shape, self.eval_counts.shape}
        if len(shapes) != 1 or self.train_counts.ndim != 2:
            raise ValueError(f"count tables must share one (clients, classes) shape, got {shapes}")
        if self.train_counts.shape[0] < 1:
            raise ValueError("need at least one client")
        if self.train_counts.shape[1] != self.generator.num_classes:
            raise ValueError("count tables and generator disagree on the number of classes")

    @property
    def num_clients(self) -> int:
        return self.train_counts.shape[0]

    @property
    def num_classes(self) -> int:
        return self.train_counts.shape[1]

    def train_proportions(self, k: int) -> ClassProportions:
        return ClassProportions.from_counts(self.train_counts[k])

    def test_proportions(self, k: int) -> ClassProportions:
        return ClassProportions.from_counts(self.test_counts[k])

    def oracle(self) -> "SeparableOracle":
        return SeparableOracle(
            train_probs=np.stack([self.train_proportions(k).normalized for k in range(self.num_clients)]),
            test_probs=np.stack([self.test_proportions(k).normalized for k in range(self.num_clients)]),
        )

    def build(self) -> list[DatasetSplit]:
        return make_target_shift_scenario(
            self.train_counts, self.generator, self.seed, test_counts=self.test_counts, eval_counts=self.eval_counts
        )


def make_target_shift_scenario(
    class_counts_per_client,
    base_generator,
    seed: int,
    *,
    test_counts=None,
    eval_counts=None,
    pool_size: int | None = None,
) -> list[DatasetSplit]:
    """Subsample per-class pools without replacement into client splits.

    ``class_counts_per_client`` is the (clients, classes) train table.  One
    pool per class is generated up front, of ``pool_size`` points or exactly
    the total requested for that class when ``pool_size`` is None.
    """
    train_counts = np.asarray(class_counts_per_client, dtype=int)
    test_counts = np.zeros_like(train_counts) if test_counts is None else np.asarray(test_counts, dtype=int)
    eval_counts = test_counts.copy() if eval_counts is None else np.asarray(eval_counts, dtype=int)
    for name, table in (("train", train_counts), ("test", test_counts), ("eval", eval_counts)):
        if np.any(table < 0):
            raise ValueError(f"negative {name} counts")
    if np.any(train_counts.sum(axis=1) == 0):
        raise ValueError("every client needs a non-empty training set")
    pool_totals = test_counts.sum(axis=1)
    if np.any(pool_totals != pool_totals[0]):
        raise ValueError(f"test pool size must be identical across clients, got {pool_totals.tolist()}")

    num_clients, num_classes = train_counts.shape
    requested = train_counts.sum(axis=0) + test_counts.sum(axis=0) + eval_counts.sum(axis=0)
    pools, cursor = [], np.zeros(num_classes, dtype=int)
    for c in range(num_classes):
        size = int(requested[c]) if pool_size is None else int(pool_size)
        if requested[c] > size:
            raise InsufficientDataError(f"class {c}: requested {requested[c]} samples, pool holds {size}")
        rng = stream(seed, POOL_STREAM, c)
        pool = base_generator.sample(c, size, rng)
        pools.append(pool[rng.permutation(size)])

    def take(c: int, n: int) -> np.ndarray:
        out = pools[c][cursor[c] : cursor[c] + n]
        cursor[c] += n
        return out

    splits = []
    for k in range(num_clients):
        parts = {}
        for name, table in (("train", train_counts), ("test", test_counts), ("eval", eval_counts)):
            xs = [take(c, table[k, c]) for c in range(num_classes)]
            ys = [np.full(table[k, c], c) for c in range(num_classes)]
            parts[name] = (np.concatenate(xs), np.concatenate(ys).astype(int))
        rng = stream(seed, CLIENT_STREAM, k)
        order = {name: rng.permutation(len(parts[name][1])) for name in parts}
        tx, ty = (a[order["train"]] for a in parts["train"])
        px = parts["test"][0][order["test"]]
        ex, ey = (a[order["eval"]] for a in parts["eval"])
        splits.append(DatasetSplit(k, tx, ty, px, ex, ey, train_group=ty.copy()))
    return splits


# --------------------------------------------------------------------------
# exact ratios


@dataclass(frozen=True)
class SeparableOracle:
    """Exact ratios for separable scenarios, indexed by cell (label).

    ``train_probs[k, g]`` and ``test_probs[k, g]`` are the probabilities of
    cell ``g`` under client ``k``'s train and test distributions.
    """

    train_probs: np.ndarray
    test_probs: np.ndarray

    @property
    def num_clients(self) -> int:
        return self.train_probs.shape[0]

    def _denominator(self, k: int, groups) -> np.ndarray:
        den = self.train_probs[k][np.asarray(groups, dtype=int)]
        if np.any(den <= 0):
            raise UndefinedRatioError(f"client {k} has zero train probability on a requested cell")
        return den

    def combined(self, k: int, groups) -> np.ndarray:
        groups = np.asarray(groups, dtype=int)
        return self.test_probs.sum(axis=0)[groups] / self._denominator(k, groups)

    def local(self, k: int, groups) -> np.ndarray:
        groups = np.asarray(groups, dtype=int)
        return self.test_probs[k][groups] / self._denominator(k, groups)

    def focused(self, k: int, target: int, groups) -> np.ndarray:
        groups = np.asarray(groups, dtype=int)
        return self.test_probs[target][groups] / self._denominator(k, groups)

    def supremum(self, k: int) -> float:
        support = self.train_probs[k] > 0
        return float(np.max(self.test_probs.sum(axis=0)[support] / self.train_probs[k][support]))


def exact_ratio_target_shift(q_tr: ClassProportions, q_te: ClassProportions, label: int) -> float:
    """``q_te(label) / q_tr(label)``; the true density ratio when both are separable."""
    if q_tr[label] <= 0:
        raise UndefinedRatioError(f"train proportion of class {label} is zero")
    return q_te[label] / q_tr[label]


def exact_combined_ratio(k: int, scenario: ShiftScenario, label: int) -> float:
    """Sum of every client's test proportion at ``label`` over client k's train proportion."""
    q_tr = scenario.train_proportions(k)
    if q_tr[label] <= 0:
        raise UndefinedRatioError(f"client {k}: train proportion of class {label} is zero")
    return sum(scenario.test_proportions(l)[label] for l in range(scenario.num_clients)) / q_tr[label]


def gaussian_shift_pair(
    mean_tr: float, mean_te: float, variance: float, n_tr: int, n_te: int, seed: int
) -> tuple[np.ndarray, np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """1-D Gaussian train/test samples of shape (n, 1) and their exact density ratio."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    rng = stream(seed, 0x6A55)
    sd = np.sqrt(variance)
    x_tr = mean_tr + sd * rng.standard_normal((n_tr, 1))
    x_te = mean_te + sd * rng.standard_normal((n_te, 1))
    slope = (mean_te - mean_tr) / variance
    offset = (mean_tr**2 - mean_te**2) / (2 * variance)

    def ratio(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[:, 0]
        return np.exp(slope * x + offset)

    return x_tr, x_te, ratio


# --------------------------------------------------------------------------
# finite-support regression (used for consistency sweeps)


@dataclass
class FiniteSupportRegression:
    """Regression on finitely many input points with a nonlinear target.

    Inputs take the value ``support[g]`` with client-specific probabilities,
    labels are ``target[g] + noise_std * N(0, 1)``.  Fitting a linear model
    with intercept is misspecified whenever ``target`` is not affine, so
    unweighted ERM is biased under shift while importance-weighted ERM
    converges to the test-risk minimizer.
    """

    support: np.ndarray
    target: np.ndarray
    train_probs: np.ndarray
    test_probs: np.ndarray
    noise_std: float = 0.5
    eval_size: int = 200

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float)
        if self.support.ndim == 1:
            self.support = self.support[:, None]
        self.target = np.asarray(self.target, dtype=float)
        self.train_probs = np.asarray(self.train_probs, dtype=float)
        self.test_probs = np.asarray(self.test_probs, dtype=float)
        self.train_probs = self.train_probs / self.train_probs.sum(axis=1, keepdims=True)
        self.test_probs = self.test_probs / self.test_probs.sum(axis=1, keepdims=True)

    @property
    def num_clients(self) -> int:
        return self.train_probs.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def oracle(self) -> SeparableOracle:
        return SeparableOracle(self.train_probs, self.test_probs)

    def sample(self, n_train: int, seed: int, n_test: int | None = None) -> list[DatasetSplit]:
        n_test = n_train if n_test is None else n_test
        m = len(self.support)
        splits = []
        for k in range(self.num_clients):
            rng = stream(seed, CLIENT_STREAM, k)
            g_tr = rng.choice(m, size=n_train, p=self.train_probs[k])
            g_te = rng.choice(m, size=n_test, p=self.test_probs[k])
            g_ev = rng.choice(m, size=self.eval_size, p=self.test_probs[k])
            y_tr = self.target[g_tr] + self.noise_std * rng.standard_normal(n_train)
            y_ev = self.target[g_ev] + self.noise_std * rng.standard_normal(self.eval_size)
            splits.append(
                DatasetSplit(k, self.support[g_tr], y_tr, self.support[g_te], self.support[g_ev], y_ev, train_group=g_tr)
            )
        return splits


def default_consistency_family() -> FiniteSupportRegression:
    """Two clients on eleven points in [0, 1], quadratic target, opposite skews."""
    support = np.linspace(0.0, 1.0, 11)
    low = np.exp(-3.0 * support)
    high = np.exp(3.0 * support)
    mid = np.exp(-8.0 * (support - 0.5) ** 2)
    return FiniteSupportRegression(
        support=support,
        target=support**2,
        train_probs=np.stack([low, mid]),
        test_probs=np.stack([high, high * mid]),
        noise_std=0.3,
    )


# --------------------------------------------------------------------------
# count tables reproduced from the published target-shift experiments


def fashion_mnist_five_client_counts() -> tuple[np.ndarray, np.ndarray]:
    """Client k trains mostly on class 5+k and is tested mostly on class k."""
    train = np.full((5, 10), 34)
    test = np.full((5, 10), 5)
    for k in range(5):
        train[k, 5 + k] = 5862
        test[k, k] = 977
    return train, test


def fashion_mnist_two_client_counts() -> tuple[np.ndarray, np.ndarray]:
    train = np.array([[100] * 10, [39] * 5 + [3986] * 5])
    test = np.array([[9] * 5 + [990] * 5, [990] * 5 + [9] * 5])
    return train, test


def ratio20_proportions() -> tuple[ClassProportions, ClassProportions]:
    """Single-client label shift whose largest true ratio is exactly 20."""
    q_tr = ClassProportions(np.array([1 / 20] * 5 + [1.0] * 5))
    q_te = ClassProportions(np.array([1.0] * 5 + [1 / 20] * 5))
    return q_tr, q_te


def ratio20_scenario(n_train: int, n_test: int, dim: int = 10, separation: float = 8.0, seed: int = 0) -> ShiftScenario:
    q_tr, q_te = ratio20_proportions()
    return ShiftScenario(
        train_counts=_round_counts(q_tr.normalized, n_train)[None, :],
        test_counts=_round_counts(q_te.normalized, n_test)[None, :],
        generator=GaussianClusters(10, dim, separation=separation),
        seed=seed,
    )


def _round_counts(p: np.ndarray, n: int) -> np.ndarray:
    """Largest-remainder rounding of ``n * p`` so the counts sum to ``n``."""
    raw = p * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


# --------------------------------------------------------------------------
# export


def export_csv(splits: Sequence[DatasetSplit], path: str | Path) -> None:
    """One row per sample: client_id, split, label, x0, x1, ...  Pool rows have no label."""
    dim = splits[0].train_x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "split", "label", *[f"x{i}" for i in range(dim)]])
        for s in splits:
            for x, y in zip(s.train_x, s.train_y):
                writer.writerow([s.client_id, "train", _fmt_label(y), *map(repr, x.tolist())])
            for x in s.test_pool:
                writer.writerow([s.client_id, "test_pool", "", *map(repr, x.tolist())])
            for x, y in zip(s.eval_x, s.eval_y):
                writer.writerow([s.client_id, "test_eval", _fmt_label(y), *map(repr, x.tolist())])


def _fmt_label(y) -> str:
    y = y.item() if hasattr(y, "item") else y
    return str(y) if isinstance(y, (int, np.integer)) else repr(float(y))
