"""Non-negative Bregman-divergence density-ratio matching for many clients.

Client ``k`` fits ``r_k(x) ~ sum_l p_l^te(x) / p_k^tr(x)`` from its own
training inputs and the shuffled pool of every client's unlabeled test
inputs.  The pool enters the objective as ``K`` times its mean, which equals
the per-client double sum normalised by the per-client pool size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .synthdata import stream

EPS = 1e-6
# smallest double above EPS: keeps outputs strictly inside (EPS, r_max] when softplus underflows
_FLOOR = float(np.nextafter(EPS, np.inf))
VARIANTS = ("LSIF", "UKL", "LR", "PU")


class DomainError(ValueError):
    pass


class DegenerateBinningError(ValueError):
    pass


class RatioTrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# variant losses


@dataclass(frozen=True)
class BregmanVariant:
    """A named nnBD loss pair with its admissible output interval.

    ``lower_open`` marks variants whose losses blow up at zero; PU also needs
    ``z < 1``.
    """

    name: str
    lower: float
    upper: float
    lower_open: bool
    upper_open: bool

    def check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        bad = ~np.isfinite(z)
        bad |= (z <= self.lower) if self.lower_open else (z < self.lower)
        bad |= (z >= self.upper) if self.upper_open else (z > self.upper)
        if np.any(bad):
            raise DomainError(f"{self.name}: value outside admissible range: {z[bad][:5]}")
        return z


_VARIANTS = {
    "LSIF": BregmanVariant("LSIF", 0.0, math.inf, False, True),
    "UKL": BregmanVariant("UKL", 0.0, math.inf, True, True),
    "LR": BregmanVariant("LR", 0.0, math.inf, True, True),
    "PU": BregmanVariant("PU", 0.0, 1.0, True, True),
}


def get_variant(variant: str | BregmanVariant) -> BregmanVariant:
    if isinstance(variant, BregmanVariant):
        return variant
    try:
        return _VARIANTS[variant.upper()]
    except KeyError:
        raise ValueError(f"unknown Bregman variant {variant!r}; choose from {VARIANTS}") from None


def _need_c(name: str, C):
    if C is None:
        raise ValueError(f"{name} needs the constant C")
    return float(C)


def ell1(variant, z, C=None):
    """Train-side loss; PU's form depends on C as well."""
    v = get_variant(variant)
    z = v.check(z)
    if v.name == "LSIF":
        out = 0.5 * z**2
    elif v.name == "UKL":
        out = z.copy()
    elif v.name == "LR":
        out = np.log1p(z)
    else:
        out = -_need_c("PU", C) * np.log1p(-z)
    return out if out.ndim else float(out)


def ell2(variant, z, C):
    v = get_variant(variant)
    z = v.check(z)
    C = _need_c(v.name, C)
    if v.name == "LSIF":
        out = 0.5 * C * z**2 - z
    elif v.name == "UKL":
        out = C * z - np.log(z)
    elif v.name == "LR":
        out = C * np.log1p(z) - np.log(z / (z + 1.0))
    else:
        out = -C * np.log(z) + (C - C**2) * np.log1p(-z)
    return out if out.ndim else float(out)


def dell1(variant, z, C=None) -> np.ndarray:
    v = get_variant(variant)
    z = v.check(z)
    if v.name == "LSIF":
        return z
    if v.name == "UKL":
        return np.ones_like(z)
    if v.name == "LR":
        return 1.0 / (1.0 + z)
    return _need_c("PU", C) / (1.0 - z)


def dell2(variant, z, C) -> np.ndarray:
    v = get_variant(variant)
    z = v.check(z)
    C = _need_c(v.name, C)
    if v.name == "LSIF":
        return C * z - 1.0
    if v.name == "UKL":
        return C - 1.0 / z
    if v.name == "LR":
        return C / (1.0 + z) - 1.0 / (z * (1.0 + z))
    return -C / z - (C - C**2) / (1.0 - z)


def generator_f(variant, z, C=None):
    """The convex generator ``f`` behind each variant."""
    name = get_variant(variant).name
    z = np.asarray(z, dtype=float)
    if name == "LSIF":
        return 0.5 * (z - 1.0) ** 2
    if name == "UKL":
        return z * np.log(z) - z
    if name == "LR":
        return z * np.log(z) - (z + 1.0) * np.log1p(z)
    C = _need_c("PU", C)
    return C * np.log1p(-z) + C * z * (np.log(z) - np.log1p(-z))


def generator_df(variant, z, C=None):
    name = get_variant(variant).name
    z = np.asarray(z, dtype=float)
    if name == "LSIF":
        return z - 1.0
    if name == "UKL":
        return np.log(z)
    if name == "LR":
        return np.log(z) - np.log1p(z)
    C = _need_c("PU", C)
    return C * (np.log(z) - np.log1p(-z))


def generic_ell1(variant, z, C=None):
    """``f'(z) z - f(z)`` before dropping additive constants."""
    return generator_df(variant, z, C) * np.asarray(z, dtype=float) - generator_f(variant, z, C)


# --------------------------------------------------------------------------
# supremum estimation


@dataclass
class SupremumEstimate:
    r_tilde: float
    C: float
    num_bins: int
    bin_ratios: np.ndarray
    method: str = "histogram"

    def to_dict(self) -> dict:
        return {
            "r_tilde": self.r_tilde,
            "C": self.C,
            "num_bins": self.num_bins,
            "bin_ratios": self.bin_ratios.tolist(),
            "method": self.method,
        }


def bin_ratios(train_assign, test_assign, num_bins: int, num_clients: int = 1) -> np.ndarray:
    """Per-bin ratio of pooled-test mass to train mass; 0 where no train point falls.

    Test counts are normalised by the per-client pool size ``n_pool / K`` so
    the K test distributions are summed, not averaged.
    """
    train_assign = np.asarray(train_assign, dtype=int)
    test_assign = np.asarray(test_assign, dtype=int)
    tr = np.bincount(train_assign, minlength=num_bins).astype(float)
    te = np.bincount(test_assign, minlength=num_bins).astype(float)
    n_te_per_client = len(test_assign) / num_clients
    out = np.zeros(num_bins)
    hit = tr > 0
    out[hit] = (te[hit] / n_te_per_client) / (tr[hit] / len(train_assign))
    return out


def _estimate(train_assign, test_assign, num_bins, num_clients, safety, method) -> SupremumEstimate:
    ratios = bin_ratios(train_assign, test_assign, num_bins, num_clients)
    r_tilde = float(ratios.max())
    if r_tilde <= 0:
        raise DegenerateBinningError("no bin holds both train and test points")
    if not 0 < safety <= 1:
        raise ValueError("safety factor must lie in (0, 1]")
    return SupremumEstimate(r_tilde, safety / r_tilde, num_bins, ratios, method)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def estimate_supremum_histogram(
    train_k, pooled_test, num_bins: int, num_clients: int = 1, safety: float = 1.0
) -> SupremumEstimate:
    """Equal-width grid over the joint bounding box; about ``num_bins`` cells.

    In ``d`` dimensions each axis gets ``round(num_bins ** (1/d))`` cells.
    Only offered for ``d <= 3``; use the k-means path above that.
    """
    train_k, pooled_test = _as_2d(train_k), _as_2d(pooled_test)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if len(train_k) == 0:
        raise ValueError("empty training sample")
    d = train_k.shape[1]
    if d > 3:
        raise ValueError("grid histograms are limited to d <= 3; use estimate_supremum_kmeans")
    per_axis = max(1, int(round(num_bins ** (1.0 / d))))
    both = np.vstack([train_k, pooled_test])
    lo, hi = both.min(axis=0), both.max(axis=0)
    width = np.where(hi > lo, (hi - lo) / per_axis, 1.0)

    def cell(x):
        idx = np.clip(np.floor((x - lo) / width).astype(int), 0, per_axis - 1)
        return np.ravel_multi_index(idx.T, (per_axis,) * d)

    return _estimate(cell(train_k), cell(pooled_test), per_axis**d, num_clients, safety, "histogram")


def kmeans(x, num_clusters: int, iters: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; returns (centroids, labels).

    A cluster that goes empty is reseeded at a uniformly drawn data point.
    """
    x = _as_2d(x)
    n = len(x)
    if not 1 <= num_clusters <= n:
        raise ValueError(f"num_clusters must lie in [1, {n}]")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = stream(seed, 0x4EA5)
    sq = np.einsum("ij,ij->i", x, x)
    centroids = np.empty((num_clusters, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.maximum(sq - 2 * x @ centroids[0] + centroids[0] @ centroids[0], 0.0)
    for m in range(1, num_clusters):
        total = d2.sum()
        pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids[m] = x[pick]
        d2 = np.minimum(d2, np.maximum(sq - 2 * x @ centroids[m] + centroids[m] @ centroids[m], 0.0))

    labels = np.full(n, -1)
    for _ in range(iters):
        new = assign_clusters(x, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=num_clusters)
        sums = np.stack([np.bincount(labels, weights=x[:, j], minlength=num_clusters) for j in range(x.shape[1])], axis=1)
        for m in np.flatnonzero(counts == 0):
            sums[m] = x[rng.integers(n)]
            counts[m] = 1
        centroids = sums / counts[:, None]
    return centroids, assign_clusters(x, centroids)


def assign_clusters(x, centroids) -> np.ndarray:
    x = _as_2d(x)
    d2 = np.einsum("ij,ij->i", x, x)[:, None] - 2 * x @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)
    return np.argmin(d2, axis=1)


def estimate_supremum_kmeans(
    train_k,
    pooled_test,
    num_clusters: int,
    iters: int = 50,
    seed: int = 0,
    num_clients: int = 1,
    safety: float = 1.0,
) -> SupremumEstimate:
    """Cluster train and pooled test points together and compare cluster counts."""
    train_k, pooled_test = _as_2d(train_k), _as_2d(pooled_test)
    if len(train_k) == 0:
        raise ValueError("empty training sample")
    _, labels = kmeans(np.vstack([train_k, pooled_test]), num_clusters, iters, seed)
    n = len(train_k)
    return _estimate(labels[:n], labels[n:], num_clusters, num_clients, safety, "kmeans")


def supremum_sweep(train_k, pooled_test, grid: Sequence[int], method: str = "kmeans", **kw) -> list[tuple[int, float]]:
    est = estimate_supremum_kmeans if method == "kmeans" else estimate_supremum_histogram
    return [(int(m), est(train_k, pooled_test, m, **kw).r_tilde) for m in grid]


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("M,r_tilde\n")
        for m, r in rows:
            fh.write(f"{m},{r!r}\n")


# --------------------------------------------------------------------------
# ratio models

MODEL_KINDS = ("class-table", "linear-softplus", "mlp-softplus")
_SOFTPLUS_INV_ONE = math.log(math.e - 1.0)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class RatioModel:
    """Positive bounded ratio model ``r(x) = min(eps + softplus(z(x)), r_max)``.

    ``class-table`` holds one logit per Voronoi cell of ``centroids``;
    ``linear-softplus`` uses an affine logit; ``mlp-softplus`` one tanh
    hidden layer.  Metadata from fitting rides along for serialization.
    """

    kind: str
    params: np.ndarray
    r_max: float
    input_dim: int
    hidden: int = 0
    centroids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown ratio model kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=float)
        if not self.r_max > EPS:
            raise ValueError("r_max must exceed eps")

    def with_params(self, params) -> "RatioModel":
        return replace(self, params=np.asarray(params, dtype=float), meta=dict(self.meta))

    def cells(self, x) -> np.ndarray:
        return assign_clusters(x, self.centroids)

    def _logits(self, x, params):
        x = _as_2d(x)
        if self.kind == "class-table":
            cells = self.cells(x)
            return params[cells], cells
        if self.kind == "linear-softplus":
            d = self.input_dim
            return x @ params[:d] + params[d], x
        W1, b1, w2, b2 = self._unpack(params)
        h = np.tanh(x @ W1 + b1)
        return h @ w2 + b2, (x, h)

    def _unpack(self, params):
        d, H = self.input_dim, self.hidden
        W1 = params[: d * H].reshape(d, H)
        b1 = params[d * H : d * H + H]
        w2 = params[d * H + H : d * H + 2 * H]
        return W1, b1, w2, params[-1]

    def __call__(self, x) -> np.ndarray:
        z, _ = self._logits(x, self.params)
        return np.clip(EPS + _softplus(z), _FLOOR, self.r_max)

    def value_and_vjp(self, x):
        """Return ``r(x)`` and ``vjp(u) = sum_i u_i * d r(x_i) / d params``."""
        z, cache = self._logits(x, self.params)
        raw = EPS + _softplus(z)
        r = np.clip(raw, _FLOOR, self.r_max)
        slope = np.where((raw < self.r_max) & (raw > _FLOOR), _sigmoid(z), 0.0)

        def vjp(u):
            g = np.asarray(u, dtype=float) * slope
            if self.kind == "class-table":
                return np.bincount(cache, weights=g, minlength=self.params.size)
            if self.kind == "linear-softplus":
                return np.concatenate([cache.T @ g, [g.sum()]])
            xx, h = cache
            _, _, w2, _ = self._unpack(self.params)
            gh = np.outer(g, w2) * (1.0 - h**2)
            return np.concatenate([(xx.T @ gh).ravel(), gh.sum(axis=0), h.T @ g, [g.sum()]])

        return r, vjp

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params.tolist(),
            "r_max": self.r_max,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "centroids": None if self.centroids is None else self.centroids.tolist(),
            **self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RatioModel":
        data = dict(data)
        centroids = data.pop("centroids", None)
        core = {k: data.pop(k) for k in ("kind", "params", "r_max", "input_dim", "hidden")}
        return cls(
            centroids=None if centroids is None else np.asarray(centroids, dtype=float), meta=data, **core
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RatioModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_ratio_model(
    kind: str,
    input_dim: int,
    r_max: float,
    *,
    hidden: int = 16,
    centroids=None,
    seed: int = 0,
) -> RatioModel:
    """Seeded model whose output starts near 1 (output bias = softplus^-1(1))."""
    rng = stream(seed, 0x7A71)
    if kind == "class-table":
        if centroids is None:
            raise ValueError("class-table models need centroids")
        centroids = _as_2d(centroids)
        params = np.full(len(centroids), _SOFTPLUS_INV_ONE)
        return RatioModel(kind, params, r_max, centroids.shape[1], 0, centroids)
    if kind == "linear-softplus":
        bound = 1.0 / math.sqrt(input_dim)
        params = np.concatenate([rng.uniform(-bound, bound, input_dim) * 0.1, [_SOFTPLUS_INV_ONE]])
        return RatioModel(kind, params, r_max, input_dim)
    if kind == "mlp-softplus":
        b1, b2 = 1.0 / math.sqrt(input_dim), 1.0 / math.sqrt(hidden)
        params = np.concatenate(
            [
                rng.uniform(-b1, b1, input_dim * hidden),
                rng.uniform(-b1, b1, hidden),
                rng.uniform(-b2, b2, hidden) * 0.1,
                [_SOFTPLUS_INV_ONE],
            ]
        )
        return RatioModel(kind, params, r_max, input_dim, hidden)
    raise ValueError(f"unknown ratio model kind {kind!r}")


# --------------------------------------------------------------------------
# objectives


@dataclass
class ObjectiveParts:
    value: float
    bracket: float
    test_term: float
    grad: np.ndarray | None = None
    bracket_grad: np.ndarray | None = None
    test_grad: np.ndarray | None = None


def nnbd_parts(variant, model: RatioModel, C: float, K: int, train_batch, test_batch, *, grads: bool = False):
    """Bracket ``mean l1(train) - K C mean l1(test)`` and test term ``K mean l2(test)``."""
    train_batch, test_batch = _as_2d(train_batch), _as_2d(test_batch)
    if len(train_batch) == 0 or len(test_batch) == 0:
        raise ValueError("batches must be non-empty")
    r_tr, vjp_tr = model.value_and_vjp(train_batch)
    r_te, vjp_te = model.value_and_vjp(test_batch)
    n_tr, n_te = len(r_tr), len(r_te)
    bracket = float(np.mean(ell1(variant, r_tr, C)) - K * C * np.mean(ell1(variant, r_te, C)))
    test_term = float(K * np.mean(ell2(variant, r_te, C)))
    parts = ObjectiveParts(max(bracket, 0.0) + test_term, bracket, test_term)
    if grads:
        parts.bracket_grad = vjp_tr(dell1(variant, r_tr, C) / n_tr) - vjp_te(K * C * dell1(variant, r_te, C) / n_te)
        parts.test_grad = vjp_te(K * dell2(variant, r_te, C) / n_te)
        parts.grad = parts.test_grad + (parts.bracket_grad if bracket >= 0 else 0.0)
    return parts


def nnbd_objective(variant, ratio_model, C_k: float, K: int, train_batch, test_batch) -> float:
    """ReLU(bracket) + K * mean l2 over the pooled test batch."""
    return nnbd_parts(variant, ratio_model, C_k, K, train_batch, test_batch).value


def empirical_bd_risk(variant, ratio_model: Callable, C_k: float, K: int, train_samples, pooled_test_samples) -> float:
    """Plug-in BD risk without the ReLU; ``ratio_model`` may be any callable."""
    r_tr = np.asarray(ratio_model(_as_2d(train_samples)), dtype=float)
    r_te = np.asarray(ratio_model(_as_2d(pooled_test_samples)), dtype=float)
    return float(
        np.mean(ell1(variant, r_tr, C_k))
        - K * C_k * np.mean(ell1(variant, r_te, C_k))
        + K * np.mean(ell2(variant, r_te, C_k))
    )


def hdrm_direction(variant, model: RatioModel, C: float, K: int, train_batch, test_batch, reg: float):
    """Update direction ``g`` of one HDRM step (the step is ``params += lr * g``).

    Non-negative bracket: descend the full objective plus ``reg/2 |params|^2``.
    Negative bracket: ascend the bracket; the regulariser is still descended.
    """
    parts = nnbd_parts(variant, model, C, K, train_batch, test_batch, grads=True)
    reg_grad = reg * model.params
    if parts.bracket >= 0:
        g = -(parts.bracket_grad + parts.test_grad + reg_grad)
    else:
        g = parts.bracket_grad - reg_grad
    return g, parts


# --------------------------------------------------------------------------
# training


@dataclass
class RatioHyper:
    lr: float = 1e-3
    batch_train: int | None = 64
    batch_test: int | None = 64
    reg: float = 1e-4
    max_epochs: int = 200
    patience: int = 5
    holdout: float = 0.2
    clip_factor: float = 2.0
    hidden: int = 16


def train_ratio_model(
    variant,
    train_x,
    pooled_test,
    supremum: SupremumEstimate,
    num_clients: int = 1,
    hyper: RatioHyper | None = None,
    seed: int = 0,
    kind: str = "linear-softplus",
    centroids=None,
) -> RatioModel:
    """Fit one client's ratio model with mini-batch HDRM steps.

    A held-out slice of both samples picks the number of epochs: training
    stops once the held-out BD risk has not improved for ``patience`` epochs
    and the best parameters seen are returned.
    """
    hyper = hyper or RatioHyper()
    v = get_variant(variant)
    train_x, pooled_test = _as_2d(train_x), _as_2d(pooled_test)
    C = supremum.C
    r_max = hyper.clip_factor * supremum.r_tilde
    if v.name == "PU":
        r_max = min(r_max, 1.0 - EPS)
    model = make_ratio_model(kind, train_x.shape[1], r_max, hidden=hyper.hidden, centroids=centroids, seed=seed)
    model.meta.update(variant=v.name, C=C, r_tilde=supremum.r_tilde, num_clients=num_clients)

    rng = stream(seed, 0xD4A1)
    tr_fit, tr_hold = _split(train_x, hyper.holdout, rng)
    te_fit, te_hold = _split(pooled_test, hyper.holdout, rng)
    b_tr = len(tr_fit) if hyper.batch_train is None else min(hyper.batch_train, len(tr_fit))
    b_te = len(te_fit) if hyper.batch_test is None else min(hyper.batch_test, len(te_fit))
    num_batches = math.ceil(len(tr_fit) / b_tr)

    def held_out_risk(m):
        return empirical_bd_risk(v, m, C, num_clients, tr_hold, te_hold)

    best_risk, best_params, stale = held_out_risk(model), model.params.copy(), 0
    for epoch in range(hyper.max_epochs):
        perm_tr = rng.permutation(len(tr_fit))
        perm_te = rng.permutation(len(te_fit))
        for n in range(num_batches):
            idx_tr = perm_tr[n * b_tr : (n + 1) * b_tr]
            start = (n * b_te) % len(te_fit)
            idx_te = np.take(perm_te, np.arange(start, start + b_te), mode="wrap")
            try:
                g, parts = hdrm_direction(v, model, C, num_clients, tr_fit[idx_tr], te_fit[idx_te], hyper.reg)
            except DomainError as exc:
                raise RatioTrainingError(
                    f"model left the admissible range at epoch {epoch}, batch {n} ({exc}); lower the learning rate"
                ) from exc
            if not (np.isfinite(parts.value) and np.all(np.isfinite(g))):
                raise RatioTrainingError(
                    f"non-finite objective at epoch {epoch}, batch {n} "
                    f"(value={parts.value}, bracket={parts.bracket}); lower the learning rate"
                )
            model.params = model.params + hyper.lr * g
        risk = held_out_risk(model)
        if not np.isfinite(risk):
            raise RatioTrainingError(f"non-finite held-out risk after epoch {epoch}; lower the learning rate")
        if risk < best_risk - 1e-9:
            best_risk, best_params, stale = risk, model.params.copy(), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.params = best_params
    model.meta.update(epochs=epoch + 1, holdout_bd_risk=best_risk)
    return model


def _split(x, frac, rng):
    if frac <= 0 or len(x) < 2:
        return x, x
    perm = rng.permutation(len(x))
    n_hold = max(1, int(round(frac * len(x))))
    return x[perm[n_hold:]], x[perm[:n_hold]]
