"""Closed-form weighted ridge regression and its fixed-design risk decomposition.

All quantities are exact (dense linear algebra or per-coordinate sums); the
Monte Carlo path only resamples label noise and is kept as an independent
check of the decomposition.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .synthdata import stream


class SingularSystemError(LinAlgError):
    pass


@dataclass
class RidgeInstance:
    """Fixed design ``X`` with per-row weights, noise level and test second moment."""

    X: np.ndarray
    weights: np.ndarray
    theta_star: np.ndarray
    noise_var: float
    reg: float
    test_cov: np.ndarray
    train_spectrum: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self.theta_star = np.asarray(self.theta_star, dtype=float)
        self.test_cov = np.asarray(self.test_cov, dtype=float)
        if self.test_cov.ndim == 1:
            self.test_cov = np.diag(self.test_cov)
        n, d = self.X.shape
        if self.weights.shape != (n,) or self.theta_star.shape != (d,) or self.test_cov.shape != (d, d):
            raise ValueError("inconsistent ridge instance dimensions")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def labels(self, noise: np.ndarray | None = None) -> np.ndarray:
        y = self.X @ self.theta_star
        return y if noise is None else y + noise

    def with_weights(self, weights) -> "RidgeInstance":
        return RidgeInstance(self.X, weights, self.theta_star, self.noise_var, self.reg, self.test_cov, self.train_spectrum)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "RidgeInstance":
        return cls(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in data.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RidgeInstance":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _gram(X, w, reg):
    return X.T @ (w[:, None] * X) + reg * np.eye(X.shape[1])


def _factor(A):
    try:
        return cho_factor(A)
    except LinAlgError as exc:
        raise SingularSystemError("weighted normal equations are singular") from exc


def weighted_ridge_solve(X, w, y, reg: float) -> np.ndarray:
    """``argmin sum_i w_i (theta . x_i - y_i)^2 + reg |theta|^2`` via Cholesky."""
    X, w, y = np.asarray(X, dtype=float), np.asarray(w, dtype=float), np.asarray(y, dtype=float)
    if reg < 0:
        raise ValueError("reg must be non-negative")
    return cho_solve(_factor(_gram(X, w, reg)), X.T @ (w * y))


def bias_variance_fixed(inst: RidgeInstance) -> tuple[float, float]:
    """Bias and variance of the weighted ridge estimate under the test second moment."""
    X, w = inst.X, inst.weights
    fac = _factor(_gram(X, w, inst.reg))
    v = cho_solve(fac, inst.theta_star)
    bias = inst.reg**2 * float(v @ inst.test_cov @ v)
    # S = A^{-1} X^T W: variance is sigma^2 * tr(S S^T Sigma_te)
    S = cho_solve(fac, X.T * w)
    var = inst.noise_var * float(np.sum((S @ S.T) * inst.test_cov))
    return bias, var


# --------------------------------------------------------------------------
# one-hot case


@dataclass
class OneHotSpectrum:
    """Per-basis training counts ``mu`` and per-coordinate ratios ``w``."""

    mu: np.ndarray
    w: np.ndarray
    reg: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.w = np.broadcast_to(np.asarray(self.w, dtype=float), self.mu.shape).copy()
        if np.any(self.mu < 0) or np.any(self.mu != np.round(self.mu)):
            raise ValueError("mu must be non-negative integers")
        if not self.reg > 0:
            raise ValueError("reg must be positive")

    @property
    def xi(self) -> np.ndarray:
        return self.reg / (self.reg + self.mu)

    @property
    def n(self) -> int:
        return int(self.mu.sum())

    def instance(self, theta_star, test_spectrum, noise_var) -> RidgeInstance:
        """Matrix instance with ``mu_i`` rows equal to ``e_i``, each weighted ``w_i``."""
        d = self.mu.size
        coords = np.repeat(np.arange(d), self.mu.astype(int))
        X = np.zeros((coords.size, d))
        X[np.arange(coords.size), coords] = 1.0
        return RidgeInstance(X, self.w[coords], theta_star, noise_var, self.reg, np.diag(test_spectrum))


def bias_variance_onehot(spectrum: OneHotSpectrum, theta_star, test_spectrum, noise_var: float) -> tuple[float, float]:
    theta_star = np.asarray(theta_star, dtype=float)
    lam_te = np.asarray(test_spectrum, dtype=float)
    a = spectrum.mu * spectrum.w + spectrum.reg
    bias = spectrum.reg**2 * float(np.sum(theta_star**2 * lam_te / a**2))
    var = noise_var * float(np.sum(lam_te * spectrum.mu * spectrum.w**2 / a**2))
    return bias, var


def bias_variance_aggregates(sum_w, sum_w2, theta_star, test_spectrum, noise_var, reg) -> tuple[float, float]:
    """Same decomposition from per-coordinate sums of row weights and squared row weights."""
    a = np.asarray(sum_w, dtype=float) + reg
    lam_te = np.asarray(test_spectrum, dtype=float)
    bias = reg**2 * float(np.sum(np.asarray(theta_star) ** 2 * lam_te / a**2))
    var = noise_var * float(np.sum(lam_te * np.asarray(sum_w2, dtype=float) / a**2))
    return bias, var


def excess_risk_onehot(spectrum, theta_star, test_spectrum, noise_var) -> float:
    return sum(bias_variance_onehot(spectrum, theta_star, test_spectrum, noise_var))


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MCResult:
    mean: float
    stderr: float
    trials: int


def excess_risk_mc(inst: RidgeInstance, num_trials: int, seed: int, estimator: str = "weighted", chunk: int = 2000) -> MCResult:
    """Mean of ``(theta_hat - theta*)' Sigma_te (theta_hat - theta*)`` over fresh label noise.

    ``estimator="erm"`` ignores the instance weights.
    """
    w = inst.weights if estimator == "weighted" else np.ones_like(inst.weights)
    X = inst.X
    fac = _factor(_gram(X, w, inst.reg))
    S = cho_solve(fac, X.T * w)
    shift = -inst.reg * cho_solve(fac, inst.theta_star)
    rng = stream(seed, 0xAC)
    sd = math.sqrt(inst.noise_var)
    vals = []
    done = 0
    while done < num_trials:
        m = min(chunk, num_trials - done)
        eps = sd * rng.standard_normal((m, X.shape[0]))
        diff = shift + eps @ S.T
        vals.append(np.einsum("ij,jk,ik->i", diff, inst.test_cov, diff))
        done += m
    vals = np.concatenate(vals)
    se = float(vals.std(ddof=1) / math.sqrt(num_trials)) if num_trials > 1 else 0.0
    return MCResult(float(vals.mean()), se, num_trials)


# --------------------------------------------------------------------------
# sufficient conditions


@dataclass
class ConditionVerdict:
    holds: bool
    per_coordinate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    interval_nonempty: np.ndarray | None = None
    feasibility_interval: np.ndarray | None = None


def _theorem2_bounds(s, xi):
    return s - 1.0, xi / s


def _feasibility_holds(s, xi):
    return (s > 0) & (s <= (1.0 + np.sqrt(1.0 + 4.0 * xi)) / 2.0)


def _check_feasibility_forms(s, xi, nonempty):
    # the two forms differ only on the boundary where rounding can flip one side
    boundary = np.isclose(s, (1.0 + np.sqrt(1.0 + 4.0 * xi)) / 2.0, rtol=1e-12, atol=0)
    if np.any((nonempty != _feasibility_holds(s, xi)) & ~boundary):
        raise AssertionError("feasibility forms of the ratio condition disagree")


def _prop5_bounds(s, xi, mu, reg):
    pre = s >= np.maximum(xi, 1.0 - xi)
    with np.errstate(divide="ignore"):
        var_cap = 1.0 / ((s - 1.0) / xi + 1.0)
    bias_cap = s + (reg / mu) * s - reg / mu
    return pre, np.minimum(var_cap, bias_cap)


def theorem2_condition(spectrum: OneHotSpectrum, train_spectrum, test_spectrum) -> ConditionVerdict:
    """``sqrt(l'/l) - 1 <= w_i <= xi_i sqrt(l/l')`` for every coordinate.

    Also checks the equivalent feasibility form: the interval for ``w_i`` is
    non-empty exactly when ``sqrt(l'/l) < (1 + sqrt(1 + 4 xi)) / 2``.
    """
    lam, lam_te = np.asarray(train_spectrum, dtype=float), np.asarray(test_spectrum, dtype=float)
    if np.any(lam <= 0) or np.any(lam_te <= 0):
        raise ValueError("spectra must be positive")
    s = np.sqrt(lam_te / lam)
    xi = spectrum.xi
    lower, upper = _theorem2_bounds(s, xi)
    per = (lower <= spectrum.w) & (spectrum.w <= upper)
    nonempty = lower <= upper
    _check_feasibility_forms(s, xi, nonempty)
    return ConditionVerdict(bool(per.all()), per, lower, upper, nonempty, _feasibility_holds(s, xi))


def prop5_condition(spectrum: OneHotSpectrum, train_spectrum, test_spectrum) -> ConditionVerdict:
    """Counterexample condition: ``s >= max(xi, 1 - xi)`` and ``w_i <= min(...)``."""
    lam, lam_te = np.asarray(train_spectrum, dtype=float), np.asarray(test_spectrum, dtype=float)
    if np.any(spectrum.mu <= 0):
        raise ValueError("every coordinate needs at least one training row")
    s = np.sqrt(lam_te / lam)
    pre, upper = _prop5_bounds(s, spectrum.xi, spectrum.mu, spectrum.reg)
    per = pre & (spectrum.w <= upper)
    return ConditionVerdict(bool(per.all()), per, np.zeros_like(upper), upper, pre, None)


# --------------------------------------------------------------------------
# random instances and soundness sweeps


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


@dataclass
class OneHotCase:
    spectrum: OneHotSpectrum
    train_spectrum: np.ndarray
    test_spectrum: np.ndarray
    theta_star: np.ndarray
    noise_var: float

    def risks(self) -> tuple[float, float]:
        """(weighted, unweighted) excess test risk."""
        erm = OneHotSpectrum(self.spectrum.mu, 1.0, self.spectrum.reg)
        return (
            excess_risk_onehot(self.spectrum, self.theta_star, self.test_spectrum, self.noise_var),
            excess_risk_onehot(erm, self.theta_star, self.test_spectrum, self.noise_var),
        )

    def erm_risk_train_spectrum(self) -> float:
        """Unweighted risk scored on the train spectrum instead of the test one."""
        erm = OneHotSpectrum(self.spectrum.mu, 1.0, self.spectrum.reg)
        return excess_risk_onehot(erm, self.theta_star, self.train_spectrum, self.noise_var)


@dataclass
class _CaseBatch:
    lam: np.ndarray
    lam_te: np.ndarray
    mu: np.ndarray
    reg: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    noise: np.ndarray

    def case(self, i: int) -> OneHotCase:
        spec = OneHotSpectrum(self.mu[i], self.w[i], float(self.reg[i, 0]))
        return OneHotCase(spec, self.lam[i], self.lam_te[i], self.theta[i], float(self.noise[i, 0]))

    def risk(self, w, spectrum) -> np.ndarray:
        a = self.mu * w + self.reg
        bias = self.reg[:, 0] ** 2 * np.sum(self.theta**2 * spectrum / a**2, axis=1)
        return bias + self.noise[:, 0] * np.sum(spectrum * self.mu * w**2 / a**2, axis=1)


def _sample_cases(rng: np.random.Generator, condition: str, count: int, dim: int, max_rounds: int = 1000) -> _CaseBatch:
    """Draw candidates in blocks, keep those whose ratio interval is non-empty, then draw ``w`` inside it."""
    if condition not in ("theorem2", "prop5"):
        raise ValueError(f"unknown condition {condition!r}")
    kept: list[tuple] = []
    have = 0
    for _ in range(max_rounds):
        if have >= count:
            break
        block = max(64, 4 * (count - have))
        lam = _log_uniform(rng, 1e-2, 10, (block, dim))
        lam_te = _log_uniform(rng, 1e-2, 10, (block, dim))
        mu = rng.integers(1, 51, (block, dim)).astype(float)
        reg = _log_uniform(rng, 1e-2, 10, (block, 1))
        s, xi = np.sqrt(lam_te / lam), reg / (reg + mu)
        if condition == "theorem2":
            lower, upper = _theorem2_bounds(s, xi)
            _check_feasibility_forms(s, xi, lower <= upper)
            ok = np.ones(block, dtype=bool)
        else:
            pre, upper = _prop5_bounds(s, xi, mu, reg)
            lower = np.zeros_like(upper)
            ok = pre.all(axis=1)
        lo = np.maximum(lower, 0.0)
        ok &= np.all(lo <= upper, axis=1) & np.all(upper > 0, axis=1)
        idx = np.flatnonzero(ok)
        w = rng.uniform(lo[idx], upper[idx])
        w = np.where(w > 0, w, upper[idx])
        theta = rng.standard_normal((idx.size, dim))
        noise = _log_uniform(rng, 1e-2, 10, (idx.size, 1))
        kept.append((lam[idx], lam_te[idx], mu[idx], reg[idx], w, theta, noise))
        have += idx.size
    if have < count:
        raise RuntimeError(f"only {have} feasible {condition} instances after {max_rounds} blocks")
    return _CaseBatch(*(np.concatenate(col)[:count] for col in zip(*kept)))


def sample_onehot_case(rng: np.random.Generator, condition: str, dim: int = 5) -> OneHotCase:
    """One instance whose ratio interval is non-empty, with ``w`` uniform inside it.

    Spectra and the regulariser are log-uniform on [1e-2, 10], counts uniform
    on 1..50, ``theta*`` standard normal, noise variance log-uniform on [1e-2, 10].
    """
    return _sample_cases(rng, condition, 1, dim).case(0)


@dataclass
class SweepReport:
    condition: str
    instances: int
    violations: int
    violations_train_spectrum_erm: int
    worst_relative_gap: float
    violating_examples: list

    def to_dict(self) -> dict:
        return asdict(self)


def soundness_sweep(condition: str, num_instances: int, seed: int, dim: int = 5, rtol: float = 1e-10) -> SweepReport:
    """Count instances where the claimed risk ordering fails in exact closed form.

    For ``theorem2`` the claim is weighted <= unweighted; for ``prop5`` it is
    unweighted <= weighted.  The second counter repeats the comparison with the
    unweighted risk evaluated on the train spectrum.
    """
    rng = stream(seed, 0x7E02 if condition == "theorem2" else 0x9205)
    batch = _sample_cases(rng, condition, num_instances, dim)
    r_w = batch.risk(batch.w, batch.lam_te)
    r_erm = batch.risk(1.0, batch.lam_te)
    r_alt = batch.risk(1.0, batch.lam)
    if condition == "theorem2":
        lhs, rhs, alt_l, alt_r = r_w, r_erm, r_w, r_alt
    else:
        lhs, rhs, alt_l, alt_r = r_erm, r_w, r_alt, r_w
    gap = (lhs - rhs) / np.maximum(np.abs(rhs), 1e-300)
    bad = lhs > rhs * (1 + rtol)
    examples = [
        {"index": int(i), "lhs": float(lhs[i]), "rhs": float(rhs[i])} for i in np.flatnonzero(bad)[:3]
    ]
    return SweepReport(
        condition,
        num_instances,
        int(bad.sum()),
        int(np.sum(alt_l > alt_r * (1 + rtol))),
        float(gap.max()),
        examples,
    )


def sample_ridge_instance(rng: np.random.Generator, n: int = 40, d: int = 5) -> RidgeInstance:
    """Gaussian design, log-uniform positive weights, random PSD test second moment."""
    X = rng.standard_normal((n, d))
    w = _log_uniform(rng, 0.1, 10, n)
    B = rng.standard_normal((d, d))
    return RidgeInstance(
        X, w, rng.standard_normal(d), float(_log_uniform(rng, 0.1, 2)), float(_log_uniform(rng, 0.1, 10)),
        B @ B.T / d + 0.1 * np.eye(d),
    )


@dataclass
class LemmaCheck:
    bias: float
    variance: float
    mc_mean: float
    mc_stderr: float

    @property
    def z(self) -> float:
        return (self.mc_mean - self.bias - self.variance) / self.mc_stderr if self.mc_stderr > 0 else 0.0


def lemma_identity_sweep(num_instances: int, num_trials: int, seed: int) -> list[LemmaCheck]:
    rng = stream(seed, 0x1E11)
    out = []
    for i in range(num_instances):
        inst = sample_ridge_instance(rng)
        b, v = bias_variance_fixed(inst)
        mc = excess_risk_mc(inst, num_trials, seed=seed * 7919 + i)
        out.append(LemmaCheck(b, v, mc.mean, mc.stderr))
    return out


# --------------------------------------------------------------------------
# eigenvalue report


@dataclass
class EigenRow:
    index: int
    train_eig: float
    test_eig: float
    ratio: float
    bound: float
    near_zero: bool


def eigen_ratio_report(train_x, test_x, reg: float = 1.0, rel_tol: float = 1e-10) -> list[EigenRow]:
    """Sorted eigenvalues of the empirical train/test second moments and their ratios.

    Rows stop at the numerical rank of the train second moment; rows whose
    test eigenvalue is below ``rel_tol`` times the largest are flagged.
    """
    train_x, test_x = np.asarray(train_x, dtype=float), np.asarray(test_x, dtype=float)
    n = len(train_x)
    lam = np.sort(np.linalg.eigvalsh(train_x.T @ train_x / n))[::-1]
    lam_te = np.sort(np.linalg.eigvalsh(test_x.T @ test_x / len(test_x)))[::-1]
    rank = int(np.sum(lam > rel_tol * lam[0]))
    rows = []
    for i in range(rank):
        xi = reg / (reg + n * lam[i])
        te = max(lam_te[i], 0.0)
        rows.append(
            EigenRow(
                i, float(lam[i]), float(te), math.sqrt(te / lam[i]), (1 + math.sqrt(1 + 4 * xi)) / 2,
                bool(te <= rel_tol * lam_te[0]),
            )
        )
    return rows


def write_rows_csv(rows, path, header: list[str]) -> None:
    """Dataclass rows to CSV, columns in ``header`` order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            vals = asdict(r)
            w.writerow([vals[h] for h in header])
