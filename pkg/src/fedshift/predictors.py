"""Linear, multinomial-logistic and one-hidden-layer models with weighted losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp, softmax

from .synthdata import stream

PREDICTOR_KINDS = ("linear", "logistic", "mlp")
LOSS_KINDS = ("squared", "cross-entropy")


class NumericError(ArithmeticError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Predictor:
    """Parameter vector plus the architecture needed to read it.

    ``output_dim`` is 1 for regression heads and the number of classes for
    classification heads.  Instances are never mutated; updates go through
    :meth:`with_params`.
    """

    kind: str
    input_dim: int
    output_dim: int
    params: np.ndarray
    hidden: int = 0
    bias: bool = True

    @property
    def num_params(self) -> int:
        return self.params.size

    def with_params(self, params) -> "Predictor":
        params = np.asarray(params, dtype=float)
        if params.shape != self.params.shape:
            raise ValueError(f"parameter shape {params.shape} != {self.params.shape}")
        return replace(self, params=params)

    def _unpack(self, params):
        d, o, H = self.input_dim, self.output_dim, self.hidden
        if self.kind == "mlp":
            i = 0
            W1 = params[i : i + d * H].reshape(d, H); i += d * H
            b1 = params[i : i + H]; i += H
            W2 = params[i : i + H * o].reshape(H, o); i += H * o
            return W1, b1, W2, params[i : i + o]
        W = params[: d * o].reshape(d, o)
        b = params[d * o :] if self.bias else np.zeros(o)
        return W, b

    def forward(self, x) -> np.ndarray:
        """Outputs of shape (n,) for regression, (n, classes) logits otherwise."""
        out, _ = self._forward(np.asarray(x, dtype=float), self.params)
        return out[:, 0] if self.output_dim == 1 and self.kind != "logistic" else out

    def _forward(self, x, params):
        if self.kind == "mlp":
            W1, b1, W2, b2 = self._unpack(params)
            h = np.tanh(x @ W1 + b1)
            return h @ W2 + b2, h
        W, b = self._unpack(params)
        return x @ W + b, None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": self.hidden,
            "bias": self.bias,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Predictor":
        data = dict(data)
        data["params"] = np.asarray(data["params"], dtype=float)
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def make_predictor(
    kind: str,
    input_dim: int,
    num_classes: int | None = None,
    *,
    hidden: int = 32,
    bias: bool = True,
    seed: int = 0,
) -> Predictor:
    """Seeded init, uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer.

    ``num_classes`` of None gives a scalar regression head (linear, or mlp
    with squared loss).
    """
    if kind not in PREDICTOR_KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    if kind == "logistic" and not num_classes:
        raise ValueError("logistic predictors need num_classes")
    if kind == "linear" and num_classes:
        raise ValueError("linear predictors are scalar regressors")
    out = num_classes or 1
    rng = stream(seed, 0x1417)

    def uniform(fan_in, size):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size)

    if kind == "mlp":
        params = np.concatenate(
            [
                uniform(input_dim, input_dim * hidden),
                uniform(input_dim, hidden),
                uniform(hidden, hidden * out),
                uniform(hidden, out),
            ]
        )
        return Predictor(kind, input_dim, out, params, hidden=hidden, bias=True)
    n_bias = out if bias else 0
    return Predictor(kind, input_dim, out, uniform(input_dim, input_dim * out + n_bias), bias=bias)


@dataclass
class WeightedBatch:
    x: np.ndarray
    y: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y)
        self.weights = np.asarray(self.weights, dtype=float)
        if not (len(self.x) == len(self.y) == len(self.weights)):
            raise ValueError("x, y and weights must have equal length")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")

    def __len__(self):
        return len(self.y)


def default_loss(predictor: Predictor) -> str:
    return "squared" if predictor.output_dim == 1 and predictor.kind != "logistic" else "cross-entropy"


def _per_example(predictor: Predictor, out: np.ndarray, y, loss_kind: str):
    """Per-example losses and d loss / d output."""
    if loss_kind == "squared":
        resid = out[:, 0] - np.asarray(y, dtype=float)
        return resid**2, (2.0 * resid)[:, None]
    if loss_kind == "cross-entropy":
        y = np.asarray(y, dtype=int)
        rows = np.arange(len(y))
        losses = logsumexp(out, axis=1) - out[rows, y]
        dout = softmax(out, axis=1)
        dout[rows, y] -= 1.0
        return losses, dout
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _check_finite(out):
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite model output")


def weighted_loss(predictor: Predictor, batch: WeightedBatch, loss_kind: str | None = None) -> float:
    """``(1/|batch|) * sum_i w_i * loss(h(x_i), y_i)``."""
    loss_kind = loss_kind or default_loss(predictor)
    out, _ = predictor._forward(batch.x, predictor.params)
    _check_finite(out)
    losses, _ = _per_example(predictor, out, batch.y, loss_kind)
    return float(np.dot(batch.weights, losses) / len(batch))


def weighted_grad(predictor: Predictor, batch: WeightedBatch, loss_kind: str | None = None) -> np.ndarray:
    """Exact gradient of :func:`weighted_loss` with respect to the parameters."""
    loss_kind = loss_kind or default_loss(predictor)
    x = batch.x
    out, h = predictor._forward(x, predictor.params)
    _check_finite(out)
    _, dout = _per_example(predictor, out, batch.y, loss_kind)
    g = dout * (batch.weights / len(batch))[:, None]
    if predictor.kind == "mlp":
        _, _, W2, _ = predictor._unpack(predictor.params)
        gh = (g @ W2.T) * (1.0 - h**2)
        return np.concatenate([(x.T @ gh).ravel(), gh.sum(axis=0), (h.T @ g).ravel(), g.sum(axis=0)])
    parts = [(x.T @ g).ravel()]
    if predictor.bias:
        parts.append(g.sum(axis=0))
    return np.concatenate(parts)


def predict_labels(predictor: Predictor, x) -> np.ndarray:
    """Arg-max class; ties go to the lowest index."""
    out, _ = predictor._forward(np.asarray(x, dtype=float), predictor.params)
    return np.argmax(out, axis=1)


def accuracy(predictor: Predictor, x, y) -> float:
    if len(y) == 0:
        raise UndefinedMetricError("accuracy of an empty evaluation set")
    return float(np.mean(predict_labels(predictor, x) == np.asarray(y)))
