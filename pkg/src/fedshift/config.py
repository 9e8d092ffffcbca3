"""YAML experiment configuration with strict validation and line-level diagnostics."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import synthdata as sd
from .fed_core import FittedRatios, FocusSpec, OracleRatios, TrainHyper, TrainMode
from .predictors import make_predictor
from .ratio_estimation import VARIANTS, RatioHyper


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration files."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorConfig(_Strict):
    dim: int = Field(10, ge=1)
    separation: float = Field(3.0, gt=0)
    scale: float = Field(1.0, gt=0)
    mean_seed: int = 0


class ScenarioConfig(_Strict):
    """``target_shift`` takes a preset or explicit count tables; the other kinds are single-purpose fixtures."""

    kind: Literal["target_shift", "gaussian_pair", "finite_support"] = "target_shift"
    preset: Literal["fmnist5", "fmnist2", "ratio20", "no_shift"] | None = None
    train_counts: list[list[int]] | None = None
    test_counts: list[list[int]] | None = None
    eval_counts: list[list[int]] | None = None
    count_scale: float = Field(1.0, gt=0)
    generator: GeneratorConfig = GeneratorConfig()
    # gaussian_pair
    mean_tr: float = 0.0
    mean_te: float = 0.5
    variance: float = Field(1.0, gt=0)
    n_train: int = Field(4000, ge=1)
    n_test: int = Field(4000, ge=1)
    n_holdout: int = Field(20000, ge=1)
    # finite_support
    noise_std: float = Field(0.3, ge=0)

    @model_validator(mode="after")
    def _resolvable(self):
        if self.kind == "target_shift":
            explicit = self.train_counts is not None
            if explicit == (self.preset is not None):
                raise ValueError("target_shift needs exactly one of 'preset' or 'train_counts'")
            if explicit and self.test_counts is None:
                raise ValueError("explicit 'train_counts' need matching 'test_counts'")
        return self


class RatioConfig(_Strict):
    source: Literal["oracle", "hdrm-histogram", "hdrm-kmeans"] = "oracle"
    model: Literal["class-table", "linear-softplus", "mlp-softplus"] = "linear-softplus"
    num_bins: int = Field(40, ge=1)
    sweep: list[int] = [10, 20, 40, 50, 100]
    kmeans_iters: int = Field(50, ge=1)
    safety: float = Field(1.0, gt=0, le=1)
    lr: float = Field(0.05, gt=0)
    batch_train: int | None = Field(64, ge=1)
    batch_test: int | None = Field(64, ge=1)
    reg: float = Field(0.0, ge=0)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(5, ge=1)
    holdout: float = Field(0.2, ge=0, lt=1)
    clip_factor: float = Field(2.0, gt=0)
    hidden: int = Field(16, ge=1)

    def hyper(self) -> RatioHyper:
        return RatioHyper(
            lr=self.lr, batch_train=self.batch_train, batch_test=self.batch_test, reg=self.reg,
            max_epochs=self.max_epochs, patience=self.patience, holdout=self.holdout,
            clip_factor=self.clip_factor, hidden=self.hidden,
        )


class PredictorConfig(_Strict):
    kind: Literal["linear", "logistic", "mlp"] = "logistic"
    hidden: int = Field(32, ge=1)
    bias: bool = True


class TrainConfig(_Strict):
    rounds: int = Field(500, ge=1)
    lr: float | None = Field(None, gt=0)
    batch_size: int | None = Field(64, ge=1)
    participation: float = Field(1.0, gt=0, le=1)
    schedule: Literal["constant", "inv_sqrt"] = "constant"
    aggregation: Literal["sum", "mean"] = "sum"
    server_optimizer: Literal["sgd", "adam"] = "sgd"
    eval_every: int = Field(50, ge=0)

    def hyper(self) -> TrainHyper:
        return TrainHyper(**self.model_dump())


class FocusConfig(_Strict):
    target: int = Field(ge=0)
    weights: list[float]


class ConsistencyConfig(_Strict):
    n_grid: list[int] = [100, 1000, 10000]
    modes: list[TrainMode] = [TrainMode.FTW, TrainMode.FEDAVG]
    ratio_sources: list[Literal["oracle", "hdrm-histogram", "hdrm-kmeans"]] = ["oracle"]

    @model_validator(mode="after")
    def _positive(self):
        if not self.n_grid or min(self.n_grid) < 2:
            raise ValueError("n_grid needs at least one size >= 2")
        return self


class ExperimentConfig(_Strict):
    experiment: str = Field("experiment", pattern=r"^[A-Za-z0-9_.-]+$")
    scenario: ScenarioConfig = ScenarioConfig(preset="fmnist5")
    modes: list[TrainMode] = [TrainMode.FTW, TrainMode.FITW, TrainMode.FEDAVG]
    variant: str = "LSIF"
    ratio: RatioConfig = RatioConfig()
    predictor: PredictorConfig = PredictorConfig()
    train: TrainConfig = TrainConfig()
    focus: FocusConfig | None = None
    consistency: ConsistencyConfig = ConsistencyConfig()
    seeds: list[int] = Field([0], min_length=1)
    out_dir: str = "runs"

    @model_validator(mode="after")
    def _check(self):
        if self.variant.upper() not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.variant = self.variant.upper()
        if TrainMode.FOCUSED in self.modes and self.focus is None:
            raise ValueError("mode FOCUSED needs a 'focus' block")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self

    # -- wiring ----------------------------------------------------------

    def target_shift(self, seed: int) -> sd.ShiftScenario:
        sc = self.scenario
        if sc.kind != "target_shift":
            raise ConfigError(f"scenario.kind: expected target_shift, got {sc.kind}")
        if sc.preset == "ratio20":
            n = int(round(20000 * sc.count_scale))
            gen = sc.generator
            return sd.ratio20_scenario(n, n, dim=gen.dim, separation=gen.separation, seed=seed)
        if sc.preset == "fmnist5":
            train, test = sd.fashion_mnist_five_client_counts()
        elif sc.preset == "fmnist2":
            train, test = sd.fashion_mnist_two_client_counts()
        elif sc.preset == "no_shift":
            train, test = np.full((3, 10), 200), np.full((3, 10), 50)
        else:
            train, test = np.asarray(sc.train_counts), np.asarray(sc.test_counts)
        evals = None if sc.eval_counts is None else np.asarray(sc.eval_counts)
        if sc.count_scale != 1.0:
            train, test = _scale(train, sc.count_scale), _scale(test, sc.count_scale)
            evals = None if evals is None else _scale(evals, sc.count_scale)
        gen = sc.generator
        classes = np.asarray(train).shape[1]
        generator = sd.GaussianClusters(classes, gen.dim, gen.separation, gen.scale, gen.mean_seed)
        try:
            return sd.ShiftScenario(train, test, generator, seed, evals)
        except ValueError as exc:
            raise ConfigError(f"scenario: {exc}") from None

    def finite_support(self) -> sd.FiniteSupportRegression:
        fam = sd.default_consistency_family()
        fam.noise_std = self.scenario.noise_std
        return fam

    def ratio_source(self, seed: int, oracle=None, source: str | None = None):
        source = source or self.ratio.source
        if source == "oracle":
            if oracle is None:
                raise ConfigError("ratio.source: oracle ratios are unavailable for this scenario")
            return OracleRatios(oracle)
        r = self.ratio
        return FittedRatios(
            variant=self.variant, method=source.removeprefix("hdrm-"), num_bins=r.num_bins,
            kmeans_iters=r.kmeans_iters, safety=r.safety, model_kind=r.model, hyper=r.hyper(), seed=seed,
        )

    def make_predictor(self, input_dim: int, num_classes: int, seed: int):
        p = self.predictor
        if p.kind == "linear":
            raise ConfigError("predictor.kind: classification scenarios need 'logistic' or 'mlp'")
        return make_predictor(p.kind, input_dim, num_classes, hidden=p.hidden, bias=p.bias, seed=seed)

    def focus_spec(self) -> FocusSpec | None:
        return None if self.focus is None else FocusSpec(self.focus.target, tuple(self.focus.weights))


def _scale(table, factor: float) -> np.ndarray:
    return np.maximum(np.rint(np.asarray(table) * factor), 0).astype(int)


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node addressed by a pydantic error location."""
    node = root
    line = None if root is None else root.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            node = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
        if node is None:
            break
        line = node.start_mark.line + 1
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate YAML text; errors carry ``source:line: field: message`` diagnostics."""
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = [p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-"))]
            line = _node_line(root, loc)
            field = ".".join(str(p) for p in loc) or "<root>"
            where = f"{source}:{line}" if line else source
            lines.append(f"{where}: {field}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
