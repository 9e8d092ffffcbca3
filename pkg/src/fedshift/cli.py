"""Command-line driver: ``fedshift {train,ratio-fit,ridge-verify,consistency,eigen-report}``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import ratio_estimation as re_
from . import ridge
from . import synthdata as sd
from .config import ConfigError, ExperimentConfig, load_config
from .fed_core import (
    ConfigurationError,
    TrainMode,
    broadcast_shuffled_pool,
    consistency_sweep,
    make_clients,
    run_training,
    write_round_log,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
SCHEMA_VERSION = 1


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_root(cfg: ExperimentConfig, args) -> Path:
    root = Path(args.out or cfg.out_dir) / cfg.experiment
    root.mkdir(parents=True, exist_ok=True)
    return root


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


# --------------------------------------------------------------------------
# train


def train_one(cfg: ExperimentConfig, mode: TrainMode, seed: int, threads: int = 1) -> tuple[dict, object]:
    """One (mode, seed) replicate; returns its summary dict and the training result."""
    scenario = cfg.target_shift(seed)
    splits = scenario.build()
    source = None if mode is TrainMode.FEDAVG else cfg.ratio_source(seed, scenario.oracle())
    predictor = cfg.make_predictor(splits[0].train_x.shape[1], scenario.num_classes, seed)
    result = run_training(
        splits, mode, predictor, cfg.train.hyper(), seed=seed, ratio_source=source,
        focus=cfg.focus_spec(), threads=threads,
    )
    summary = result.summary()
    summary.update(experiment=cfg.experiment, seed=seed, schema_version=SCHEMA_VERSION)
    suprema = getattr(source, "suprema", None)
    if suprema:
        summary["r_tilde"] = [suprema[k].r_tilde for k in sorted(suprema)]
    return summary, result


def _train_job(payload):
    cfg_dict, mode, seed, run_dir = payload
    cfg = ExperimentConfig.model_validate(cfg_dict)
    summary, result = train_one(cfg, TrainMode(mode), seed)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_round_log(result, run_dir / "rounds.csv")
    _dump(summary, run_dir / "summary.json")
    return summary


def aggregate(summaries: list[dict]) -> dict:
    """Mean and sample std over seeds; std fields are omitted with a single seed."""
    avg = np.array([s["average_accuracy"] for s in summaries])
    per_client = np.array([s["per_client_accuracy"] for s in summaries])
    out = {
        "seeds": [s["seed"] for s in summaries],
        "per_seed_average_accuracy": avg.tolist(),
        "average_accuracy_mean": float(avg.mean()),
        "per_client_accuracy_mean": per_client.mean(axis=0).tolist(),
        "worst_accuracy_mean": float(np.mean([s["worst_accuracy"] for s in summaries])),
        "best_accuracy_mean": float(np.mean([s["best_accuracy"] for s in summaries])),
    }
    if len(summaries) >= 2:
        out["average_accuracy_std"] = float(avg.std(ddof=1))
        out["per_client_accuracy_std"] = per_client.std(axis=0, ddof=1).tolist()
    return out


def cmd_train(cfg: ExperimentConfig, args) -> int:
    root = _out_root(cfg, args)
    jobs = [
        (cfg.model_dump(mode="json"), mode.value, seed, str(root / mode.value / f"seed_{seed}"))
        for mode in cfg.modes
        for seed in _seeds(cfg, args)
    ]
    # dry-build once so config-level problems surface before any worker starts
    cfg.target_shift(jobs[0][2])
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.threads) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    by_mode: dict[str, list[dict]] = {}
    for s in results:
        by_mode.setdefault(s["mode"], []).append(s)
    report = {
        "experiment": cfg.experiment,
        "schema_version": SCHEMA_VERSION,
        "modes": {m: aggregate(v) for m, v in by_mode.items()},
    }
    _dump(report, root / "summary.json")
    for m, agg in report["modes"].items():
        std = agg.get("average_accuracy_std")
        print(f"{m:8s} average accuracy {agg['average_accuracy_mean']:.4f}" + ("" if std is None else f" +/- {std:.4f}"))
    return EXIT_OK


# --------------------------------------------------------------------------
# ratio-fit


def _ratio_data(cfg: ExperimentConfig, seed: int):
    """Per-client (train, pool, K, held-out train, held-out pool, analytic ratio or None)."""
    sc = cfg.scenario
    if sc.kind == "gaussian_pair":
        x_tr, x_te, ratio = sd.gaussian_shift_pair(sc.mean_tr, sc.mean_te, sc.variance, sc.n_train, sc.n_test, seed)
        h_tr, h_te, _ = sd.gaussian_shift_pair(
            sc.mean_tr, sc.mean_te, sc.variance, sc.n_holdout, sc.n_holdout, seed + 1_000_003
        )
        return [(x_tr, x_te, 1, h_tr, h_te, ratio)]
    if sc.kind != "target_shift":
        raise ConfigError(f"scenario.kind: ratio-fit supports target_shift or gaussian_pair, got {sc.kind}")
    splits = cfg.target_shift(seed).build()
    clients = make_clients(splits)
    pooled = broadcast_shuffled_pool(clients, seed)
    K = len(splits)
    # held-out halves: a second draw of the same scenario under a different seed
    held = cfg.target_shift(seed + 1_000_003).build()
    held_pool = np.concatenate([s.test_pool for s in held])
    return [(s.train_x, pooled, K, h.train_x, held_pool, None) for s, h in zip(splits, held)]


def cmd_ratio_fit(cfg: ExperimentConfig, args) -> int:
    if cfg.ratio.source == "oracle":
        raise ConfigError("ratio.source: ratio-fit needs hdrm-histogram or hdrm-kmeans; oracle has nothing to fit")
    method = cfg.ratio.source.removeprefix("hdrm-")
    root = _out_root(cfg, args)
    for seed in _seeds(cfg, args):
        run_dir = root / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        report = {"experiment": cfg.experiment, "seed": seed, "variant": cfg.variant, "method": method, "clients": []}
        for k, (x_tr, pool, K, h_tr, h_te, analytic) in enumerate(_ratio_data(cfg, seed)):
            kw = dict(num_clients=K, safety=cfg.ratio.safety)
            if method == "kmeans":
                kw.update(iters=cfg.ratio.kmeans_iters, seed=seed * 1009 + k)
            sweep = re_.supremum_sweep(x_tr, pool, cfg.ratio.sweep, method=method, **kw)
            re_.write_sweep_csv(sweep, run_dir / f"sweep_client_{k}.csv")
            if method == "kmeans":
                sup = re_.estimate_supremum_kmeans(x_tr, pool, cfg.ratio.num_bins, **kw)
            else:
                sup = re_.estimate_supremum_histogram(x_tr, pool, cfg.ratio.num_bins, **kw)
            centroids = None
            if cfg.ratio.model == "class-table":
                centroids, _ = re_.kmeans(np.vstack([x_tr, pool]), cfg.ratio.num_bins, cfg.ratio.kmeans_iters, seed)
            model = re_.train_ratio_model(
                cfg.variant, x_tr, pool, sup, K, cfg.ratio.hyper(), seed=seed * 1009 + k,
                kind=cfg.ratio.model, centroids=centroids,
            )
            model.save(run_dir / f"ratio_client_{k}.json")
            entry = {
                "client_id": k,
                "r_tilde": sup.r_tilde,
                "C": sup.C,
                "epochs": model.meta["epochs"],
                "holdout_bd_risk": re_.empirical_bd_risk(cfg.variant, model, sup.C, K, h_tr, h_te),
            }
            if analytic is not None:
                entry["analytic_bd_risk"] = re_.empirical_bd_risk(cfg.variant, analytic, sup.C, K, h_tr, h_te)
            report["clients"].append(entry)
            print(f"seed {seed} client {k}: r_tilde={sup.r_tilde:.3f} held-out BD risk={entry['holdout_bd_risk']:.5f}")
        _dump(report, run_dir / "ratio_report.json")
    return EXIT_OK


# --------------------------------------------------------------------------
# ridge-verify


def ridge_report(num_instances: int, seed: int, mc_instances: int = 20, mc_trials: int = 10_000) -> dict:
    thm = ridge.soundness_sweep("theorem2", num_instances, seed)
    prop = ridge.soundness_sweep("prop5", num_instances, seed)
    lemma = ridge.lemma_identity_sweep(mc_instances, mc_trials, seed)
    z = [c.z for c in lemma]
    within = sum(abs(v) <= 3 for v in z)
    return {
        "num_instances": num_instances,
        "seed": seed,
        "theorem2": thm.to_dict(),
        "prop5": prop.to_dict(),
        "lemma_identity": {
            "instances": mc_instances,
            "trials": mc_trials,
            "z_scores": z,
            "within_3se": within,
            "fraction_within_3se": within / mc_instances,
        },
    }


def cmd_ridge_verify(args) -> int:
    if args.num_instances < 1:
        raise ConfigError("--num-instances must be >= 1")
    seed = 0 if args.seed is None else args.seed
    report = ridge_report(args.num_instances, seed, args.mc_instances, args.mc_trials)
    ok = (
        report["theorem2"]["violations"] == 0
        and report["prop5"]["violations"] == 0
        and report["lemma_identity"]["fraction_within_3se"] >= 0.95
    )
    report["passed"] = ok
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(report, out / "ridge_report.json")
    for name in ("theorem2", "prop5"):
        r = report[name]
        print(f"{name}: {r['violations']}/{r['instances']} violations ({r['violations_train_spectrum_erm']} with train-spectrum ERM risk)")
    lem = report["lemma_identity"]
    print(f"lemma identity: {lem['within_3se']}/{lem['instances']} within 3 standard errors")
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------------------
# consistency


def cmd_consistency(cfg: ExperimentConfig, args) -> int:
    if cfg.scenario.kind != "finite_support":
        raise ConfigError(f"scenario.kind: consistency needs finite_support, got {cfg.scenario.kind}")
    family = cfg.finite_support()
    root = _out_root(cfg, args)
    seeds = _seeds(cfg, args)
    for source_name in cfg.consistency.ratio_sources:
        for mode in cfg.consistency.modes:
            source = None
            if mode is not TrainMode.FEDAVG:
                source = cfg.ratio_source(seeds[0], family.oracle(), source_name)
            rows = consistency_sweep(family, mode, cfg.consistency.n_grid, seeds, source)
            suffix = "" if source_name == "oracle" else f"_{source_name}"
            path = root / f"consistency_{mode.value}{suffix}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["n", "median_excess", "std_excess"])
                for r in rows:
                    w.writerow([r.n, repr(r.median_excess), repr(r.std_excess)])
            print(f"{mode.value}{suffix}: " + ", ".join(f"n={r.n}: {r.median_excess:.3e}" for r in rows))
    return EXIT_OK


# --------------------------------------------------------------------------
# eigen-report


def cmd_eigen_report(cfg: ExperimentConfig, args) -> int:
    root = _out_root(cfg, args)
    header = ["index", "train_eig", "test_eig", "ratio", "bound", "near_zero"]
    for seed in _seeds(cfg, args):
        splits = cfg.target_shift(seed).build()
        for s in splits:
            rows = ridge.eigen_ratio_report(s.train_x, s.test_pool)
            ridge.write_rows_csv(rows, root / f"eigen_seed_{seed}_client_{s.client_id}.csv", header)
            inside = sum(r.ratio <= r.bound for r in rows)
            print(f"seed {seed} client {s.client_id}: {inside}/{len(rows)} ratios inside the bound")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--threads", type=int, default=1, help="parallel workers")
        return p

    common(sub.add_parser("train", help="federated training per mode and seed"))
    common(sub.add_parser("ratio-fit", help="supremum sweep and ratio model fitting"))
    rv = common(sub.add_parser("ridge-verify", help="exact ridge soundness sweeps and Monte Carlo identity"), config=False)
    rv.add_argument("--num-instances", type=int, default=10_000)
    rv.add_argument("--mc-instances", type=int, default=20)
    rv.add_argument("--mc-trials", type=int, default=10_000)
    common(sub.add_parser("consistency", help="excess risk versus training size"))
    common(sub.add_parser("eigen-report", help="train/test second-moment eigenvalue ratios"))
    return parser


COMMANDS = {
    "train": cmd_train,
    "ratio-fit": cmd_ratio_fit,
    "consistency": cmd_consistency,
    "eigen-report": cmd_eigen_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "ridge-verify":
            return cmd_ridge_verify(args)
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
