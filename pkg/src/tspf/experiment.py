"""End-to-end experiment runs: synthesis, training, evaluation and result files.

Results directory layout::

    config.json                resolved configuration
    manifest.json              per-replication status, checkpoints, failures
    metrics.json               MetricsReport per method (no timestamps)
    table.txt / table.json     method x metric table
    pehe_by_seed.csv/.png      out-of-sample sqrt(PEHE) per replication
    rep_000/<method>.json      checkpoints
    rep_000/history_*.csv      per-epoch loss terms
    rep_000/loss_curves.png
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tspf import data, evalkit
from tspf.autodiff import save_checkpoint
from tspf.baselines import TRAINERS
from tspf.config import LAMBDA_KEYS, ExperimentConfig
from tspf.errors import ContractError, NumericError
from tspf.model import LAMBDA_RANGE, History, TrainConfig, fit_tspf, save_model, weighted_factual_mse

log = logging.getLogger(__name__)


def prepare_covariates(cfg: ExperimentConfig) -> np.ndarray:
    """Standardized covariate matrix shared by every replication."""
    if cfg.dataset == "synthetic":
        raw = data.simulate_covariates(cfg.n, cfg.d, cfg.seed, cfg.n_binary)
        return data.standardize(raw).x
    return data.load_covariates(cfg.covariates, data.SCHEMAS[cfg.dataset]).x


def make_bundle(cfg: ExperimentConfig, cov: np.ndarray, seed: int) -> data.DatasetBundle:
    return data.build_bundle(cov, cfg.c, seed, cfg.fraction_rct, cfg.rct_size)


@dataclass
class ReplicationResult:
    index: int
    seed: int
    status: str = "ok"
    error: str | None = None
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    histories: dict[str, History] = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)


def _write_history(path: Path, hist: History) -> None:
    keys = ["epoch", *hist.terms, "val_loss"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in hist.rows:
            writer.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in keys[1:]])


def run_replication(cfg: ExperimentConfig, cov: np.ndarray, index: int, seed: int, out: Path | None) -> ReplicationResult:
    """Train every configured method on one replication and evaluate it."""
    res = ReplicationResult(index, seed)
    rep_dir = None
    if out is not None:
        rep_dir = out / f"rep_{index:03d}"
        rep_dir.mkdir(parents=True, exist_ok=True)
    try:
        bundle = make_bundle(cfg, cov, seed)
        train_cfg = cfg.train.replace(seed=seed)
        models = {}
        for method in cfg.methods:
            if method == "tspf":
                fit = fit_tspf(bundle.obs_train, bundle.rct_train, train_cfg, bundle.validation)
                models[method] = fit.stage2
                res.histories["tspf_stage1"] = fit.history1
                res.histories["tspf_stage2"] = fit.history2
            else:
                model = TRAINERS[method](bundle.train_pool(), train_cfg, bundle.validation)
                models[method] = model
                res.histories[method] = model.history
        for method, model in models.items():
            res.metrics[method] = evalkit.evaluate(model, bundle)
            if rep_dir is not None:
                path = rep_dir / f"{method}.json"
                if method == "tspf":
                    save_model(path, model, {"kind": method, "seed": seed})
                else:
                    manifest = {"stage": "baseline", "kind": method, "seed": seed, "config_hash": train_cfg.digest()}
                    save_checkpoint(path, model.modules(), manifest)
                res.checkpoints.append(path.relative_to(out).as_posix())
    except NumericError as exc:
        log.error("replication %d (seed %d) failed: %s", index, seed, exc)
        res.status, res.error = "failed", str(exc)
        res.metrics = {}
    if rep_dir is not None:
        for name, hist in res.histories.items():
            if hist is not None:
                _write_history(rep_dir / f"history_{name}.csv", hist)
        if res.histories:
            plot_histories(res.histories, rep_dir / "loss_curves.png")
    return res


def _run_one(args) -> ReplicationResult:
    return run_replication(*args)


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def collect_reports(cfg: ExperimentConfig, results: list[ReplicationResult]) -> list[evalkit.MetricsReport]:
    ok = [r for r in results if r.status == "ok"]
    digest = cfg.train.digest()
    return [
        evalkit.aggregate(m, [r.metrics[m] for r in ok], [r.seed for r in ok], digest)
        for m in cfg.methods
    ]


def run_experiment(cfg: ExperimentConfig, out: str | Path, workers: int = 1) -> Path:
    """Run all replications and write the results directory."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cov = prepare_covariates(cfg)
    jobs = [(cfg, cov, i, s, out) for i, s in enumerate(cfg.replication_seeds())]
    results = sorted(_map(_run_one, jobs, workers), key=lambda r: r.index)
    failed = [{"replication": r.index, "seed": r.seed, "error": r.error} for r in results if r.status != "ok"]
    _dump(out / "config.json", cfg.to_dict())
    _dump(
        out / "manifest.json",
        {
            "config_hash": cfg.train.digest(),
            "replications": [
                {"replication": r.index, "seed": r.seed, "status": r.status, "checkpoints": r.checkpoints}
                for r in results
            ],
            "n_completed": len(results) - len(failed),
            "n_failed": len(failed),
            "failed": failed,
        },
    )
    reports = collect_reports(cfg, results)
    _dump(
        out / "metrics.json",
        {
            "methods": [r.to_dict() for r in reports],
            "n_completed": len(results) - len(failed),
            "failed": failed,
        },
    )
    if len(failed) < len(results):
        evalkit.write_table(reports, out)
        write_pehe_by_seed(reports, out)
    else:
        log.error("every replication failed; no table written")
    return out


# -- reporting -----------------------------------------------------------------
def load_reports(results_dir: str | Path) -> list[evalkit.MetricsReport]:
    path = Path(results_dir) / "metrics.json"
    if not path.is_file():
        raise ContractError(f"no metrics.json in {results_dir}")
    payload = json.loads(path.read_text())
    reports = [evalkit.MetricsReport.from_dict(obj) for obj in payload["methods"]]
    reports = [r for r in reports if r.n > 0]
    if not reports:
        raise ContractError(f"{results_dir} holds no completed runs")
    return reports


def report(results_dir: str | Path) -> tuple[Path, Path]:
    return evalkit.write_table(load_reports(results_dir), results_dir)


def write_pehe_by_seed(reports: list[evalkit.MetricsReport], out: Path) -> None:
    seeds = reports[0].seeds
    with (out / "pehe_by_seed.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed"] + [r.kind for r in reports])
        for i, s in enumerate(seeds):
            writer.writerow([s] + [repr(r.per_replication["pehe_out"][i]) for r in reports])
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for r in reports:
        ax.plot(r.seeds, r.per_replication["pehe_out"], marker="o", label=r.kind)
    ax.set_xlabel("replication seed")
    ax.set_ylabel("out-of-sample sqrt(PEHE)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "pehe_by_seed.png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_histories(histories: dict[str, History], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    items = [(k, h) for k, h in histories.items() if h is not None and len(h.rows) > 1]
    if not items:
        return
    fig, axes = plt.subplots(1, len(items), figsize=(3.2 * len(items), 3), squeeze=False)
    for ax, (name, hist) in zip(axes[0], items):
        epochs = hist.column("epoch")[1:]
        ax.plot(epochs, hist.column("total")[1:], label="train total")
        val = hist.column("val_loss")[1:]
        if np.isfinite(val).any():
            ax.plot(epochs, val, label="validation")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)


# -- tuning --------------------------------------------------------------------
@dataclass
class TuneResult:
    best: dict[str, float]
    best_score: float
    candidates: list[dict]
    mode: str

    def to_dict(self) -> dict:
        return {"mode": self.mode, "best": self.best, "best_score": self.best_score, "candidates": self.candidates}


def _check_grid(grid: dict[str, list[float]], bounded: bool) -> None:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ContractError("tuning needs a non-empty lambda grid")
    for k, values in grid.items():
        if k not in LAMBDA_KEYS:
            raise ContractError(f"cannot tune {k!r}; only {LAMBDA_KEYS}")
        for v in values:
            if not (np.isfinite(v) and v >= 0):
                raise ContractError(f"{k}={v} must be finite and non-negative")
            if bounded and not LAMBDA_RANGE[0] <= v <= LAMBDA_RANGE[1]:
                raise ContractError(f"{k}={v} outside [{LAMBDA_RANGE[0]}, {LAMBDA_RANGE[1]}]")


def _score(args) -> float:
    """Mean validation weighted factual loss of stage-2 TSPF across tuning bundles."""
    train_cfg, bundles = args
    scores = []
    for b in bundles:
        fit = fit_tspf(b.obs_train, b.rct_train, train_cfg.replace(seed=b.seed), b.validation)
        scores.append(weighted_factual_mse(fit.stage2, b.validation))
    return float(np.mean(scores))


def tune(
    cfg: ExperimentConfig,
    grid: dict[str, list[float]] | None = None,
    mode: str | None = None,
    workers: int = 1,
    bundles: list[data.DatasetBundle] | None = None,
) -> TuneResult:
    """Grid search over lambda settings, scored by validation weighted factual loss.

    Grids from the config must lie in LAMBDA_RANGE; an explicit ``grid`` argument
    only needs finite non-negative values.
    """
    bounded = grid is None
    grid = cfg.grid if grid is None else grid
    mode = mode or cfg.tune_mode
    _check_grid(grid, bounded)
    if bundles is None:
        cov = prepare_covariates(cfg)
        bundles = [make_bundle(cfg, cov, s) for s in cfg.replication_seeds()[: cfg.tune_replications]]
    keys = [k for k in LAMBDA_KEYS if k in grid]
    base = {k: getattr(cfg.train, k) for k in LAMBDA_KEYS}
    seen: dict[tuple, float] = {}
    candidates: list[dict] = []

    def evaluate(points: list[dict]) -> None:
        fresh = [p for p in points if tuple(p[k] for k in LAMBDA_KEYS) not in seen]
        scores = _map(_score, [(cfg.train.replace(**p), bundles) for p in fresh], workers)
        for p, s in zip(fresh, scores):
            seen[tuple(p[k] for k in LAMBDA_KEYS)] = s
            candidates.append({"lambdas": dict(p), "score": s})

    if mode == "full":
        points = [{**base, **dict(zip(keys, combo))} for combo in itertools.product(*(grid[k] for k in keys))]
        evaluate(points)
    elif mode == "coordinate":
        current = dict(base)
        for k in keys:
            points = [{**current, k: v} for v in grid[k]]
            evaluate(points)
            current = min(points, key=lambda p: seen[tuple(p[j] for j in LAMBDA_KEYS)])
    else:
        raise ContractError(f"unknown tuning mode {mode!r}")
    best = min(candidates, key=lambda c: c["score"])
    return TuneResult(best=best["lambdas"], best_score=best["score"], candidates=candidates, mode=mode)


def write_tune(result: TuneResult, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "tune.json"
    _dump(path, result.to_dict())
    return path


def synth(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    """Write one serialized DatasetBundle per replication seed."""
    out = Path(out)
    cov = prepare_covariates(cfg)
    return [data.save_bundle(make_bundle(cfg, cov, s), out / f"bundle_{i:03d}") for i, s in enumerate(cfg.replication_seeds())]
