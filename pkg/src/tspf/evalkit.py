"""Effect-estimation metrics, replication aggregates and result tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tspf.data import Dataset, DatasetBundle
from tspf.errors import ContractError

METRICS = ("pehe_in", "ate_in", "pehe_out", "ate_out")
METRIC_LABELS = {
    "pehe_in": "in sqrt(PEHE)",
    "ate_in": "in eps_ATE",
    "pehe_out": "out sqrt(PEHE)",
    "ate_out": "out eps_ATE",
}


def _residuals(tau_hat, y1, y0) -> np.ndarray:
    tau_hat = np.asarray(tau_hat, dtype=np.float64).reshape(-1)
    y1 = np.asarray(y1, dtype=np.float64).reshape(-1)
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    if not (tau_hat.shape == y1.shape == y0.shape):
        raise ContractError(f"length mismatch: tau_hat {tau_hat.shape}, y1 {y1.shape}, y0 {y0.shape}")
    if tau_hat.size == 0:
        raise ContractError("metrics need at least one unit")
    return tau_hat - (y1 - y0)


def pehe(tau_hat, y1, y0) -> float:
    """Root mean squared error of the individual effect estimates."""
    r = _residuals(tau_hat, y1, y0)
    return float(np.sqrt(np.mean(r * r)))


def ate_error(tau_hat, y1, y0) -> float:
    """|sum of effect residuals| / n."""
    r = _residuals(tau_hat, y1, y0)
    return float(abs(r.sum()) / r.size)


@dataclass
class MetricsReport:
    """Metrics of one model kind, one value per replication plus aggregates."""

    kind: str
    config_hash: str = ""
    per_replication: dict[str, list[float]] = field(default_factory=lambda: {m: [] for m in METRICS})
    seeds: list[int] = field(default_factory=list)

    def add(self, metrics: dict[str, float], seed: int) -> None:
        for m in METRICS:
            self.per_replication[m].append(float(metrics[m]))
        self.seeds.append(int(seed))

    @property
    def n(self) -> int:
        return len(self.seeds)

    def mean(self, metric: str) -> float:
        return float(np.mean(self.per_replication[metric]))

    def std(self, metric: str) -> float:
        vals = self.per_replication[metric]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    # Convenience accessors for the headline numbers.
    @property
    def pehe_in(self) -> float:
        return self.mean("pehe_in")

    @property
    def pehe_out(self) -> float:
        return self.mean("pehe_out")

    @property
    def ate_in(self) -> float:
        return self.mean("ate_in")

    @property
    def ate_out(self) -> float:
        return self.mean("ate_out")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "n_replications": self.n,
            "seeds": list(self.seeds),
            "per_replication": {m: list(v) for m, v in self.per_replication.items()},
            "mean": {m: self.mean(m) for m in METRICS},
            "std": {m: self.std(m) for m in METRICS},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> MetricsReport:
        rep = cls(kind=obj["kind"], config_hash=obj.get("config_hash", ""))
        rep.per_replication = {m: [float(v) for v in obj["per_replication"][m]] for m in METRICS}
        rep.seeds = [int(s) for s in obj["seeds"]]
        return rep


def in_sample(bundle: DatasetBundle) -> Dataset:
    return bundle.train_pool()


def evaluate_split(model, ds: Dataset) -> tuple[float, float]:
    if not ds.has_oracle:
        raise ContractError("evaluation needs oracle potential outcomes")
    tau = model.predict_cate(ds.x)
    return pehe(tau, ds.y1, ds.y0), ate_error(tau, ds.y1, ds.y0)


def evaluate(model, bundle: DatasetBundle) -> dict[str, float]:
    """In-sample metrics on OBS+RCT training covariates, out-of-sample on the test split."""
    if not (in_sample(bundle).has_oracle and bundle.test.has_oracle):
        raise ContractError("evaluation needs oracle potential outcomes")
    p_in, a_in = evaluate_split(model, in_sample(bundle))
    p_out, a_out = evaluate_split(model, bundle.test)
    return {"pehe_in": p_in, "ate_in": a_in, "pehe_out": p_out, "ate_out": a_out}


def aggregate(kind: str, results: Sequence[dict[str, float]], seeds: Sequence[int], config_hash: str = "") -> MetricsReport:
    rep = MetricsReport(kind=kind, config_hash=config_hash)
    for metrics, seed in zip(results, seeds, strict=True):
        rep.add(metrics, seed)
    return rep


# -- tables --------------------------------------------------------------------
def _best_marks(reports: Sequence[MetricsReport]) -> dict[tuple[str, str], bool]:
    """Lowest displayed (2-decimal) mean per column; ties share the mark."""
    marks = {}
    for m in METRICS:
        shown = [round(r.mean(m), 2) for r in reports]
        best = min(shown)
        for r, v in zip(reports, shown):
            marks[(r.kind, m)] = v == best
    return marks


def table_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    if not reports:
        raise ContractError("no completed runs to tabulate")
    marks = _best_marks(reports)
    rows = []
    for r in reports:
        cells = {}
        for m in METRICS:
            cells[m] = {
                "mean": round(r.mean(m), 2),
                "std": round(r.std(m), 2),
                "best": marks[(r.kind, m)],
            }
        rows.append({"method": r.kind, "n": r.n, "cells": cells})
    return rows


def render_table(reports: Sequence[MetricsReport]) -> str:
    rows = table_rows(reports)
    header = ["method"] + [METRIC_LABELS[m] for m in METRICS]
    body = []
    for row in rows:
        line = [row["method"]]
        for m in METRICS:
            c = row["cells"][m]
            text = f"{c['mean']:.2f} +- {c['std']:.2f}"
            line.append(f"*{text}*" if c["best"] else f" {text} ")
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    out = [fmt(header), "-+-".join("-" * w for w in widths)]
    out += [fmt(r) for r in body]
    out.append("")
    out.append("* marks the best (lowest) mean per column; ties are all marked.")
    return "\n".join(out) + "\n"


def write_table(reports: Sequence[MetricsReport], directory: str | Path) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    txt = directory / "table.txt"
    js = directory / "table.json"
    txt.write_text(render_table(reports))
    js.write_text(json.dumps({"rows": table_rows(reports)}, indent=1, sort_keys=True))
    return txt, js
