"""Covariate loading, hidden-confounder synthesis, splits and mini-batches.

Pipeline for one replication::

    cov = load_covariates(path, IHDP_SCHEMA)        # standardized covariates
    synth = synthesize(cov.x, c=30, seed=s)         # T, Y, oracle Y0/Y1
    train, val, test = split(synth.dataset, seed)   # 63 / 27 / 10
    obs, rct = make_rct(train, 0.10, seed)          # rerandomized RCT slice
    val = rerandomize_validation(val, seed)

``build_bundle`` runs exactly these steps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tspf.errors import ContractError, LoadError

TRAIN_FRACTION = 0.63
VALIDATION_FRACTION = 0.27


@dataclass
class Dataset:
    """Unit-level records stored column-wise.

    ``y0``/``y1`` are oracle potential outcomes available only because the data
    are synthesized. Training code reads ``x``, ``t`` and ``y`` only.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    g: np.ndarray
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ContractError(f"covariates must be a matrix, got shape {self.x.shape}")
        n = self.x.shape[0]
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.g = np.asarray(self.g, dtype=np.float64).reshape(-1)
        if self.index is None:
            self.index = np.arange(n)
        self.index = np.asarray(self.index, dtype=np.int64)
        for name in ("y0", "y1"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, np.asarray(arr, dtype=np.float64).reshape(-1))
        for name in ("t", "y", "g", "y0", "y1", "index"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != n:
                raise ContractError(f"field {name} has {arr.shape[0]} rows, covariates have {n}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def has_oracle(self) -> bool:
        return self.y0 is not None and self.y1 is not None

    def subset(self, rows) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            x=self.x[rows],
            t=self.t[rows],
            y=self.y[rows],
            g=self.g[rows],
            y0=None if self.y0 is None else self.y0[rows],
            y1=None if self.y1 is None else self.y1[rows],
            index=self.index[rows],
        )

    @staticmethod
    def concat(parts: Sequence[Dataset]) -> Dataset:
        oracle = all(p.has_oracle for p in parts)
        return Dataset(
            x=np.concatenate([p.x for p in parts]),
            t=np.concatenate([p.t for p in parts]),
            y=np.concatenate([p.y for p in parts]),
            g=np.concatenate([p.g for p in parts]),
            y0=np.concatenate([p.y0 for p in parts]) if oracle else None,
            y1=np.concatenate([p.y1 for p in parts]) if oracle else None,
            index=np.concatenate([p.index for p in parts]),
        )


# -- loading -------------------------------------------------------------------
@dataclass(frozen=True)
class CovariateSchema:
    name: str
    n_covariates: int
    # "all" centers binary columns too; "continuous" passes {0,1} columns through.
    standardize: str = "all"

    @property
    def columns(self) -> list[str]:
        return [f"x{i + 1}" for i in range(self.n_covariates)]


IHDP_SCHEMA = CovariateSchema("ihdp", 25)
JOBS_SCHEMA = CovariateSchema("jobs", 17)
SCHEMAS = {"ihdp": IHDP_SCHEMA, "jobs": JOBS_SCHEMA}


@dataclass
class Covariates:
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    binary: np.ndarray
    t_original: np.ndarray | None = None
    y_original: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


def standardize(raw: np.ndarray, mode: str = "all") -> Covariates:
    if mode not in ("all", "continuous", "none"):
        raise ContractError(f"unknown standardization mode {mode!r}")
    raw = np.asarray(raw, dtype=np.float64)
    binary = np.array([np.isin(np.unique(col), (0.0, 1.0)).all() for col in raw.T], dtype=bool)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    if mode == "continuous":
        mean = np.where(binary, 0.0, mean)
        std = np.where(binary, 1.0, std)
    elif mode == "none":
        mean = np.zeros_like(mean)
        std = np.ones_like(std)
    return Covariates(x=(raw - mean) / std, mean=mean, std=std, binary=binary)


def load_covariates(path: str | Path, schema: CovariateSchema) -> Covariates:
    """Read a CSV with header ``x1..xd`` (plus optional ``t``, ``y``) and standardize it."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"covariate file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise LoadError(f"{path}: header lacks columns {missing[:3]}{'...' if len(missing) > 3 else ''}")
        cols = [header.index(c) for c in schema.columns]
        t_col = header.index("t") if "t" in header else None
        y_col = header.index("y") if "y" in header else None
        rows, ts, ys = [], [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != len(header):
                raise LoadError(f"{path}: line {lineno} has {len(record)} fields, expected {len(header)}")
            try:
                rows.append([float(record[c]) for c in cols])
                if t_col is not None:
                    ts.append(float(record[t_col]))
                if y_col is not None:
                    ys.append(float(record[y_col]))
            except ValueError:
                bad = next(c for c in range(len(record)) if not _is_float(record[c]))
                raise LoadError(f"{path}: line {lineno}, column {header[bad]!r}: non-numeric {record[bad]!r}") from None
    if not rows:
        raise LoadError(f"{path}: no data rows")
    raw = np.asarray(rows)
    if not np.isfinite(raw).all():
        raise LoadError(f"{path}: non-finite covariate values")
    cov = standardize(raw, schema.standardize)
    cov.t_original = np.asarray(ts) if ts else None
    cov.y_original = np.asarray(ys) if ys else None
    return cov


def _is_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def write_covariates(path: str | Path, x: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(x.shape[1])])
        writer.writerows([[repr(float(v)) for v in row] for row in x])
    return path


def simulate_covariates(n: int, d: int, seed: int, n_binary: int = 0) -> np.ndarray:
    """Standard-normal covariates with the last ``n_binary`` columns Bernoulli(0.5)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    if n_binary:
        x[:, d - n_binary :] = rng.integers(0, 2, size=(n, n_binary))
    return x


# -- synthesis -----------------------------------------------------------------
@dataclass
class SynthesisParams:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    w4: np.ndarray
    w5: np.ndarray
    w6: np.ndarray
    c: int
    seed: int

    def to_dict(self) -> dict:
        out = {k: [float(v) for v in getattr(self, k)] for k in ("w1", "w2", "w3", "w4", "w5", "w6")}
        out.update(c=self.c, seed=self.seed)
        return out


@dataclass
class Synthesized:
    dataset: Dataset
    params: SynthesisParams
    # Hidden confounder draws. Kept beside the dataset, never inside it.
    confounders: np.ndarray = field(repr=False)


NOISE_VARIANCE = 0.1
EFFECT_SHIFT = 4.0


def synthesize(cov: np.ndarray, c: int = 30, seed: int = 0) -> Synthesized:
    """Simulate treatment and potential outcomes driven by X and a hidden U.

    Normal draws take variance parameters (0.1 -> std 0.316).
    """
    if c < 1:
        raise ContractError(f"confounder dimension must be >= 1, got {c}")
    x = np.asarray(cov, dtype=np.float64)
    if x.ndim != 2 or not np.isfinite(x).all():
        raise ContractError("covariates must be a finite matrix")
    n, d = x.shape
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, math.sqrt(0.1), d)
    w2 = rng.normal(0.02, math.sqrt(0.1), c)
    w3 = rng.normal(0.1, 1.0, d)
    w4 = rng.normal(0.1, 1.0, c)
    w5 = rng.uniform(0.0, 0.2, d)
    w6 = rng.uniform(0.0, 0.2, c)
    u = rng.uniform(0.0, 0.2, (n, c))
    logits = x @ w1 + u @ w2
    t = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)
    mu0 = x @ w3 + u @ w4
    mu1 = x @ w5 + u @ w6 + EFFECT_SHIFT
    noise_sd = math.sqrt(NOISE_VARIANCE)
    y0 = rng.normal(mu0, noise_sd)
    y1 = rng.normal(mu1, noise_sd)
    y = np.where(t == 1.0, y1, y0)
    ds = Dataset(x=x.copy(), t=t, y=y, g=np.zeros(n), y0=y0, y1=y1)
    params = SynthesisParams(w1, w2, w3, w4, w5, w6, c=c, seed=seed)
    return Synthesized(ds, params, u)


# -- splitting -----------------------------------------------------------------
def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(TRAIN_FRACTION * n)
    n_val = math.floor(VALIDATION_FRACTION * n)
    return n_train, n_val, n - n_train - n_val


def split(ds: Dataset, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    if len(ds) == 0:
        raise ContractError("cannot split an empty dataset")
    n_train, n_val, _ = split_sizes(len(ds))
    perm = np.random.default_rng(seed).permutation(len(ds))
    return (
        ds.subset(perm[:n_train]),
        ds.subset(perm[n_train : n_train + n_val]),
        ds.subset(perm[n_train + n_val :]),
    )


def _rerandomize(ds: Dataset, rng: np.random.Generator) -> Dataset:
    if not ds.has_oracle:
        raise ContractError("rerandomization needs oracle potential outcomes")
    t_new = rng.integers(0, 2, size=len(ds)).astype(np.float64)
    y_f = np.where(ds.t == 1.0, ds.y1, ds.y0)
    y_cf = np.where(ds.t == 1.0, ds.y0, ds.y1)
    # 1{T_new == T} * (Y_f - Y_cf) + Y_cf, evaluated as a selection so it stays exact.
    y_new = np.where(t_new == ds.t, y_f, y_cf)
    return Dataset(x=ds.x, t=t_new, y=y_new, g=np.ones(len(ds)), y0=ds.y0, y1=ds.y1, index=ds.index)


def make_rct(train: Dataset, fraction: float = 0.10, seed: int = 0, size: int | None = None) -> tuple[Dataset, Dataset]:
    """Carve ``floor(fraction * |train|)`` units (or exactly ``size``) into a fair-coin RCT."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"RCT fraction must lie in (0, 1), got {fraction}")
    if not train.has_oracle:
        raise ContractError("make_rct needs oracle potential outcomes")
    m = math.floor(fraction * len(train)) if size is None else int(size)
    if not 0 <= m <= len(train):
        raise ContractError(f"RCT size {m} out of range for {len(train)} training units")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train))
    rct = _rerandomize(train.subset(np.sort(perm[:m])), rng)
    obs = train.subset(np.sort(perm[m:]))
    obs.g = np.zeros(len(obs))
    return obs, rct


def rerandomize_validation(val: Dataset, seed: int) -> Dataset:
    out = _rerandomize(val, np.random.default_rng(seed))
    # The validation split is not part of the RCT sample.
    out.g = np.zeros(len(out))
    return out


def batches(n: int | Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch, reshuffled by ``(seed, epoch)``; the short tail is kept."""
    if batch_size < 2:
        raise ContractError(f"batch_size must be >= 2, got {batch_size}")
    n = len(n) if isinstance(n, Dataset) else int(n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


# -- bundles -------------------------------------------------------------------
@dataclass
class DatasetBundle:
    obs_train: Dataset
    rct_train: Dataset
    validation: Dataset
    test: Dataset
    params: SynthesisParams | None = None
    seed: int = 0

    def train_pool(self) -> Dataset:
        return Dataset.concat([self.obs_train, self.rct_train])

    def splits(self) -> dict[str, Dataset]:
        return {
            "obs_train": self.obs_train,
            "rct_train": self.rct_train,
            "validation": self.validation,
            "test": self.test,
        }


def build_bundle(
    cov: np.ndarray,
    c: int = 30,
    seed: int = 0,
    fraction_rct: float = 0.10,
    rct_size: int | None = None,
) -> DatasetBundle:
    """Synthesize, split and rerandomize one replication from a single seed."""
    synth_seed, split_seed, rct_seed, val_seed = np.random.SeedSequence(seed).generate_state(4)
    synth = synthesize(cov, c=c, seed=int(synth_seed))
    train, val, test = split(synth.dataset, int(split_seed))
    obs, rct = make_rct(train, fraction_rct, int(rct_seed), size=rct_size)
    val = rerandomize_validation(val, int(val_seed))
    return DatasetBundle(obs, rct, val, test, params=synth.params, seed=seed)


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ds in bundle.splits().items():
        with (directory / f"{name}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(ds.d)] + ["t", "y", "g", "y0", "y1"])
            for i in range(len(ds)):
                row = list(ds.x[i]) + [ds.t[i], ds.y[i], ds.g[i], ds.y0[i], ds.y1[i]]
                writer.writerow([repr(float(v)) for v in row])
    sidecar = {"seed": bundle.seed, "sizes": {k: len(v) for k, v in bundle.splits().items()}}
    if bundle.params is not None:
        sidecar["c"] = bundle.params.c
        sidecar["synthesis"] = bundle.params.to_dict()
    (directory / "bundle.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return directory


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    splits = {}
    for name in ("obs_train", "rct_train", "validation", "test"):
        path = directory / f"{name}.csv"
        if not path.is_file():
            raise LoadError(f"bundle split missing: {path}")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        d = arr.shape[1] - 5
        splits[name] = Dataset(x=arr[:, :d], t=arr[:, d], y=arr[:, d + 1], g=arr[:, d + 2], y0=arr[:, d + 3], y1=arr[:, d + 4])
    sidecar = json.loads((directory / "bundle.json").read_text())
    params = None
    if "synthesis" in sidecar:
        s = sidecar["synthesis"]
        params = SynthesisParams(*(np.asarray(s[k]) for k in ("w1", "w2", "w3", "w4", "w5", "w6")), c=s["c"], seed=s["seed"])
    return DatasetBundle(**splits, params=params, seed=sidecar["seed"])
