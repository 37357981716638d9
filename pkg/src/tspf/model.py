"""Two-stage pretraining/finetuning estimator.

Stage 1 fits a representation ``phi``, a decoder ``psi`` and two outcome heads
``h0``/``h1`` on observational data. Stage 2 freezes ``phi``, adds an adapter
``phi_u`` and wider heads ``g0``/``g1`` whose weight blocks are seeded from the
stage-1 heads so the finetuning starts from the stage-1 predictions exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from tspf import losses
from tspf.autodiff import Adam, MlpParams, Tensor, init_mlp, mlp_forward, no_grad, save_checkpoint
from tspf.autodiff import tensor as td
from tspf.autodiff.io import load_checkpoint
from tspf.data import Dataset, batches
from tspf.errors import ContractError, NumericError

log = logging.getLogger(__name__)

LAMBDA_RANGE = (1e-5, 0.1)


@dataclass
class TrainConfig:
    lambda1: float = 1e-2
    lambda2: float = 1e-2
    lambda3: float = 1e-2
    lambda4: float = 1e-2
    lr: float = 1e-3
    epochs1: int = 300
    epochs2: int = 300
    batch_size: int = 64
    r: int = 64
    r_u: int = 16
    hidden: int = 64
    g_hidden: int = 80
    adapter_hidden: tuple[int, ...] = ()
    l_p: int = 2
    activation: str = "relu"
    seed: int = 0
    sinkhorn_eps: float = 0.1
    sinkhorn_iters: int = 50
    # The self-transport terms are ~1e-7 on learned representations; debiasing
    # them out costs ~2.4x per stage-1 step, so training uses the raw cost.
    ipm_debias: bool = False
    q_inner_steps: int = 5
    q_hidden: int = 32
    q_lr: float = 1e-3
    patience: int = 30

    def __post_init__(self):
        self.adapter_hidden = tuple(int(h) for h in self.adapter_hidden)
        for k in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, k) < 0:
                raise ContractError(f"{k} must be non-negative")
        if self.lr <= 0 or self.q_lr <= 0:
            raise ContractError("learning rates must be positive")
        if min(self.r, self.r_u, self.hidden, self.g_hidden, self.l_p) < 1:
            raise ContractError("r, r_u, hidden, g_hidden and l_p must all be >= 1")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def replace(self, **changes) -> TrainConfig:
        out = copy.copy(self)
        for k, v in changes.items():
            if not hasattr(out, k):
                raise ContractError(f"unknown config field {k!r}")
            setattr(out, k, v)
        out.__post_init__()
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adapter_hidden"] = list(self.adapter_hidden)
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- models --------------------------------------------------------------------
def _head_sizes(in_dim: int, width: int, l_p: int) -> list[int]:
    return [in_dim] + [width] * (l_p - 1) + [1]


@dataclass
class Stage1Model:
    phi: MlpParams
    psi: MlpParams
    h0: MlpParams
    h1: MlpParams
    config: TrainConfig

    def bundles(self) -> list[MlpParams]:
        return [self.phi, self.psi, self.h0, self.h1]

    def modules(self) -> dict[str, MlpParams]:
        return {"phi": self.phi, "psi": self.psi, "h0": self.h0, "h1": self.h1}

    def potential_outcomes(self, x) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            _, _, y0, y1 = stage1_forward(self, x)
        return y0.data, y1.data

    def predict_cate(self, x) -> np.ndarray:
        y0, y1 = self.potential_outcomes(x)
        return y1 - y0


@dataclass
class Stage2Model:
    phi: MlpParams
    psi: MlpParams
    phi_u: MlpParams
    g0: MlpParams
    g1: MlpParams
    q_net: losses.VariationalCond
    g0_init: MlpParams
    g1_init: MlpParams
    config: TrainConfig

    def trainable(self) -> list[MlpParams]:
        return [self.phi_u, self.g0, self.g1]

    def modules(self) -> dict[str, MlpParams]:
        return {
            "phi": self.phi,
            "psi": self.psi,
            "phi_u": self.phi_u,
            "g0": self.g0,
            "g1": self.g1,
            "q_mean": self.q_net.mean_net,
            "q_logvar": self.q_net.logvar_net,
            "g0_init": self.g0_init,
            "g1_init": self.g1_init,
        }

    def potential_outcomes(self, x) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            _, _, y0, y1 = stage2_forward(self, x)
        return y0.data, y1.data

    def predict_cate(self, x) -> np.ndarray:
        y0, y1 = self.potential_outcomes(x)
        return y1 - y0


def init_stage1(d: int, cfg: TrainConfig) -> Stage1Model:
    if d < 1:
        raise ContractError(f"covariate dimension must be >= 1, got {d}")
    rng = np.random.default_rng([cfg.seed, 1])
    act = cfg.activation
    phi = init_mlp([d, cfg.hidden, cfg.r], rng, act, name="phi")
    psi = init_mlp([cfg.r, cfg.hidden, d], rng, act, name="psi")
    h0 = init_mlp(_head_sizes(cfg.r, cfg.hidden, cfg.l_p), rng, act, name="h0")
    h1 = init_mlp(_head_sizes(cfg.r, cfg.hidden, cfg.l_p), rng, act, name="h1")
    return Stage1Model(phi, psi, h0, h1, cfg)


def stage1_forward(m: Stage1Model, x):
    z = mlp_forward(m.phi, x)
    x_hat = mlp_forward(m.psi, z)
    y0 = mlp_forward(m.h0, z).reshape(-1)
    y1 = mlp_forward(m.h1, z).reshape(-1)
    return z, x_hat, y0, y1


def _expand_head(h: MlpParams, widths_in: list[int], widths_out: list[int], name: str) -> MlpParams:
    """Embed ``h`` in the top-left blocks of a wider head; every other entry is 0."""
    layers = []
    for l, (w_h, b_h) in enumerate(h.layers):
        out_g, in_g = widths_out[l], widths_in[l]
        out_h, in_h = w_h.shape
        if out_g < out_h or in_g < in_h:
            raise ContractError(
                f"{name} layer {l + 1}: width {out_g}x{in_g} is narrower than the stage-1 head's {out_h}x{in_h}"
            )
        w = np.zeros((out_g, in_g))
        b = np.zeros(out_g)
        w[:out_h, :in_h] = w_h.data
        b[:out_h] = b_h.data
        layers.append((Tensor(w), Tensor(b)))
    return MlpParams(layers, activation=h.activation, name=name)


def init_stage2_from_stage1(s1: Stage1Model, cfg: TrainConfig | None = None) -> Stage2Model:
    cfg = cfg or s1.config
    if cfg.r_u < 1:
        raise ContractError("adapter width r_u must be >= 1")
    l_p = s1.h0.depth
    if cfg.l_p != l_p:
        raise ContractError(f"stage-2 heads need depth {l_p}, config asks for {cfg.l_p}")
    r = s1.phi.out_dim
    d = s1.phi.in_dim
    g_sizes = _head_sizes(r + cfg.r_u, cfg.g_hidden, l_p)
    widths_in, widths_out = g_sizes[:-1], g_sizes[1:]
    g0 = _expand_head(s1.h0, widths_in, widths_out, "g0")
    g1 = _expand_head(s1.h1, widths_in, widths_out, "g1")
    rng = np.random.default_rng([cfg.seed, 2])
    phi_u = init_mlp([d, *cfg.adapter_hidden, cfg.r_u], rng, cfg.activation, name="phi_u")
    q_net = losses.init_variational(r, cfg.r_u, cfg.q_hidden, rng, cfg.activation)
    return Stage2Model(
        phi=s1.phi.copy(frozen=True),
        psi=s1.psi.copy(frozen=True),
        phi_u=phi_u,
        g0=g0,
        g1=g1,
        q_net=q_net,
        g0_init=g0.copy(frozen=True),
        g1_init=g1.copy(frozen=True),
        config=cfg,
    )


def stage2_forward(m: Stage2Model, x):
    # phi is frozen: its tensors carry requires_grad=False, so z has no graph edge.
    z = mlp_forward(m.phi, x)
    z_u = mlp_forward(m.phi_u, x)
    rep = td.concat([z, z_u], axis=1)
    y0 = mlp_forward(m.g0, rep).reshape(-1)
    y1 = mlp_forward(m.g1, rep).reshape(-1)
    return z, z_u, y0, y1


def predict_cate(model, x) -> np.ndarray:
    return model.predict_cate(x)


# -- training ------------------------------------------------------------------
def factual_prediction(y0: Tensor, y1: Tensor, t: np.ndarray) -> Tensor:
    return y1 * t + y0 * (1.0 - t)


def weighted_factual_mse(model, ds: Dataset) -> float:
    """Weighted factual loss of ``model`` on ``ds`` with weights from ``ds``'s own treatment split."""
    y0, y1 = model.potential_outcomes(ds.x)
    pred = np.where(ds.t == 1.0, y1, y0)
    w = losses.balancing_weights(ds.t).w
    return float(np.mean(w * (pred - ds.y) ** 2))


@dataclass
class History:
    terms: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def add(self, epoch: int, sums: dict[str, float], count: int, val_loss: float | None) -> None:
        row = {"epoch": float(epoch)}
        row.update({k: sums[k] / max(count, 1) for k in self.terms})
        row["val_loss"] = float("nan") if val_loss is None else val_loss
        self.rows.append(row)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])


def _snapshot(bundles: list[MlpParams]) -> list[list[np.ndarray]]:
    return [[t.data.copy() for t in b.tensors()] for b in bundles]


def _restore(bundles: list[MlpParams], snap: list[list[np.ndarray]]) -> None:
    for b, arrays in zip(bundles, snap):
        b.load_arrays(arrays)


def _fit(
    bundles: list[MlpParams],
    step: Callable[[np.ndarray], dict[str, float]],
    n: int,
    epochs: int,
    cfg: TrainConfig,
    terms: list[str],
    val_loss: Callable[[], float] | None,
    seed_tag: int,
) -> History:
    """Shared epoch loop: seeded batches, per-epoch term averages, best-validation checkpointing."""
    hist = History(terms)
    best = val_loss() if val_loss is not None else None
    best_snap = _snapshot(bundles)
    hist.add(0, {k: math.nan for k in terms}, 1, best)
    since_best = 0
    for epoch in range(1, epochs + 1):
        sums = dict.fromkeys(terms, 0.0)
        count = 0
        for idx in batches(n, cfg.batch_size, cfg.seed * 1000 + seed_tag, epoch):
            values = step(idx)
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericError(f"non-finite loss at epoch {epoch}: {values}")
            for k in terms:
                sums[k] += values[k]
            count += 1
        current = val_loss() if val_loss is not None else None
        hist.add(epoch, sums, count, current)
        hist.stopped_epoch = epoch
        if current is None:
            best_snap = None
            hist.best_epoch = epoch
            continue
        if current < best:
            best, best_snap, hist.best_epoch, since_best = current, _snapshot(bundles), epoch, 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break
    if best_snap is not None:
        _restore(bundles, best_snap)
    return hist


def _fit_stage1(m: Stage1Model, ds: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> History:
    weights = losses.balancing_weights(ds.t).w
    opt = Adam(m.bundles(), lr=cfg.lr)
    lam_rec, lam_unb = cfg.lambda1, cfg.lambda2

    def step(idx):
        x, t, y, w = ds.x[idx], ds.t[idx], ds.y[idx], weights[idx]
        z, x_hat, y0, y1 = stage1_forward(m, x)
        l_f = losses.factual_loss(factual_prediction(y0, y1, t), y, w)
        l_rec = losses.reconstruction_loss(x_hat, x)
        treated = t == 1.0
        l_unb = losses.ipm_wasserstein(z[treated], z[~treated], cfg.sinkhorn_eps, cfg.sinkhorn_iters, cfg.ipm_debias)
        total = l_f + lam_rec * l_rec + lam_unb * l_unb
        total.backward()
        opt.step()
        return {"L_f": l_f.item(), "L_rec": l_rec.item(), "L_unb": l_unb.item(), "total": total.item()}

    val = (lambda: weighted_factual_mse(m, validation)) if validation is not None else None
    return _fit(m.bundles(), step, len(ds), cfg.epochs1, cfg, ["L_f", "L_rec", "L_unb", "total"], val, seed_tag=1)


def train_stage1(
    m: Stage1Model, obs: Dataset, cfg: TrainConfig | None = None, validation: Dataset | None = None
) -> tuple[Stage1Model, History]:
    """Minimize L_f + lambda1 * L_rec + lambda2 * L_unb on observational rows (in place)."""
    cfg = cfg or m.config
    if np.any(obs.g != 0):
        raise ContractError("stage-1 training takes observational rows only (g == 0)")
    return m, _fit_stage1(m, obs, cfg, validation)


def train_stage2(
    m: Stage2Model, rct: Dataset, cfg: TrainConfig | None = None, validation: Dataset | None = None
) -> tuple[Stage2Model, History]:
    """Minimize L_pred + lambda3 * L_MI + lambda4 * L_shift over (phi_u, g0, g1) on RCT rows (in place)."""
    cfg = cfg or m.config
    if np.any(rct.g != 1):
        raise ContractError("stage-2 training takes RCT rows only (g == 1)")
    weights = losses.balancing_weights(rct.t).w
    opt = Adam(m.trainable(), lr=cfg.lr)
    q_opt = Adam(m.q_net.bundles(), lr=cfg.q_lr)

    def step(idx):
        x, t, y, w = rct.x[idx], rct.t[idx], rct.y[idx], weights[idx]
        z, z_u, y0, y1 = stage2_forward(m, x)
        z_u_const = z_u.detach()
        for _ in range(cfg.q_inner_steps):
            losses.q_nll(z, z_u_const, m.q_net).backward()
            q_opt.step()
        l_pred = losses.factual_loss(factual_prediction(y0, y1, t), y, w)
        l_mi = losses.club_mi(z, z_u, m.q_net.constant())
        l_shift = losses.shift_loss(m.g0, m.g0_init, m.g1, m.g1_init)
        total = l_pred + cfg.lambda3 * l_mi + cfg.lambda4 * l_shift
        total.backward()
        opt.step()
        return {"L_pred": l_pred.item(), "L_MI": l_mi.item(), "L_shift": l_shift.item(), "total": total.item()}

    val = (lambda: weighted_factual_mse(m, validation)) if validation is not None else None
    hist = _fit(m.trainable(), step, len(rct), cfg.epochs2, cfg, ["L_pred", "L_MI", "L_shift", "total"], val, seed_tag=2)
    return m, hist


@dataclass
class TspfFit:
    stage1: Stage1Model
    stage2: Stage2Model
    history1: History
    history2: History


def fit_tspf(obs: Dataset, rct: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> TspfFit:
    """Run both stages end to end."""
    s1 = init_stage1(obs.d, cfg)
    s1, h1 = train_stage1(s1, obs, cfg, validation)
    s2 = init_stage2_from_stage1(s1, cfg)
    s2, h2 = train_stage2(s2, rct, cfg, validation)
    return TspfFit(s1, s2, h1, h2)


# -- checkpoints ---------------------------------------------------------------
def save_model(path: str | Path, model, extra: dict | None = None) -> Path:
    stage = {"Stage1Model": "stage1", "Stage2Model": "stage2"}.get(type(model).__name__, type(model).__name__)
    manifest = {"stage": stage, "config_hash": model.config.digest(), "config": model.config.to_dict()}
    if isinstance(model, Stage2Model):
        manifest["init_snapshot"] = ["g0_init", "g1_init"]
    manifest.update(extra or {})
    return save_checkpoint(path, model.modules(), manifest)


def load_model(path: str | Path):
    modules, manifest = load_checkpoint(path)
    cfg_dict = dict(manifest["config"])
    cfg = TrainConfig(**cfg_dict)
    if manifest["stage"] == "stage1":
        return Stage1Model(modules["phi"], modules["psi"], modules["h0"], modules["h1"], cfg)
    if manifest["stage"] == "stage2":
        q = losses.VariationalCond(modules["q_mean"], modules["q_logvar"])
        return Stage2Model(
            modules["phi"], modules["psi"], modules["phi_u"], modules["g0"], modules["g1"], q,
            modules["g0_init"], modules["g1_init"], cfg,
        )
    raise ContractError(f"unknown checkpoint stage {manifest['stage']!r}")
