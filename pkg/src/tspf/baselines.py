"""One-stage comparators trained on pooled OBS + RCT rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tspf import losses
from tspf.autodiff import Adam, MlpParams, init_mlp, mlp_forward, no_grad
from tspf.data import Dataset
from tspf.errors import ContractError
from tspf.model import History, Stage1Model, TrainConfig, _fit, _fit_stage1, init_stage1

KINDS = ("t_learner", "s_learner", "stage1_only")


@dataclass
class BaselineModel:
    kind: str
    nets: list[MlpParams]
    config: TrainConfig
    stage1: Stage1Model | None = None
    history: History | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown baseline kind {self.kind!r}")
        if self.kind == "t_learner" and len(self.nets) != 2:
            raise ContractError("a T-learner holds exactly two nets")
        if self.kind == "s_learner" and len(self.nets) != 1:
            raise ContractError("an S-learner holds exactly one net")

    def potential_outcomes(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "stage1_only":
            return self.stage1.potential_outcomes(x)
        with no_grad():
            if self.kind == "t_learner":
                y0 = mlp_forward(self.nets[0], x).data.reshape(-1)
                y1 = mlp_forward(self.nets[1], x).data.reshape(-1)
            else:
                ones = np.ones((x.shape[0], 1))
                y0 = mlp_forward(self.nets[0], np.hstack([x, 0 * ones])).data.reshape(-1)
                y1 = mlp_forward(self.nets[0], np.hstack([x, ones])).data.reshape(-1)
        return y0, y1

    def predict_cate(self, x) -> np.ndarray:
        y0, y1 = self.potential_outcomes(x)
        return y1 - y0

    def modules(self) -> dict[str, MlpParams]:
        if self.kind == "stage1_only":
            return self.stage1.modules()
        if self.kind == "t_learner":
            return {"net0": self.nets[0], "net1": self.nets[1]}
        return {"net": self.nets[0]}


def _check_arms(pool: Dataset) -> None:
    if len(pool) == 0 or not np.any(pool.t == 1.0) or not np.any(pool.t == 0.0):
        raise ContractError("pooled data must contain both treated and control rows")


def _val_mse(model: BaselineModel, validation: Dataset | None):
    if validation is None:
        return None

    def score() -> float:
        y0, y1 = model.potential_outcomes(validation.x)
        pred = np.where(validation.t == 1.0, y1, y0)
        return float(np.mean((pred - validation.y) ** 2))

    return score


def _fit_regressor(net: MlpParams, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, val, seed_tag: int) -> History:
    opt = Adam([net], lr=cfg.lr)
    ones = np.ones(len(y))

    def step(idx):
        loss = losses.factual_loss(mlp_forward(net, x[idx]), y[idx], ones[idx])
        loss.backward()
        opt.step()
        return {"total": loss.item()}

    return _fit([net], step, len(y), cfg.epochs1, cfg, ["total"], val, seed_tag)


def _arm_val_mse(net: MlpParams, validation: Dataset | None, arm: int):
    if validation is None:
        return None
    rows = validation.t == arm
    if not rows.any():
        return None

    def score() -> float:
        with no_grad():
            pred = mlp_forward(net, validation.x[rows]).data.reshape(-1)
        return float(np.mean((pred - validation.y[rows]) ** 2))

    return score


def train_t_learner(pool: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> BaselineModel:
    """Separate MSE regressors fit on the control rows and on the treated rows."""
    _check_arms(pool)
    rng = np.random.default_rng([cfg.seed, 11])
    nets = [init_mlp([pool.d, cfg.hidden, 1], rng, cfg.activation, name=f"net{arm}") for arm in (0, 1)]
    hist = None
    for arm, net in enumerate(nets):
        rows = pool.t == arm
        hist = _fit_regressor(net, pool.x[rows], pool.y[rows], cfg, _arm_val_mse(net, validation, arm), 11 + arm)
    return BaselineModel("t_learner", nets, cfg, history=hist)


def train_s_learner(pool: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> BaselineModel:
    """One MSE regressor on covariates with the treatment indicator appended."""
    _check_arms(pool)
    rng = np.random.default_rng([cfg.seed, 12])
    net = init_mlp([pool.d + 1, cfg.hidden, 1], rng, cfg.activation, name="net")
    model = BaselineModel("s_learner", [net], cfg)
    xt = np.hstack([pool.x, pool.t[:, None]])
    model.history = _fit_regressor(net, xt, pool.y, cfg, _val_mse(model, validation), 13)
    return model


def stage1_only(obs_plus_rct: Dataset, cfg: TrainConfig, validation: Dataset | None = None) -> BaselineModel:
    """Stage-1 training on the pooled rows; its heads give the effect estimate."""
    _check_arms(obs_plus_rct)
    s1 = init_stage1(obs_plus_rct.d, cfg)
    hist = _fit_stage1(s1, obs_plus_rct, cfg, validation)
    return BaselineModel("stage1_only", [s1.h0, s1.h1], cfg, stage1=s1, history=hist)


TRAINERS = {"t_learner": train_t_learner, "s_learner": train_s_learner, "stage1_only": stage1_only}
