"""Loss terms for both training stages.

All functions take and return :class:`~tspf.autodiff.Tensor` objects so they
compose into a single differentiable objective. Plain numpy arrays are
accepted wherever an input is treated as a constant (targets, weights).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from tspf.autodiff import tensor as td
from tspf.autodiff.nn import MlpParams, init_mlp, mlp_forward
from tspf.autodiff.tensor import Tensor
from tspf.errors import ContractError, NumericError, ShapeError

log = logging.getLogger(__name__)

U_CLAMP = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


# -- balancing weights ---------------------------------------------------------
@dataclass
class BalancingWeights:
    u: float
    w: np.ndarray
    clamped: bool = False


def balancing_weights(t) -> BalancingWeights:
    """w_i = t_i / (2u) + (1 - t_i) / (2(1 - u)), u the treated fraction clamped to [1e-3, 1 - 1e-3]."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise ContractError("balancing_weights needs at least one treatment value")
    raw = float(t.mean())
    u = min(max(raw, U_CLAMP), 1.0 - U_CLAMP)
    w = t / (2.0 * u) + (1.0 - t) / (2.0 * (1.0 - u))
    return BalancingWeights(u=u, w=w, clamped=u != raw)


# -- supervised terms ----------------------------------------------------------
def factual_loss(pred, y, w) -> Tensor:
    """(1/n) * sum_i w_i * (y_i - pred_i)^2."""
    pred = td.as_tensor(pred)
    y = td.as_tensor(y)
    w = td.as_tensor(w)
    pred_flat = pred.reshape(-1) if pred.ndim > 1 else pred
    if not (pred_flat.shape == y.shape == w.shape):
        raise ContractError(f"factual_loss length mismatch: pred {pred.shape}, y {y.shape}, w {w.shape}")
    resid = pred_flat - y
    return (w * resid * resid).mean()


def reconstruction_loss(x_hat, x) -> Tensor:
    """(1/n) * sum_i ||x_hat_i - x_i||^2."""
    x_hat = td.as_tensor(x_hat)
    x = td.as_tensor(x)
    if x_hat.shape != x.shape or x.ndim != 2:
        raise ShapeError(f"reconstruction_loss shapes differ: {x_hat.shape} vs {x.shape}")
    diff = x_hat - x
    return (diff * diff).sum() * (1.0 / x.shape[0])


def shift_loss(theta_g0: MlpParams, theta_g0_init: MlpParams, theta_g1: MlpParams, theta_g1_init: MlpParams) -> Tensor:
    """Squared l2 distance of both heads from their initial values."""
    total = td.as_tensor(0.0)
    for cur, ref in ((theta_g0, theta_g0_init), (theta_g1, theta_g1_init)):
        if len(cur.tensors()) != len(ref.tensors()):
            raise ShapeError("shift_loss: heads have different depths")
        for p, p0 in zip(cur.tensors(), ref.tensors()):
            if p.shape != p0.shape:
                raise ShapeError(f"shift_loss: parameter shape {p.shape} vs initial {p0.shape}")
            diff = p - p0.data
            total = total + (diff * diff).sum()
    return total


# -- optimal transport ---------------------------------------------------------
def sinkhorn_plan(cost: Tensor, eps: float = 0.1, iters: int = 50) -> Tensor:
    """Entropic transport plan between uniform marginals, unrolled in log space.

    Uses the symmetric (averaged) dual update so that transposing the cost
    matrix transposes the plan: the resulting distance is symmetric in its
    arguments by construction.
    """
    n, m = cost.shape
    log_a = -math.log(n)
    log_b = -math.log(m)
    scaled = cost * (-1.0 / eps)
    f = td.as_tensor(np.zeros((n, 1)))
    g = td.as_tensor(np.zeros((1, m)))
    for _ in range(iters):
        f_new = td.logsumexp(scaled + g * (1.0 / eps) + log_b, axis=1).reshape(n, 1) * (-eps)
        g_new = td.logsumexp(scaled + f * (1.0 / eps) + log_a, axis=0).reshape(1, m) * (-eps)
        f = (f + f_new) * 0.5
        g = (g + g_new) * 0.5
    return td.exp(scaled + (f + g) * (1.0 / eps) + (log_a + log_b))


def _lse(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """log-sum-exp along ``axis`` (kept) and the matching softmax weights."""
    peak = a.max(axis=axis, keepdims=True)
    e = np.exp(a - peak)
    total = e.sum(axis=axis, keepdims=True)
    return np.log(total) + peak, e / total


def sinkhorn_cost(cost: Tensor, eps: float = 0.1, iters: int = 50) -> Tensor:
    """<P, C> for the plan of :func:`sinkhorn_plan`, as one fused graph node.

    Runs the same averaged dual iterations as ``sinkhorn_plan`` in plain numpy,
    caching each step's softmax weights; the backward pass replays the steps in
    reverse, so the gradient is exact for the unrolled computation.
    """
    cost = td.as_tensor(cost)
    c = cost.data
    n, m = c.shape
    la, lb = -math.log(n), -math.log(m)
    s = -c / eps
    f = np.zeros((n, 1))
    g = np.zeros((1, m))
    history = []
    for _ in range(iters):
        lse_f, soft_rows = _lse(s + g / eps + lb, axis=1)
        lse_g, soft_cols = _lse(s + f / eps + la, axis=0)
        history.append((soft_rows, soft_cols))
        f = 0.5 * (f - eps * lse_f)
        g = 0.5 * (g - eps * lse_g)
    plan = np.exp(s + (f + g) / eps + la + lb)
    value = float((plan * c).sum())

    def backward(gout):
        gout = float(gout)
        pc = plan * c
        g_cost = gout * (plan - pc / eps)
        gf = gout * pc.sum(axis=1, keepdims=True) / eps
        gg = gout * pc.sum(axis=0, keepdims=True) / eps
        gs = np.zeros_like(c)
        for soft_rows, soft_cols in reversed(history):
            half_f = 0.5 * gf
            half_g = 0.5 * gg
            gs -= eps * (half_f * soft_rows + half_g * soft_cols)
            gf, gg = half_f - (soft_cols * half_g).sum(axis=1, keepdims=True), half_g - (soft_rows * half_f).sum(axis=0, keepdims=True)
        return (g_cost - gs / eps,)

    return td._result(np.asarray(value), (cost,), backward)


def _transport_cost(a: Tensor, b: Tensor, eps: float, iters: int) -> Tensor:
    cost = td.pairwise_distance(a, b)
    if not np.isfinite(cost.data).all():
        raise NumericError("non-finite entries in the transport cost matrix")
    return sinkhorn_cost(cost, eps, iters)


def ipm_wasserstein(z_treated, z_control, eps: float = 0.1, iters: int = 50, debias: bool = True) -> Tensor:
    """Sinkhorn estimate of the Wasserstein-1 distance between two point clouds.

    The base quantity is the transport cost <P, C> for the entropic plan P and
    Euclidean cost C. With ``debias`` the self-transport costs are removed,
    OT(a, b) - OT(a, a) / 2 - OT(b, b) / 2, so identical clouds score exactly 0
    instead of the entropic blur between nearby points. An empty group yields 0
    with a warning.
    """
    z_treated = td.as_tensor(z_treated)
    z_control = td.as_tensor(z_control)
    if z_treated.shape[0] == 0 or z_control.shape[0] == 0:
        log.warning("batch holds a single treatment arm; balancing term set to 0")
        return td.as_tensor(0.0)
    cross = _transport_cost(z_treated, z_control, eps, iters)
    if not debias:
        return cross
    self_t = _transport_cost(z_treated, z_treated, eps, iters)
    self_c = _transport_cost(z_control, z_control, eps, iters)
    return cross - (self_t + self_c) * 0.5


# -- mutual information --------------------------------------------------------
@dataclass
class VariationalCond:
    """Diagonal Gaussian q(z_u | z) with learned mean and log-variance."""

    mean_net: MlpParams
    logvar_net: MlpParams

    def bundles(self) -> list[MlpParams]:
        return [self.mean_net, self.logvar_net]

    def constant(self) -> VariationalCond:
        return VariationalCond(self.mean_net.constant(), self.logvar_net.constant())

    def copy(self) -> VariationalCond:
        return VariationalCond(self.mean_net.copy(), self.logvar_net.copy())


def init_variational(r: int, r_u: int, hidden: int, rng: np.random.Generator, activation: str = "relu") -> VariationalCond:
    mean_net = init_mlp([r, hidden, r_u], rng, activation, name="q_mean")
    logvar_net = init_mlp([r, hidden, r_u], rng, activation, name="q_logvar")
    return VariationalCond(mean_net, logvar_net)


def _gaussian_params(z: Tensor, q_net: VariationalCond) -> tuple[Tensor, Tensor]:
    return mlp_forward(q_net.mean_net, z), mlp_forward(q_net.logvar_net, z)


def _check_rows(z: Tensor, z_u: Tensor) -> None:
    if z.ndim != 2 or z_u.ndim != 2 or z.shape[0] != z_u.shape[0]:
        raise ContractError(f"row mismatch between z {z.shape} and z_u {z_u.shape}")
    if z.shape[0] == 0:
        raise ContractError("mutual information needs at least one row")


def log_density_matrix(z, z_u, q_net: VariationalCond) -> Tensor:
    """Entry (i, j) is log q(z_u_j | z_i)."""
    z, z_u = td.as_tensor(z), td.as_tensor(z_u)
    _check_rows(z, z_u)
    mu, logvar = _gaussian_params(z, q_net)
    m, q = z_u.shape
    mu3 = mu.reshape(m, 1, q)
    logvar3 = logvar.reshape(m, 1, q)
    diff = z_u.reshape(1, m, q) - mu3
    per_dim = (logvar3 * -0.5) - diff * diff * 0.5 / td.exp(logvar3) - 0.5 * LOG_2PI
    return per_dim.sum(axis=2)


def log_density(z, z_u, q_net: VariationalCond) -> Tensor:
    """Row-aligned log q(z_u_i | z_i), one value per row."""
    z, z_u = td.as_tensor(z), td.as_tensor(z_u)
    _check_rows(z, z_u)
    mu, logvar = _gaussian_params(z, q_net)
    diff = z_u - mu
    per_dim = (logvar * -0.5) - diff * diff * 0.5 / td.exp(logvar) - 0.5 * LOG_2PI
    return per_dim.sum(axis=1)


def club_from_log_density(matrix: Tensor, form: str = "collapsed") -> Tensor:
    """CLUB estimate from the (i, j) = log q(z_u_j | z_i) matrix.

    ``collapsed`` averages positive-minus-mean-negative per row;
    ``double_sum`` averages every pairwise difference. Both are the same
    quantity and are kept separately so each can check the other.
    """
    matrix = td.as_tensor(matrix)
    m = matrix.shape[0]
    if matrix.shape != (m, m):
        raise ShapeError(f"log-density matrix must be square, got {matrix.shape}")
    idx = np.arange(m)
    positive = matrix[idx, idx]
    if form == "collapsed":
        return (positive - matrix.mean(axis=1)).mean()
    if form == "double_sum":
        pairs = positive.reshape(m, 1) - matrix
        return pairs.sum() * (1.0 / (m * m))
    raise ContractError(f"unknown CLUB form {form!r}")


def club_mi(z, z_u, q_net: VariationalCond, form: str = "collapsed") -> Tensor:
    return club_from_log_density(log_density_matrix(z, z_u, q_net), form)


def q_nll(z, z_u, q_net: VariationalCond) -> Tensor:
    """Negative mean log-likelihood of z_u under q(. | z); the training signal for q."""
    return -log_density(z, z_u, q_net).mean()
