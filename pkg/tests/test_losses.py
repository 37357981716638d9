import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from conftest import assert_grad_matches
from tspf import losses
from tspf.autodiff import Adam, MlpParams, Tensor, init_mlp, no_grad
from tspf.autodiff import tensor as td
from tspf.errors import ContractError, ShapeError


# -- balancing weights ---------------------------------------------------------
def test_weights_symmetric_pair():
    bw = losses.balancing_weights([1, 0])
    assert bw.u == 0.5
    np.testing.assert_array_equal(bw.w, [1.0, 1.0])


def test_weights_three_to_one():
    bw = losses.balancing_weights([1, 1, 1, 0])
    assert bw.u == 0.75
    np.testing.assert_allclose(bw.w, [2 / 3, 2 / 3, 2 / 3, 2.0], rtol=0, atol=1e-15)
    assert abs(bw.w.mean() - 1.0) <= 1e-12


def test_weights_clamped_when_single_arm():
    bw = losses.balancing_weights([1, 1])
    assert bw.clamped and bw.u == pytest.approx(0.999)
    np.testing.assert_allclose(bw.w, 1 / 1.998)


def test_weights_empty_rejected():
    with pytest.raises(ContractError):
        losses.balancing_weights([])


@pytest.mark.parametrize("seed", range(20))
def test_weights_have_unit_mean(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 500))
    t = (rng.uniform(size=n) < rng.uniform(0.05, 0.95)).astype(float)
    t[0], t[1] = 0.0, 1.0
    bw = losses.balancing_weights(t)
    assert not bw.clamped
    assert abs(bw.w.mean() - 1.0) <= 1e-12


# -- factual / reconstruction / shift ------------------------------------------
def test_factual_examples():
    assert losses.factual_loss([1.0, 2.0], [1.0, 2.0], [1.0, 1.0]).item() == 0.0
    assert losses.factual_loss([1.0, 3.0], [1.0, 2.0], [1.0, 1.0]).item() == 0.5
    assert losses.factual_loss([0.0], [2.0], [2.0]).item() == 8.0


def test_factual_accepts_column_predictions():
    assert losses.factual_loss(np.array([[1.0], [3.0]]), [1.0, 2.0], [1.0, 1.0]).item() == 0.5


def test_factual_length_mismatch():
    with pytest.raises(ContractError):
        losses.factual_loss([1.0, 2.0], [1.0], [1.0])


def test_reconstruction_examples():
    assert losses.reconstruction_loss([[1.0, 1.0]], [[1.0, 1.0]]).item() == 0.0
    assert losses.reconstruction_loss([[0.0, 0.0]], [[1.0, 1.0]]).item() == 2.0
    assert losses.reconstruction_loss(np.zeros((2, 2)), np.eye(2)).item() == 1.0


def test_reconstruction_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.reconstruction_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def _heads(seed=0):
    rng = np.random.default_rng(seed)
    return init_mlp([3, 4, 1], rng), init_mlp([3, 4, 1], rng)


def test_shift_zero_at_init():
    g0, g1 = _heads()
    assert losses.shift_loss(g0, g0.copy(), g1, g1.copy()).item() == 0.0


@pytest.mark.parametrize("layer,slot", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_shift_eight_wherever_perturbation_sits(layer, slot):
    g0, g1 = _heads()
    g0_init, g1_init = g0.copy(), g1.copy()
    g0.layers[layer][slot].data.flat[0] += 2.0
    g1.layers[1 - layer][slot].data.flat[-1] -= 2.0
    assert losses.shift_loss(g0, g0_init, g1, g1_init).item() == pytest.approx(8.0, abs=1e-12)


def test_shift_shape_mismatch():
    g0, g1 = _heads()
    other = init_mlp([3, 5, 1], np.random.default_rng(1))
    with pytest.raises(ShapeError):
        losses.shift_loss(g0, other, g1, g1.copy())


# -- Sinkhorn ------------------------------------------------------------------
def test_ipm_identical_points_near_zero(rng):
    a = rng.normal(size=(12, 3))
    assert 0.0 <= losses.ipm_wasserstein(a, a.copy()).item() <= 1e-6


def test_raw_transport_cost_blurs_identical_points(rng):
    # Without debiasing, entropic mass leaks between nearby points.
    a = rng.normal(size=(12, 3))
    assert losses.ipm_wasserstein(a, a.copy(), debias=False).item() > 1e-6


def test_ipm_singletons():
    assert losses.ipm_wasserstein([[0.0]], [[1.0]]).item() == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("seed", range(5))
def test_ipm_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(7, 4)), rng.normal(1.0, 1.0, size=(11, 4))
    ab = losses.ipm_wasserstein(a, b).item()
    ba = losses.ipm_wasserstein(b, a).item()
    assert ab >= 0.0
    assert abs(ab - ba) <= 1e-8


def test_ipm_two_point_masses_close_to_exact():
    a, b = np.array([[0.0], [2.0]]), np.array([[1.0], [3.0]])
    # Sorted matching pairs 0-1 and 2-3, exact W1 = 1.
    assert losses.ipm_wasserstein(a, b).item() == pytest.approx(1.0, rel=0.05)


def test_ipm_monotone_in_separation():
    grid = np.linspace(0.0, 3.0, 13)
    vals = [losses.ipm_wasserstein([[0.0], [0.5]], [[s], [s + 0.5]]).item() for s in grid]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_ipm_matches_assignment_oracle(rng):
    a, b = rng.normal(size=(16, 2)), rng.normal(2.0, 1.0, size=(16, 2))
    cost = np.linalg.norm(a[:, None] - b[None], axis=2)
    r, c = linear_sum_assignment(cost)
    exact = cost[r, c].mean()
    assert losses.ipm_wasserstein(a, b).item() == pytest.approx(exact, rel=0.05)
    assert losses.ipm_wasserstein(a, b, debias=False).item() == pytest.approx(exact, rel=0.05)


def test_ipm_empty_arm_returns_zero(caplog):
    out = losses.ipm_wasserstein(np.zeros((0, 2)), np.ones((3, 2)))
    assert out.item() == 0.0
    assert "single treatment arm" in caplog.text


def test_fused_sinkhorn_matches_unrolled(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    za = Tensor(a, requires_grad=True)
    zb = Tensor(b, requires_grad=True)
    fused = losses.ipm_wasserstein(za, zb, debias=False)
    fused.backward()
    g_fused = za.grad.copy()
    za.grad = None
    cost = td.pairwise_distance(za, zb)
    unrolled = (losses.sinkhorn_plan(cost) * cost).sum()
    unrolled.backward()
    assert abs(fused.item() - unrolled.item()) <= 1e-12
    np.testing.assert_allclose(za.grad, g_fused, atol=1e-12)


def test_ipm_gradient(leaf):
    a, b = leaf(5, 3), leaf(4, 3)
    b.data += 1.0
    assert_grad_matches(lambda: losses.ipm_wasserstein(a, b), [a, b])
    assert_grad_matches(lambda: losses.ipm_wasserstein(a, b, debias=False), [a, b])


# -- CLUB ----------------------------------------------------------------------
def test_club_two_by_two_example():
    mat = np.array([[-1.0, -2.0], [-3.0, -1.5]])
    for form in ("collapsed", "double_sum"):
        assert losses.club_from_log_density(mat, form).item() == pytest.approx(0.625, abs=1e-15)


def _qnet(p, q, hidden=6, seed=0, activation="tanh"):
    return losses.init_variational(p, q, hidden, np.random.default_rng(seed), activation)


def test_club_single_row_is_zero(rng):
    q = _qnet(3, 2)
    assert losses.club_mi(rng.normal(size=(1, 3)), rng.normal(size=(1, 2)), q).item() == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_club_forms_agree(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 17))
    q = _qnet(3, 2, seed=seed)
    z, zu = rng.normal(size=(m, 3)), rng.normal(size=(m, 2))
    a = losses.club_mi(z, zu, q, "collapsed").item()
    b = losses.club_mi(z, zu, q, "double_sum").item()
    assert abs(a - b) <= 1e-10


def test_club_row_mismatch():
    with pytest.raises(ContractError):
        losses.club_mi(np.zeros((3, 2)), np.zeros((4, 1)), _qnet(2, 1))


def test_club_unknown_form():
    with pytest.raises(ContractError):
        losses.club_from_log_density(np.zeros((2, 2)), "triple")


def test_log_density_matrix_diagonal_matches_aligned(rng):
    q = _qnet(3, 2)
    z, zu = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    mat = losses.log_density_matrix(z, zu, q).data
    np.testing.assert_allclose(np.diag(mat), losses.log_density(z, zu, q).data, atol=1e-14)


def _exact_q(p, q):
    """q whose mean is the identity on the first q coords and log-variance 0."""
    w = np.zeros((q, p))
    w[:, :q] = np.eye(q)
    mean = MlpParams([(Tensor(w), Tensor(np.zeros(q)))], activation="identity")
    logvar = MlpParams([(Tensor(np.zeros((q, p))), Tensor(np.zeros(q)))], activation="identity")
    return losses.VariationalCond(mean, logvar)


def test_q_nll_at_mean():
    z = np.random.default_rng(0).normal(size=(6, 3))
    val = losses.q_nll(z, z[:, :2], _exact_q(3, 2)).item()
    assert val == pytest.approx(0.5 * math.log(2 * math.pi) * 2, abs=1e-14)
    assert 0.5 * math.log(2 * math.pi) == pytest.approx(0.9189, abs=1e-4)


def test_q_nll_increases_with_distance():
    z = np.zeros((4, 2))
    q = _exact_q(2, 1)
    vals = [losses.q_nll(z, np.full((4, 1), d), q).item() for d in (0.0, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_q_nll_gradient(rng):
    q = _qnet(3, 2, hidden=5)
    z = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    zu = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    params = q.mean_net.tensors() + q.logvar_net.tensors()
    assert_grad_matches(lambda: losses.q_nll(z, zu, q), params + [z, zu])


def test_club_gradient(rng):
    q = _qnet(3, 2, hidden=5)
    z = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    zu = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    params = q.mean_net.tensors() + q.logvar_net.tensors()
    assert_grad_matches(lambda: losses.club_mi(z, zu, q), params + [z, zu])


def test_club_upper_bounds_gaussian_mi():
    rho, m = 0.8, 4096
    rng = np.random.default_rng(5)
    z = rng.normal(size=(m, 1))
    zu = rho * z + math.sqrt(1 - rho**2) * rng.normal(size=(m, 1))
    analytic = -0.5 * math.log(1 - rho**2)
    q = losses.init_variational(1, 1, 16, np.random.default_rng(6), "tanh")
    opt = Adam(q.bundles(), lr=1e-2)
    for epoch in range(40):
        for idx in np.array_split(rng.permutation(m), 16):
            losses.q_nll(z[idx], zu[idx], q).backward()
            opt.step()
    with no_grad():
        est = losses.club_mi(z, zu, q).item()
    assert est >= 0.9 * analytic
