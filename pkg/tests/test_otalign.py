import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from protfuse.errors import ContractViolation, ConvergenceFailure
from protfuse.otalign import (
    TransportPlan, barycentric_project, build_cost, concat_intrinsic, load_plan, save_plan,
    sinkhorn_solve,
)

from oracles import entropic_ot_semidual, naive_product


# ---- cost -------------------------------------------------------------------

def test_cost_zero_for_identical_columns():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(6, 3))
    c = build_cost(e, e)
    assert np.all(np.diag(c) == 0.0)


def test_cost_hand_value():
    c = build_cost(np.array([[0.0], [0.0]]), np.array([[3.0], [4.0]]))
    assert c[0, 0] == pytest.approx(np.sqrt(12.5), abs=1e-15)
    assert c[0, 0] == pytest.approx(3.5355339059327378, abs=1e-15)


def test_cost_shift_invariant():
    rng = np.random.default_rng(1)
    u, v = rng.normal(size=(7, 4)), rng.normal(size=(7, 5))
    np.testing.assert_allclose(build_cost(u + 3.5, v + 3.5), build_cost(u, v), atol=1e-12)


def test_cost_matches_definition_and_shape():
    rng = np.random.default_rng(2)
    u, v = rng.normal(size=(9, 4)), rng.normal(size=(9, 3))
    c = build_cost(u, v)
    assert c.shape == (4, 3)
    for i in range(4):
        for j in range(3):
            assert c[i, j] == pytest.approx(np.sqrt(np.mean((u[:, i] - v[:, j]) ** 2)), abs=1e-14)


def test_cost_row_mismatch():
    with pytest.raises(ContractViolation):
        build_cost(np.zeros((3, 2)), np.zeros((4, 2)))


# ---- sinkhorn ----------------------------------------------------------------

def test_zero_cost_gives_uniform_plan():
    plan = sinkhorn_solve(np.zeros((3, 5)), epsilon=0.1)
    np.testing.assert_allclose(plan.values, np.full((3, 5), 1 / 15), atol=1e-15)


def test_two_by_two_concentrates_on_diagonal():
    plan = sinkhorn_solve(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.05)
    # symmetric fixed point: off-diagonal = 1/2 * e^{-1/eps} / (1 + e^{-1/eps})
    q = np.exp(-1 / 0.05)
    expected_off = 0.5 * q / (1 + q)
    assert plan.values[0, 1] < 1e-4
    assert plan.values[0, 1] == pytest.approx(expected_off, rel=1e-9)
    assert plan.values[0, 0] == pytest.approx(0.5 - expected_off, rel=1e-12)


def test_two_by_three_matches_oracle():
    rng = np.random.default_rng(3)
    c = rng.random((2, 3))
    plan = sinkhorn_solve(c, epsilon=0.01)
    ref = entropic_ot_semidual(c / c.max(), 0.01)
    np.testing.assert_allclose(plan.values, ref, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 10), m=st.integers(1, 10), eps=st.sampled_from([0.02, 0.1, 1.0]),
       seed=st.integers(0, 2**31 - 1))
def test_marginals_and_oracle_property(n, m, eps, seed):
    c = np.random.default_rng(seed).random((n, m))
    plan = sinkhorn_solve(c, epsilon=eps)
    t = plan.values
    assert np.all(t >= 0)
    assert np.abs(t.sum(1) - 1 / n).sum() < 1e-6
    assert np.abs(t.sum(0) - 1 / m).sum() < 1e-6
    np.testing.assert_allclose(t, entropic_ot_semidual(c / c.max(), eps),
                               atol=1e-5)


def _sinkhorn_trace(c, eps, iters):
    n, m = c.shape
    cn = c / c.max()
    ker = -cn / eps
    f, g = np.zeros(n), np.zeros(m)
    duals = []
    for _ in range(iters):
        f = eps * (-np.log(n) - logsumexp(ker + g / eps, axis=1))
        g = eps * (-np.log(m) - logsumexp(ker + f[:, None] / eps, axis=0))
        plan = np.exp(ker + (f[:, None] + g) / eps)
        duals.append(f.mean() + g.mean() - eps * plan.sum())
    return np.array(duals)


def test_dual_objective_non_decreasing():
    # block-coordinate ascent on the entropic dual never decreases it
    rng = np.random.default_rng(4)
    for _ in range(20):
        c = rng.random(tuple(rng.integers(2, 12, size=2)))
        d = _sinkhorn_trace(c, 0.05, 200)
        assert np.all(np.diff(d) >= -1e-10)


def test_transport_cost_not_monotone_in_general():
    # documents why the solver does not assume <T, C> decreases per iteration
    c = np.random.default_rng(0).random((5, 7))
    n, m = c.shape
    cn = c / c.max()
    ker = -cn / 0.01
    f, g = np.zeros(n), np.zeros(m)
    costs = []
    for _ in range(300):
        f = 0.01 * (-np.log(n) - logsumexp(ker + g / 0.01, axis=1))
        g = 0.01 * (-np.log(m) - logsumexp(ker + f[:, None] / 0.01, axis=0))
        costs.append((np.exp(ker + (f[:, None] + g) / 0.01) * cn).sum())
    assert np.diff(costs[1:]).max() > 1e-10


def test_plan_tends_to_uniform_as_epsilon_grows():
    c = np.random.default_rng(5).random((6, 4))
    uniform = np.full((6, 4), 1 / 24)
    dists = [np.abs(sinkhorn_solve(c, epsilon=e).values - uniform).max()
             for e in (0.01, 0.1, 1.0, 10.0)]
    assert all(a > b for a, b in zip(dists, dists[1:]))


def test_constant_cost_row_handled():
    rng = np.random.default_rng(6)
    e_seq = rng.normal(size=(20, 4))
    e_struc = rng.normal(size=(20, 3))
    e_struc[:, 1] = 0.7
    plan = sinkhorn_solve(build_cost(e_struc, e_seq), epsilon=0.05)
    assert np.abs(plan.values.sum(1) - 1 / 3).sum() < 1e-6


def test_convergence_failure_carries_error():
    c = np.random.default_rng(7).random((8, 8))
    with pytest.raises(ConvergenceFailure) as info:
        sinkhorn_solve(c, epsilon=1e-3, max_iter=3)
    assert info.value.last_error > 0


def test_rejects_bad_epsilon():
    with pytest.raises(ContractViolation):
        sinkhorn_solve(np.ones((2, 2)), epsilon=0.0)


# ---- projection & concatenation ------------------------------------------------

def test_project_scaled_identity():
    rng = np.random.default_rng(8)
    e = rng.normal(size=(5, 4))
    np.testing.assert_allclose(barycentric_project(e, np.eye(4) / 4), e / 4, atol=1e-15)


def test_project_all_ones_raw():
    plan = sinkhorn_solve(np.random.default_rng(9).random((3, 5)), epsilon=0.1)
    out = barycentric_project(np.ones((4, 3)), plan)
    np.testing.assert_allclose(out, 1 / 5, atol=1e-6)
    # every column of a valid plan has mass 1/d_seq; raw output is that mass
    np.testing.assert_allclose(out, np.ones((4, 1)) @ plan.values.sum(0, keepdims=True), atol=1e-15)


def test_project_matches_triple_loop():
    rng = np.random.default_rng(10)
    e = rng.normal(size=(4, 3))
    t = rng.random((3, 3))
    np.testing.assert_allclose(barycentric_project(e, t), naive_product(e, t), atol=1e-12)


def test_project_normalized_multiplies_by_dseq():
    rng = np.random.default_rng(11)
    e = rng.normal(size=(6, 4))
    plan = sinkhorn_solve(rng.random((4, 3)), epsilon=0.1)
    np.testing.assert_allclose(barycentric_project(e, plan, normalize=True),
                               barycentric_project(e, plan) * 3, atol=1e-5)


def test_project_linearity():
    rng = np.random.default_rng(12)
    e1, e2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    t = rng.random((3, 4))
    lhs = barycentric_project(2.0 * e1 + 0.5 * e2, t)
    rhs = 2.0 * barycentric_project(e1, t) + 0.5 * barycentric_project(e2, t)
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_project_dimension_mismatch():
    with pytest.raises(ContractViolation):
        barycentric_project(np.zeros((2, 3)), np.zeros((4, 2)))


def test_concat_examples():
    h = concat_intrinsic(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
    np.testing.assert_array_equal(h, [[1, 2, 3, 4]])
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=(3, 2)), np.zeros((3, 2))
    h = concat_intrinsic(a, b)
    assert np.all(h[:, 2:] == 0)
    np.testing.assert_array_equal(h[:, :2], a)
    with pytest.raises(ContractViolation):
        concat_intrinsic(np.zeros((2, 2)), np.zeros((2, 3)))


def test_plan_persistence(tmp_path):
    plan = sinkhorn_solve(np.random.default_rng(14).random((3, 4)), epsilon=0.1)
    save_plan(tmp_path / "plan.mat", plan)
    meta = (tmp_path / "plan.mat.meta").read_text()
    assert "epsilon=0.1" in meta and "iterations=" in meta and "marginal_error=" in meta
    back = load_plan(tmp_path / "plan.mat")
    assert isinstance(back, TransportPlan)
    np.testing.assert_array_equal(back.values, plan.values)
    assert back.iterations == plan.iterations


def test_default_epsilon_converges_on_random_square_costs():
    rng = np.random.default_rng(15)
    for _ in range(5):
        c = rng.random((16, 16))
        plan = sinkhorn_solve(c)
        assert plan.marginal_error < 1e-6


def test_newton_polish_keeps_fixed_point():
    c = np.random.default_rng(16).random((6, 9))
    slow = sinkhorn_solve(c, epsilon=0.05, newton_after=None)
    fast = sinkhorn_solve(c, epsilon=0.05, newton_after=5)
    np.testing.assert_allclose(fast.values, slow.values, atol=1e-6)
    assert fast.iterations <= slow.iterations
