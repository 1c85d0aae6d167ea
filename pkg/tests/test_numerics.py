import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protfuse.errors import ContractViolation, NumericFault
from protfuse.numerics import (
    LrSchedule, OptimState, Var, ad, adamw_update, finite_diff_check, grad_eval,
    load_matrix, load_params, onecycle_rate, param, save_matrix, save_params,
)


def test_identity_gradient():
    value, grads = grad_eval(lambda p: ad.sum(p["x"]), {"x": np.array([[3.0]])})
    assert value == 3.0
    assert grads["x"][0, 0] == 1.0


def test_softmax_cross_entropy_gradient_closed_form():
    x = np.array([[0.3, -1.2, 2.0, 0.1]])
    target = np.array([2])
    _, grads = grad_eval(lambda p: ad.softmax_cross_entropy(p["x"], target), {"x": x})
    sm = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
    onehot = np.eye(4)[2]
    np.testing.assert_allclose(grads["x"][0], sm[0] - onehot, atol=1e-15)


def test_composed_softmax_then_ce_matches_fused():
    x = np.array([[0.5, 0.1, -0.4, 1.5]])
    onehot = np.eye(4)[[1]]

    def composed(p):
        return ad.neg(ad.sum(ad.mul(ad.log(ad.softmax(p["x"])), onehot)))

    v1, g1 = grad_eval(composed, {"x": x})
    v2, g2 = grad_eval(lambda p: ad.softmax_cross_entropy(p["x"], [1]), {"x": x})
    assert v1 == pytest.approx(v2, abs=1e-14)
    np.testing.assert_allclose(g1["x"], g2["x"], atol=1e-14)


def _mlp_params(rng, d_in=5, hidden=7, d_out=3):
    return {
        "w1": rng.normal(size=(d_in, hidden)) / np.sqrt(d_in),
        "b1": rng.normal(size=(1, hidden)) * 0.1,
        "w2": rng.normal(size=(hidden, d_out)) / np.sqrt(hidden),
        "b2": rng.normal(size=(1, d_out)) * 0.1,
    }


def test_two_layer_mlp_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 5))
    target = rng.integers(0, 3, size=5)

    def loss(p):
        h = ad.tanh(x @ p["w1"] + p["b1"])
        return ad.softmax_cross_entropy(h @ p["w2"] + p["b2"], target)

    assert finite_diff_check(loss, _mlp_params(rng), step=1e-5) < 1e-4


def test_affine_is_exact_under_finite_differences():
    # dyadic data and power-of-two steps keep every float operation exact
    rng = np.random.default_rng(1)
    x = rng.integers(-4, 5, size=(4, 3)).astype(float)
    c = rng.integers(-4, 5, size=(4, 2)).astype(float)
    params = {"w": rng.integers(-16, 17, size=(3, 2)) / 8.0, "b": rng.integers(-16, 17, size=(1, 2)) / 8.0}
    for k in range(10, 24):
        step = 2.0 ** -k
        err = finite_diff_check(lambda p: ad.sum((x @ p["w"] + p["b"]) * c), params, step=step)
        assert err < 1e-9


def test_affine_decimal_step():
    rng = np.random.default_rng(2)
    x, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 2))}
    assert finite_diff_check(lambda p: ad.sum((x @ p["w"] + p["b"]) * c), params, step=1e-5) < 1e-9


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractViolation):
        grad_eval(lambda p: p["x"] * 2.0, {"x": np.ones((2, 2))})


def test_nan_reports_operation():
    with pytest.raises(NumericFault, match="log"):
        grad_eval(lambda p: ad.sum(ad.log(p["x"])), {"x": np.array([[-1.0]])})


def test_finite_diff_step_range():
    with pytest.raises(ContractViolation):
        finite_diff_check(lambda p: ad.sum(p["x"]), {"x": np.ones((1, 1))}, step=1e-2)


def test_inference_without_tape_records_nothing():
    x = param(np.ones((2, 2)))
    y = ad.sum(x * 3.0)
    assert type(y) is Var and float(y.value) == 12.0


def test_backward_accumulates_reused_inputs():
    _, grads = grad_eval(lambda p: ad.sum(p["x"] * p["x"]), {"x": np.array([[2.0, -3.0]])})
    np.testing.assert_allclose(grads["x"], [[4.0, -6.0]])


# ---- property: every primitive matches central differences ------------------

shapes = st.tuples(st.integers(1, 8), st.integers(1, 8))

PRIMITIVES = {
    "add_broadcast": lambda p, w: ad.sum((p["a"] + p["row"]) * w),
    "sub": lambda p, w: ad.sum((p["a"] - p["b"]) * w),
    "mul": lambda p, w: ad.sum(p["a"] * p["b"] * w),
    "div": lambda p, w: ad.sum(p["a"] / (ad.exp(p["b"]) + 1.0) * w),
    "matmul": lambda p, w: ad.sum((p["a"] @ ad.transpose(p["b"], (1, 0))) * (w @ w.T)),
    "einsum": lambda p, w: ad.sum(ad.einsum("ij,kj->ik", p["a"], p["b"]) * (w @ w.T)),
    "einsum_local_sum": lambda p, w: ad.sum(ad.einsum("ij,ij->i", p["a"], p["b"]) * w[:, 0]),
    "sorted_sum": lambda p, w: ad.sum(ad.sorted_sum(p["a"] * w, axis=0, keepdims=True) * p["row"]),
    "mean": lambda p, w: ad.mean(p["a"] * w, axis=0, keepdims=True) @ ad.transpose(p["row"], (1, 0)),
    "exp": lambda p, w: ad.sum(ad.exp(p["a"] * 0.5) * w),
    "log": lambda p, w: ad.sum(ad.log(ad.exp(p["a"]) + 1.0) * w),
    "tanh": lambda p, w: ad.sum(ad.tanh(p["a"]) * w),
    "sigmoid": lambda p, w: ad.sum(ad.sigmoid(p["a"] * 3.0) * w),
    "softmax": lambda p, w: ad.sum(ad.softmax(p["a"], axis=-1) * w),
    "log_softmax": lambda p, w: ad.sum(ad.log_softmax(p["a"], axis=0) * w),
    "layer_norm": lambda p, w: ad.sum(ad.layer_norm(p["a"], p["row"], p["row"] * 0.5) * w),
    "reshape": lambda p, w: ad.sum(ad.reshape(p["a"], (-1,)) * w.reshape(-1)),
    "concat": lambda p, w: ad.sum(ad.concat([p["a"], p["b"]], axis=0) * np.vstack([w, w * 2])),
    "take": lambda p, w: ad.sum(ad.take(p["a"], [0, 0, p["a"].shape[0] - 1], axis=0) * w[:1].sum()),
    "bce": lambda p, w: ad.binary_cross_entropy(ad.sigmoid(p["a"]), (w > 0).astype(float)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=8, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_finite_differences(name, shape, seed):
    rng = np.random.default_rng(seed)
    n, m = shape
    params = {
        "a": rng.normal(size=(n, m)),
        "b": rng.normal(size=(n, m)),
        "row": rng.normal(size=(1, m)) + 2.0,
    }
    w = rng.normal(size=(n, m))
    fn = PRIMITIVES[name]
    used = {k: v for k, v in params.items() if k in _used_keys(fn, params, w)}
    assert finite_diff_check(lambda p: fn({**params, **p}, w), used, step=1e-5) < 1e-4


def _used_keys(fn, params, w):
    _, grads = grad_eval(lambda p: fn(p, w), params)
    return [k for k, g in grads.items() if np.any(g != 0)]


# ---- optimizer ---------------------------------------------------------------

def test_adamw_zero_gradient_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    state = OptimState(lr=0.1)
    adamw_update(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adamw_first_step_hand_value():
    p = {"w": np.array([0.5])}
    state = OptimState(lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    adamw_update(p, {"w": np.array([1.0])}, state)
    # m_hat = v_hat = 1  ->  delta = -0.1 / (1 + 1e-8)
    assert p["w"][0] - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_decay_is_decoupled():
    g = {"w": np.array([0.3])}
    plain, decayed = {"w": np.array([2.0])}, {"w": np.array([2.0])}
    adamw_update(plain, g, OptimState(lr=0.01))
    adamw_update(decayed, g, OptimState(lr=0.01, weight_decay=1e-4))
    assert abs(decayed["w"][0]) < abs(plain["w"][0])
    assert plain["w"][0] - decayed["w"][0] == pytest.approx(2.0 * 0.01 * 1e-4, rel=1e-12)


def test_adamw_shape_mismatch():
    with pytest.raises(ContractViolation):
        adamw_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimState())


def test_adamw_deterministic_bitwise():
    rng = np.random.default_rng(3)
    grads = [rng.normal(size=(4, 4)) for _ in range(5)]
    runs = []
    for _ in range(2):
        p = {"w": np.ones((4, 4))}
        s = OptimState(lr=1e-2, weight_decay=1e-4)
        for g in grads:
            adamw_update(p, {"w": g}, s)
        runs.append(p["w"].tobytes())
    assert runs[0] == runs[1]


# ---- one-cycle ---------------------------------------------------------------

def test_onecycle_endpoints():
    sched = LrSchedule(peak=8e-4, warmup_frac=0.1, total_steps=1000)
    assert onecycle_rate(sched, 0) == pytest.approx(8e-4 / 25, rel=1e-15)
    assert onecycle_rate(sched, sched.warmup_end) == 8e-4
    assert abs(onecycle_rate(sched, 999) - 8e-4 / 1000) < 1e-12


def test_onecycle_continuity_positive_and_peak():
    sched = LrSchedule(peak=2e-4, warmup_frac=0.3, total_steps=77)
    rates = np.array([onecycle_rate(sched, s) for s in range(77)])
    assert np.all(rates > 0)
    assert rates.max() == 2e-4
    w = sched.warmup_end
    # both pieces evaluate to peak at the boundary; neighbours approach it
    assert abs(rates[w] - 2e-4) < 1e-12
    assert rates[w - 1] < rates[w] and rates[w + 1] < rates[w]


def test_onecycle_out_of_range():
    sched = LrSchedule(peak=1e-3, warmup_frac=0.1, total_steps=10)
    with pytest.raises(ContractViolation):
        onecycle_rate(sched, 10)


# ---- file formats --------------------------------------------------------------

def test_matrix_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(4)
    m = rng.normal(size=(5, 3)) * 10.0 ** rng.integers(-20, 20, size=(5, 3))
    save_matrix(tmp_path / "m.mat", m)
    assert (tmp_path / "m.mat").read_text().splitlines()[0] == "5 3"
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.mat"), m)


def test_param_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    params = {"moe/w": rng.normal(size=(3, 4, 2)), "b": rng.normal(size=(2,))}
    save_params(tmp_path / "ck", params)
    back = load_params(tmp_path / "ck")
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


def test_sorted_sum_ignores_order():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 5)) * 10.0 ** rng.integers(-8, 8, size=(7, 5))
    perm = rng.permutation(7)
    a = ad.sorted_sum(x, axis=0).value
    b = ad.sorted_sum(x[perm], axis=0).value
    assert a.tobytes() == b.tobytes()
    np.testing.assert_allclose(a, x.sum(0), rtol=1e-12, atol=1e-12 * np.abs(x).max())
