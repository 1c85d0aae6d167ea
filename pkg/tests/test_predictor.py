import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protfuse.errors import ContractViolation, DataFault, NumericFault
from protfuse.hetgraph import GoDag
from protfuse.moe import init_moe, moe_encode
from protfuse.numerics import finite_diff_check
from protfuse.predictor import (
    FinetuneConfig, aupr, bce_loss, check_true_path, classifier_probs, finetune, fmax,
    init_classifier, init_finetune, finetune_step, predict, read_metrics, true_path_propagate,
    write_metrics, write_predictions,
)

from oracles import aupr_naive, fixpoint_propagate, fmax_bruteforce


def _random_dag(n, rng, extra=0.3):
    pairs = []
    for c in range(1, n):
        for p in rng.choice(c, size=min(c, 1 + int(rng.random() < extra)), replace=False):
            pairs.append((int(p), c))
    return pairs


def _parents(pairs):
    out = {}
    for p, c in pairs:
        out.setdefault(c, []).append(p)
    return out


def _fixture(rng, n_prot=None, n_terms=None):
    n_prot = n_prot or int(rng.integers(1, 21))
    n_terms = n_terms or int(rng.integers(1, 31))
    y = (rng.random((n_prot, n_terms)) < rng.uniform(0.05, 0.5)).astype(int)
    if not y.any():
        y[rng.integers(n_prot), rng.integers(n_terms)] = 1
    s = rng.random((n_prot, n_terms))
    s[rng.random(s.shape) < 0.2] = 0.0
    s = np.round(s, int(rng.integers(1, 4)))  # plenty of ties and grid-exact values
    return s, y


# ---- loss -------------------------------------------------------------------------

def test_bce_examples():
    y = np.array([[1, 0, 1], [0, 0, 1]])
    assert bce_loss(np.full(y.shape, 0.5), y).value == pytest.approx(np.log(2), abs=1e-15)
    assert bce_loss(np.where(y == 1, 1 - 1e-9, 1e-9), y).value < 1e-6
    p = np.array([[0.8, 0.3]])
    expect = -(np.log(0.8) + np.log(0.7)) / 2
    assert bce_loss(p, np.array([[1, 0]])).value == pytest.approx(expect, abs=1e-15)


def test_bce_clamps_and_faults():
    y = np.array([[1, 0]])
    assert np.isfinite(bce_loss(np.array([[0.0, 1.0]]), y).value)
    with pytest.raises(NumericFault):
        bce_loss(np.array([[0.0, 0.5]]), y, clamp=0.0)
    with pytest.raises(ContractViolation):
        bce_loss(np.array([[0.5]]), y)


def test_classifier_outputs_are_probabilities():
    p = init_classifier(5, 7, hidden=9, rng=0)
    out = classifier_probs(p, np.random.default_rng(1).normal(size=(4, 5)) * 10).value
    assert out.shape == (4, 7) and np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("seed", range(3))
def test_classifier_and_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    params = init_moe(6, 5, 3, rng=seed)
    params["moe.gate_w"].value[:] = rng.normal(size=(6, 3))
    params.update(init_classifier(5, 4, hidden=7, rng=seed))
    x, y = rng.normal(size=(3, 6)), (rng.random((3, 4)) < 0.5).astype(float)
    err = finite_diff_check(lambda q: bce_loss(classifier_probs(q, moe_encode(q, x)), y), params, step=1e-5)
    assert err < 1e-4


def test_finetune_updates_encoder_and_classifier():
    rng = np.random.default_rng(0)
    params = init_moe(6, 5, 3, rng=0)
    params.update(init_classifier(5, 4, hidden=7, rng=1))
    before = {k: v.value.copy() for k, v in params.items()}
    cfg = FinetuneConfig(steps=5, batch_size=4, lr=1e-2)
    state = init_finetune(params, cfg)
    finetune_step(state, rng.normal(size=(4, 6)), (rng.random((4, 4)) < 0.5), cfg)
    assert all(not np.array_equal(params[k].value, before[k]) for k in ("moe.expert_w", "clf.w2"))


def test_frozen_encoder_option():
    rng = np.random.default_rng(0)
    params = init_moe(6, 5, 3, rng=0)
    params.update(init_classifier(5, 4, hidden=7, rng=1))
    before = params["moe.expert_w"].value.copy()
    cfg = FinetuneConfig(steps=5, batch_size=4, lr=1e-2, train_encoder=False)
    finetune_step(init_finetune(params, cfg), rng.normal(size=(4, 6)), np.ones((4, 4)), cfg)
    np.testing.assert_array_equal(params["moe.expert_w"].value, before)


def test_finetune_learns_separable_labels():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 6))
    y = np.c_[x[:, 0] > 0, x[:, 1] > 0, x[:, 0] + x[:, 1] > 0].astype(float)
    params = init_moe(6, 8, 2, rng=0)
    params.update(init_classifier(8, 3, hidden=16, rng=1))
    cfg = FinetuneConfig(steps=300, batch_size=16, lr=1e-2)
    _, losses = finetune(params, x, y, cfg)
    assert np.mean(losses[-20:]) < 0.5 * losses[0]
    acc = ((predict(params, x) > 0.5) == (y > 0.5)).mean()
    assert acc > 0.9


def test_finetune_is_deterministic():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(20, 6)), (rng.random((20, 3)) < 0.4)
    runs = []
    for _ in range(2):
        params = init_moe(6, 4, 2, rng=0)
        params.update(init_classifier(4, 3, hidden=5, rng=1))
        _, losses = finetune(params, x, y, FinetuneConfig(steps=20, batch_size=8))
        runs.append((losses, predict(params, x).tobytes()))
    assert runs[0] == runs[1]


# ---- propagation ------------------------------------------------------------------

def test_chain_example():
    out = true_path_propagate(np.array([[0.2, 0.9]]), [(0, 1)])
    np.testing.assert_array_equal(out, [[0.9, 0.9]])


def test_consistent_matrix_unchanged():
    s = np.array([[0.9, 0.5, 0.4], [0.3, 0.3, 0.1]])
    np.testing.assert_array_equal(true_path_propagate(s, [(0, 1), (1, 2)]), s)


@given(st.integers(0, 100_000))
@settings(max_examples=100, deadline=None)
def test_propagation_matches_fixpoint_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    pairs = _random_dag(n, rng)
    s = rng.random((int(rng.integers(1, 6)), n))
    out = true_path_propagate(s, pairs)
    np.testing.assert_array_equal(out, fixpoint_propagate(s, _parents(pairs)))
    np.testing.assert_array_equal(true_path_propagate(out, pairs), out)
    dag = GoDag(n, pairs)
    for t in range(n):
        for d in dag.descendants(t):
            assert np.all(out[:, t] >= out[:, d])


def test_cycle_is_data_fault():
    with pytest.raises(DataFault):
        true_path_propagate(np.zeros((1, 3)), [(0, 1), (1, 2), (2, 0)])


def test_label_consistency_check():
    check_true_path(np.array([[1, 1, 0], [1, 0, 0]]), [(0, 1), (1, 2)])
    with pytest.raises(DataFault):
        check_true_path(np.array([[0, 1, 0]]), [(0, 1), (1, 2)])


# ---- Fmax -------------------------------------------------------------------------

def test_fmax_perfect_and_empty():
    y = np.array([[1, 0, 1], [0, 1, 0]])
    f, tau = fmax(y.astype(float), y)
    assert f == 1.0 and tau == 0.0   # zero scores never count, so every threshold is perfect
    assert fmax(y * 0.7, y)[0] == 1.0
    assert fmax(np.zeros((2, 3)), y) == (0.0, 0.0)


def test_fmax_hand_fixture():
    s = np.array([[0.9, 0.4, 0.1], [0.6, 0.0, 0.3]])
    y = np.array([[1, 0, 1], [0, 0, 1]])
    # tau <= 0.1: p1 {0,1,2} P=2/3 R=1; p2 {0,2} P=1/2 R=1 -> P=7/12, R=1 -> F=0.7368
    # tau in (0.1, 0.3]: p1 {0,1} P=1/2 R=1/2; p2 {0,2} P=1/2 R=1 -> F = 2*.5*.75/1.25 = 0.6
    # tau in (0.3, 0.4]: p1 {0,1} P=1/2 R=1/2; p2 {0} P=0 R=0 -> P=.25, R=.25 -> 0.25
    f, tau = fmax(s, y)
    assert f == pytest.approx(2 * (7 / 12) / (7 / 12 + 1), abs=1e-15)
    assert tau == 0.0
    assert fmax_bruteforce(s, y) == (f, tau)


def test_fmax_requires_a_label():
    with pytest.raises(ContractViolation):
        fmax(np.ones((2, 2)), np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(100))
def test_fmax_matches_bruteforce(seed):
    s, y = _fixture(np.random.default_rng(seed))
    if not y.any(axis=1).any():
        return
    f, tau = fmax(s, y)
    f_ref, tau_ref = fmax_bruteforce(s, y)
    assert abs(f - f_ref) < 1e-12
    if f > 0:
        assert abs(fmax(np.where(s >= tau, s, 0.0), y)[0] - f) < 1e-12


@pytest.mark.parametrize("seed", range(40))
def test_fmax_under_square_root_transform(seed):
    rng = np.random.default_rng(1000 + seed)
    s, y = _fixture(rng, n_prot=20, n_terms=30)
    s = rng.random(s.shape)
    assert abs(fmax(s, y)[0] - fmax(np.sqrt(s), y)[0]) < 0.01


# ---- AUPR -------------------------------------------------------------------------

def test_aupr_examples():
    y = np.array([[1, 1, 0, 0]])
    assert aupr(np.array([[0.9, 0.8, 0.2, 0.1]]), y) == 1.0
    assert aupr(np.array([[0.1, 0.9, 0.8, 0.7]]), np.array([[1, 0, 0, 0]])) == 0.25
    # a tie between the positive and a negative counts them together
    assert aupr(np.array([[0.5, 0.5]]), np.array([[1, 0]])) == 0.5


def test_aupr_requires_a_positive():
    with pytest.raises(ContractViolation):
        aupr(np.ones((2, 2)), np.zeros((2, 2)))


@pytest.mark.parametrize("seed", range(100))
def test_aupr_matches_naive(seed):
    s, y = _fixture(np.random.default_rng(seed))
    assert aupr(s, y) == aupr_naive(s, y)


@given(st.integers(0, 100_000))
@settings(max_examples=30, deadline=None)
def test_aupr_ignores_tie_order(seed):
    rng = np.random.default_rng(seed)
    s, y = _fixture(rng, n_prot=5, n_terms=6)
    perm = rng.permutation(s.size)
    assert aupr(s, y) == aupr(s.ravel()[perm].reshape(s.shape), y.ravel()[perm].reshape(y.shape))


# ---- files ------------------------------------------------------------------------

def test_prediction_and_metric_files(tmp_path):
    s = np.array([[0.5, 0.0], [0.125, 1.0]])
    path = write_predictions(tmp_path / "p.tsv", s, ["P1", "P2"], ["GO:1", "GO:2"])
    assert path.read_text() == "P1\tGO:1\t0.5\nP2\tGO:1\t0.125\nP2\tGO:2\t1\n"
    m = write_metrics(tmp_path / "m.csv", [("fmax", 0.1 + 0.2, 3), ("aupr", 0.5, 3)])
    assert m.read_text().splitlines()[0] == "metric,value,seed"
    assert read_metrics(m) == [("fmax", 0.1 + 0.2, 3), ("aupr", 0.5, 3)]
