"""Autodiff core: forward values against brute-force oracles, backward
rules against finite differences, tape determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsdet import tensor as T
from capsdet.errors import ContractError


def fd_grad(f, x, h=1e-6):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * h)
    return g


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.tensor(np.eye(2)), T.tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_projector():
    p = T.tensor([[1.0, 0.0], [0.0, 0.0]])
    v = T.tensor([[5.0], [7.0]])
    assert np.array_equal(T.matmul(p, v).data, [[5.0], [0.0]])


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = T.matmul(T.tensor(a), T.tensor(b)).data
    oracle = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(out - oracle)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 2))))


def test_matmul_backward_rules():
    rng = np.random.default_rng(1)
    a = T.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2))
    loss = (T.matmul(a, b) * T.tensor(w)).sum()
    T.backward(loss)
    assert np.allclose(a.grad, w @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ w, atol=1e-12)


# ---------------------------------------------------------------- softmax


def test_softmax_symmetry():
    out = T.softmax(T.tensor([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_closed_form():
    out = T.softmax(T.tensor([np.log(2.0), 0.0])).data
    assert np.allclose(out, [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_stabilized():
    out = T.softmax(T.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [1.0, 0.0], atol=1e-12)


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
)
def test_softmax_sums_to_one(xs):
    out = T.softmax(T.tensor(xs)).data
    assert np.all(out > 0)
    assert abs(out.sum() - 1.0) < 1e-12


def test_softmax_backward_vs_fd():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))

    def f(x):
        return float((T.softmax(T.tensor(x), axis=1).data * w).sum())

    leaf = T.tensor(x0, requires_grad=True)
    loss = (T.softmax(leaf, axis=1) * T.tensor(w)).sum()
    T.backward(loss)
    assert np.allclose(leaf.grad, fd_grad(f, x0.copy()), atol=1e-8)


# ---------------------------------------------------------------- norms


def test_l2_norm_345():
    assert float(T.l2_norm(T.tensor([3.0, 4.0])).data) == pytest.approx(5.0, abs=1e-15)


def test_l2_norm_zero_vector_guard():
    leaf = T.tensor(np.zeros(4), requires_grad=True)
    n = T.l2_norm(leaf)
    assert float(n.data) == 0.0
    T.backward(n)
    assert leaf.grad is None or not np.any(leaf.grad)


def test_l2_norm_scalar_loop_oracle():
    rng = np.random.default_rng(3)
    v = rng.normal(size=64)
    acc = 0.0
    for x in v:
        acc += x * x
    assert abs(float(T.l2_norm(T.tensor(v)).data) - np.sqrt(acc)) < 1e-12


def test_row_norms_backward_vs_fd():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 5))
    w = rng.normal(size=3)

    def f(x):
        return float((T.row_norms(T.tensor(x)).data * w).sum())

    leaf = T.tensor(x0, requires_grad=True)
    loss = (T.row_norms(leaf) * T.tensor(w)).sum()
    T.backward(loss)
    assert np.allclose(leaf.grad, fd_grad(f, x0.copy()), atol=1e-8)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    leaf = T.tensor(np.zeros((2, 3)), requires_grad=True)
    T.backward(leaf.sum())
    assert np.array_equal(leaf.grad, np.ones((2, 3)))


def test_backward_squared_norm():
    leaf = T.tensor([1.0, 2.0], requires_grad=True)
    loss = (leaf * leaf).sum()
    T.backward(loss)
    assert np.allclose(leaf.grad, [2.0, 4.0], atol=1e-15)


def test_backward_rejects_non_scalar():
    leaf = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(leaf + leaf)


def test_backward_shared_subexpression_accumulates():
    leaf = T.tensor([3.0], requires_grad=True)
    y = leaf * leaf  # used twice below
    loss = (y + y).sum()
    T.backward(loss)
    assert np.allclose(leaf.grad, [12.0], atol=1e-12)


# ------------------------------------------------------- routing einsums


def test_caps_predict_matches_loop():
    rng = np.random.default_rng(5)
    caps = rng.normal(size=(6, 4))
    tr = rng.normal(size=(6, 2, 4, 3))
    out = T.caps_predict(T.tensor(caps), T.tensor(tr)).data
    for i in range(6):
        for k in range(2):
            assert np.allclose(out[i, k], caps[i] @ tr[i, k], atol=1e-12)


def test_weighted_votes_and_agreement_match_loops():
    rng = np.random.default_rng(6)
    c = rng.normal(size=(6, 2))
    u = rng.normal(size=(6, 2, 3))
    v = rng.normal(size=(2, 3))
    raw = T.weighted_votes(T.tensor(c), T.tensor(u)).data
    agree = T.agreement(T.tensor(u), T.tensor(v)).data
    for k in range(2):
        assert np.allclose(raw[k], sum(c[i, k] * u[i, k] for i in range(6)), atol=1e-12)
        for i in range(6):
            assert abs(agree[i, k] - float(u[i, k] @ v[k])) < 1e-12


def test_routing_einsums_backward_vs_fd():
    rng = np.random.default_rng(7)
    caps0 = rng.normal(size=(4, 3))
    tr0 = rng.normal(size=(4, 2, 3, 5))
    w = rng.normal(size=(2, 5))

    def run(caps_arr, tr_arr):
        caps = T.tensor(caps_arr, requires_grad=True)
        tr = T.tensor(tr_arr, requires_grad=True)
        votes = T.caps_predict(caps, tr)
        coup = T.softmax(T.tensor(rng_c), axis=1)
        raw = T.weighted_votes(coup, votes)
        sq = T.squash_rows(raw)
        loss = (sq * T.tensor(w)).sum()
        return loss, caps, tr

    rng_c = np.random.default_rng(8).normal(size=(4, 2))
    loss, caps, tr = run(caps0, tr0)
    T.backward(loss)
    fd_caps = fd_grad(lambda x: float(run(x, tr0)[0].data), caps0.copy())
    fd_tr = fd_grad(lambda x: float(run(caps0, x)[0].data), tr0.copy())
    assert np.allclose(caps.grad, fd_caps, atol=1e-7)
    assert np.allclose(tr.grad, fd_tr, atol=1e-7)


# ------------------------------------------------------------- sandwich


def test_sandwich_value_and_adjoint():
    rng = np.random.default_rng(9)
    left = rng.normal(size=(3, 4))
    right = rng.normal(size=(5, 6))
    x0 = rng.normal(size=(4, 6))
    w = rng.normal(size=(3, 5))
    leaf = T.tensor(x0, requires_grad=True)
    out = T.sandwich(leaf, left, right)
    assert np.allclose(out.data, left @ x0 @ right.T, atol=1e-12)
    loss = (out * T.tensor(w)).sum()
    T.backward(loss)
    assert np.allclose(leaf.grad, left.T @ w @ right, atol=1e-12)


# ------------------------------------------------------------ properties


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_elementwise_grads_match_fd(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.2, 2.0, size=(2, 3))
    y0 = rng.uniform(0.2, 2.0, size=(2, 3))

    def f(x, y):
        a, b = T.tensor(x, requires_grad=True), T.tensor(y, requires_grad=True)
        out = ((a * b + a - b) / (b + 3.0)).relu().sum()
        return out, a, b

    loss, a, b = f(x0, y0)
    T.backward(loss)
    fd_a = fd_grad(lambda x: float(f(x, y0)[0].data), x0.copy())
    fd_b = fd_grad(lambda y: float(f(x0, y)[0].data), y0.copy())
    assert np.allclose(a.grad, fd_a, atol=1e-7)
    assert np.allclose(b.grad, fd_b, atol=1e-7)


def test_tape_replay_is_deterministic():
    rng = np.random.default_rng(10)
    x0 = rng.normal(size=(5, 5))

    def run():
        leaf = T.tensor(x0, requires_grad=True)
        out = T.softmax(T.matmul(leaf, leaf), axis=1)
        loss = T.l2_norm(out.reshape(25))
        T.backward(loss)
        return loss.data.copy(), leaf.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)
