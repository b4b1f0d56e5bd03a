import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from tlinformer import tensor as T
from tlinformer.attention import attention_core
from tlinformer.tensor import (
    FlopLedger,
    NonFiniteError,
    ShapeError,
    Tensor,
    UsageError,
    backward,
    ledger_read,
    ledger_reset,
    no_grad,
    parameter,
    use_ledger,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_identity_and_hand_case():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(M)).data, M)
    out = T.matmul(Tensor(M), Tensor([[0.0], [1.0]])).data
    assert np.array_equal(out, [[2.0], [4.0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 10_000))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    got = T.matmul(Tensor(a), Tensor(b)).data
    ref = triple_loop(a, b)
    assert np.max(np.abs(got - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(T.softmax_rows(Tensor([[5.0, 5.0, 5.0]])).data, 1 / 3, atol=1e-15)
    assert np.allclose(T.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)
    big = T.softmax_rows(Tensor([[1000.0, 1001.0]])).data
    assert np.isfinite(big).all()
    assert np.allclose(big, T.softmax_rows(Tensor([[0.0, 1.0]])).data, atol=1e-15)


def test_softmax_rows_sum_to_one_and_shift_invariant(rng):
    z = rng.uniform(-50, 50, size=(64, 37))
    s = T.softmax_rows(Tensor(z)).data
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-12
    shifted = T.softmax_rows(Tensor(z + rng.uniform(-20, 20, size=(64, 1)))).data
    assert np.max(np.abs(s - shifted)) < 1e-12


def test_softmax_empty_row_rejected():
    with pytest.raises(ShapeError):
        T.softmax_rows(Tensor(np.zeros((2, 0))))


def test_layer_norm_examples(rng):
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(T.layer_norm(Tensor(np.full((1, 4), 3.0)), ones, zeros).data, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [[1.0, -1.0]], atol=1e-5)
    x = rng.normal(size=(5, 7)) * 3 + 2
    g, b = rng.normal(size=7), rng.normal(size=7)
    mean = np.array([sum(row) / 7 for row in x])
    var = np.array([sum((v - mu) ** 2 for v in row) / 7 for row, mu in zip(x, mean)])
    ref = (x - mean[:, None]) / np.sqrt(var[:, None] + 1e-5) * g + b
    assert np.max(np.abs(T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data - ref)) < 1e-10


def test_layer_norm_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_backward_sum_gives_ones():
    x = parameter(np.arange(6.0).reshape(2, 3))
    backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_linear_map(rng):
    x = rng.normal(size=(4, 3))
    W = parameter(rng.normal(size=(3, 2)))
    backward(T.sum_all(T.matmul(Tensor(x), W)))
    assert np.allclose(W.grad, x.T @ np.ones((4, 2)))


def test_backward_accumulates_across_reuse():
    x = parameter([2.0, 3.0])
    backward(T.sum_all(x * x + x))
    assert np.allclose(x.grad, [5.0, 7.0])


def test_backward_needs_scalar_and_tape():
    with pytest.raises(UsageError):
        backward(parameter([1.0, 2.0]) * 2.0)
    with pytest.raises(UsageError):
        backward(Tensor(1.0))


OPS = {
    "add_broadcast": lambda a, b: T.sum_all((a + b) * (a + b)),
    "sub": lambda a, b: T.sum_all((a - b) * a),
    "mul": lambda a, b: T.sum_all(a * b * a),
    "matmul": lambda a, b: T.sum_all(T.gelu(T.matmul(a, T.transpose(b, (1, 0))))),
    "gelu": lambda a, b: T.sum_all(T.gelu(a) * b),
    "softmax": lambda a, b: T.sum_all(T.softmax_rows(a) * b),
    "layer_norm": lambda a, b: T.sum_all(T.layer_norm(a, b[0], b[1] * 0.5) * a),
    "getitem_concat": lambda a, b: T.sum_all(T.concat([a[..., :2, :], b[:1]], axis=0) * 1.7),
    "reshape_mean": lambda a, b: T.mean_all(T.reshape(a * a, (-1,))) + T.sum_all(b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name, rng):
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(2, 4)) if name in ("layer_norm", "getitem_concat", "matmul") else rng.normal(size=(3, 4)))
    if name == "add_broadcast":
        b = parameter(rng.normal(size=(4,)))
    fn = OPS[name]
    backward(fn(a, b))
    for p in (a, b):
        with no_grad():
            num = central_diff(lambda: fn(a, b).item(), p.data)
        assert rel_err(p.grad, num) < 1e-4, name


def test_cross_entropy_gradient_and_value(rng):
    logits = parameter(rng.normal(size=(2, 3, 5)))
    tgt = rng.integers(0, 5, size=(2, 3))
    loss = T.cross_entropy(logits, tgt)
    z = logits.data.reshape(-1, 5)
    ref = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(6), tgt.reshape(-1)])
    assert abs(loss.item() - ref) < 1e-12
    backward(loss)
    with no_grad():
        num = central_diff(lambda: T.cross_entropy(logits, tgt).item(), logits.data)
    assert rel_err(logits.grad, num) < 1e-6


def test_embedding_gradient_scatters(rng):
    W = parameter(rng.normal(size=(5, 3)))
    ids = np.array([[0, 2, 2]])
    backward(T.sum_all(T.embedding(W, ids)))
    assert np.array_equal(W.grad[:, 0], [1.0, 0.0, 2.0, 0.0, 0.0])
    with pytest.raises(ShapeError):
        T.embedding(W, np.array([7]))


def test_non_finite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        Tensor([1e308]) * 1e10


def test_ledger_reset_read_and_attention_charge(rng):
    ledger_reset()
    assert ledger_read() == (0, 0)
    q, k = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 4)))
    attention_core(q, k, k, n_head=2)
    assert ledger_read()[0] == 24


def test_ledger_deterministic_and_isolated(rng):
    x = Tensor(rng.normal(size=(5, 4)))

    def run():
        led = FlopLedger()
        with use_ledger(led):
            attention_core(x, x, x, 1)
            T.matmul(x, T.transpose(x, (1, 0)))
        return led.read()

    before = ledger_read()
    assert run() == run()
    assert ledger_read() == before


def test_no_grad_skips_tape():
    w = parameter([1.0, 2.0])
    with no_grad():
        y = w * 3.0
    assert not y.requires_grad
