import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqdeobf.autodiff import SGD, Adam, Tape, Tensor, clip_gradients, global_norm, log_softmax, make_optimizer


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def check(build, *shapes, seed=0, mask_ids=None):
    """``build(tape, *tensors)`` returns one output tensor; compare d sum(out*R) analytically and numerically."""
    rng = np.random.default_rng(seed)
    ts = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    tape = Tape()
    out = build(tape, *ts)
    R = rng.normal(size=out.value.shape)

    def f():
        return float(np.sum(build(Tape(record=False), *ts).value * R))

    loss = Tensor(np.array(float(np.sum(out.value * R))), requires_grad=True)
    out.grad = R
    tape._ops.reverse()
    for fn in tape._ops:
        fn()
    for t in ts:
        num = numeric_grad(f, t.value)
        ana = np.zeros_like(t.value) if t.grad is None else t.grad
        assert np.allclose(ana, num, atol=1e-6, rtol=1e-5), (ana, num)
    return loss


def test_linear():
    check(lambda tp, x, W, b: tp.linear(x, W, b), (3, 4), (4, 5), (5,))


def test_linear_3d_input():
    check(lambda tp, x, W, b: tp.linear(x, W, b), (2, 3, 4), (4, 2), (2,))


def test_concat_tanh():
    check(lambda tp, a, b: tp.tanh(tp.concat([a, b])), (2, 3), (2, 2))


def test_stack():
    check(lambda tp, a, b: tp.stack([a, b], axis=1), (2, 3), (2, 3))


def test_attention_with_mask():
    mask = np.array([[1, 1, 0], [1, 1, 1]])
    check(lambda tp, q, k: tp.attention(q, k, mask), (2, 4), (2, 3, 4))


@pytest.mark.parametrize("mask", [None, np.array([1.0, 0.0, 1.0])])
def test_lstm_cell(mask):
    def build(tp, x, h, c, W, b):
        hn, cn = tp.lstm_cell(x, h, c, W, b, mask)
        return tp.concat([hn, cn])

    check(build, (3, 2), (3, 3), (3, 3), (5, 12), (12,))


def test_embedding_frozen_row():
    table = Tensor(np.random.default_rng(0).normal(size=(5, 3)), requires_grad=True)
    tape = Tape()
    out = tape.embedding(table, np.array([0, 2, 2, 4]), frozen_row=0)
    out.grad = np.ones((4, 3))
    for fn in reversed(tape._ops):
        fn()
    assert np.all(table.grad[0] == 0)
    assert np.all(table.grad[2] == 2)
    assert np.all(table.grad[1] == 0)


def test_nll_loss_gradient():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    tgt = np.array([[0, 1, 2], [3, 0, 0]])
    w = np.array([[1, 1, 1], [1, 0, 0]])
    tape = Tape()
    loss = tape.nll_loss(logits, tgt, w)
    tape.backward(loss)
    f = lambda: float(Tape(record=False).nll_loss(logits, tgt, w).value)  # noqa: E731
    assert np.allclose(logits.grad, numeric_grad(f, logits.value), atol=1e-7)
    ref = -np.mean([log_softmax(logits.value[i, j])[tgt[i, j]] for i, j in [(0, 0), (0, 1), (0, 2), (1, 0)]])
    assert np.isclose(loss.value, ref)


def test_nll_loss_all_masked_is_zero():
    logits = Tensor(np.zeros((1, 2, 3)), requires_grad=True)
    tape = Tape()
    loss = tape.nll_loss(logits, np.zeros((1, 2), dtype=int), np.zeros((1, 2)))
    tape.backward(loss)
    assert loss.value == 0.0 and logits.grad is None


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        Tape().backward(Tensor(np.zeros(3)))


@settings(max_examples=30)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_clip_bounds_global_norm(max_norm, seed):
    rng = np.random.default_rng(seed)
    ps = [Tensor(np.zeros(3), True), Tensor(np.zeros((2, 2)), True)]
    for p in ps:
        p.grad = rng.normal(size=p.value.shape) * 5
    before = global_norm(ps)
    got = clip_gradients(ps, max_norm)
    assert got == pytest.approx(before)
    assert global_norm(ps) <= max_norm * (1 + 1e-12)
    if before <= max_norm:
        assert global_norm(ps) == pytest.approx(before)


@pytest.mark.parametrize("name", ["sgd", "adam"])
def test_optimizers_minimize_a_quadratic(name):
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = make_optimizer(name, [p], 0.1, 5.0)
    for _ in range(300):
        p.grad = 2 * p.value
        opt.step()
    assert np.all(np.abs(p.value) < 1e-2)
    assert isinstance(opt, SGD if name == "sgd" else Adam)


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [], 0.1, None)
