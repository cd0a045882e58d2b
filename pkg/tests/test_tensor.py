import numpy as np
import pytest

from nac import tensor as T
from nac.tensor import DimensionError, NonFiniteError, Tape, Tensor, backward, no_grad


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    leaves = []
    for s in shapes:
        data = rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s)
        leaves.append(Tensor(data, requires_grad=True))
    w = None

    def loss_value():
        nonlocal w
        with no_grad():
            out = build(*leaves).data
        if w is None:
            w = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float((out * w).sum())

    loss_value()
    with Tape() as tape:
        loss = (build(*leaves) * w).sum()
    grads = tape.gradient(loss, leaves)
    for leaf, g in zip(leaves, grads):
        fd = numeric_grad(loss_value, leaf.data)
        np.testing.assert_allclose(g, fd, rtol=tol, atol=tol)


@pytest.mark.parametrize("build,shapes,positive", [
    (lambda a, b: a + b, [(3, 4), (4,)], False),
    (lambda a, b: a - b, [(2, 3), (2, 1)], False),
    (lambda a, b: a * b, [(3, 4), (1, 4)], False),
    (lambda a, b: a / b, [(3, 4), (4,)], True),
    (lambda a: -a, [(5,)], False),
    (lambda a: T.exp(a), [(3, 3)], False),
    (lambda a: T.log(a), [(3, 3)], True),
    (lambda a: T.sigmoid(a), [(4,)], False),
    (lambda a: T.softplus(a), [(4,)], False),
    (lambda a: T.tanh(a), [(2, 3)], False),
    (lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
    (lambda a: a.sum(axis=1), [(2, 3, 4)], False),
    (lambda a: a.mean(axis=-1, keepdims=True), [(2, 3)], False),
    (lambda a: a.reshape(6, 2), [(3, 4)], False),
    (lambda a: a.swapaxes(0, 1), [(3, 4)], False),
    (lambda a: a[1:, ::2], [(3, 4)], False),
    (lambda a, b: T.concat_lastdim([a, b]), [(2, 3), (2, 2)], False),
    (lambda a: T.tile(a, 3), [(2, 4)], False),
    (lambda a: T.take_lastdim(a, [2, 0, 2]), [(2, 4)], False),
    (lambda a: T.softmax_lastdim(a), [(3, 5)], False),
    (lambda a: T.log_softmax_lastdim(a), [(3, 5)], False),
])
def test_op_gradients(build, shapes, positive):
    check_op(build, *shapes, positive=positive)


def test_gather_rows_gradient_accumulates_duplicates():
    idx = np.array([[[0, 2], [2, 2], [1, 0]]])
    check_op(lambda s: T.gather_rows(s, idx), (1, 3, 4))


def test_topk_gradient_flows_to_selected_entries_only():
    a = Tensor(np.array([[3.0, 1.0, 2.0, 5.0]]), requires_grad=True)
    with Tape() as tape:
        vals, idx = T.topk_lastdim(a, 2)
        loss = vals.sum()
    (g,) = tape.gradient(loss, [a])
    assert idx.tolist() == [[3, 0]]
    assert g.tolist() == [[1.0, 0.0, 0.0, 1.0]]


def test_topk_ties_prefer_lower_index():
    _, idx = T.topk_lastdim(np.array([1.0, 2.0, 2.0, 1.0, 2.0]), 4)
    assert idx.tolist() == [1, 2, 4, 0]


def test_logit_primitive_gradients():
    rng = np.random.default_rng(5)
    shape = (3, 4)
    phi = Tensor(rng.uniform(0.1, 0.9, shape), requires_grad=True)
    omega = Tensor(rng.uniform(0.2, 5.0, shape), requires_grad=True)
    t = Tensor(rng.uniform(0.1, 1.0, shape), requires_grad=True)
    for build in (lambda: T.exact_logits(phi, omega, t), lambda: T.euler_logits(phi, omega, t, 6)):
        with Tape() as tape:
            loss = build().sum()
        grads = tape.gradient(loss, [phi, omega, t])
        for leaf, g in zip((phi, omega, t), grads):
            fd = numeric_grad(lambda: float(build().data.sum()), leaf.data)
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_shared_subexpression_gradients_add():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    with Tape() as tape:
        y = x * x + x
        loss = y.sum()
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * 3.0).sum()
        backward(tape, loss)
    assert x.grad.tolist() == [6.0]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            y = T.exp(x)
    assert tape.nodes == []
    assert not y.requires_grad


def test_unused_param_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    assert tape.gradient(loss, [unused])[0].tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_nonscalar_loss_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.gradient(y, [x])


def test_exp_is_clamped_not_overflowing():
    assert np.isfinite(T.exp(np.array([1e4])).data).all()


def test_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        T.log(np.array([-1.0]))


def test_broadcast_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((4,)))


def test_softmax_empty_lastdim_raises():
    with pytest.raises(DimensionError):
        T.softmax_lastdim(np.ones((2, 0)))


def test_softmax_large_logits_stable():
    out = T.softmax_lastdim(np.array([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])
