import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clearlab import autodiff as ad
from clearlab.autodiff import NumericFault, ShapeError, Tape, Tensor

TOL = 1e-4


def check(build, *shapes, rng=None, positive=False):
    """Compare tape gradients of ``sum(w * build(*xs))`` with finite differences."""
    rng = rng or np.random.default_rng(0)
    xs = [Tensor(rng.uniform(0.5, 1.5, s) if positive else rng.normal(size=s), requires_grad=True)
          for s in shapes]
    out_shape = build(*xs).shape
    w = Tensor(rng.normal(size=out_shape))

    def value():
        return float((build(*xs).data * w.data).sum())

    with Tape() as tape:
        loss = ad.sum_(ad.mul(build(*xs), w))
    grads = tape.backward(loss, xs)
    for x, g in zip(xs, grads):
        num = ad.numerical_gradient(value, x)
        assert ad.relative_error(g, num) < TOL


def test_add_mul_sub_broadcast():
    check(ad.add, (3, 4), (4,))
    check(ad.sub, (2, 3), (2, 1))
    check(ad.mul, (2, 3, 2), (3, 1))


def test_matmul_and_batched():
    check(ad.matmul, (2, 3), (3, 4))
    check(ad.matmul, (2, 3, 4), (4, 2))
    check(ad.matmul, (2, 2, 3, 4), (2, 2, 4, 3))


def test_linear():
    check(ad.linear, (2, 3, 4), (4, 5), (5,))


def test_gelu():
    check(ad.gelu, (3, 5))


def test_softmax_layer_norm():
    check(lambda x: ad.softmax(x, axis=-1), (3, 5))
    check(lambda x, g, b: ad.layer_norm(x, g, b), (2, 3, 6), (6,), (6,))
    # per-sample (broadcast) affine parameters as used by routed bias selection
    check(lambda x, g, b: ad.layer_norm(x, g, b), (2, 3, 6), (6,), (2, 1, 6))


def test_shape_ops():
    check(lambda x: ad.reshape(x, (3, 4)), (2, 6))
    check(lambda x: ad.transpose(x, (1, 0, 2)), (2, 3, 4))
    check(lambda x: ad.broadcast_to(x, (3, 2, 4)), (2, 4))
    check(lambda a, b: ad.concat([a, b], axis=1), (2, 3, 4), (2, 1, 4))


def test_reductions():
    check(lambda x: ad.sum_(x, axis=1), (3, 4))
    check(lambda x: ad.mean(x, axis=0, keepdims=True), (3, 4))
    check(lambda x: ad.mean(x), (3, 4))


def test_embedding_repeated_ids():
    ids = np.array([[0, 2, 2], [1, 0, 2]])
    check(lambda t: ad.embedding(t, ids), (4, 3))


def test_cross_entropies():
    labels = np.array([0, 2, 1])
    check(lambda z: ad.cross_entropy(z, labels), (3, 4))
    target = np.random.default_rng(5).dirichlet(np.ones(4), size=3)
    check(lambda z: ad.soft_cross_entropy(z, target), (3, 4))


@given(st.integers(2, 8), st.integers(0, 10_000))
def test_elementwise_property(n, seed):
    rng = np.random.default_rng(seed)
    check(ad.mul, (n,), (n,), rng=rng)
    check(ad.gelu, (n,), rng=rng)
    check(lambda x: ad.softmax(x), (n,), rng=rng)


def test_analytic_examples():
    a = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert a.shape == (2, 4)
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))
    ce = ad.cross_entropy(Tensor(np.zeros((1, 3))), np.array([2]))
    assert ce.item() == pytest.approx(math.log(3), abs=1e-12)

    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(ad.mul(x, x))
    assert tape.backward(y, [x])[0][0] == pytest.approx(6.0)

    v = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        s = ad.sum_(v)
    np.testing.assert_array_equal(tape.backward(s, [v])[0], np.ones(4))


def test_untouched_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.sum_(x)
    gx, gu = tape.backward(y, [x, unused])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_gradient_accumulation_is_additive(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    f = lambda: ad.sum_(ad.gelu(x))  # noqa: E731
    g = lambda: ad.sum_(ad.softmax(x))  # noqa: E731
    with Tape() as tape:
        both = ad.add(f(), g())
    tape.backward(both)
    joint = x.grad.copy()
    x.grad = None
    with Tape() as t1:
        a = f()
    t1.backward(a)
    with Tape() as t2:
        b = g()
    t2.backward(b)
    np.testing.assert_allclose(x.grad, joint, rtol=0, atol=1e-12)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, x)
    assert ad.active_tape() is None and y.requires_grad is False


def test_tape_order_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = ad.gelu(ad.mul(x, 2.0))
        ad.sum_(y)
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))


def test_shape_errors_name_the_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 3, 5)))], axis=1)
    with pytest.raises(ShapeError, match="cross_entropy"):
        ad.cross_entropy(Tensor(np.ones((2, 3))), np.array([0, 5]))


def test_soft_target_must_be_a_distribution():
    with pytest.raises(ValueError, match="sum"):
        ad.soft_cross_entropy(Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.5]]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_fault_on_nonfinite():
    with pytest.raises(NumericFault):
        ad.mul(Tensor(np.array([np.inf])), Tensor(np.array([0.0])))
    with pytest.raises(NumericFault):
        ad.add(Tensor(np.array([np.nan])), 1.0)


def test_determinism_bitwise(rng):
    data = rng.normal(size=(3, 5))

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            y = ad.sum_(ad.softmax(ad.gelu(x)))
        tape.backward(y)
        return y.data.tobytes(), x.grad.tobytes()

    assert run() == run()
