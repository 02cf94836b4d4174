import numpy as np
import pytest
from scipy.special import log_softmax as sp_log_softmax

from gradleak import autodiff as ad
from conftest import central_diff


def _check(f, *shapes, seed=0, tol=1e-6, positive=False):
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    leaves = [ad.leaf(x) for x in xs]
    out = f(*leaves)
    grads = ad.grad(out, leaves)
    for k, x in enumerate(xs):
        def scalar(v, k=k):
            args = [ad.Var(v) if j == k else ad.Var(xs[j]) for j in range(len(xs))]
            return float(f(*args).value)
        np.testing.assert_allclose(grads[k].value, central_diff(scalar, x), rtol=tol, atol=tol)


@pytest.mark.parametrize("op", [
    lambda a, b: (a + b).sum(),
    lambda a, b: (a - b).sum(),
    lambda a, b: (a * b * a).sum(),
    lambda a, b: (a / b).sum(),
])
def test_binary_ops_match_fd(op):
    _check(op, (3, 4), (3, 4), positive=True)


def test_broadcasting_reduces_cotangent():
    _check(lambda a, b: ((a * b) + b).sum(), (3, 4), (4,))
    _check(lambda a, b: (a * b).sum(), (2, 3), (2, 1))


@pytest.mark.parametrize("op", [
    lambda a: ad.exp(a).sum(),
    lambda a: ad.log(a).sum(),
    lambda a: ad.sqrt(a).sum(),
    lambda a: (a.reshape(4, 3).T @ ad.Var(np.arange(4.0).reshape(4, 1))).sum(),
    lambda a: ad.sum_(a * a, axis=1).sum(),
    lambda a: ad.transpose(a, (1, 0)).reshape(-1)[2:7].sum(),
    lambda a: ad.dot(ad.log_softmax(a, axis=1), ad.Var(np.ones((3, 4)))),
])
def test_unary_ops_match_fd(op):
    _check(op, (3, 4), positive=True)


def test_matmul_matches_fd():
    _check(lambda a, b: ad.dot(a @ b, a @ b), (3, 5), (5, 2))


def test_relu_gradient_is_mask():
    x = np.array([-1.0, 0.5, 2.0, -0.1])
    xv = ad.leaf(x)
    (g,) = ad.grad(ad.relu(xv).sum(), [xv])
    np.testing.assert_array_equal(g.value, [0, 1, 1, 0])


def test_gather_scatter_are_adjoint(rng):
    a = rng.normal(size=(4, 5))
    idx = rng.integers(0, a.size, size=(7, 3))
    v = rng.normal(size=idx.shape)
    lhs = np.sum(ad.gather(a, idx).value * v)
    rhs = np.sum(a * ad.scatter_add(v, idx, a.shape).value)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_log_softmax_matches_scipy(rng):
    z = rng.normal(size=(5, 4)) * 10
    np.testing.assert_allclose(ad.log_softmax(ad.Var(z), axis=1).value, sp_log_softmax(z, axis=1), atol=1e-12)


def test_second_order_of_cubic():
    # d/dx sum(x^3) = 3x^2, and differentiating <3x^2, v> again gives 6 x v
    x = np.array([0.5, -1.0, 2.0])
    v = np.array([1.0, 2.0, -1.0])
    xv = ad.leaf(x)
    (g,) = ad.grad((xv * xv * xv).sum(), [xv], create_graph=True)
    np.testing.assert_allclose(g.value, 3 * x ** 2)
    (h,) = ad.grad(ad.dot(g, v), [xv])
    np.testing.assert_allclose(h.value, 6 * x * v)


def test_detached_gradient_has_no_parents():
    xv = ad.leaf(np.ones(3))
    (g,) = ad.grad((xv * xv).sum(), [xv])
    assert not g.requires_grad


def test_unrelated_input_gets_zeros():
    a, b = ad.leaf(np.ones(3)), ad.leaf(np.ones(2))
    ga, gb = ad.grad((a * 2.0).sum(), [a, b])
    np.testing.assert_array_equal(ga.value, 2.0)
    np.testing.assert_array_equal(gb.value, 0.0)


def test_seed_gives_vector_jacobian_product(rng):
    A = rng.normal(size=(3, 4))
    x = ad.leaf(rng.normal(size=(4, 1)))
    v = rng.normal(size=(3, 1))
    (g,) = ad.grad(ad.Var(A) @ x, [x], seed=v)
    np.testing.assert_allclose(g.value, A.T @ v)
