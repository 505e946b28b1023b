from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, relative_error
from hhvaem import autodiff as ad
from hhvaem.errors import ContractError, ShapeError
from hhvaem.nn import Mlp


def test_basic_evaluation():
    x = ad.variable(3.0)
    assert (x * x).value == 9.0
    y = ad.variable(1.5)
    assert ad.log(ad.exp(y)).value == pytest.approx(1.5, abs=1e-15)


def test_softplus_chain_matches_scalar_loop(rng):
    v = rng.normal(size=4)
    out = ad.sum(ad.softplus(ad.mul(ad.softplus(ad.variable(v)), 2.0)))
    expected = 0.0
    for a in v:
        inner = np.log1p(np.exp(a))
        expected += np.log1p(np.exp(2.0 * inner))
    assert abs(out.value - expected) < 1e-12


def test_first_and_second_derivatives():
    x = ad.variable(3.0)
    (g,) = ad.grad(x * x, [x])
    assert g.value == pytest.approx(6.0)

    x = ad.variable(2.0)
    (g,) = ad.grad(x * x * x, [x], create_graph=True)
    (gg,) = ad.grad(g, [x])
    assert gg.value == pytest.approx(12.0)


def test_fourth_power_second_derivative():
    x = ad.variable(1.5)
    f = ad.square(ad.square(x))
    (g,) = ad.grad(f, [x], create_graph=True)
    (gg,) = ad.grad(g, [x])
    assert gg.value == pytest.approx(12 * 1.5**2)
    assert gg.value == pytest.approx(27.0)


def test_detach_blocks_gradient(rng):
    xv, yv = rng.normal(size=3), rng.normal(size=3)
    x, y = ad.variable(xv), ad.variable(yv)
    loss = ad.sum(ad.detach(x) * y)
    gx, gy = ad.grad(loss, [x, y])
    np.testing.assert_array_equal(gx.value, 0.0)
    np.testing.assert_array_equal(gy.value, xv)
    np.testing.assert_array_equal(ad.detach(x).value, xv)


def test_unreachable_leaf_gets_zero_gradient():
    x, z = ad.variable([1.0, 2.0]), ad.variable(np.ones((2, 3)))
    gx, gz = ad.grad(ad.sum(x * x), [x, z])
    np.testing.assert_allclose(gx.value, [2.0, 4.0])
    assert gz.shape == (2, 3) and not gz.value.any()


def test_nonscalar_root_is_rejected():
    x = ad.variable(np.ones(3))
    with pytest.raises(ContractError):
        ad.grad(x * 2.0, [x])


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        ad.add(ad.variable(np.ones((2, 3))), ad.variable(np.ones((4,))))
    assert "(2, 3)" in str(info.value) and "(4,)" in str(info.value)
    with pytest.raises(ShapeError):
        ad.matmul(ad.variable(np.ones((2, 3))), ad.variable(np.ones((2, 3))))


def test_evaluate_recomputes_after_leaf_change():
    x = ad.variable(2.0)
    y = ad.exp(x) + x
    x.value = np.array(0.0)
    assert ad.evaluate(y) == pytest.approx(1.0)


def test_no_grad_builds_no_graph():
    x = ad.variable(np.ones(2))
    with ad.no_grad():
        y = ad.sum(x * 3.0)
    assert not y.requires_grad and y.inputs == ()


@pytest.mark.parametrize(
    "fn",
    [
        lambda a: ad.sum(ad.tanh(a) * ad.sigmoid(a)),
        lambda a: ad.logsumexp(a * 1.3),
        lambda a: ad.sum(ad.sqrt(ad.exp(a)) + ad.sin(a) * ad.cos(a)),
        lambda a: ad.sum(ad.reciprocal(ad.softplus(a)) + ad.log(ad.softplus(a))),
        lambda a: ad.sum(ad.concat([a, a * a], axis=0)[1:5]),
        lambda a: ad.mean(ad.where(np.arange(6) % 2 == 0, a, ad.square(a))),
        lambda a: ad.sum(ad.matmul(ad.reshape(a, (2, 3)), ad.transpose(ad.reshape(a, (2, 3))))),
        lambda a: ad.sum(ad.broadcast_to(ad.reshape(a, (1, 6)), (3, 6)) * np.arange(18).reshape(3, 6)),
    ],
)
def test_primitive_gradients_match_finite_differences(fn, rng):
    v = rng.normal(size=6)

    def f(arr):
        return float(fn(ad.constant(arr)).value)

    x = ad.variable(v)
    (g,) = ad.grad(fn(x), [x])
    assert relative_error(g.value, central_difference(f, v)) < 1e-6


def test_mlp_gradient_matches_finite_differences(rng):
    net = Mlp((3, 256, 2), name="t", seed=0)
    xin = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def loss_of(params):
        return ad.sum(ad.square(net(xin) - target))

    params = net.params()
    grads = ad.grad(loss_of(params), list(params.values()))
    for (name, node), g in zip(params.items(), grads):
        # spot-check a subset of coordinates of the big matrices
        idx = np.unravel_index(rng.choice(node.size, size=min(node.size, 12), replace=False), node.shape)
        original = node.value.copy()
        numeric = []
        for i in zip(*idx):
            for sign in (1, -1):
                node.value = original.copy()
                node.value[i] += sign * 1e-5
                val = float(loss_of(params).value)
                numeric.append(val if sign == 1 else -val)
            node.value = original
        numeric = np.add(numeric[0::2], numeric[1::2]) / 2e-5
        assert relative_error(g.value[idx], numeric) < 1e-4, name


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-3, 3)))
def test_gradient_of_sum_of_squares_is_twice_input(values):
    x = ad.variable(values)
    (g,) = ad.grad(ad.sum(ad.square(x)), [x])
    np.testing.assert_allclose(g.value, 2 * values)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)))
def test_logsumexp_matches_numpy(values):
    from scipy.special import logsumexp

    out = ad.logsumexp(ad.constant(values), axis=1)
    np.testing.assert_allclose(out.value, logsumexp(values, axis=1), rtol=1e-12)
