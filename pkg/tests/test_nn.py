from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhvaem import autodiff as ad
from hhvaem.errors import DataFormatError, DivergenceError, ShapeError
from hhvaem.nn import Adam, Mlp, init_params, load_checkpoint, save_checkpoint


def test_zero_weights_output_bias(rng):
    net = Mlp((3, 5, 2), name="z")
    net.biases[-1].value = np.array([0.5, -1.5])
    out = net.forward_numpy(rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(out, np.tile([0.5, -1.5], (4, 1)))


def test_identity_linear_net(rng):
    net = Mlp((3, 3, 3), activation="linear")
    for w in net.weights:
        w.value = np.eye(3)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(net.forward_numpy(x), x)


def test_input_width_checked():
    with pytest.raises(ShapeError):
        Mlp((3, 2)).forward_numpy(np.ones((2, 4)))


def test_initialisation_is_seeded():
    a, b, c = Mlp((4, 8, 2), seed=1), Mlp((4, 8, 2), seed=1), Mlp((4, 8, 2), seed=2)
    for name in a.params():
        np.testing.assert_array_equal(a.params()[name].value, b.params()[name].value)
    assert not np.array_equal(a.weights[0].value, c.weights[0].value)
    assert not a.biases[0].value.any()


def test_initialisation_scale_on_wide_layer():
    net = Mlp((256, 256), seed=0)
    target = np.sqrt(2.0 / (256 + 256))
    assert abs(net.weights[0].value.std() / target - 1.0) < 0.2


def test_adam_zero_gradient_keeps_parameters():
    p = ad.variable(np.array([1.0, -2.0]))
    opt = Adam({"p": p})
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_learning_rate():
    p = ad.variable(np.array(0.3))
    Adam({"p": p}, lr=1e-3).step({"p": np.array(1.0)})
    assert p.value == pytest.approx(0.3 - 1e-3, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50).filter(lambda g: abs(g) > 1e-3))
def test_adam_constant_gradient_update_magnitude(g):
    p = ad.variable(np.array(0.0))
    opt = Adam({"p": p}, lr=1e-2)
    previous = 0.0
    for _ in range(200):
        opt.step({"p": np.array(g)})
        delta = float(p.value) - previous
        previous = float(p.value)
    assert abs(abs(delta) - 1e-2) < 1e-4
    assert np.sign(delta) == -np.sign(g)


def test_adam_nan_gradient_names_parameter():
    p = ad.variable(np.zeros(2))
    with pytest.raises(DivergenceError, match="dep.gen.w0"):
        Adam({"dep.gen.w0": p}).step({"dep.gen.w0": np.array([0.0, np.nan])})


def test_adam_minimises_quadratic():
    p = ad.variable(np.array([3.0, -4.0]))
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(500):
        opt.minimize(ad.sum(ad.square(p)))
    assert np.all(np.abs(p.value) < 1e-2)


def test_checkpoint_round_trip(tmp_path, rng):
    net = init_params(Mlp((3, 4, 2), name="dep.gen"), seed=3)
    arrays = {k: v.value for k, v in net.params().items()}
    arrays["hmc.scalar"] = np.array(2.5)
    path = save_checkpoint(tmp_path / "ck", arrays, {"note": "hello world", "empty": ""})
    assert path.suffix == ".manifest" and (tmp_path / "ck.bin").exists()
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta == {"note": "hello world", "empty": ""}
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)
        assert loaded[k].shape == np.shape(v)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.manifest"
    bad.write_text("format = something-else\n")
    with pytest.raises(DataFormatError):
        load_checkpoint(bad)
