from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import central_difference, relative_error
from hhvaem import autodiff as ad
from hhvaem import hmc
from hhvaem.data import Standardizer, synth_mixed
from hhvaem.errors import ConfigurationError, ContractError
from hhvaem.hier import HierModel, make_batch
from hhvaem.marginal import MarginalBank, MarginalVae


def flat(e):
    return ad.mul(ad.sum(e, axis=1), 0.0)


def std_normal(e):
    return ad.mul(ad.sum(ad.square(e), axis=1), -0.5)


def shifted_normal(mean):
    return lambda e: ad.mul(ad.sum(ad.square(ad.add(e, -mean)), axis=1), -0.5)


def test_leapfrog_without_force_or_momentum_stays_put(rng):
    eps = rng.normal(size=(4, 3))
    e1, r1, div, _, _ = hmc.leapfrog(flat, eps, np.zeros((4, 3)), np.full(3, 0.1), 5)
    np.testing.assert_array_equal(e1.value, eps)
    np.testing.assert_array_equal(r1.value, 0.0)
    assert not div.any()


def test_leapfrog_without_force_drifts_in_a_straight_line(rng):
    eps, r = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    step, mass = np.array([0.1, 0.2, 0.05]), np.array([1.0, 2.0, 0.5])
    e1, r1, _, _, _ = hmc.leapfrog(flat, eps, r, step, 5, mass=mass)
    np.testing.assert_allclose(e1.value, eps + 5 * step * r / mass, rtol=1e-12)
    np.testing.assert_allclose(r1.value, r)


def test_harmonic_oscillator_conserves_energy(rng):
    eps, r = rng.normal(size=(20, 1)), rng.normal(size=(20, 1))
    e1, r1, _, lp0, lp1 = hmc.leapfrog(std_normal, eps, r, np.array([0.01]), 100)
    drift = hmc.hamiltonian(lp1, r1) - hmc.hamiltonian(lp0, r)
    assert np.max(np.abs(drift)) < 1e-3


def test_leapfrog_is_reversible(rng):
    target = hmc.make_toy_density("wave")
    eps, r = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    step = np.array([0.05, 0.03])
    e1, r1, _, _, _ = hmc.leapfrog(target, eps, r, step, 5)
    e2, r2, _, _, _ = hmc.leapfrog(target, e1.value, -r1.value, step, 5)
    np.testing.assert_allclose(e2.value, eps, atol=1e-8)
    np.testing.assert_allclose(-r2.value, r, atol=1e-8)


def test_non_finite_gradient_flags_divergence_without_raising(rng):
    def blowup(e):
        return ad.mul(ad.sum(ad.log(ad.square(e)), axis=1), 1.0)

    eps = np.array([[0.0, 1.0], [1.0, 1.0]])
    with np.errstate(divide="ignore", invalid="ignore"):
        _, _, div, _, _ = hmc.leapfrog(blowup, eps, np.zeros((2, 2)), np.full(2, 0.1), 3)
    assert div[0] and not div[1]


def test_identical_proposal_is_always_accepted(rng):
    e = ad.constant(rng.normal(size=(50, 2)))
    h = rng.normal(size=50)
    _, accepted, prob, _ = hmc.mh_accept(e, e, h, h, rng)
    assert np.all(prob == 1.0) and accepted.all()


def test_minus_infinity_proposal_is_always_rejected(rng):
    e0, e1 = ad.constant(np.zeros((50, 2))), ad.constant(np.ones((50, 2)))
    h1 = hmc.hamiltonian(np.full(50, -np.inf), np.zeros((50, 2)))
    kept, accepted, prob, div = hmc.mh_accept(e0, e1, np.zeros(50), h1, rng)
    assert not accepted.any() and np.all(prob == 0.0) and div.all()
    np.testing.assert_array_equal(kept.value, 0.0)


def test_acceptance_probability_is_metropolis(rng):
    h0, h1 = np.zeros(200_000), np.full(200_000, 0.7)
    e = ad.constant(np.zeros((200_000, 1)))
    _, accepted, prob, _ = hmc.mh_accept(e, e, h0, h1, rng)
    assert prob[0] == pytest.approx(math.exp(-0.7))
    assert abs(accepted.mean() - math.exp(-0.7)) < 4 * math.sqrt(0.25 / 200_000)


def test_chain_recovers_standard_normal_moments():
    rng = np.random.default_rng(0)
    eps0 = rng.normal(2.0, 0.5, size=(10_000, 2))
    eps, st_ = hmc.run_chain(std_normal, eps0, np.full((30, 2), 0.3), 5, rng)
    x = eps.value
    assert np.all(np.abs(x.mean(0)) < 0.05)
    assert np.all(np.abs(x.var(0) - 1.0) < 0.1)
    assert 0.5 < st_.acceptance_rate <= 1.0


def test_stationary_histogram_passes_chi_square():
    rng = np.random.default_rng(5)
    eps, _ = hmc.run_chain(std_normal, rng.normal(size=(100_000, 1)), np.full((10, 1), 0.9), 5, rng)
    edges = stats.norm.ppf(np.linspace(0, 1, 51))
    counts, _ = np.histogram(eps.value[:, 0], bins=edges)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_zero_length_chain_returns_start(rng):
    eps0 = rng.normal(size=(5, 3))
    eps, st_ = hmc.run_chain(std_normal, eps0, np.zeros((0, 3)), 5, rng)
    np.testing.assert_array_equal(eps.value, eps0)
    assert np.isnan(st_.acceptance_rate)


def test_vanishing_inflation_starts_at_the_mean(rng):
    params = hmc.HmcParams(2, 2, seed=0)
    params.log_inflation.value = np.array([-60.0])
    eps0 = hmc.toy_initial_states((0.3, -1.0), (1.0, 1.0), params, rng, 20)
    np.testing.assert_allclose(eps0.value, np.tile([0.3, -1.0], (20, 1)), atol=1e-20)


def test_cost_per_proposal(rng):
    counter = hmc.EvalCounter()
    hmc.run_chain(std_normal, rng.normal(size=(3, 2)), np.full((4, 2), 0.1), 7, rng, counter=counter)
    assert counter.proposals == 4
    assert counter.grad_evals_per_proposal == 2 * 7
    assert counter.density_evals == 2 * 4


@settings(max_examples=30, deadline=None)
@given(T=st.integers(0, 6), M=st.integers(1, 5), seed=st.integers(0, 1000))
def test_step_initialisation_is_in_range(T, M, seed):
    params = hmc.HmcParams(T, M, seed=seed)
    steps = params.step_sizes().value
    assert steps.shape == (T, M)
    assert np.all((steps >= 0.05) & (steps <= 0.2))
    assert np.all(params.inflation().value == 1.0)


def test_invalid_sizes_are_rejected():
    with pytest.raises(ContractError):
        hmc.HmcParams(2, 0)
    with pytest.raises(ContractError):
        hmc.HmcParams(2, 2, step_range=(0.0, 0.1))


def _objective_of(log_step, seed):
    rng = np.random.default_rng(seed)
    target = hmc.make_toy_density("wave")
    eps0 = rng.normal(size=(8, 2)) * 0.5
    step = ad.exp(log_step if isinstance(log_step, ad.Node) else ad.constant(log_step))
    eps, _ = hmc.run_chain(target, eps0, step, 3, rng, create_graph=True)
    return ad.mean(target(eps))


def test_objective_gradient_in_step_sizes_matches_finite_differences(rng):
    phi0 = np.log(rng.uniform(0.05, 0.2, size=(3, 2)))
    phi = ad.variable(phi0)
    (g,) = ad.grad(_objective_of(phi, 3), [phi])
    numeric = central_difference(lambda p: float(_objective_of(p.reshape(3, 2), 3).value), phi0.ravel(), h=1e-6)
    assert relative_error(g.value.ravel(), numeric) < 1e-3


def _tiny_model(rng):
    ds, _ = synth_mixed("linear-gaussian", 20, seed=0, d=3)
    st_ = Standardizer.fit(ds)
    ms = [MarginalVae(ft, d, st_.x_loc[d], st_.x_scale[d], hidden=8, seed=0) for d, ft in enumerate(ds.feature_types)]
    model = HierModel(ds.feature_types, ds.target_type, MarginalBank(ms), dims=(2, 1), hidden=8, seed=0,
                      y_loc=st_.y_loc, y_scale=st_.y_scale)
    return model, make_batch(ds, ms, st_, rng=rng)


def test_zero_length_objective_is_the_proposal_joint(rng):
    model, batch = _tiny_model(rng)
    params = hmc.HmcParams(0, model.M)
    obj, _ = hmc.hmc_objective(model, batch, params, np.random.default_rng(4))
    eps0, _, _ = hmc.proposal(model, batch, params, np.random.default_rng(4))
    assert float(obj.value) == pytest.approx(float(np.mean(model.log_joint(eps0.value, batch).value)), rel=1e-12)


def test_objective_gradient_skips_encoder_and_inflation(rng):
    model, batch = _tiny_model(rng)
    params = hmc.HmcParams(2, model.M)
    obj, _ = hmc.hmc_objective(model, batch, params, rng)
    psi = list(model.psi().values())
    grads = ad.grad(obj, psi + [params.log_inflation, params.log_step])
    assert all(np.all(g.value == 0) for g in grads[:-1])
    assert np.any(grads[-1].value != 0)


def test_wave_tuning_raises_the_objective():
    density = hmc.make_toy_density("wave")
    before = hmc.HmcParams(5, 2, groups=np.arange(2), seed=0)
    tuned, _ = hmc.tune_toy(density, T=5, steps=500, seed=0)
    est = []
    for params in (before, tuned):
        samples, _ = hmc.toy_samples(density, params, (0.0, 0.0), (0.1, 0.1), 1000, seed=9)
        est.append(density.log_prob_numpy(samples).mean())
    assert est[1] > est[0]


def _sksd_numpy(x, score):
    return float(hmc.sksd(ad.constant(x), ad.constant(score)).value)


def test_sksd_is_near_zero_for_exact_samples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1000, 2))
    value = _sksd_numpy(x, -x)
    null = [_sksd_numpy(y, -y) for y in (rng.normal(size=(1000, 2)) for _ in range(20))]
    assert abs(value) < 3 * np.std(null, ddof=1)


def test_sksd_detects_shifted_samples():
    rng = np.random.default_rng(1)
    x = rng.normal(5.0, 1.0, size=(200, 2))
    null = [_sksd_numpy(y, -y) for y in (rng.normal(size=(200, 2)) for _ in range(100))]
    assert _sksd_numpy(x, -x) > np.quantile(null, 0.99)


def test_sksd_duplication_only_adds_self_pairs(rng):
    x = rng.normal(size=(40, 2))
    s = -x
    h2 = np.array([0.7, 1.3])
    n = 40
    one = float(hmc.sksd(x, s, bandwidth=h2).value)
    two = float(hmc.sksd(np.concatenate([x, x]), np.concatenate([s, s]), bandwidth=h2).value)
    self_pairs = np.sum(s**2 + 1.0 / h2)
    assert two == pytest.approx((4 * n * (n - 1) * one + 2 * self_pairs) / (2 * n * (2 * n - 1)), rel=1e-10)


def test_sksd_needs_two_samples():
    with pytest.raises(ContractError):
        hmc.sksd(np.zeros((1, 2)), np.zeros((1, 2)))


def test_sksd_gradient_reaches_inflation(rng):
    params = hmc.HmcParams(2, 2, groups=np.arange(2), seed=0)
    density = hmc.make_toy_density("dual-moon")
    eps0 = hmc.toy_initial_states((0.5, 0.0), (0.1, 0.1), params, rng, 30)
    eps, _ = hmc.run_chain(density, eps0, params.step_sizes(), 3, rng, create_graph=True)
    (g,) = ad.grad(ad.sum(density(eps)), [eps], create_graph=True)
    (gs,) = ad.grad(hmc.sksd(eps, g), [params.log_inflation])
    assert np.all(np.isfinite(gs.value)) and np.any(gs.value != 0)


@pytest.mark.parametrize("name", hmc.TOY_NAMES)
def test_toy_gradient_vanishes_at_origin(name):
    density = hmc.make_toy_density(name)
    z = ad.variable(np.zeros((1, 2)))
    (g,) = ad.grad(ad.sum(density(z)), [z])
    np.testing.assert_allclose(g.value, 0.0, atol=1e-6)


@pytest.mark.parametrize("name", hmc.TOY_NAMES)
def test_toy_density_is_finite_on_a_grid(name):
    g = np.linspace(-6, 6, 100)
    zz = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    assert np.all(np.isfinite(hmc.make_toy_density(name).log_prob_numpy(zz)))


def _grid_mass(density, h):
    g = np.arange(-8, 8, h) + h / 2
    total = 0.0
    for row in np.array_split(g, 8):
        zz = np.stack(np.meshgrid(row, g, indexing="ij"), axis=-1).reshape(-1, 2)
        total += np.exp(density.log_prob_numpy(zz)).sum() * h * h
    return total


@pytest.mark.parametrize("name", hmc.TOY_NAMES)
def test_toy_mass_is_stable_under_grid_refinement(name):
    density = hmc.make_toy_density(name)
    coarse, fine = _grid_mass(density, 0.01), _grid_mass(density, 0.005)
    assert np.isfinite(coarse) and abs(coarse - fine) / fine < 1e-3


def test_dual_moon_modes_hold_equal_mass():
    density = hmc.make_toy_density("dual-moon")
    g = np.arange(-8, 8, 0.01) + 0.005
    zz = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    w = np.exp(density.log_prob_numpy(zz))
    right = w[zz[:, 0] > 0].sum() / w.sum()
    assert right == pytest.approx(0.5, abs=1e-6)


def test_unknown_toy_name():
    with pytest.raises(ConfigurationError):
        hmc.make_toy_density("banana")


def test_posterior_sampling_without_hmc_is_encoder_draws(rng):
    model, batch = _tiny_model(rng)
    params = hmc.HmcParams(3, model.M)
    a, st_ = hmc.sample_posterior(model, batch, params, np.random.default_rng(2), use_hmc=False)
    b, _, _ = hmc.proposal(model, batch, params, np.random.default_rng(2), inflate=False)
    np.testing.assert_allclose(a, b.value)
    assert not st_.accept_prob
    c, st_ = hmc.sample_posterior(model, batch, params, np.random.default_rng(2), use_hmc=True, chunk=7)
    assert c.shape == a.shape and len(st_.accept_prob) == 3 * 3
