from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhvaem import autodiff as ad
from hhvaem.data import MixedDataset, Standardizer
from hhvaem.likelihoods import FeatureType
from hhvaem.marginal import MarginalBank, MarginalVae, gaussian_kl, train_marginals


def _column_dataset(values, kind="real", K=1, mask=None):
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.size) if mask is None else mask
    return MixedDataset(
        values[:, None], mask[:, None], np.zeros(values.size), np.zeros(values.size),
        [FeatureType(kind, K, "x1")], FeatureType("real"),
    )


@pytest.fixture(scope="module")
def gaussian_fit():
    rng = np.random.default_rng(0)
    ds = _column_dataset(3.0 + 0.5 * rng.standard_normal(2000))
    st_ = Standardizer.fit(ds)
    (vae,) = train_marginals(ds, st_, steps=1500, lr=1e-2, seed=0)
    return ds, vae


def test_unobserved_cells_contribute_nothing(rng):
    vae = MarginalVae(FeatureType("real"), 0, seed=0)
    x = rng.normal(size=6)
    mask = np.array([1, 0, 1, 0, 0, 1.0])
    elbo = vae.elbo(x, mask, rng)
    assert np.all(elbo.value[mask == 0] == 0.0)
    params = list(vae.params().values())
    grads = ad.grad(ad.sum(vae.elbo(x, np.zeros(6), rng)), params)
    assert all(not g.value.any() for g in grads)


def test_kl_vanishes_at_standard_normal():
    assert float(ad.sum(gaussian_kl(ad.constant(np.zeros(3)), ad.constant(np.ones(3)))).value) == 0.0


def test_elbo_equals_reconstruction_at_prior(rng):
    vae = MarginalVae(FeatureType("real"), 0, seed=0)
    # encoder output (0, log 1) regardless of input
    for w in vae.encoder.weights:
        w.value = np.zeros_like(w.value)
    vae.encoder.biases[-1].value = np.array([0.0, np.log(1.0 - 1e-4)])
    x = rng.normal(size=4)
    elbo = vae.elbo(x, np.ones(4), np.random.default_rng(5)).value
    r = np.random.default_rng(5)
    z = r.standard_normal(4)
    rec = vae.log_likelihood(x, vae.decode(z)).value
    np.testing.assert_allclose(elbo, rec, rtol=1e-12)


def test_missing_cells_encode_to_zero(rng):
    vae = MarginalVae(FeatureType("real"), 0, seed=0)
    z, mean, std = vae.encode(rng.normal(size=5), np.array([1, 0, 1, 0, 1.0]), rng)
    assert z[1] == 0.0 and z[3] == 0.0 and mean[1] == 0.0 and std[3] == 0.0


def test_deterministic_encoding_without_sampling(rng):
    vae = MarginalVae(FeatureType("real"), 0, seed=0)
    x = rng.normal(size=5)
    z, mean, _ = vae.encode(x, np.ones(5), sample=False)
    np.testing.assert_array_equal(z, mean)


def test_elbo_close_to_importance_sampled_evidence(gaussian_fit):
    ds, vae = gaussian_fit
    x = ds.x[:300, 0]
    elbo = np.mean(vae.elbo(x, np.ones(x.size), np.random.default_rng(1), n_samples=20).value)
    evidence = np.mean(vae.log_evidence(x, np.random.default_rng(2), n_samples=10_000))
    assert elbo <= evidence + 0.05
    assert evidence - elbo < 0.3


def test_round_trip_reconstructs_within_posterior_spread(gaussian_fit):
    ds, vae = gaussian_fit
    x = ds.x[:200, 0]
    _, mean, std = vae.encode(x, np.ones(x.size), sample=False)
    recon = vae.point_x(mean)
    # reconstruction error measured in latent units of the posterior
    inside = np.abs(recon - x) / vae.scale < 3 * np.maximum(std, np.sqrt(0.1))
    assert inside.mean() > 0.95


def test_zero_steps_and_determinism():
    rng = np.random.default_rng(0)
    ds = _column_dataset(rng.normal(size=50))
    st_ = Standardizer.fit(ds)
    (untrained,) = train_marginals(ds, st_, steps=0, seed=3)
    fresh = MarginalVae(ds.feature_types[0], 0, st_.x_loc[0], st_.x_scale[0], seed=3)
    for k, v in untrained.params().items():
        np.testing.assert_array_equal(v.value, fresh.params()[k].value)
    (a,) = train_marginals(ds, st_, steps=20, seed=3)
    (b,) = train_marginals(ds, st_, steps=20, seed=3)
    for k, v in a.params().items():
        np.testing.assert_array_equal(v.value, b.params()[k].value)


def test_never_observed_column_falls_back_to_prior(caplog):
    ds = _column_dataset(np.full(5, np.nan), mask=np.zeros(5))
    ds.y = np.arange(5.0)
    with caplog.at_level("WARNING"):
        (vae,) = train_marginals(ds, Standardizer.fit(ds), steps=5)
    assert vae.fallback
    mean, std = vae.posterior(np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(mean.value, 0.0)
    np.testing.assert_array_equal(std.value, 1.0)


def test_lognormal_column_beats_raw_gaussian_fit():
    rng = np.random.default_rng(4)
    x = np.exp(0.2 + 0.8 * rng.standard_normal(2000))
    ds = _column_dataset(x, kind="positive")
    (vae,) = train_marginals(ds, Standardizer.fit(ds), steps=1500, lr=1e-2, seed=0)
    held = np.exp(0.2 + 0.8 * rng.standard_normal(500))
    nll_vae = -np.mean(vae.log_evidence(held, np.random.default_rng(0), n_samples=2000))
    mu, sd = x.mean(), x.std()
    nll_gauss = -np.mean(-0.5 * ((held - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi))
    assert nll_vae < nll_gauss


@pytest.mark.parametrize("kind,K", [("real", 1), ("binary", 2), ("categorical", 3)])
def test_bank_matches_individual_decoders(kind, K, rng):
    ms = [MarginalVae(FeatureType(kind, K), d, seed=d) for d in range(3)]
    bank = MarginalBank(ms)
    z = rng.normal(size=(7, 3))
    rep = bank.decode_representation(ad.constant(z)).value
    np.testing.assert_allclose(rep, bank.decode_representation_numpy(z), rtol=1e-12, atol=1e-14)
    for d, m in enumerate(ms):
        params = m.decode_numpy(z[:, d])
        block = rep[:, bank.offsets[d] : bank.offsets[d + 1]]
        if kind == "real":
            np.testing.assert_allclose(block[:, 0], params, rtol=1e-12)
        elif kind == "binary":
            np.testing.assert_allclose(block[:, 0], 1 / (1 + np.exp(-params)), rtol=1e-12)
        else:
            probs = np.exp(params - params.max(1, keepdims=True))
            np.testing.assert_allclose(block, probs / probs.sum(1, keepdims=True), rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_categorical_bank_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    ms = [MarginalVae(FeatureType("categorical", 4), 0, seed=seed % 7)]
    rep = MarginalBank(ms).decode_representation_numpy(rng.normal(scale=5, size=(5, 1)))
    np.testing.assert_allclose(rep.sum(axis=1), 1.0, rtol=1e-12)
