"""Hierarchical dependency VAE over the marginal codes.

Latents are kept in reparameterized form: every layer has a standard-normal
``eps_l`` and the generative path builds ``h_L = eps_L`` and
``h_l = f_mu_l(h_{l+1}) + f_sigma_l(h_{l+1}) * eps_l``. Inference (and HMC)
act on the stacked ``eps`` matrix of shape ``(batch, M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import likelihoods as lk
from .errors import ContractError, ShapeError
from .nn import Mlp

SIGMA_FLOOR = 1e-4
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Batch:
    """Model-ready arrays for a set of rows.

    ``z`` holds zero-filled marginal codes, ``x_rep`` the zero-filled
    feature representation (``x_rep_mask`` repeats each feature mask over
    its representation columns), ``y`` the placeholder-filled data-space
    target and ``y_rep`` its zero-filled representation.
    """

    z: np.ndarray
    x_mask: np.ndarray
    x_rep: np.ndarray
    x_rep_mask: np.ndarray
    y: np.ndarray
    y_rep: np.ndarray
    y_mask: np.ndarray

    @property
    def n(self):
        return self.z.shape[0]

    def encoder_input(self):
        return np.concatenate([self.z, self.x_mask, self.y_rep, self.y_mask[:, None]], axis=1)

    def subset(self, idx):
        return Batch(*(np.asarray(a)[idx] for a in self.__dict__.values()))

    def repeat(self, k):
        """Each row repeated ``k`` times consecutively (row-major blocks)."""
        return Batch(*(np.repeat(np.asarray(a), k, axis=0) for a in self.__dict__.values()))


def make_batch(dataset, marginals, standardizer, rng=None, sample_codes=True):
    """Encode a :class:`~hhvaem.data.MixedDataset` into a :class:`Batch`.

    Marginal codes are posterior samples when ``sample_codes`` (training)
    and posterior means otherwise.
    """
    from .data import encoder_representation, target_representation

    n, D = dataset.x.shape
    z = np.zeros((n, D))
    for d, m in enumerate(marginals):
        codes, means, _ = m.encode(dataset.x[:, d], dataset.x_mask[:, d], rng=rng, sample=sample_codes)
        z[:, d] = codes if sample_codes else means
    x_rep, x_rep_mask = encoder_representation(dataset, standardizer)
    _, yf = dataset.filled()
    y_rep = target_representation(dataset, standardizer)
    return Batch(z, dataset.x_mask.copy(), x_rep, x_rep_mask, yf, y_rep, dataset.y_mask.copy())


def kl_balance(kls, dims):
    """Warm-up KL weights ``gamma_l`` proportional to ``d_l * E[KL_l]``, summing to one.

    If every KL is zero the weights are uniform.

    >>> [float(g) for g in kl_balance([1.0, 2.0], [10, 5])]
    [0.5, 0.5]
    """
    kls = np.asarray(kls, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.float64)
    if kls.shape != dims.shape:
        raise ShapeError("kl_balance", kls.shape, dims.shape)
    if np.any(kls < 0):
        raise ContractError("KL expectations must be non-negative")
    w = dims * kls
    total = w.sum()
    if not total > 0:
        return np.full(len(kls), 1.0 / len(kls))
    return w / total


def _gauss_logpdf(x, mean, std):
    """Elementwise ``log N(x; mean, std^2)`` with node ``std``."""
    zscore = ad.mul(ad.add(x, ad.neg(mean)), ad.reciprocal(std))
    return ad.add(ad.add(ad.mul(ad.square(zscore), -0.5), ad.neg(ad.log(std))), -0.5 * _LOG_2PI)


def diag_gaussian_kl(mean, std):
    """Per-row ``KL(N(mean, diag std^2) || N(0, I))``."""
    var = ad.square(std)
    terms = ad.add(ad.add(var, ad.square(mean)), ad.add(-1.0, ad.neg(ad.log(var))))
    return ad.mul(ad.sum(terms, axis=1), 0.5)


def _positive(a):
    return ad.add(ad.softplus(a), SIGMA_FLOOR)


class HierModel:
    """Encoder ``psi`` and generative parameters ``theta`` of the dependency VAE.

    Parameters
    ----------
    feature_types : list of FeatureType
    target_type : FeatureType
    bank : MarginalBank
        Frozen marginal decoders used to impute missing features for the
        predictor input.
    dims : sequence of int
        Latent sizes ``m_1..m_L`` (bottom to top).
    hidden : int
        Width of every hidden layer.
    y_loc, y_scale : float
        Standardization of a continuous target.
    """

    def __init__(self, feature_types, target_type, bank, dims=(10, 5), hidden=256, seed=0, y_loc=0.0, y_scale=1.0):
        self.feature_types = list(feature_types)
        self.y_loc = float(y_loc)
        self.y_scale = float(y_scale)
        self.target_type = target_type
        self.bank = bank
        self.dims = tuple(int(m) for m in dims)
        if not self.dims or min(self.dims) < 1:
            raise ContractError(f"invalid latent dims {dims}")
        self.hidden = int(hidden)
        self.L = len(self.dims)
        self.M = sum(self.dims)
        self.D = len(self.feature_types)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        y_rep = target_type.rep_width
        d_in = 2 * self.D + y_rep + 1
        H = self.hidden
        self.enc_path, self.enc_heads, self.gen = [], [], []
        width = d_in
        for l, m in enumerate(self.dims):
            self.enc_path.append(Mlp((width, H), out_activation="tanh", name=f"dep.encoder.path{l}", seed=[seed, 0, l]))
            self.enc_heads.append(Mlp((H, 2 * m), name=f"dep.encoder.head{l}", seed=[seed, 1, l]))
            width = H
        for l in range(self.L - 1):
            self.gen.append(Mlp((self.dims[l + 1], H, 2 * self.dims[l]), name=f"dep.gen.layer{l}", seed=[seed, 2, l]))
        self.decoder = Mlp((self.dims[0], H, self.D), name="dep.gen.decoder", seed=[seed, 3])
        self.predictor = Mlp((bank.rep_width + self.dims[0], H, target_type.n_params), name="dep.pred", seed=[seed, 4])

    # -- parameter groups ---------------------------------------------------

    def psi(self):
        out = {}
        for net in self.enc_path + self.enc_heads:
            out.update(net.params())
        return out

    def theta(self):
        out = {}
        for net in self.gen + [self.decoder, self.predictor]:
            out.update(net.params())
        return out

    def params(self):
        out = self.psi()
        out.update(self.theta())
        return out

    def layer_of_dim(self):
        """Layer index of every latent coordinate, shape ``(M,)``."""
        return np.repeat(np.arange(self.L), self.dims)

    def split(self, eps):
        return [ad.getitem(eps, (slice(None), slice(self.offsets[l], self.offsets[l + 1]))) for l in range(self.L)]

    # -- inference ------------------------------------------------------------

    def encode(self, batch):
        """Per-layer ``(mu_l, sigma_l)`` nodes of ``q(eps_l | x_O, y_O)``."""
        r = ad.constant(batch.encoder_input())
        heads = []
        for l in range(self.L):
            r = self.enc_path[l](r)
            out = self.enc_heads[l](r)
            m = self.dims[l]
            mu = ad.getitem(out, (slice(None), slice(0, m)))
            sigma = _positive(ad.getitem(out, (slice(None), slice(m, 2 * m))))
            heads.append((mu, sigma))
        return heads

    def encode_stacked(self, batch):
        """``(mu, sigma)`` concatenated over layers, each ``(n, M)``."""
        heads = self.encode(batch)
        if self.L == 1:
            return heads[0]
        return ad.concat([h[0] for h in heads], axis=1), ad.concat([h[1] for h in heads], axis=1)

    def sample_eps(self, heads, rng, inflation=None):
        """Reparameterized ``eps = mu + s * sigma * noise``; ``inflation`` is per coordinate."""
        mu, sigma = heads if isinstance(heads, tuple) else self._stack(heads)
        scale = sigma if inflation is None else ad.mul(sigma, inflation)
        return ad.add(mu, ad.mul(scale, rng.standard_normal(mu.shape)))

    def _stack(self, heads):
        if len(heads) == 1:
            return heads[0]
        return ad.concat([h[0] for h in heads], axis=1), ad.concat([h[1] for h in heads], axis=1)

    # -- generation -------------------------------------------------------------

    def gen_params(self, l, h_above):
        """``(f_mu_l, f_sigma_l)`` nodes for layer ``l < L-1`` given ``h_{l+1}``."""
        out = self.gen[l](h_above)
        m = self.dims[l]
        return ad.getitem(out, (slice(None), slice(0, m))), _positive(ad.getitem(out, (slice(None), slice(m, 2 * m))))

    def decode_path(self, eps):
        """List ``[h_1, ..., h_L]`` of nodes for a stacked ``eps``."""
        eps = eps if isinstance(eps, ad.Node) else ad.constant(eps)
        if eps.ndim != 2 or eps.shape[1] != self.M:
            raise ShapeError("decode_path", eps.shape, (None, self.M))
        parts = self.split(eps)
        hs = [None] * self.L
        hs[-1] = parts[-1]
        for l in range(self.L - 2, -1, -1):
            mu, sigma = self.gen_params(l, hs[l + 1])
            hs[l] = ad.add(mu, ad.mul(sigma, parts[l]))
        return hs

    def z_mean(self, h1):
        return self.decoder(h1)

    def xhat_representation(self, z_mean, batch):
        """Predictor input: observed representation, decoded means elsewhere."""
        decoded = self.bank.decode_representation(z_mean)
        keep = batch.x_rep_mask
        return ad.add(ad.mul(decoded, 1.0 - keep), batch.x_rep * keep)

    def target_params(self, h1, batch, z_mean=None):
        z_mean = self.z_mean(h1) if z_mean is None else z_mean
        xhat = self.xhat_representation(z_mean, batch)
        out = self.predictor(ad.concat([xhat, h1], axis=1))
        return out if self.target_type.kind == "categorical" else out[:, 0]

    def likelihood_terms(self, h1, batch):
        """Per-row ``log p(z_O | h_1)`` and ``y_mask * log p(y_O | xhat, h_1)``."""
        zm = self.z_mean(h1)
        logpz = ad.mul(lk.gaussian_log_prob(zm, batch.z, lk.NOISE_VAR), batch.x_mask)
        logpz = ad.sum(logpz, axis=1)
        ypar = self.target_params(h1, batch, z_mean=zm)
        logpy = ad.mul(
            lk.log_prob(self.target_type, ypar, batch.y, loc=self.y_loc, scale=self.y_scale), batch.y_mask
        )
        return logpz, logpy

    def log_joint(self, eps, batch):
        """Per-row unnormalized log posterior ``log p(z_O, y_O, eps)`` (shape ``(n,)``)."""
        eps = eps if isinstance(eps, ad.Node) else ad.constant(eps)
        hs = self.decode_path(eps)
        logpz, logpy = self.likelihood_terms(hs[0], batch)
        prior = ad.add(ad.mul(ad.sum(ad.square(eps), axis=1), -0.5), -0.5 * self.M * _LOG_2PI)
        return ad.add(ad.add(logpz, logpy), prior)

    def log_joint_autoregressive(self, h, batch):
        """Per-row log density over the *non-reparameterized* latents ``h``.

        ``log N(h_L; 0, I) + sum_l log N(h_l; f_mu_l(h_{l+1}), f_sigma_l(h_{l+1})^2)``
        plus the same likelihood terms. Used to show why HMC on ``h``
        is badly conditioned.
        """
        h = h if isinstance(h, ad.Node) else ad.constant(h)
        parts = self.split(h)
        total = ad.add(ad.mul(ad.sum(ad.square(parts[-1]), axis=1), -0.5), -0.5 * self.dims[-1] * _LOG_2PI)
        for l in range(self.L - 1):
            mu, sigma = self.gen_params(l, parts[l + 1])
            total = ad.add(total, ad.sum(_gauss_logpdf(parts[l], mu, sigma), axis=1))
        logpz, logpy = self.likelihood_terms(parts[0], batch)
        return ad.add(ad.add(logpz, logpy), total)

    def eps_to_h(self, eps):
        """Stacked ``[h_1, ..., h_L]`` for a stacked ``eps``."""
        hs = self.decode_path(eps)
        return hs[0] if self.L == 1 else ad.concat(hs, axis=1)

    # -- objectives ---------------------------------------------------------------

    def elbo_terms(self, batch, rng, heads=None):
        """``(reconstruction, [KL_l])``: per-row nodes of a single-sample estimate."""
        heads = self.encode(batch) if heads is None else heads
        eps = self.sample_eps(heads, rng)
        hs = self.decode_path(eps)
        logpz, logpy = self.likelihood_terms(hs[0], batch)
        kls = [diag_gaussian_kl(mu, sigma) for mu, sigma in heads]
        return ad.add(logpz, logpy), kls

    def elbo_vi(self, batch, rng, kl_weights=None):
        """Batch-mean ELBO with per-layer KL weights (all ones by default)."""
        rec, kls = self.elbo_terms(batch, rng)
        weights = np.ones(self.L) if kl_weights is None else np.asarray(kl_weights, dtype=np.float64)
        total = rec
        for w, kl in zip(weights, kls):
            total = ad.add(total, ad.mul(kl, -float(w)))
        return ad.mean(total)

    # -- decoding helpers (arrays) ------------------------------------------------

    def decode_numpy(self, eps, batch):
        """``(h1, z_mean, target_params)`` arrays without building a graph."""
        with ad.no_grad():
            hs = self.decode_path(ad.constant(eps))
            zm = self.z_mean(hs[0])
            ypar = self.target_params(hs[0], batch, z_mean=zm)
        return hs[0].value, zm.value, ypar.value

    def impute_xhat(self, h1, batch, marginals, x_observed):
        """Data-space imputation: observed cells copied, missing ones decoded.

        Missing cells use ``h_1 -> E[z | h_1]`` followed by the marginal
        decoder's point estimate (mean for continuous, mode for discrete).
        """
        with ad.no_grad():
            zm = self.z_mean(ad.constant(h1)).value
        out = np.array(x_observed, dtype=np.float64, copy=True)
        for d, m in enumerate(marginals):
            miss = batch.x_mask[:, d] == 0
            if np.any(miss):
                out[miss, d] = m.point_x(zm[miss, d])
        return out
