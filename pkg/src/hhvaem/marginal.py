"""Per-feature one-dimensional VAEs that map mixed-type columns to Gaussian codes."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit, logsumexp, softmax

from . import autodiff as ad
from . import likelihoods as lk
from .nn import Adam, Mlp

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-4


class MarginalVae:
    """VAE with a scalar latent for feature ``d``.

    The encoder sees the feature's representation (standardized scalar,
    {0,1}, or one-hot) and outputs the mean and log-std of ``q(z_d|x_d)``.
    The decoder maps ``z_d`` to the natural parameters of the feature's
    likelihood head.
    """

    def __init__(self, ftype, d, loc=0.0, scale=1.0, hidden=16, seed=0):
        self.ftype = ftype
        self.d = int(d)
        self.loc = float(loc)
        self.scale = float(scale)
        self.hidden = int(hidden)
        prefix = f"marginal.{self.d}"
        self.encoder = Mlp((ftype.rep_width, hidden, 2), name=f"{prefix}.enc", seed=[seed, self.d, 0])
        self.decoder = Mlp((1, hidden, ftype.n_params), name=f"{prefix}.dec", seed=[seed, self.d, 1])
        # Set when the column had no observed training cell: q(z|x) is the prior.
        self.fallback = False

    def params(self):
        out = dict(self.encoder.params())
        out.update(self.decoder.params())
        return out

    def representation(self, x, mask):
        """Encoder input with masked cells replaced by a valid placeholder."""
        x = np.where(np.asarray(mask) > 0, x, lk.placeholder(self.ftype))
        return lk.representation(self.ftype, x, self.loc, self.scale)

    def posterior(self, x, mask):
        """Nodes ``(mean, std)`` of ``q(z_d | x_d)`` for a batch, shape ``(n,)`` each."""
        rep = self.representation(x, mask)
        if self.fallback:
            n = rep.shape[0]
            return ad.constant(np.zeros(n)), ad.constant(np.ones(n))
        out = self.encoder(rep)
        mean = out[:, 0]
        std = ad.add(ad.exp(out[:, 1]), STD_FLOOR)
        return mean, std

    def encode(self, x, mask, rng=None, sample=True):
        """Sample ``z_d`` for observed cells; missing cells get ``z_d = 0``.

        Returns ``(z, mean, std)`` as arrays.
        """
        mask = np.asarray(mask, dtype=np.float64)
        with ad.no_grad():
            mean, std = self.posterior(x, mask)
        mean, std = mean.value, std.value
        z = mean
        if sample:
            rng = rng if rng is not None else np.random.default_rng()
            z = mean + std * rng.standard_normal(mean.shape)
        return z * mask, mean * mask, np.where(mask > 0, std, 0.0)

    def decode(self, z):
        """Likelihood-head parameters for latent codes ``z`` (node ``(n,)`` or ``(n, K)``)."""
        z = z if isinstance(z, ad.Node) else ad.constant(np.asarray(z, dtype=np.float64))
        out = self.decoder(ad.reshape(z, (-1, 1)))
        return out if self.ftype.kind == "categorical" else out[:, 0]

    def decode_numpy(self, z):
        with ad.no_grad():
            return self.decode(z).value

    def log_likelihood(self, x, params):
        """Data-space ``log p(x_d | z_d)`` node for in-support ``x``."""
        return lk.log_prob(self.ftype, params, x, loc=self.loc, scale=self.scale)

    def elbo(self, x, mask, rng, n_samples=1):
        """Per-row single-sample ELBO node; exactly zero where ``mask`` is 0."""
        mask = np.asarray(mask, dtype=np.float64)
        xf = np.where(mask > 0, x, lk.placeholder(self.ftype))
        mean, std = self.posterior(xf, mask)
        total = None
        for _ in range(n_samples):
            z = ad.add(mean, ad.mul(std, rng.standard_normal(mean.shape)))
            rec = self.log_likelihood(xf, self.decode(z))
            total = rec if total is None else ad.add(total, rec)
        rec = ad.mul(total, 1.0 / n_samples)
        return ad.mul(ad.add(rec, ad.neg(gaussian_kl(mean, std))), mask)

    def log_evidence(self, x, rng, n_samples=1000):
        """Importance-sampling estimate of ``log p(x_d)`` per value, with ``q(z|x)`` as proposal."""
        x = np.asarray(x, dtype=np.float64)
        with ad.no_grad():
            mean, std = self.posterior(x, np.ones(x.shape[0]))
        mean, std = mean.value, std.value
        z = mean[:, None] + std[:, None] * rng.standard_normal((x.shape[0], n_samples))
        params = self.decode_numpy(z.reshape(-1))
        xs = np.repeat(x, n_samples)
        ll = lk.log_prob_numpy(self.ftype, params, xs, loc=self.loc, scale=self.scale).reshape(z.shape)
        log_prior = -0.5 * z**2 - 0.5 * np.log(2 * np.pi)
        log_q = -0.5 * ((z - mean[:, None]) / std[:, None]) ** 2 - np.log(std[:, None]) - 0.5 * np.log(2 * np.pi)
        w = ll + log_prior - log_q
        return logsumexp(w, axis=1) - np.log(n_samples)

    def sample_x(self, z, rng):
        return lk.sample(self.ftype, self.decode_numpy(z), rng, loc=self.loc, scale=self.scale)

    def point_x(self, z):
        return lk.point_estimate(self.ftype, self.decode_numpy(z), loc=self.loc, scale=self.scale)


def gaussian_kl(mean, std):
    """Closed-form ``KL(N(mean, std^2) || N(0, 1))`` elementwise."""
    var = ad.square(std)
    return ad.mul(ad.add(ad.add(var, ad.square(mean)), ad.add(-1.0, ad.neg(ad.log(var)))), 0.5)


def train_marginals(dataset, standardizer, steps=1000, lr=1e-3, seed=0, batch_size=100, hidden=16, n_samples=1):
    """Stage 1: fit one :class:`MarginalVae` per feature column.

    Each feature uses its own RNG stream keyed by ``(seed, d)`` so results do
    not depend on the order features are trained in. Batches are drawn from
    the column's observed cells only.
    """
    marginals = []
    for d, ft in enumerate(dataset.feature_types):
        vae = MarginalVae(ft, d, standardizer.x_loc[d], standardizer.x_scale[d], hidden=hidden, seed=seed)
        observed = np.flatnonzero(dataset.x_mask[:, d] > 0)
        if observed.size == 0:
            logger.warning("feature %r is never observed; using the prior as its posterior", dataset.names[d])
            vae.fallback = True
            marginals.append(vae)
            continue
        rng = np.random.default_rng([seed, d])
        opt = Adam(vae.params(), lr=lr)
        column = dataset.x[:, d]
        ones = np.ones(min(batch_size, observed.size))
        for step in range(steps):
            idx = rng.choice(observed, size=ones.size, replace=observed.size < batch_size)
            loss = ad.neg(ad.mean(vae.elbo(column[idx], ones, rng, n_samples)))
            opt.minimize(loss)
        marginals.append(vae)
    return marginals


class MarginalBank:
    """All marginal decoders packed into one block-diagonal network.

    ``decode_representation`` maps a ``(n, D)`` latent matrix to the
    expected encoder representation of every feature: model-space mean for
    continuous columns, ``P(x=1)`` for binary ones and class probabilities
    for categorical ones. It is differentiable in ``z`` and treats the
    marginal parameters as constants.
    """

    def __init__(self, marginals):
        self.marginals = list(marginals)
        self.refresh()

    def refresh(self):
        ms = self.marginals
        D = len(ms)
        hid = [m.hidden for m in ms]
        widths = [m.ftype.rep_width for m in ms]
        H, R = sum(hid), sum(widths)
        self.widths = widths
        self.offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
        w0, b0 = np.zeros((D, H)), np.zeros(H)
        w1, b1 = np.zeros((H, R)), np.zeros(R)
        h = 0
        for d, m in enumerate(ms):
            r = self.offsets[d]
            dw0, db0 = m.decoder.weights[0].value, m.decoder.biases[0].value
            dw1, db1 = m.decoder.weights[1].value, m.decoder.biases[1].value
            w0[d, h : h + hid[d]] = dw0[0]
            b0[h : h + hid[d]] = db0
            w1[h : h + hid[d], r : r + widths[d]] = dw1
            b1[r : r + widths[d]] = db1
            h += hid[d]
        self.w0, self.b0, self.w1, self.b1 = w0, b0, w1, b1
        kinds = [m.ftype.kind for m in ms]
        col_kind = np.concatenate([[k] * w for k, w in zip(kinds, widths)]) if ms else np.zeros(0, dtype=str)
        self.cont_cols = (col_kind == "real") | (col_kind == "positive")
        self.bin_cols = col_kind == "binary"
        self.cat_cols = col_kind == "categorical"
        group = np.zeros((R, R))
        for d, m in enumerate(ms):
            if m.ftype.kind == "categorical":
                r = self.offsets[d]
                group[r : r + widths[d], r : r + widths[d]] = 1.0
        self.group = group
        self.rep_width = R

    def logits(self, z):
        z = z if isinstance(z, ad.Node) else ad.constant(z)
        hidden = ad.tanh(ad.add(ad.matmul(z, self.w0), self.b0))
        return ad.add(ad.matmul(hidden, self.w1), self.b1)

    def decode_representation(self, z):
        a = self.logits(z)
        out = ad.mul(a, self.cont_cols.astype(float))
        if self.bin_cols.any():
            out = ad.add(out, ad.mul(ad.sigmoid(a), self.bin_cols.astype(float)))
        if self.cat_cols.any():
            # per-row, per-group softmax with a constant shift for stability
            shift = np.where(self.cat_cols, a.value, -np.inf)
            shift = np.max(np.where(self.group[None, :, :] > 0, shift[:, None, :], -np.inf), axis=2)
            shift = np.where(self.cat_cols, shift, 0.0)
            e = ad.mul(ad.exp(ad.add(a, -shift)), self.cat_cols.astype(float))
            denom = ad.add(ad.matmul(e, self.group), (~self.cat_cols).astype(float))
            out = ad.add(out, ad.mul(e, ad.reciprocal(denom)))
        return out

    def decode_representation_numpy(self, z):
        z = np.asarray(z, dtype=np.float64)
        a = np.tanh(z @ self.w0 + self.b0) @ self.w1 + self.b1
        out = np.where(self.cont_cols, a, 0.0)
        out = np.where(self.bin_cols, expit(a), out)
        for d, m in enumerate(self.marginals):
            if m.ftype.kind == "categorical":
                sl = slice(self.offsets[d], self.offsets[d + 1])
                out[:, sl] = softmax(a[:, sl], axis=1)
        return out
