"""Per-type likelihood heads for real, positive, binary and categorical data.

Every continuous feature lives in a *model space*: positive values are
log-transformed, then (optionally) standardized with ``loc``/``scale``.
Gaussian heads place a fixed-variance Gaussian on that model-space value.
``log_prob`` always returns densities in the original data space, so the
Jacobians of the log and of the standardization are included.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

from . import autodiff as ad
from .errors import ContractError, DomainError

NOISE_VAR = 0.1
KINDS = ("real", "positive", "binary", "categorical")
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FeatureType:
    """Column type. ``K`` is the number of classes for categorical columns."""

    kind: str
    K: int = 1
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown feature kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "categorical" and self.K < 2:
            raise ContractError(f"categorical feature {self.name!r} needs K >= 2, got {self.K}")
        if self.kind == "binary" and self.K not in (1, 2):
            raise ContractError(f"binary feature {self.name!r} has K={self.K}")

    @property
    def continuous(self):
        return self.kind in ("real", "positive")

    @property
    def n_params(self):
        """Width of the natural-parameter vector produced by a decoder head."""
        return self.K if self.kind == "categorical" else 1

    @property
    def rep_width(self):
        """Width of the encoder/predictor representation of one value."""
        return self.n_params


def _check_support(ftype, x):
    x = np.asarray(x, dtype=np.float64)
    label = ftype.name or ftype.kind
    if ftype.kind == "positive":
        bad = ~(x > 0)
    elif ftype.kind == "binary":
        bad = ~np.isin(x, (0.0, 1.0))
    elif ftype.kind == "categorical":
        bad = ~((x == np.round(x)) & (x >= 0) & (x < ftype.K))
    else:
        bad = ~np.isfinite(x)
    if np.any(bad):
        raise DomainError(label, x[bad].flat[0])
    return x


def to_model_space(ftype, x, loc=0.0, scale=1.0):
    """Map data values to the real line (log for positive) and standardize.

    Discrete kinds pass through unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if ftype.kind == "positive":
        return (np.log(x) - loc) / scale
    if ftype.kind == "real":
        return (x - loc) / scale
    return x


def from_model_space(ftype, u, loc=0.0, scale=1.0):
    """Inverse of :func:`to_model_space`; categorical parameter rows decode by argmax."""
    u = np.asarray(u, dtype=np.float64)
    if ftype.kind == "positive":
        return np.exp(u * scale + loc)
    if ftype.kind == "real":
        return u * scale + loc
    if ftype.kind == "categorical" and u.ndim >= 1 and u.shape[-1] == ftype.K:
        return np.argmax(u, axis=-1).astype(np.float64)
    return u


def gaussian_log_prob(mean, x, var):
    """Elementwise ``log N(x; mean, var)`` as a node (``var`` is a constant)."""
    diff = ad.add(x, ad.neg(mean))
    return ad.add(ad.mul(ad.square(diff), -0.5 / var), -0.5 * (_LOG_2PI + math.log(var)))


def log_prob(ftype, params, x, var=NOISE_VAR, loc=0.0, scale=1.0):
    """Log density (or mass) of data-space ``x`` under the head ``params``.

    Parameters
    ----------
    ftype : FeatureType
    params : Node or array
        Gaussian mean in model space with shape ``(n,)``, a binary logit
        ``(n,)``, or categorical logits ``(n, K)``. Scalars are accepted too.
    x : array
        Data-space values with shape ``(n,)`` (or a scalar).
    var : float
        Gaussian variance in model space; 0.1 unless stated otherwise.
    loc, scale : float
        Standardization applied after the log transform.

    Returns
    -------
    Node
        Per-element log probabilities with the shape of ``x``.
    """
    x = _check_support(ftype, x)
    params = ad.constant(params) if not isinstance(params, ad.Node) else params
    if ftype.continuous:
        u = to_model_space(ftype, x, loc, scale)
        out = gaussian_log_prob(params, u, var)
        jac = -math.log(scale)
        if ftype.kind == "positive":
            jac = jac - np.log(x)
        return ad.add(out, jac)
    if ftype.kind == "binary":
        # x*l - softplus(l) = log sigmoid(l) for x=1, log sigmoid(-l) for x=0
        return ad.add(ad.mul(params, x), ad.neg(ad.softplus(params)))
    if params.shape[-1] != ftype.K:
        raise ContractError(f"categorical head has {params.shape[-1]} logits, expected {ftype.K}")
    onehot = one_hot(x, ftype.K)
    picked = ad.sum(ad.mul(params, onehot), axis=-1)
    return ad.add(picked, ad.neg(ad.logsumexp(params, axis=-1)))


def log_prob_numpy(ftype, params, x, var=NOISE_VAR, loc=0.0, scale=1.0):
    """Array version of :func:`log_prob` that skips graph construction and support checks."""
    x = np.asarray(x, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if ftype.continuous:
        u = to_model_space(ftype, x, loc, scale)
        out = -0.5 * (u - params) ** 2 / var - 0.5 * (_LOG_2PI + math.log(var)) - math.log(scale)
        if ftype.kind == "positive":
            out = out - np.log(x)
        return out
    if ftype.kind == "binary":
        return x * params - np.logaddexp(0.0, params)
    lsm = log_softmax(params, axis=-1)
    idx = x.astype(np.int64)
    return np.take_along_axis(lsm, idx[..., None], axis=-1)[..., 0]


def one_hot(x, K):
    x = np.asarray(x)
    out = np.zeros(x.shape + (K,))
    idx = x.astype(np.int64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def sample(ftype, params, rng, var=NOISE_VAR, loc=0.0, scale=1.0):
    """Draw data-space values from the head. Deterministic given ``rng``."""
    params = params.value if isinstance(params, ad.Node) else np.asarray(params, dtype=np.float64)
    if ftype.continuous:
        u = params + math.sqrt(var) * rng.standard_normal(params.shape)
        return from_model_space(ftype, u, loc, scale)
    if ftype.kind == "binary":
        return (rng.random(params.shape) < expit(params)).astype(np.float64)
    probs = np.exp(log_softmax(params, axis=-1))
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(params.shape[:-1] + (1,))
    return np.minimum(np.sum(cdf < u, axis=-1), ftype.K - 1).astype(np.float64)


def point_estimate(ftype, params, loc=0.0, scale=1.0):
    """Deterministic data-space decode: model-space mean, binary mode, categorical argmax.

    For positive features this is ``exp`` of the model-space mean (the median
    of the log-normal), which is what RMSE on the log scale rewards.
    """
    params = params.value if isinstance(params, ad.Node) else np.asarray(params, dtype=np.float64)
    if ftype.continuous:
        return from_model_space(ftype, params, loc, scale)
    if ftype.kind == "binary":
        return (params > 0).astype(np.float64)
    return np.argmax(params, axis=-1).astype(np.float64)


def representation(ftype, x, loc=0.0, scale=1.0):
    """Encoder input for observed data values: standardized scalar, {0,1}, or one-hot.

    Returns an ``(n, rep_width)`` array. Missing values must be filled
    with a valid placeholder by the caller and masked afterwards.
    """
    x = np.asarray(x, dtype=np.float64)
    if ftype.kind == "categorical":
        return one_hot(x, ftype.K)
    return to_model_space(ftype, x, loc, scale)[..., None]


def placeholder(ftype):
    """A value inside the support, used to zero-fill masked cells before computing."""
    return 1.0 if ftype.kind == "positive" else 0.0
