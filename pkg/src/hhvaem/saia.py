"""Sequential active information acquisition with a histogram mutual-information reward."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import likelihoods as lk
from .data import MixedDataset
from .errors import ContractError
from .harness import log_mean_exp, predictive_point
from .hier import make_batch

logger = logging.getLogger(__name__)

POLICIES = ("mi", "random", "gaussian")
CURVE_COLUMNS = ("step", "rmse", "nll", "wallclock_seconds")


@dataclass
class RewardEstimate:
    value: float
    degenerate: bool = False


@dataclass
class JointSamples:
    """Draws from ``p(x, y | x_O)``: ``x`` is ``(R, N, D)`` in data space, ``y`` is ``(R, N)``."""

    x: np.ndarray
    y: np.ndarray
    eps: np.ndarray


def _codes(values, bins, classes):
    """Bin indices along the last axis plus the number of bins and a degeneracy flag per row.

    Continuous axes use ``bins`` equal-width bins spanning each row's sample
    range; discrete axes (``classes`` given) use their native classes.
    """
    values = np.asarray(values, dtype=np.float64)
    if classes is not None:
        codes = values.astype(np.int64)
        if codes.min(initial=0) < 0 or codes.max(initial=0) >= classes:
            raise ContractError(f"class codes must lie in [0, {classes})")
        degenerate = np.all(codes == codes[..., :1], axis=-1)
        return codes, int(classes), degenerate
    lo = values.min(axis=-1, keepdims=True)
    hi = values.max(axis=-1, keepdims=True)
    width = hi - lo
    degenerate = width[..., 0] <= 0
    scaled = (values - lo) / np.where(width > 0, width, 1.0) * bins
    codes = np.clip(np.floor(scaled).astype(np.int64), 0, bins - 1)
    return codes, int(bins), degenerate


def _mi_from_codes(ca, cb, na, nb):
    """Plug-in MI (nats) of the joint histogram of code pairs, one value per leading row."""
    ca, cb = np.atleast_2d(ca), np.atleast_2d(cb)
    R, N = ca.shape
    cells = na * nb
    flat = (np.arange(R)[:, None] * cells + ca * nb + cb).ravel()
    joint = np.bincount(flat, minlength=R * cells).reshape(R, na, nb) / N
    pa = joint.sum(axis=2, keepdims=True)
    pb = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * (np.log(joint) - np.log(pa) - np.log(pb)), 0.0)
    return np.maximum(terms.sum(axis=(1, 2)), 0.0)


def histogram_mi(a, b, bins=20, a_classes=None, b_classes=None):
    """Histogram estimate of ``I(a; b)`` from paired samples.

    Parameters
    ----------
    a, b : array_like, shape (N,)
    bins : int
        Equal-width bins for continuous axes.
    a_classes, b_classes : int, optional
        Number of native classes when the axis is discrete (values are class codes).

    Returns
    -------
    RewardEstimate
        ``degenerate`` is set, and the value is 0, when either axis has a
        single distinct value.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ContractError(f"need two equally long sample vectors with >=2 entries, got {a.shape} and {b.shape}")
    if bins < 1:
        raise ContractError("bins must be positive")
    ca, na, da = _codes(a, bins, a_classes)
    cb, nb, db = _codes(b, bins, b_classes)
    if da or db:
        return RewardEstimate(0.0, True)
    return RewardEstimate(float(_mi_from_codes(ca, cb, na, nb)[0]), False)


def _classes(ftype):
    if ftype.kind == "binary":
        return 2
    if ftype.kind == "categorical":
        return ftype.K
    return None


def _hide_target(dataset):
    return dataset.with_masks(dataset.x_mask, np.zeros(dataset.n))


def sample_joint(tm, dataset, n_samples, rng, use_hmc=None):
    """Sample ``(x, y) ~ p(x, y | x_O)`` for each row of ``dataset``.

    The latent posterior is sampled with the target hidden (HMC when the
    run uses it), ``z`` is drawn from the dependency decoder and every
    feature is sampled from its marginal decoder; ``y`` comes from the
    predictor. All features share the same ``eps`` draws.
    """
    hidden = _hide_target(dataset)
    batch = tm.batch(hidden)
    eps, rep, _ = tm.posterior(batch, n_samples, rng, use_hmc=use_hmc)
    _, zm, ypar = tm.model.decode_numpy(eps, rep)
    z = zm + math.sqrt(lk.NOISE_VAR) * rng.standard_normal(zm.shape)
    R, D = dataset.n, dataset.d
    x = np.zeros((R * n_samples, D))
    for d, m in enumerate(tm.marginals):
        x[:, d] = m.sample_x(z[:, d], rng)
    y = lk.sample(tm.target_type, ypar, rng, loc=tm.model.y_loc, scale=tm.model.y_scale)
    return JointSamples(x.reshape(R, n_samples, D), np.asarray(y).reshape(R, n_samples), eps)


def _mi_axis(samples, ftype, bins):
    """Codes for one feature/target column of ``(R, N)`` samples."""
    k = _classes(ftype)
    if ftype.kind == "positive":
        samples = np.log(samples)
    return _codes(samples, bins, k)


def reward_all(tm, dataset, rng, n_samples=1000, bins=20, candidates=None):
    """MI reward ``I(x_i; y | x_O)`` for every feature of every row.

    Returns ``(rewards, degenerate)`` arrays of shape ``(R, D)``; entries
    outside ``candidates`` (default: unobserved cells) are NaN / False.
    """
    cand = (dataset.x_mask == 0) if candidates is None else np.asarray(candidates, dtype=bool)
    js = sample_joint(tm, dataset, n_samples, rng)
    cy, ny, dy = _mi_axis(js.y, tm.target_type, bins)
    rewards = np.full(cand.shape, np.nan)
    degenerate = np.zeros(cand.shape, dtype=bool)
    for d, ft in enumerate(tm.feature_types):
        rows = cand[:, d]
        if not rows.any():
            continue
        cx, nx, dx = _mi_axis(js.x[rows, :, d], ft, bins)
        mi = _mi_from_codes(cx, cy[rows], nx, ny)
        flag = dx | dy[rows]
        rewards[rows, d] = np.where(flag, 0.0, mi)
        degenerate[rows, d] = flag
    return rewards, degenerate


def _encoder_moments(tm, dataset):
    mu, sigma = tm.model.encode_stacked(make_batch(dataset, tm.marginals, tm.standardizer, sample_codes=False))
    return mu.value, sigma.value


def _gauss_kl(m1, s1, m2, s2):
    return np.sum(np.log(s2 / s1) + (s1**2 + (m1 - m2) ** 2) / (2 * s2**2) - 0.5, axis=-1)


def reward_latent_kl(tm, dataset, rng, n_samples=100, candidates=None):
    """Latent-space information gain with Gaussian encoder posteriors.

    For a candidate ``x_i`` the reward is
    ``E[KL(q(eps | x_O, x_i, y) || q(eps | x_O, x_i))] - E[KL(q(eps | x_O, y) || q(eps | x_O))]``
    with ``(x_i, y)`` drawn from the model. Baseline policy for comparison
    with the MI reward.
    """
    from . import autodiff as ad

    cand = (dataset.x_mask == 0) if candidates is None else np.asarray(candidates, dtype=bool)
    js = sample_joint(tm, dataset, n_samples, rng)
    R, N, D = js.x.shape
    base = dataset.subset(np.repeat(np.arange(R), N))
    ys = js.y.reshape(-1)
    rewards = np.full(cand.shape, np.nan)
    with ad.no_grad():
        m0, s0 = _encoder_moments(tm, _hide_target(base))
        withy = MixedDataset(base.x, base.x_mask, ys, np.ones(R * N), base.feature_types, base.target_type,
                             base.names, base.target_name, base.labels)
        m1, s1 = _encoder_moments(tm, withy)
        baseline = _gauss_kl(m1, s1, m0, s0).reshape(R, N).mean(axis=1)
        for d in range(D):
            rows = np.repeat(cand[:, d], N)
            if not rows.any():
                continue
            x = base.x[rows].copy()
            x[:, d] = js.x[:, :, d].reshape(-1)[rows]
            xm = base.x_mask[rows].copy()
            xm[:, d] = 1.0
            sub = base.subset(np.flatnonzero(rows))
            without = MixedDataset(x, xm, sub.y, np.zeros(x.shape[0]), sub.feature_types, sub.target_type,
                                   sub.names, sub.target_name, sub.labels)
            withy = MixedDataset(x, xm, ys[rows], np.ones(x.shape[0]), sub.feature_types, sub.target_type,
                                 sub.names, sub.target_name, sub.labels)
            ma, sa = _encoder_moments(tm, without)
            mb, sb = _encoder_moments(tm, withy)
            kl = _gauss_kl(mb, sb, ma, sa).reshape(-1, N).mean(axis=1)
            rewards[cand[:, d], d] = kl - baseline[cand[:, d]]
    return rewards


def prediction_metrics(tm, dataset, truth_y, rng, k=50):
    """``(rmse, nll)`` of target predictions from the observed features.

    ``rmse`` is in standardized model space for continuous targets and is
    the error rate for discrete ones. ``nll`` uses log-mean-exp over ``k``
    posterior draws.
    """
    hidden = _hide_target(dataset)
    eps, rep, _ = tm.posterior(tm.batch(hidden), k, rng)
    _, _, ypar = tm.model.decode_numpy(eps, rep)
    n = dataset.n
    tt = tm.target_type
    ll = lk.log_prob_numpy(tt, ypar, np.repeat(truth_y, k), loc=tm.model.y_loc, scale=tm.model.y_scale)
    nll = float(-np.mean(log_mean_exp(ll.reshape(n, k), axis=1)))
    point = predictive_point(tm, ypar.reshape((n, k) + ypar.shape[1:]))
    if tt.continuous:
        a = lk.to_model_space(tt, truth_y, tm.model.y_loc, tm.model.y_scale)
        b = lk.to_model_space(tt, point, tm.model.y_loc, tm.model.y_scale)
        return float(np.sqrt(np.mean((a - b) ** 2))), nll
    return float(np.mean(point != truth_y)), nll


@dataclass
class AcquisitionResult:
    curve: list
    order: np.ndarray

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CURVE_COLUMNS)
            for point in self.curve:
                writer.writerow([point[c] for c in CURVE_COLUMNS])


def choose(tm, dataset, available, policy, rng, n_samples=1000, bins=20):
    """One acquisition decision per row; ``-1`` where nothing is available."""
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    R = dataset.n
    picks = np.full(R, -1)
    has = available.any(axis=1)
    if not has.any():
        return picks
    if policy == "random":
        for r in np.flatnonzero(has):
            picks[r] = rng.choice(np.flatnonzero(available[r]))
        return picks
    if policy == "mi":
        rewards, _ = reward_all(tm, dataset, rng, n_samples, bins, candidates=available)
    else:
        rewards = reward_latent_kl(tm, dataset, rng, max(1, n_samples // 10), candidates=available)
    scores = np.where(available, rewards, -np.inf)
    picks[has] = np.argmax(scores[has], axis=1)
    return picks


def acquisition_loop(tm, truth, policy="mi", seed=0, n_samples=1000, bins=20, k=50, max_steps=None):
    """Greedy feature acquisition starting from an empty observation set.

    Parameters
    ----------
    tm : TrainedModel
    truth : MixedDataset
        Test rows; only cells observed here can be acquired. The target is
        used for scoring only.
    policy : {"mi", "random", "gaussian"}
    max_steps : int, optional
        Defaults to ``D`` acquisitions, giving ``D + 1`` curve points.

    Returns
    -------
    AcquisitionResult
        ``curve`` rows carry ``step, rmse, nll, wallclock_seconds``;
        ``order[r, s]`` is the feature acquired by row ``r`` at step ``s + 1``.
    """
    rng = np.random.default_rng([seed, 7])
    R, D = truth.x.shape
    steps = D if max_steps is None else min(int(max_steps), D)
    mask = np.zeros((R, D))
    truth_x, truth_y = truth.filled()
    rows_y = truth.y_mask > 0
    if not rows_y.any():
        raise ContractError("acquisition needs rows with an observed target for scoring")
    order = np.full((R, steps), -1)
    start = time.perf_counter()
    curve = []

    def record(step):
        current = truth.with_masks(mask, np.zeros(R))
        rmse, nll = prediction_metrics(tm, current.subset(rows_y), truth_y[rows_y], rng, k=k)
        curve.append({"step": step, "rmse": rmse, "nll": nll, "wallclock_seconds": time.perf_counter() - start})
        logger.info("acquisition step %d rmse %.4f nll %.4f", step, rmse, nll)

    record(0)
    for s in range(steps):
        current = truth.with_masks(mask, np.zeros(R))
        available = (truth.x_mask > 0) & (mask == 0)
        picks = choose(tm, current, available, policy, rng, n_samples, bins)
        ok = picks >= 0
        mask[np.flatnonzero(ok), picks[ok]] = 1.0
        order[:, s] = picks
        record(s + 1)
    return AcquisitionResult(curve, order)
