"""Hamiltonian Monte Carlo with trainable step sizes and proposal inflation.

All chains of a batch run together: positions are ``(n, M)`` nodes and a
target is any callable mapping such a node to per-row log densities
``(n,)``. With ``create_graph=True`` the whole trajectory stays
differentiable, so the step sizes can be learned by backpropagating
through the leapfrog updates (which themselves contain target gradients).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, ContractError
from .nn import Adam

logger = logging.getLogger(__name__)

# A proposal whose energy error exceeds this is treated as divergent.
MAX_ENERGY_ERROR = 1000.0
# Positions beyond this magnitude are frozen and the proposal is rejected.
MAX_ABS_POSITION = 1e6


@dataclass
class EvalCounter:
    """Cost accounting, per chain: target-gradient and endpoint-density evaluations."""

    grad_evals: int = 0
    density_evals: int = 0
    proposals: int = 0

    @property
    def grad_evals_per_proposal(self):
        return self.grad_evals / max(self.proposals, 1)


@dataclass
class ChainStats:
    accept_prob: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    divergent: list = field(default_factory=list)
    final_state: object = None

    @property
    def acceptance_rate(self):
        """Mean Metropolis acceptance probability over proposals and chains."""
        if not self.accept_prob:
            return float("nan")
        return float(np.mean(self.accept_prob))

    @property
    def n_divergent(self):
        return int(sum(np.sum(d) for d in self.divergent))

    def merge(self, other):
        self.accept_prob.extend(other.accept_prob)
        self.accepted.extend(other.accepted)
        self.divergent.extend(other.divergent)
        return self


class HmcParams:
    """Trainable HMC hyperparameters.

    ``log_step`` is the ``(T, M)`` matrix of log step sizes and
    ``log_inflation`` holds one log factor per inflation group (one group
    per latent layer by default); ``groups`` maps each coordinate to its group.
    """

    def __init__(self, T, M, LF=5, step_range=(0.05, 0.2), groups=None, mass=None, seed=0):
        if T < 0 or LF < 1 or M < 1:
            raise ContractError(f"invalid HMC sizes T={T}, LF={LF}, M={M}")
        lo, hi = step_range
        if not 0 < lo <= hi:
            raise ContractError(f"step range must be positive, got {step_range}")
        rng = np.random.default_rng([seed, 7])
        self.T, self.M, self.LF = int(T), int(M), int(LF)
        self.log_step = ad.variable(np.log(rng.uniform(lo, hi, size=(self.T, self.M))), name="hmc.log_step")
        self.groups = np.zeros(self.M, dtype=np.int64) if groups is None else np.asarray(groups, dtype=np.int64)
        if self.groups.shape != (self.M,):
            raise ContractError(f"groups must have shape ({self.M},)")
        self.log_inflation = ad.variable(np.zeros(int(self.groups.max()) + 1), name="hmc.log_inflation")
        self.mass = np.ones(self.M) if mass is None else np.asarray(mass, dtype=np.float64)
        if np.any(self.mass <= 0):
            raise ContractError("mass matrix diagonal must be positive")

    def step_sizes(self):
        return ad.exp(self.log_step)

    def inflation(self):
        """Per-coordinate inflation node of shape ``(M,)``."""
        return ad.getitem(ad.exp(self.log_inflation), self.groups)

    def params(self):
        return {"hmc.log_step": self.log_step, "hmc.log_inflation": self.log_inflation}


def _score(logp, eps, create_graph, counter):
    """``(grad log p(eps), log p(eps))`` per row."""
    if create_graph and eps.requires_grad:
        leaf = eps
    else:
        leaf = ad.variable(eps.value)
    with ad._record(True):
        lp = logp(leaf)
    (g,) = ad.grad(ad.sum(lp), [leaf], create_graph=create_graph)
    if counter is not None:
        counter.grad_evals += 1
    if not create_graph:
        g = ad.constant(g.value)
    return g, lp.value


def _rows_bad(*arrays):
    bad = np.zeros(arrays[0].shape[0], dtype=bool)
    for a in arrays:
        bad |= ~np.all(np.isfinite(a), axis=1)
    return bad


def leapfrog(logp, eps, r, step, LF, mass=None, create_graph=False, counter=None, start_logp=None):
    """Integrate Hamiltonian dynamics for ``LF`` leapfrog steps.

    Each step is a half momentum kick, a full position drift scaled by
    ``1/mass``, and another half kick, so ``2 * LF`` target gradients are
    evaluated. Rows that produce non-finite or runaway values are frozen at
    their last finite state and flagged as divergent.

    Returns
    -------
    eps, r : Node
        Final position and momentum.
    divergent : ndarray of bool, shape (n,)
    logp0, logp1 : ndarray
        Target values at the start and end of the trajectory.
    """
    eps = ad.constant(eps) if not isinstance(eps, ad.Node) else eps
    r = ad.constant(r) if not isinstance(r, ad.Node) else r
    step = ad.constant(step) if not isinstance(step, ad.Node) else step
    inv_mass = 1.0 if mass is None else 1.0 / np.asarray(mass, dtype=np.float64)
    half = ad.mul(step, 0.5)
    drift = ad.mul(step, inv_mass)
    divergent = np.zeros(eps.shape[0], dtype=bool)
    logp0 = logp1 = start_logp
    for i in range(LF):
        g, lp = _score(logp, eps, create_graph, counter)
        if i == 0:
            logp0 = lp
        r = ad.add(r, ad.mul(half, g))
        new = ad.add(eps, ad.mul(r, drift))
        bad = _rows_bad(new.value, r.value, lp[:, None]) | np.any(np.abs(new.value) > MAX_ABS_POSITION, axis=1)
        if bad.any():
            col = bad[:, None]
            new = ad.where(col, eps, ad.where(col, 0.0, new))
            r = ad.where(col, 0.0, r)
            divergent |= bad
        g, lp = _score(logp, new, create_graph, counter)
        r = ad.add(r, ad.mul(half, g))
        bad = _rows_bad(r.value, lp[:, None])
        if bad.any():
            r = ad.where(bad[:, None], 0.0, r)
            divergent |= bad
        eps = new
        logp1 = lp
    return eps, r, divergent, logp0, logp1


def hamiltonian(logp_value, r, mass=None):
    r = r.value if isinstance(r, ad.Node) else np.asarray(r)
    inv_mass = 1.0 if mass is None else 1.0 / np.asarray(mass)
    return -np.asarray(logp_value) + 0.5 * np.sum(r * r * inv_mass, axis=1)


def mh_accept(eps0, eps1, h0, h1, rng, divergent=None):
    """Metropolis step on precomputed Hamiltonians.

    Accepts each row with probability ``min(1, exp(h0 - h1))``; divergent or
    non-finite proposals are always rejected. The accept decision enters
    the graph as a constant selector, so gradients flow through whichever
    state was kept.

    Returns ``(eps, accepted, accept_prob, divergent)``.
    """
    h0, h1 = np.asarray(h0, dtype=np.float64), np.asarray(h1, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        delta = h0 - h1
    divergent = np.zeros(h0.shape, dtype=bool) if divergent is None else divergent.copy()
    divergent |= ~np.isfinite(delta) | (np.abs(np.nan_to_num(delta, nan=np.inf)) > MAX_ENERGY_ERROR)
    log_a = np.where(divergent, -np.inf, np.minimum(delta, 0.0))
    prob = np.exp(log_a)
    accepted = rng.random(h0.shape) < prob
    eps = ad.where(accepted[:, None], eps1, eps0)
    return eps, accepted, prob, divergent


def run_chain(logp, eps0, step, LF, rng, mass=None, create_graph=False, counter=None):
    """Run ``T = len(step)`` HMC proposals from ``eps0``.

    Parameters
    ----------
    logp : callable
        Node ``(n, M)`` -> node ``(n,)`` of unnormalized log densities.
    eps0 : Node or array, shape (n, M)
        Initial states, usually a draw from the (inflated) encoder proposal.
    step : Node or array, shape (T, M)
        Step size per proposal and coordinate.
    create_graph : bool
        Keep the trajectory differentiable (training); otherwise values only.

    Returns
    -------
    eps : Node
        Final states.
    stats : ChainStats
    """
    eps = ad.constant(eps0) if not isinstance(eps0, ad.Node) else eps0
    step = ad.constant(step) if not isinstance(step, ad.Node) else step
    T = step.shape[0]
    stats = ChainStats()
    M = eps.shape[1]
    sqrt_mass = np.ones(M) if mass is None else np.sqrt(np.asarray(mass, dtype=np.float64))
    if not create_graph:
        eps = ad.constant(eps.value)
    for t in range(T):
        r0 = rng.standard_normal(eps.shape) * sqrt_mass
        step_t = ad.getitem(step, t) if create_graph else ad.constant(step.value[t])
        eps1, r1, div, lp0, lp1 = leapfrog(logp, eps, r0, step_t, LF, mass, create_graph, counter)
        if counter is not None:
            counter.density_evals += 2
            counter.proposals += 1
        h0 = hamiltonian(lp0, r0, mass)
        h1 = hamiltonian(lp1, r1, mass)
        eps, accepted, prob, div = mh_accept(eps, eps1, h0, h1, rng, div)
        if not create_graph:
            eps = ad.constant(eps.value)
        stats.accept_prob.append(prob)
        stats.accepted.append(accepted)
        stats.divergent.append(div)
    return eps, stats


# ---------------------------------------------------------------------------
# Stein discrepancy
# ---------------------------------------------------------------------------

def median_bandwidth(samples):
    """Per-coordinate squared bandwidth: median of squared pairwise differences."""
    x = samples.value if isinstance(samples, ad.Node) else np.asarray(samples)
    n = x.shape[0]
    iu = np.triu_indices(n, k=1)
    sq = (x[:, None, :] - x[None, :, :])[iu] ** 2
    h2 = np.median(sq, axis=0)
    return np.where(h2 > 0, h2, 1.0)


def sksd(samples, scores, bandwidth=None):
    """Sliced kernelized Stein discrepancy along the coordinate directions.

    For every coordinate ``d`` the Stein kernel of a 1-D RBF kernel
    ``k(a, b) = exp(-(a-b)^2 / (2 h_d^2))`` is averaged over pairs ``i != j``
    (a U-statistic) and the results are summed over ``d``. The estimate is
    unbiased for a non-negative quantity, so it can dip slightly below zero
    when ``q`` matches ``p``.

    Parameters
    ----------
    samples, scores : Node, shape (n, M)
        Samples from ``q`` and ``grad log p`` at those samples.
    bandwidth : array-like, optional
        Squared bandwidths ``h_d^2``; the median heuristic (detached) by default.
    """
    samples = ad.constant(samples) if not isinstance(samples, ad.Node) else samples
    scores = ad.constant(scores) if not isinstance(scores, ad.Node) else scores
    if samples.ndim != 2 or samples.shape != scores.shape:
        raise ContractError(f"samples {samples.shape} and scores {scores.shape} must be equal (n, M) matrices")
    n, M = samples.shape
    if n < 2:
        raise ContractError(f"sksd needs at least 2 samples, got {n}")
    h2 = median_bandwidth(samples) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, float), (M,))
    xi, xj = ad.reshape(samples, (n, 1, M)), ad.reshape(samples, (1, n, M))
    si, sj = ad.reshape(scores, (n, 1, M)), ad.reshape(scores, (1, n, M))
    u = ad.add(xi, ad.neg(xj))
    u2 = ad.square(u)
    k = ad.exp(ad.mul(u2, -0.5 / h2))
    uh = ad.mul(u, 1.0 / h2)
    terms = ad.mul(si, sj)
    terms = ad.add(terms, ad.mul(ad.add(si, ad.neg(sj)), uh))
    terms = ad.add(terms, ad.add(ad.mul(u2, -1.0 / h2**2), 1.0 / h2))
    off = (1.0 - np.eye(n))[:, :, None]
    return ad.mul(ad.sum(ad.mul(ad.mul(terms, k), off)), 1.0 / (n * (n - 1)))


def score_at(logp, eps, create_graph=True):
    """``grad log p`` at ``eps`` (kept differentiable with respect to ``eps``)."""
    g, _ = _score(logp, eps, create_graph, None)
    return g


# ---------------------------------------------------------------------------
# Model-level objectives
# ---------------------------------------------------------------------------

def proposal(model, batch, hmc, rng, inflate=True, live_inflation=False):
    """Initial states from the encoder, with its parameters cut from the graph.

    Returns ``(eps0, mu, sigma)``; ``eps0 = mu + s * sigma * noise``.
    ``live_inflation`` keeps ``s`` differentiable (for the Stein loss).
    """
    with ad.no_grad():
        mu, sigma = model.encode_stacked(batch)
    mu, sigma = ad.constant(mu.value), ad.constant(sigma.value)
    noise = rng.standard_normal(mu.shape)
    if not inflate:
        return ad.add(mu, ad.mul(sigma, noise)), mu, sigma
    s = hmc.inflation() if live_inflation else ad.constant(hmc.inflation().value)
    return ad.add(mu, ad.mul(ad.mul(sigma, s), noise)), mu, sigma


def target_for(model, batch, autoregressive=False):
    if autoregressive:
        return lambda h: model.log_joint_autoregressive(h, batch)
    return lambda eps: model.log_joint(eps, batch)


def hmc_objective(model, batch, hmc, rng, counter=None):
    """Batch mean of ``log_joint(eps^T)`` after ``T`` differentiable HMC proposals.

    Gradients reach the generative parameters and the step sizes; the
    encoder and the inflation factors are constants here.
    """
    eps0, _, _ = proposal(model, batch, hmc, rng)
    logp = target_for(model, batch)
    eps, stats = run_chain(logp, eps0, hmc.step_sizes(), hmc.LF, rng, hmc.mass, True, counter)
    return ad.mean(logp(eps)), stats


def hmc_and_sksd(model, batch, hmc, rng, n_sksd=30, autoregressive=False, counter=None):
    """One differentiable chain feeding both the HMC objective and the Stein loss.

    Returns ``(objective, stein, stats)``. Only ``theta`` and the step sizes
    should be updated from ``objective`` and only the inflation from
    ``stein``; the chain start depends on ``s`` so both share one trajectory.
    For ``autoregressive=True`` the chain runs over ``h`` instead of
    ``eps``, starting from the decoded proposal.
    """
    eps0, _, _ = proposal(model, batch, hmc, rng, live_inflation=True)
    if autoregressive:
        with ad._record(True):
            eps0 = model.eps_to_h(eps0)
    logp = target_for(model, batch, autoregressive)
    eps, stats = run_chain(logp, eps0, hmc.step_sizes(), hmc.LF, rng, hmc.mass, True, counter)
    stats.final_state = eps.value
    lp = logp(eps)
    objective = ad.mean(lp)
    m = min(n_sksd, eps.shape[0])
    if m >= 2:
        (g,) = ad.grad(ad.sum(lp), [eps], create_graph=True) if eps.requires_grad else (score_at(logp, eps),)
        head = (slice(0, m), slice(None))
        stein = sksd(ad.getitem(eps, head), ad.getitem(g, head))
    else:
        stein = ad.constant(0.0)
    return objective, stein, stats


def sample_posterior(model, batch, hmc, rng, use_hmc=True, counter=None, chunk=20000):
    """Posterior draws of ``eps`` (values) for every row of ``batch``.

    Uses the inflated encoder proposal followed by ``T`` proposals when
    ``use_hmc``; plain encoder samples otherwise. Rows are processed in
    chunks to bound memory.
    """
    out, stats = [], ChainStats()
    for start in range(0, batch.n, chunk):
        sub = batch.subset(slice(start, start + chunk))
        with ad.no_grad():
            eps0, _, _ = proposal(model, sub, hmc, rng, inflate=use_hmc and hmc is not None)
        if use_hmc and hmc is not None and hmc.T > 0:
            eps, st = run_chain(
                target_for(model, sub), eps0.value, hmc.step_sizes().value, hmc.LF, rng, hmc.mass, False, counter
            )
            stats.merge(st)
            out.append(eps.value)
        else:
            out.append(eps0.value)
    return (np.concatenate(out, axis=0) if out else np.zeros((0, model.M))), stats


# ---------------------------------------------------------------------------
# Toy densities and standalone tuning
# ---------------------------------------------------------------------------

TOY_NAMES = ("wave", "dual-moon")
# Chains start from a tight proposal off the far mode with small steps, so
# reaching both modes has to come from the learned inflation.
TOY_TUNING = {"mean": (0.5, 0.0), "std": (0.1, 0.1), "step_range": (0.005, 0.02)}
# Keeps the radius differentiable at the origin.
_RADIUS_EPS = 1e-8


@dataclass
class ToyDensity:
    name: str
    dim: int
    log_prob: object

    def __call__(self, z):
        return self.log_prob(z)

    def log_prob_numpy(self, z):
        with ad.no_grad():
            return self.log_prob(ad.constant(np.asarray(z, dtype=np.float64))).value


def _wave(z):
    z1 = ad.getitem(z, (slice(None), 0))
    z2 = ad.getitem(z, (slice(None), 1))
    resid = ad.mul(ad.add(z2, ad.neg(ad.sin(ad.mul(z1, math.pi / 2.0)))), 1.0 / 0.4)
    return ad.add(ad.mul(ad.square(resid), -0.5), ad.mul(ad.square(z1), -1.0 / 8.0))


def _dual_moon(z):
    z1 = ad.getitem(z, (slice(None), slice(0, 1)))
    radius = ad.sqrt(ad.add(ad.sum(ad.square(z), axis=1), _RADIUS_EPS))
    ring = ad.mul(ad.square(ad.mul(ad.add(radius, -2.0), 1.0 / 0.4)), -0.5)
    right = ad.mul(ad.square(ad.mul(ad.add(z1, -2.0), 1.0 / 0.6)), -0.5)
    left = ad.mul(ad.square(ad.mul(ad.add(z1, 2.0), 1.0 / 0.6)), -0.5)
    return ad.add(ring, ad.logsumexp(ad.concat([right, left], axis=1), axis=1))


def make_toy_density(name):
    """Two-dimensional unnormalized test densities: ``wave`` or ``dual-moon``."""
    if name == "wave":
        return ToyDensity("wave", 2, _wave)
    if name == "dual-moon":
        return ToyDensity("dual-moon", 2, _dual_moon)
    raise ConfigurationError(f"unknown toy density {name!r}; expected one of {TOY_NAMES}")


def toy_initial_states(mean, std, hmc, rng, n, live_inflation=True):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    s = hmc.inflation() if live_inflation else ad.constant(hmc.inflation().value)
    return ad.add(mean, ad.mul(ad.mul(s, std), rng.standard_normal((n, mean.size))))


def toy_samples(density, hmc, mean, std, n, seed=0):
    """Final chain states (values) from the current hyperparameters."""
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        eps0 = toy_initial_states(mean, std, hmc, rng, n, live_inflation=False)
    eps, stats = run_chain(density, eps0.value, hmc.step_sizes().value, hmc.LF, rng, hmc.mass)
    return eps.value, stats


def tune_toy(density, T=10, LF=5, steps=500, mean=(0.0, 0.0), std=(0.1, 0.1), n_chains=100,
             lr=1e-3, lr_inflation=1e-2, n_sksd=30, step_range=(0.05, 0.2), seed=0, callback=None):
    """Learn step sizes (HMC objective) and per-axis inflation (Stein loss) on a toy density.

    Returns ``(hmc, history)``; ``history`` holds one dict per step with the
    objective, the Stein discrepancy, the acceptance rate and the inflation.
    """
    hmc = HmcParams(T, density.dim, LF=LF, step_range=step_range, groups=np.arange(density.dim), seed=seed)
    opt_step = Adam({"hmc.log_step": hmc.log_step}, lr=lr)
    opt_infl = Adam({"hmc.log_inflation": hmc.log_inflation}, lr=lr_inflation)
    rng = np.random.default_rng([seed, 11])
    history = []
    for it in range(steps):
        eps0 = toy_initial_states(mean, std, hmc, rng, n_chains)
        eps, stats = run_chain(density, eps0, hmc.step_sizes(), LF, rng, hmc.mass, create_graph=True)
        lp = density(eps)
        objective = ad.mean(lp)
        (g,) = ad.grad(ad.sum(lp), [eps], create_graph=True)
        m = min(n_sksd, n_chains)
        head = (slice(0, m), slice(None))
        stein = sksd(ad.getitem(eps, head), ad.getitem(g, head))
        (g_step,) = ad.grad(ad.neg(objective), [hmc.log_step])
        (g_infl,) = ad.grad(stein, [hmc.log_inflation])
        opt_step.step({"hmc.log_step": g_step})
        opt_infl.step({"hmc.log_inflation": g_infl})
        record = {
            "step": it,
            "objective": float(objective.value),
            "sksd": float(stein.value),
            "acceptance": stats.acceptance_rate,
            "inflation": np.exp(hmc.log_inflation.value).tolist(),
        }
        history.append(record)
        if callback is not None:
            callback(record)
    return hmc, history
