"""Run configuration, the three-stage training procedure, checkpoints and metrics."""

from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from . import likelihoods as lk
from .data import MixedDataset, Standardizer, inject_missingness
from .errors import ConfigurationError, ContractError, DivergenceError
from .hier import HierModel, kl_balance, make_batch
from .hmc import ChainStats, EvalCounter, HmcParams, hmc_and_sksd, sample_posterior, target_for
from .marginal import MarginalBank, MarginalVae, train_marginals
from .nn import Adam, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

VARIANTS = {
    # name: (hierarchical, hmc)
    "hhvaem": (True, True),
    "hvaem": (True, False),
    "hmcvaem": (False, True),
    "vaem": (False, False),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Every knob of a run. Dotted keys in config files map to ``section_name`` fields."""

    seed: int = 0
    variant: str = "hhvaem"
    data_train: str = ""
    data_test: str = ""
    data_typespec: str = ""
    data_split: str = ""
    data_test_fraction: float = 0.2
    data_split_seed: int = 0
    model_dims: tuple = (10, 5)
    model_hidden: int = 256
    model_marginal_hidden: int = 16
    train_marginal_steps: int = 1000
    train_total_steps: int = 5000
    train_hmc_fraction: float = 0.1
    train_vae_steps: int = -1
    train_hmc_steps: int = -1
    train_batch_size: int = 100
    train_lr: float = 1e-3
    train_lr_inflation: float = 1e-2
    train_kl_warmup: float = 0.1
    train_marginal_samples: int = 1
    train_log_every: int = 1
    hmc_T: int = 10
    hmc_LF: int = 5
    hmc_step_low: float = 0.05
    hmc_step_high: float = 0.2
    hmc_sksd_samples: int = 30
    hmc_autoregressive: bool = False
    hmc_theta_through_chain: bool = False
    missing_rate_low: float = 0.01
    missing_rate_high: float = 0.99
    missing_test_rate: float = 0.5
    eval_k: int = 100
    saia_bins: int = 20
    saia_samples: int = 1000
    saia_policy: str = "mi"
    saia_rows: int = 50

    def __post_init__(self):
        if isinstance(self.model_dims, str):
            self.model_dims = tuple(int(v) for v in self.model_dims.replace(",", " ").split())
        self.model_dims = tuple(int(v) for v in self.model_dims)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        counts = ("train_marginal_steps", "train_total_steps", "train_batch_size", "hmc_T", "eval_k")
        for name in counts:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{_dotted(name)} must be non-negative")
        if not 0 <= self.train_hmc_fraction <= 1:
            raise ConfigurationError("train.hmc_fraction must lie in [0, 1]")
        if not self.model_dims or min(self.model_dims) < 1:
            raise ConfigurationError(f"model.dims must be positive integers, got {self.model_dims}")

    @property
    def hierarchical(self):
        return VARIANTS[self.variant][0]

    @property
    def use_hmc(self):
        return VARIANTS[self.variant][1]

    @property
    def latent_dims(self):
        """Layer sizes actually built: a single layer of the same total size when flat."""
        return self.model_dims if self.hierarchical else (sum(self.model_dims),)

    def stage_steps(self):
        """``(T_VAE, T_HMC)``. Without HMC the whole budget goes to stage 2."""
        hmc = self.train_hmc_steps
        if hmc < 0:
            hmc = int(round(self.train_hmc_fraction * self.train_total_steps))
        vae = self.train_vae_steps
        if vae < 0:
            vae = self.train_total_steps - hmc
        if not self.use_hmc:
            return vae + hmc, 0
        return vae, hmc

    def items(self):
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out.append((_dotted(f.name), str(value)))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _dotted(field_name):
    if "_" in field_name and field_name.split("_", 1)[0] in _SECTIONS:
        section, rest = field_name.split("_", 1)
        return f"{section}.{rest}"
    return field_name


_SECTIONS = ("data", "model", "train", "hmc", "missing", "eval", "saia")


def _coerce(f, text):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"bad value {text!r} for {_dotted(f.name)} (expected {kind})") from None
    return text


def config_from_mapping(mapping, base=None):
    """Build a :class:`RunConfig` from dotted ``key -> string`` pairs."""
    fields = {_dotted(f.name): f for f in dataclasses.fields(RunConfig)}
    values = {}
    for key, text in mapping.items():
        key = key.strip()
        if key not in fields:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[fields[key].name] = _coerce(fields[key], str(text))
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def parse_config(text, base=None):
    """Parse flat ``key = value`` text (``#`` comments allowed)."""
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    return config_from_mapping(dict(parser["run"]), base)


def load_config(path, base=None):
    return parse_config(Path(path).read_text(), base)


# ---------------------------------------------------------------------------
# Trained artefact
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    config: RunConfig
    standardizer: Standardizer
    marginals: list
    model: HierModel
    hmc: HmcParams
    feature_types: list
    target_type: lk.FeatureType
    names: list = field(default_factory=list)
    target_name: str = "y"
    labels: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    @property
    def use_hmc(self):
        return self.config.use_hmc

    def arrays(self):
        out = {}
        for m in self.marginals:
            out.update({k: v.value for k, v in m.params().items()})
        out.update({k: v.value for k, v in self.model.params().items()})
        out.update({k: v.value for k, v in self.hmc.params().items()})
        return out

    def meta(self):
        meta = {f"config.{k}": v for k, v in self.config.items()}
        meta.update(self.standardizer.as_meta())
        meta["schema.features"] = ";".join(f"{n}:{ft.kind}:{ft.K}" for n, ft in zip(self.names, self.feature_types))
        tt = self.target_type
        meta["schema.target"] = f"{self.target_name}:{tt.kind}:{tt.K}"
        meta["schema.labels"] = ";".join(f"{k}={','.join(v)}" for k, v in self.labels.items())
        meta["marginal.fallback"] = ",".join(str(int(m.fallback)) for m in self.marginals)
        return meta

    def save(self, path, status="ok"):
        meta = self.meta()
        meta["status"] = status
        return save_checkpoint(path, self.arrays(), meta)

    def set_arrays(self, arrays):
        params = {}
        for m in self.marginals:
            params.update(m.params())
        params.update(self.model.params())
        params.update(self.hmc.params())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ContractError(f"checkpoint lacks parameters {missing[:3]}...")
        for name, node in params.items():
            if arrays[name].shape != node.shape:
                raise ContractError(f"checkpoint parameter {name} has shape {arrays[name].shape}, expected {node.shape}")
            node.value = np.array(arrays[name])
        self.model.bank.refresh()

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        config = config_from_mapping({k[7:]: v for k, v in meta.items() if k.startswith("config.")})
        names, ftypes = [], []
        text = meta.get("schema.features", "")
        for item in filter(None, text.split(";")):
            name, kind, K = item.split(":")
            names.append(name)
            ftypes.append(lk.FeatureType(kind, int(K), name))
        tname, tkind, tK = meta["schema.target"].split(":")
        labels = {}
        for item in filter(None, meta.get("schema.labels", "").split(";")):
            k, v = item.split("=", 1)
            labels[k] = v.split(",") if v else []
        fallback = [bool(int(v)) for v in filter(None, meta.get("marginal.fallback", "").split(","))]
        out = build(config, ftypes, lk.FeatureType(tkind, int(tK), tname), Standardizer.from_meta(meta), names, tname, labels)
        for m, fb in zip(out.marginals, fallback):
            m.fallback = fb
        out.set_arrays(arrays)
        return out

    # -- inference helpers ------------------------------------------------------

    def batch(self, dataset, rng=None, sample_codes=False):
        return make_batch(dataset, self.marginals, self.standardizer, rng=rng, sample_codes=sample_codes)

    def posterior(self, batch, k, rng, use_hmc=None, counter=None):
        """``k`` posterior draws of ``eps`` per row, shape ``(n * k, M)`` (row-major blocks)."""
        use_hmc = self.use_hmc if use_hmc is None else use_hmc
        rep = batch.repeat(k)
        eps, stats = sample_posterior(self.model, rep, self.hmc, rng, use_hmc=use_hmc, counter=counter)
        return eps, rep, stats


def build(config, feature_types, target_type, standardizer, names=None, target_name="y", labels=None):
    """Initialise every parameter of a run (no training)."""
    seed = config.seed
    marginals = [
        MarginalVae(ft, d, standardizer.x_loc[d], standardizer.x_scale[d], hidden=config.model_marginal_hidden, seed=seed)
        for d, ft in enumerate(feature_types)
    ]
    bank = MarginalBank(marginals)
    model = HierModel(
        feature_types, target_type, bank, dims=config.latent_dims, hidden=config.model_hidden, seed=seed,
        y_loc=standardizer.y_loc, y_scale=standardizer.y_scale,
    )
    hmc = HmcParams(
        config.hmc_T, model.M, LF=config.hmc_LF, step_range=(config.hmc_step_low, config.hmc_step_high),
        groups=model.layer_of_dim(), seed=seed,
    )
    return TrainedModel(
        config, standardizer, marginals, model, hmc, list(feature_types), target_type,
        names=list(names or [ft.name for ft in feature_types]), target_name=target_name, labels=dict(labels or {}),
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingLog:
    """Collects ``(step, metric, value)`` triples; optionally streams them to a file."""

    def __init__(self, path=None):
        self.rows = []
        self._fh = open(path, "w") if path else None

    def __call__(self, step, metric, value):
        self.rows.append((step, metric, float(value)))
        if self._fh:
            self._fh.write(f"{step}\t{metric}\t{float(value):.10g}\n")

    def series(self, metric):
        return [v for _, m, v in self.rows if m == metric]

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _snapshot(params):
    return {k: v.value.copy() for k, v in params.items()}


def _restore(params, snap):
    for k, v in params.items():
        v.value = snap[k]


def _check_finite(value, stage, step):
    if not math.isfinite(value):
        raise DivergenceError(f"{stage} loss", f"non-finite value at step {step}")


def run_train(config, train, log=None, checkpoint=None, callback=None):
    """Train a model on ``train`` (a :class:`MixedDataset`) in three stages.

    1. one marginal VAE per feature;
    2. the dependency VAE on the ELBO, with KL balancing during warm-up;
    3. (HMC variants) per step: encoder update from the ELBO using fresh
       encoder samples, generative + step-size update from the HMC
       objective, and inflation update from the Stein discrepancy.

    Train-protocol missingness is re-drawn for every batch of stages 2-3.
    On a non-finite loss the last good parameters are restored, written to
    ``checkpoint`` (if given) and :class:`DivergenceError` is raised.
    """
    log = log if log is not None else TrainingLog()
    std = Standardizer.fit(train)
    tm = build(config, train.feature_types, train.target_type, std, train.names, train.target_name, train.labels)
    tm.log = log.rows
    cfg = config
    rng = np.random.default_rng([cfg.seed, 1])
    t0 = time.perf_counter()

    # Stage 1
    trained = train_marginals(
        train, std, steps=cfg.train_marginal_steps, lr=cfg.train_lr, seed=cfg.seed,
        batch_size=cfg.train_batch_size, hidden=cfg.model_marginal_hidden, n_samples=cfg.train_marginal_samples,
    )
    for m, fitted in zip(tm.marginals, trained):
        for name, node in m.params().items():
            node.value = fitted.params()[name].value
        m.fallback = fitted.fallback
    tm.model.bank.refresh()
    log(0, "stage1.seconds", time.perf_counter() - t0)

    vae_steps, hmc_steps = cfg.stage_steps()
    model, hmc = tm.model, tm.hmc
    all_params = {**tm.model.params(), **hmc.params()}
    good = _snapshot(all_params)
    rate_range = (cfg.missing_rate_low, cfg.missing_rate_high)
    n = train.n
    if n == 0 and (vae_steps or hmc_steps):
        raise ContractError("cannot train on an empty dataset")

    def draw_batch():
        idx = rng.choice(n, size=min(cfg.train_batch_size, n), replace=False)
        sub = inject_missingness(train.subset(idx), "train", rng=rng, rate_range=rate_range)
        return tm.batch(sub, rng=rng, sample_codes=True)

    def fail(stage, step):
        _restore(all_params, good)
        if checkpoint:
            tm.save(checkpoint, status=f"diverged at {stage} step {step}")
        raise DivergenceError(f"{stage} loss", f"non-finite value at step {step}")

    # Stage 2
    opt = Adam(model.params(), lr=cfg.train_lr)
    warm = int(math.ceil(cfg.train_kl_warmup * vae_steps))
    for step in range(vae_steps):
        batch = draw_batch()
        gammas = np.ones(model.L)
        if step < warm and model.L > 1:
            with ad.no_grad():
                kls = [float(np.mean(k.value)) for k in model.elbo_terms(batch, rng)[1]]
            gammas = kl_balance(np.maximum(kls, 0.0), model.dims)
        loss = ad.neg(model.elbo_vi(batch, rng, gammas))
        if not math.isfinite(float(loss.value)):
            fail("stage2", step)
        try:
            opt.minimize(loss)
        except DivergenceError:
            fail("stage2", step)
        good = _snapshot(all_params)
        if step % cfg.train_log_every == 0:
            log(step, "stage2.loss", loss.value)
            if step < warm:
                for l, g in enumerate(gammas):
                    log(step, f"stage2.kl_weight.{l}", g)
        if callback:
            callback("stage2", step, float(loss.value))
    log(vae_steps, "stage2.seconds", time.perf_counter() - t0)

    # Stage 3
    if hmc_steps:
        opt_psi = Adam(model.psi(), lr=cfg.train_lr)
        opt_hmc = Adam({**model.theta(), "hmc.log_step": hmc.log_step}, lr=cfg.train_lr)
        opt_s = Adam({"hmc.log_inflation": hmc.log_inflation}, lr=cfg.train_lr_inflation)
        theta_names = list(model.theta())
        for step in range(hmc_steps):
            batch = draw_batch()
            loss_vi = ad.neg(model.elbo_vi(batch, rng))
            objective, stein, stats = hmc_and_sksd(
                model, batch, hmc, rng, n_sksd=cfg.hmc_sksd_samples, autoregressive=cfg.hmc_autoregressive
            )
            values = (float(loss_vi.value), float(objective.value), float(stein.value))
            if not all(math.isfinite(v) for v in values):
                fail("stage3", step)
            psi_nodes = list(model.psi().values())
            g_psi = ad.grad(loss_vi, psi_nodes)
            theta_nodes = [model.theta()[k] for k in theta_names]
            if cfg.hmc_theta_through_chain:
                g_hmc = ad.grad(ad.neg(objective), theta_nodes + [hmc.log_step])
            else:
                # theta sees the final states as fixed samples; phi still differentiates the chain
                (g_step,) = ad.grad(ad.neg(objective), [hmc.log_step])
                final = target_for(model, batch, cfg.hmc_autoregressive)(stats.final_state)
                g_hmc = ad.grad(ad.neg(ad.mean(final)), theta_nodes) + [g_step]
            (g_s,) = ad.grad(stein, [hmc.log_inflation])
            try:
                opt_psi.step(dict(zip(model.psi(), g_psi)))
                opt_hmc.step(dict(zip(theta_names + ["hmc.log_step"], g_hmc)))
                opt_s.step({"hmc.log_inflation": g_s})
            except DivergenceError:
                fail("stage3", step)
            good = _snapshot(all_params)
            if step % cfg.train_log_every == 0:
                log(step, "stage3.loss_vi", values[0])
                log(step, "stage3.hmc_objective", values[1])
                log(step, "stage3.sksd", values[2])
                log(step, "stage3.acceptance", stats.acceptance_rate)
                log(step, "stage3.divergent", stats.n_divergent)
                for l, s in enumerate(np.exp(hmc.log_inflation.value)):
                    log(step, f"stage3.inflation.{l}", s)
                log(step, "stage3.mean_step", float(np.mean(np.exp(hmc.log_step.value))))
            if callback:
                callback("stage3", step, stats.acceptance_rate)
        log(hmc_steps, "stage3.seconds", time.perf_counter() - t0)
    if checkpoint:
        tm.save(checkpoint)
    return tm


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def log_mean_exp(values, axis=-1):
    """``log(mean(exp(values)))`` along ``axis``, computed stably."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[axis] < 1:
        raise ContractError("log_mean_exp needs at least one sample")
    return logsumexp(values, axis=axis) - math.log(values.shape[axis])


def _feature_loglik(tm, zm_samples, truth, eval_mask, rng):
    """Per-sample, per-feature ``log p(x_d | z_d)`` with ``z_d ~ p(z_d | h_1)`` (zeros off ``eval_mask``)."""
    n, D = zm_samples.shape
    out = np.zeros((n, D))
    z = zm_samples + math.sqrt(lk.NOISE_VAR) * rng.standard_normal(zm_samples.shape)
    for d, m in enumerate(tm.marginals):
        rows = eval_mask[:, d] > 0
        if not rows.any():
            continue
        params = m.decode_numpy(z[rows, d])
        out[rows, d] = lk.log_prob_numpy(m.ftype, params, truth[rows, d], loc=m.loc, scale=m.scale)
    return out


def eval_metrics(tm, truth, observed, k=100, seed=0, use_hmc=None):
    """Imputation and prediction metrics on a test set.

    Parameters
    ----------
    tm : TrainedModel
    truth : MixedDataset
        Test rows with every available value.
    observed : MixedDataset
        The same rows after test-protocol masking (target hidden).
    k : int
        Posterior samples per row.

    Returns
    -------
    dict
        ``nll_x`` (log-mean-exp over samples of the joint likelihood of the
        hidden-but-known features, divided by their count and averaged over
        rows; ``None`` when nothing is hidden), ``nll_y``, ``rmse_x``
        (standardized continuous features), ``error_x`` (discrete features),
        ``rmse_y`` or ``error_y``, and ``jensen_ok`` (log-mean-exp >= mean
        of logs on every row).
    """
    if k < 1:
        raise ContractError(f"k must be at least 1, got {k}")
    rng = np.random.default_rng([seed, 3])
    n, D = truth.x.shape
    batch = tm.batch(observed)
    eps, rep, stats = tm.posterior(batch, k, rng, use_hmc=use_hmc)
    h1, zm, ypar = tm.model.decode_numpy(eps, rep)
    # cells hidden by the protocol but present in the truth
    eval_mask = (truth.x_mask > 0) & (observed.x_mask == 0)
    truth_x, truth_y = truth.filled()
    rep_mask = np.repeat(eval_mask, k, axis=0)
    ll = _feature_loglik(tm, zm, np.repeat(truth_x, k, axis=0), rep_mask, rng)
    joint = ll.sum(axis=1).reshape(n, k)
    lme = log_mean_exp(joint, axis=1)
    counts = eval_mask.sum(axis=1)
    has = counts > 0
    report = {"n_rows": int(n), "k": int(k), "acceptance": stats.acceptance_rate, "divergent": stats.n_divergent}
    report["nll_x"] = float(-np.mean(lme[has] / counts[has])) if has.any() else None
    report["jensen_ok"] = bool(np.all(lme >= joint.mean(axis=1) - 1e-12))

    # target
    y_rows = truth.y_mask > 0
    tt = tm.target_type
    ll_y = lk.log_prob_numpy(tt, ypar, np.repeat(truth_y, k), loc=tm.model.y_loc, scale=tm.model.y_scale)
    lme_y = log_mean_exp(ll_y.reshape(n, k), axis=1)
    report["nll_y"] = float(-np.mean(lme_y[y_rows])) if y_rows.any() else None
    y_point = predictive_point(tm, ypar.reshape((n, k) + ypar.shape[1:]))
    if tt.continuous:
        u_true = lk.to_model_space(tt, truth_y, tm.model.y_loc, tm.model.y_scale)
        u_pred = lk.to_model_space(tt, y_point, tm.model.y_loc, tm.model.y_scale)
        report["rmse_y"] = float(np.sqrt(np.mean((u_true - u_pred)[y_rows] ** 2))) if y_rows.any() else None
    else:
        report["error_y"] = float(np.mean((y_point != truth_y)[y_rows])) if y_rows.any() else None

    # deterministic imputation of hidden features
    xhat = impute_from_samples(tm, zm.reshape(n, k, D))
    sq, wrong = [], []
    for d, ft in enumerate(tm.feature_types):
        rows = eval_mask[:, d]
        if not rows.any():
            continue
        if ft.continuous:
            a = lk.to_model_space(ft, truth_x[rows, d], tm.standardizer.x_loc[d], tm.standardizer.x_scale[d])
            b = lk.to_model_space(ft, xhat[rows, d], tm.standardizer.x_loc[d], tm.standardizer.x_scale[d])
            sq.append((a - b) ** 2)
        else:
            wrong.append(truth_x[rows, d] != xhat[rows, d])
    report["rmse_x"] = float(np.sqrt(np.mean(np.concatenate(sq)))) if sq else None
    report["error_x"] = float(np.mean(np.concatenate(wrong))) if wrong else None
    return report


def impute_from_samples(tm, zm):
    """Point imputation from ``(n, k, D)`` decoded code means.

    Continuous features average the model-space decoder means over samples;
    discrete ones average class probabilities and take the mode.
    """
    n, k, D = zm.shape
    rep = tm.model.bank.decode_representation_numpy(zm.reshape(n * k, D)).reshape(n, k, -1).mean(axis=1)
    out = np.zeros((n, D))
    offsets = tm.model.bank.offsets
    for d, m in enumerate(tm.marginals):
        block = rep[:, offsets[d] : offsets[d + 1]]
        if m.ftype.continuous:
            out[:, d] = lk.from_model_space(m.ftype, block[:, 0], m.loc, m.scale)
        elif m.ftype.kind == "binary":
            out[:, d] = (block[:, 0] > 0.5).astype(np.float64)
        else:
            out[:, d] = np.argmax(block, axis=1).astype(np.float64)
    return out


def predictive_point(tm, ypar):
    """Point prediction from ``(n, k[, K])`` predictor parameters."""
    tt = tm.target_type
    if tt.continuous:
        u = ypar.mean(axis=1)
        return lk.from_model_space(tt, u, tm.model.y_loc, tm.model.y_scale)
    if tt.kind == "binary":
        p = 1.0 / (1.0 + np.exp(-ypar))
        return (p.mean(axis=1) > 0.5).astype(np.float64)
    probs = np.exp(ypar - logsumexp(ypar, axis=-1, keepdims=True))
    return np.argmax(probs.mean(axis=1), axis=-1).astype(np.float64)


def predictive_proba(tm, ypar):
    tt = tm.target_type
    if tt.kind == "binary":
        p1 = (1.0 / (1.0 + np.exp(-ypar))).mean(axis=1)
        return np.stack([1.0 - p1, p1], axis=1)
    if tt.kind == "categorical":
        return np.exp(ypar - logsumexp(ypar, axis=-1, keepdims=True)).mean(axis=1)
    raise ContractError("class probabilities need a discrete target")


def impute(tm, dataset, k=10, seed=0):
    """Fill every missing feature cell of ``dataset`` (observed cells are copied)."""
    rng = np.random.default_rng([seed, 5])
    n, D = dataset.x.shape
    batch = tm.batch(dataset)
    eps, rep, _ = tm.posterior(batch, k, rng)
    _, zm, _ = tm.model.decode_numpy(eps, rep)
    xhat = impute_from_samples(tm, zm.reshape(n, k, D))
    return np.where(dataset.x_mask > 0, dataset.x, xhat)


def predict(tm, dataset, k=10, seed=0, proba=False):
    """Target predictions from the observed features of ``dataset`` (target treated as hidden)."""
    rng = np.random.default_rng([seed, 6])
    hidden = dataset.with_masks(dataset.x_mask, np.zeros(dataset.n))
    batch = tm.batch(hidden)
    eps, rep, _ = tm.posterior(batch, k, rng)
    _, _, ypar = tm.model.decode_numpy(eps, rep)
    ypar = ypar.reshape((dataset.n, k) + ypar.shape[1:])
    return predictive_proba(tm, ypar) if proba else predictive_point(tm, ypar)


def test_protocol(dataset, config, seed=None):
    """Apply the test masking protocol (features hidden at ``missing.test_rate``, target hidden)."""
    seed = config.seed if seed is None else seed
    return inject_missingness(dataset, "test", rng=np.random.default_rng([seed, 4]), test_rate=config.missing_test_rate)
