"""Typed tabular data with observation masks: loading, standardization,
missingness injection, splits and synthetic generators."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .errors import ConfigurationError, ContractError, DataFormatError
from .likelihoods import FeatureType, representation, to_model_space

logger = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NaN")
RECIPES = ("linear-gaussian", "mixed-logit", "informative-one")


# ---------------------------------------------------------------------------
# Type specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    K: int = 1
    role: str = "feature"
    labels: tuple = ()

    @property
    def ftype(self):
        return FeatureType(self.kind, self.K, self.name)


@dataclass(frozen=True)
class TypeSpec:
    """Ordered column descriptors; exactly one column has role ``target``."""

    columns: tuple

    def __post_init__(self):
        roles = [c.role for c in self.columns]
        if roles.count("target") != 1:
            raise DataFormatError(f"typespec must declare exactly one target column, found {roles.count('target')}")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataFormatError("duplicate column names in typespec")

    @property
    def features(self):
        return [c for c in self.columns if c.role == "feature"]

    @property
    def target(self):
        return next(c for c in self.columns if c.role == "target")

    def format(self):
        lines = []
        for c in self.columns:
            parts = [c.name, c.kind]
            if c.kind == "categorical":
                parts.append(str(c.K))
            parts.append(c.role)
            if c.labels:
                parts.append(",".join(c.labels))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def parse_typespec(text):
    """Parse ``name kind [K] role [label,label,...]`` lines.

    Blank lines and ``#`` comments are ignored. The optional trailing label
    list fixes the category-to-index mapping for categorical columns.
    """
    columns = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 3:
            raise DataFormatError("expected 'name kind [K] role'", row=lineno)
        name, kind = parts[0], parts[1]
        rest = parts[2:]
        K = 1
        if kind == "categorical":
            try:
                K = int(rest.pop(0))
            except (ValueError, IndexError):
                raise DataFormatError("categorical column needs an integer K", row=lineno, column=name) from None
        elif kind == "binary":
            K = 2
        if not rest or rest[0] not in ("feature", "target"):
            raise DataFormatError("role must be 'feature' or 'target'", row=lineno, column=name)
        role = rest.pop(0)
        labels = tuple(rest.pop(0).split(",")) if rest else ()
        if rest:
            raise DataFormatError("trailing tokens in typespec line", row=lineno, column=name)
        if labels and kind in ("real", "positive"):
            raise DataFormatError("labels given for a continuous column", row=lineno, column=name)
        try:
            FeatureType(kind, K, name)
        except ContractError as exc:
            raise DataFormatError(str(exc), row=lineno, column=name) from None
        if labels and len(labels) != K:
            raise DataFormatError(f"{len(labels)} labels listed for K={K}", row=lineno, column=name)
        columns.append(ColumnSpec(name, kind, K, role, labels))
    return TypeSpec(tuple(columns))


def read_typespec(path):
    return parse_typespec(Path(path).read_text())


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class MixedDataset:
    """Feature matrix ``x`` (N, D), target ``y`` (N,), and 0/1 masks.

    Masked cells hold NaN; model code zero-fills them before use.
    """

    x: np.ndarray
    x_mask: np.ndarray
    y: np.ndarray
    y_mask: np.ndarray
    feature_types: list
    target_type: FeatureType
    names: list = field(default_factory=list)
    target_name: str = "y"
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, len(self.feature_types))
        self.x_mask = np.asarray(self.x_mask, dtype=np.float64).reshape(self.x.shape)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.y_mask = np.asarray(self.y_mask, dtype=np.float64).reshape(self.y.shape)
        if self.y.shape[0] != self.x.shape[0]:
            raise ContractError(f"{self.x.shape[0]} feature rows but {self.y.shape[0]} targets")
        if not self.names:
            self.names = [ft.name or f"x{d + 1}" for d, ft in enumerate(self.feature_types)]

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx):
        """Rows selected by integer indices, a boolean mask or a slice."""
        if not isinstance(idx, slice):
            idx = np.asarray(idx)
            idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return replace(self, x=self.x[idx], x_mask=self.x_mask[idx], y=self.y[idx], y_mask=self.y_mask[idx])

    def with_masks(self, x_mask, y_mask):
        """Copy with new masks; newly masked cells are overwritten by NaN."""
        x_mask = np.array(x_mask, dtype=np.float64)
        y_mask = np.array(y_mask, dtype=np.float64)
        x = np.where(x_mask > 0, self.x, np.nan)
        y = np.where(y_mask > 0, self.y, np.nan)
        return replace(self, x=x, x_mask=x_mask, y=y, y_mask=y_mask)

    def filled(self):
        """``(x, y)`` with masked cells replaced by an in-support placeholder."""
        x = self.x.copy()
        for d, ft in enumerate(self.feature_types):
            x[self.x_mask[:, d] == 0, d] = 1.0 if ft.kind == "positive" else 0.0
        y = np.where(self.y_mask > 0, self.y, 1.0 if self.target_type.kind == "positive" else 0.0)
        return x, y

    def typespec(self):
        cols = []
        for name, ft in zip(self.names, self.feature_types):
            cols.append(ColumnSpec(name, ft.kind, ft.K, "feature", tuple(self.labels.get(name, ()))))
        tt = self.target_type
        cols.append(ColumnSpec(self.target_name, tt.kind, tt.K, "target", tuple(self.labels.get(self.target_name, ()))))
        return TypeSpec(tuple(cols))


def _parse_cell(text, col, labels, frozen, row):
    token = text.strip()
    if token in MISSING_TOKENS:
        return np.nan, 0.0
    if col.kind in ("real", "positive"):
        try:
            value = float(token)
        except ValueError:
            raise DataFormatError(f"cannot parse {token!r} as a number", row=row, column=col.name) from None
        if not math.isfinite(value) or (col.kind == "positive" and value <= 0):
            raise DataFormatError(f"value {token!r} outside the support of {col.kind}", row=row, column=col.name)
        return value, 1.0
    if token not in labels:
        if frozen:
            raise DataFormatError(f"unknown category {token!r}", row=row, column=col.name)
        if len(labels) >= col.K:
            raise DataFormatError(f"more than K={col.K} categories, saw {token!r}", row=row, column=col.name)
        labels.append(token)
    return float(labels.index(token)), 1.0


def load_csv(data_path, typespec, labels=None):
    """Read a headed CSV according to ``typespec`` (a path or :class:`TypeSpec`).

    Empty cells and ``NaN`` are missing. Discrete labels map to indices in
    the order listed in the typespec, else in first-seen order. Passing
    ``labels`` (e.g. from the training set) freezes the mapping so unseen
    labels raise.
    """
    spec = typespec if isinstance(typespec, TypeSpec) else read_typespec(typespec)
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("empty CSV file", row=1) from None
        expected = [c.name for c in spec.columns]
        if sorted(header) != sorted(expected):
            raise DataFormatError(f"header {header} does not match typespec columns {expected}", row=1)
        position = {name: i for i, name in enumerate(header)}
        label_lists, frozen = {}, {}
        for c in spec.columns:
            given = (labels or {}).get(c.name) or c.labels
            frozen[c.name] = bool(given)
            if not given and c.kind == "binary":
                given = ("0", "1")
            label_lists[c.name] = list(given)
        values = {c.name: [] for c in spec.columns}
        masks = {c.name: [] for c in spec.columns}
        for rowno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataFormatError(f"expected {len(header)} cells, found {len(record)}", row=rowno)
            for c in spec.columns:
                v, m = _parse_cell(record[position[c.name]], c, label_lists[c.name], frozen[c.name], rowno)
                values[c.name].append(v)
                masks[c.name].append(m)
    feats, tgt = spec.features, spec.target
    n = len(values[tgt.name])
    x = np.array([values[c.name] for c in feats], dtype=np.float64).T.reshape(n, len(feats))
    xm = np.array([masks[c.name] for c in feats], dtype=np.float64).T.reshape(n, len(feats))
    out_labels = {c.name: list(label_lists[c.name]) for c in spec.columns if c.kind in ("binary", "categorical")}
    return MixedDataset(
        x=x,
        x_mask=xm,
        y=np.array(values[tgt.name]),
        y_mask=np.array(masks[tgt.name]),
        feature_types=[c.ftype for c in feats],
        target_type=tgt.ftype,
        names=[c.name for c in feats],
        target_name=tgt.name,
        labels=out_labels,
    )


def _format_value(value, ft, labels):
    if ft.kind in ("binary", "categorical"):
        if labels:
            return labels[int(value)]
        return str(int(value))
    return repr(float(value))


def write_csv(dataset, data_path, typespec_path=None):
    """Write ``dataset`` as CSV (missing cells empty) and optionally its typespec."""
    header = list(dataset.names) + [dataset.target_name]
    types = list(dataset.feature_types) + [dataset.target_type]
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = []
            for d, ft in enumerate(types):
                if d < dataset.d:
                    value, observed = dataset.x[i, d], dataset.x_mask[i, d]
                else:
                    value, observed = dataset.y[i], dataset.y_mask[i]
                row.append(_format_value(value, ft, dataset.labels.get(header[d])) if observed else "")
            writer.writerow(row)
    if typespec_path is not None:
        spec = dataset.typespec()
        cols = []
        for c in spec.columns:
            labels = c.labels or (
                tuple(str(k) for k in range(c.K)) if c.kind in ("binary", "categorical") else ()
            )
            cols.append(replace(c, labels=labels))
        Path(typespec_path).write_text(TypeSpec(tuple(cols)).format())


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-column location/scale of continuous columns in model space.

    Discrete columns get ``loc=0, scale=1``. Statistics use observed cells only.
    """

    x_loc: np.ndarray
    x_scale: np.ndarray
    y_loc: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def fit(cls, dataset):
        D = dataset.d
        x_loc, x_scale = np.zeros(D), np.ones(D)
        for d, ft in enumerate(dataset.feature_types):
            if ft.continuous:
                x_loc[d], x_scale[d] = _column_stats(ft, dataset.x[:, d], dataset.x_mask[:, d], dataset.names[d])
        y_loc, y_scale = 0.0, 1.0
        if dataset.target_type.continuous:
            y_loc, y_scale = _column_stats(dataset.target_type, dataset.y, dataset.y_mask, dataset.target_name)
        return cls(x_loc, x_scale, y_loc, y_scale)

    def transform(self, dataset):
        """Model-space arrays ``(x, y)``; masked cells stay NaN, masks untouched."""
        x = np.full(dataset.x.shape, np.nan)
        for d, ft in enumerate(dataset.feature_types):
            obs = dataset.x_mask[:, d] > 0
            x[obs, d] = to_model_space(ft, dataset.x[obs, d], self.x_loc[d], self.x_scale[d])
        y = np.full(dataset.y.shape, np.nan)
        obs = dataset.y_mask > 0
        y[obs] = to_model_space(dataset.target_type, dataset.y[obs], self.y_loc, self.y_scale)
        return x, y

    def as_meta(self):
        return {
            "standardizer.x_loc": " ".join(repr(float(v)) for v in self.x_loc),
            "standardizer.x_scale": " ".join(repr(float(v)) for v in self.x_scale),
            "standardizer.y_loc": repr(float(self.y_loc)),
            "standardizer.y_scale": repr(float(self.y_scale)),
        }

    @classmethod
    def from_meta(cls, meta):
        def floats(key):
            text = meta[key].strip()
            return np.array([float(v) for v in text.split()]) if text else np.zeros(0)

        return cls(
            floats("standardizer.x_loc"),
            floats("standardizer.x_scale"),
            float(meta["standardizer.y_loc"]),
            float(meta["standardizer.y_scale"]),
        )


def _column_stats(ft, values, mask, name):
    obs = mask > 0
    if not np.any(obs):
        logger.warning("column %r has no observed training cells; using loc=0, scale=1", name)
        return 0.0, 1.0
    u = to_model_space(ft, values[obs])
    std = float(np.std(u))
    if not std > 0:
        raise DataFormatError(f"constant column cannot be standardized (std={std})", column=name)
    return float(np.mean(u)), std


def encoder_representation(dataset, standardizer):
    """Zero-filled feature representation ``(N, R)`` and the per-column mask ``(N, R)``."""
    xf, _ = dataset.filled()
    reps, masks = [], []
    for d, ft in enumerate(dataset.feature_types):
        rep = representation(ft, xf[:, d], standardizer.x_loc[d], standardizer.x_scale[d])
        m = dataset.x_mask[:, d : d + 1]
        reps.append(rep * m)
        masks.append(np.repeat(m, rep.shape[1], axis=1))
    if not reps:
        return np.zeros((dataset.n, 0)), np.zeros((dataset.n, 0))
    return np.concatenate(reps, axis=1), np.concatenate(masks, axis=1)


def target_representation(dataset, standardizer):
    _, yf = dataset.filled()
    rep = representation(dataset.target_type, yf, standardizer.y_loc, standardizer.y_scale)
    return rep * dataset.y_mask[:, None]


# ---------------------------------------------------------------------------
# Missingness protocol and splits
# ---------------------------------------------------------------------------

def inject_missingness(dataset, mode, seed=None, rate_range=(0.01, 0.99), test_rate=0.5, rng=None, mask_target=True):
    """Hide additional cells following the train or test protocol.

    ``train``: each row draws ``p ~ U(rate_range)`` and hides every feature
    (and the target, when ``mask_target``) independently with probability
    ``p``. Call it once per batch so masks differ across steps.
    ``test``: every feature is hidden with probability ``test_rate`` and
    the target is always hidden.

    Returns a new dataset; the input is untouched.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    n, D = dataset.x.shape
    if mode == "train":
        lo, hi = rate_range
        p = rng.uniform(lo, hi, size=(n, 1))
        keep = rng.random((n, D)) >= p
        keep_y = rng.random(n) >= p[:, 0] if mask_target else np.ones(n, dtype=bool)
    elif mode == "test":
        keep = rng.random((n, D)) >= test_rate
        keep_y = np.zeros(n, dtype=bool)
    else:
        raise ConfigurationError(f"unknown missingness mode {mode!r}; expected 'train' or 'test'")
    return dataset.with_masks(dataset.x_mask * keep, dataset.y_mask * keep_y)


def missing_fraction_cdf(t, D, rate_range=(0.01, 0.99)):
    """Exact CDF of the per-row newly-missing fraction ``k/D`` under the train protocol.

    ``k | p ~ Binomial(D, p)`` with ``p ~ U(lo, hi)``; integrating the
    binomial pmf over ``p`` gives differences of regularized incomplete
    beta functions.
    """
    from scipy.special import betainc

    lo, hi = rate_range
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ks = np.arange(D + 1)
    # integral_lo^hi C(D,k) p^k (1-p)^(D-k) dp = [I_hi(k+1, D-k+1) - I_lo(k+1, D-k+1)] / (D+1)
    pmf = (betainc(ks + 1, D - ks + 1, hi) - betainc(ks + 1, D - ks + 1, lo)) / ((D + 1) * (hi - lo))
    cdf = np.cumsum(pmf)
    idx = np.floor(t * D + 1e-9).astype(np.int64)
    return np.where(idx < 0, 0.0, cdf[np.clip(idx, 0, D)])


def missingness_ks_test(fractions, D, rate_range=(0.01, 0.99)):
    """Kolmogorov-Smirnov test of per-row missing fractions against the train protocol.

    The statistic is the largest gap between the empirical and exact CDFs
    at the support points ``k/D``. The p-value uses the continuous null
    distribution, which is conservative for a discrete law.
    """
    from scipy.stats import kstwo

    fractions = np.asarray(fractions, dtype=np.float64)
    n = fractions.size
    if n == 0:
        raise ContractError("need at least one row")
    support = np.arange(D + 1) / D
    empirical = np.searchsorted(np.sort(fractions), support + 1e-9, side="right") / n
    stat = float(np.max(np.abs(empirical - missing_fraction_cdf(support, D, rate_range))))
    return stat, float(kstwo.sf(stat, n))


def split_indices(n, test_fraction=0.2, seed=0):
    """Random train/test index arrays (default 80/20)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def write_split(path, indices):
    Path(path).write_text("".join(f"{int(i)}\n" for i in indices))


def read_split(path):
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise DataFormatError(f"split index {line!r} is not an integer", row=lineno) from None
    return np.array(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def synth_mixed(recipe, n, seed=0, d=None):
    """Generate a built-in synthetic dataset.

    Returns ``(dataset, truth)`` where ``truth`` holds the generating
    parameters. Recipes: ``linear-gaussian`` (correlated reals, linear
    target), ``mixed-logit`` (real/binary/categorical features, binary
    target through a logistic link) and ``informative-one`` (only the first
    feature predicts the target).
    """
    rng = np.random.default_rng(seed)
    if recipe == "linear-gaussian":
        return _linear_gaussian(rng, n, d or 8)
    if recipe == "mixed-logit":
        return _mixed_logit(rng, n, d or 10)
    if recipe == "informative-one":
        return _informative_one(rng, n, d or 6)
    raise ConfigurationError(f"unknown synthetic recipe {recipe!r}; expected one of {RECIPES}")


def _complete(x, y, ftypes, ttype, labels=None):
    return MixedDataset(
        x=x,
        x_mask=np.ones_like(x),
        y=y,
        y_mask=np.ones_like(y),
        feature_types=ftypes,
        target_type=ttype,
        names=[ft.name for ft in ftypes],
        labels=labels or {},
    )


def _linear_gaussian(rng, n, D):
    n_factors = max(1, D // 4)
    loadings = rng.normal(size=(D, n_factors))
    noise_var = 0.3
    cov = loadings @ loadings.T + noise_var * np.eye(D)
    # unit marginal variances
    sd = np.sqrt(np.diag(cov))
    loadings = loadings / sd[:, None]
    cov = cov / np.outer(sd, sd)
    w = rng.normal(size=D) / np.sqrt(D)
    noise_std = 0.3
    x = rng.multivariate_normal(np.zeros(D), cov, size=n, method="cholesky") if n else np.zeros((0, D))
    y = x @ w + noise_std * rng.standard_normal(n)
    ftypes = [FeatureType("real", 1, f"x{d + 1}") for d in range(D)]
    truth = {"w": w, "cov": cov, "noise_std": noise_std}
    return _complete(x, y, ftypes, FeatureType("real", 1, "y")), truth


def _mixed_logit(rng, n, D):
    n_real = max(1, D // 2)
    n_bin = max(0, (D - n_real + 1) // 2)
    n_cat = D - n_real - n_bin
    K = 3
    n_factors = 2
    u = rng.standard_normal((n, n_factors))
    a_real = rng.normal(size=(n_factors, n_real))
    a_bin = 2.0 * rng.normal(size=(n_factors, n_bin))
    a_cat = 2.0 * rng.normal(size=(n_factors, n_cat, K))
    cols, ftypes, labels = [], [], {}
    real = u @ a_real + 0.3 * rng.standard_normal((n, n_real))
    for j in range(n_real):
        kind = "positive" if j == n_real - 1 and n_real > 1 else "real"
        col = np.exp(0.5 * real[:, j]) if kind == "positive" else real[:, j]
        cols.append(col)
        ftypes.append(FeatureType(kind, 1, f"x{len(ftypes) + 1}"))
    for j in range(n_bin):
        p = expit(u @ a_bin[:, j])
        cols.append((rng.random(n) < p).astype(np.float64))
        ftypes.append(FeatureType("binary", 2, f"x{len(ftypes) + 1}"))
    for j in range(n_cat):
        probs = softmax(u @ a_cat[:, j, :], axis=1) if n else np.zeros((0, K))
        cdf = np.cumsum(probs, axis=1)
        cols.append(np.minimum(np.sum(cdf < rng.random((n, 1)), axis=1), K - 1).astype(np.float64))
        ftypes.append(FeatureType("categorical", K, f"x{len(ftypes) + 1}"))
        labels[ftypes[-1].name] = [f"c{k}" for k in range(K)]
    x = np.stack(cols, axis=1) if cols else np.zeros((n, 0))
    w = 1.5 * rng.normal(size=n_factors)
    logits = u @ w
    y = (rng.random(n) < expit(logits)).astype(np.float64)
    truth = {"factor_weights": w, "a_real": a_real, "a_bin": a_bin, "a_cat": a_cat}
    labels["y"] = ["0", "1"]
    return _complete(x, y, ftypes, FeatureType("binary", 2, "y"), labels), truth


def _informative_one(rng, n, D):
    x = rng.standard_normal((n, D))
    noise_std = 0.05
    y = x[:, 0] + noise_std * rng.standard_normal(n)
    ftypes = [FeatureType("real", 1, f"x{d + 1}") for d in range(D)]
    truth = {"informative": 0, "noise_std": noise_std}
    return _complete(x, y, ftypes, FeatureType("real", 1, "y")), truth
