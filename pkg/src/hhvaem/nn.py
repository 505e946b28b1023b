"""MLP building blocks, Adam and the manifest+blob checkpoint format."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DataFormatError, DivergenceError, ShapeError

logger = logging.getLogger(__name__)

_ACTIVATIONS = {
    "tanh": ad.tanh,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
    None: lambda x: x,
}


class Mlp:
    """Fully connected network with a shared hidden activation.

    Parameters
    ----------
    widths : sequence of int
        ``(d_in, hidden..., d_out)``.
    activation : str
        Hidden-layer nonlinearity; ``"tanh"`` by default so that gradients
        of anything built on top stay smooth.
    out_activation : str or None
        Optional nonlinearity on the output layer.
    name : str
        Prefix for parameter names in checkpoints.
    seed : int, optional
        If given, parameters are initialised with :func:`init_params`.
    """

    def __init__(self, widths, activation="tanh", out_activation=None, name="mlp", seed=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"invalid MLP widths {widths}")
        if activation not in _ACTIVATIONS or out_activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}/{out_activation!r}")
        self.widths = widths
        self.activation = activation
        self.out_activation = out_activation
        self.name = name
        self.weights = []
        self.biases = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(ad.variable(np.zeros((fan_in, fan_out)), name=f"{name}.w{i}"))
            self.biases.append(ad.variable(np.zeros(fan_out), name=f"{name}.b{i}"))
        if seed is not None:
            init_params(self, seed)

    @property
    def d_in(self):
        return self.widths[0]

    @property
    def d_out(self):
        return self.widths[-1]

    def params(self):
        """Ordered mapping ``name -> Node`` of all trainable leaves."""
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x):
        x = ad.constant(x) if not isinstance(x, ad.Node) else x
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"{self.name} input", x.shape, (None, self.d_in))
        act = _ACTIVATIONS[self.activation]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            h = act(h) if i < last else _ACTIVATIONS[self.out_activation](h)
        return h

    def forward_numpy(self, x):
        """Forward pass without building a graph."""
        with ad.no_grad():
            return self(np.asarray(x, dtype=np.float64)).value

    def __repr__(self):
        return f"Mlp({self.widths}, activation={self.activation!r}, name={self.name!r})"


def mlp_forward(net, x):
    """Differentiable forward pass of ``net`` on a ``(batch, d_in)`` input."""
    return net(x)


def init_params(net, seed):
    """Uniform fan-average initialisation; biases are zero.

    Weights are drawn from ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``,
    giving a standard deviation of ``sqrt(2 / (fan_in + fan_out))``.
    """
    rng = np.random.default_rng(seed)
    for w, b in zip(net.weights, net.biases):
        fan_in, fan_out = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w.value = rng.uniform(-limit, limit, size=w.shape)
        b.value = np.zeros(b.shape)
    return net


class Adam:
    """Adam with bias correction over a named set of parameter leaves.

    ``step`` performs gradient *descent* on whatever loss produced ``grads``.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads):
        """Apply one update. ``grads`` maps parameter names to arrays or nodes."""
        arrays = {}
        for name, g in grads.items():
            g = g.value if isinstance(g, ad.Node) else np.asarray(g, dtype=np.float64)
            if name not in self.params:
                raise ContractError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"adam {name}", g.shape, self.params[name].shape)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(name, "gradient")
            arrays[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in arrays.items():
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p = self.params[name]
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def minimize(self, loss, create_graph=False):
        """Differentiate ``loss`` w.r.t. every parameter and take a step."""
        names = list(self.params)
        grads = ad.grad(loss, [self.params[k] for k in names], create_graph=create_graph)
        self.step(dict(zip(names, grads)))
        return float(loss.value)


def adam_step(state, params, grads):
    """Functional wrapper: update ``params`` in place with ``state`` (an :class:`Adam`)."""
    if state.params.keys() != dict(params).keys():
        state.params = dict(params)
    state.step(grads)
    return state.params, state


# ---------------------------------------------------------------------------
# Checkpoints: ``<stem>.manifest`` (key = value lines) + ``<stem>.bin`` (raw <f8)
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "hhvaem-checkpoint/1"


def save_checkpoint(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray) and string ``meta`` to ``path``.

    ``path`` is the manifest file; the blob is written next to it with a
    ``.bin`` suffix. Returns the manifest path.
    """
    path = Path(path)
    if path.suffix != ".manifest":
        path = path.with_suffix(".manifest")
    blob_path = path.with_suffix(".bin")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"blob = {blob_path.name}",
        "dtype = float64",
        "byteorder = little",
    ]
    for key, value in (meta or {}).items():
        text = str(value)
        if "\n" in text:
            raise ContractError(f"meta value for {key!r} spans lines")
        lines.append(f"meta.{key} = {text}")
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"param.{name} = shape={shape} offset={offset}")
            fh.write(arr.tobytes())
            offset += arr.nbytes
    path.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, meta)``."""
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.manifest"))
        if not found:
            raise DataFormatError(f"no checkpoint manifest in {path}")
        path = found[0]
    elif path.suffix != ".manifest":
        path = path.with_suffix(".manifest")
    header, meta, entries = {}, {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise DataFormatError("expected 'key = value'", row=lineno)
        if key.startswith("meta."):
            meta[key[5:]] = value
        elif key.startswith("param."):
            fields = dict(item.split("=", 1) for item in value.split())
            shape = () if fields["shape"] == "scalar" else tuple(int(s) for s in fields["shape"].split("x"))
            entries.append((key[6:], shape, int(fields["offset"])))
        else:
            header[key] = value
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"unsupported checkpoint format {header.get('format')!r}")
    blob = (path.parent / header["blob"]).read_bytes()
    arrays = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    return arrays, meta
