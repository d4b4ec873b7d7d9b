"""Tiny classifiers with closed-form per-sample gradients.

Every probe layer is a plain linear map, so each per-sample gradient is an
outer product ``G = left @ right.T``.  The orientation of ``W`` fixes which
vector is which:

==================  ===========  =================  ==================
kind                probe W      left (m)           right (n)
==================  ===========  =================  ==================
binary_logistic     d x 1        input x            p1 - y (scalar)
multinomial_linear  C x d        p - e_y            input x
mlp2, "W2"          C x h        p - e_y            hidden activation
mlp2, "W1"          h x d        backpropagated     input x
==================  ===========  =================  ==================
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import EnumerationLimitError, ShapeError
from .seeding import as_rng, rng_for

KINDS = ("binary_logistic", "multinomial_linear", "mlp2")
ACTIVATIONS = ("relu", "tanh")
MAX_PROBE_ENTRIES = 1024
MAX_ENUMERATED_CLASSES = 64


class LabelMode(str, Enum):
    SAMPLED = "sampled"
    REAL = "real"
    ENUMERATED = "enumerated"


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_dim: int = 0
    probe_layer: str = ""
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind == "binary_logistic" and self.num_classes != 2:
            raise ValueError("binary_logistic requires num_classes == 2")
        if self.kind != "binary_logistic" and self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.kind == "mlp2":
            if self.hidden_dim < 1:
                raise ValueError("mlp2 needs hidden_dim >= 1")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not self.probe_layer:
            object.__setattr__(self, "probe_layer", "W2" if self.kind == "mlp2" else "W")
        if self.probe_layer not in self.layer_shapes():
            raise ValueError(f"{self.kind} has no layer {self.probe_layer!r}")
        m, n = self.probe_shape
        if m * n > MAX_PROBE_ENTRIES:
            raise ValueError(f"probe layer {m}x{n} exceeds {MAX_PROBE_ENTRIES} entries")

    def layer_shapes(self):
        d, C, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "binary_logistic":
            return {"W": (d, 1)}
        if self.kind == "multinomial_linear":
            return {"W": (C, d)}
        return {"W1": (h, d), "W2": (C, h)}

    @property
    def probe_shape(self):
        return self.layer_shapes()[self.probe_layer]


def _fans(kind, name, shape):
    if kind == "binary_logistic":
        return shape[0], shape[1]
    return shape[1], shape[0]  # (out, in) storage


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed=None):
        """Glorot-uniform init: ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
        rng = rng_for(config.init_seed if seed is None else seed, "init")
        params = {}
        for name, shape in config.layer_shapes().items():
            fan_in, fan_out = _fans(config.kind, name, shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
        return cls(config, params)

    def with_params(self, **updates):
        params = dict(self.params)
        for name, W in updates.items():
            W = np.asarray(W, dtype=np.float64)
            if W.shape != self.config.layer_shapes()[name]:
                raise ShapeError(f"{name} must have shape {self.config.layer_shapes()[name]}")
            params[name] = W
        return replace(self, params=params)

    @property
    def probe_shape(self):
        return self.config.probe_shape


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    t = np.tanh(z)
    return t, 1.0 - t * t


def inputs_of(data):
    X = getattr(data, "X", data)
    X = np.asarray(X, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def _forward_cache(model: Model, X):
    cfg, P = model.config, model.params
    if cfg.kind == "binary_logistic":
        p1 = _sigmoid(X @ P["W"][:, 0])
        return np.stack([1.0 - p1, p1], axis=1), {}
    if cfg.kind == "multinomial_linear":
        return _softmax(X @ P["W"].T), {}
    pre = X @ P["W1"].T
    hid, dhid = _act(cfg.activation, pre)
    return _softmax(hid @ P["W2"].T), {"hid": hid, "dhid": dhid}


def predict_proba(model: Model, data):
    return _forward_cache(model, inputs_of(data))[0]


def forward(model: Model, x):
    """Class probabilities for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.config.input_dim,):
        raise ShapeError(f"input must have length {model.config.input_dim}")
    return predict_proba(model, x)[0]


def loss(model: Model, data, y=None):
    """Mean cross-entropy."""
    X = inputs_of(data)
    y = np.asarray(getattr(data, "y", None) if y is None else y)
    P = predict_proba(model, X)
    return float(-np.mean(np.log(np.clip(P[np.arange(len(y)), y], 1e-300, None))))


def accuracy(model: Model, data):
    P = predict_proba(model, data.X)
    return float(np.mean(P.argmax(axis=1) == data.y))


def outer_factors(model: Model, X, labels, layer=None):
    """Per-sample ``(left, right)`` with ``G_k = outer(left[k], right[k])``."""
    cfg, P = model.config, model.params
    layer = layer or cfg.probe_layer
    X = inputs_of(X)
    labels = np.asarray(labels, dtype=np.int64)
    probs, cache = _forward_cache(model, X)
    resid = probs.copy()
    resid[np.arange(len(labels)), labels] -= 1.0
    if cfg.kind == "binary_logistic":
        return X, resid[:, 1:2]
    if cfg.kind == "multinomial_linear":
        return resid, X
    if layer == "W2":
        return resid, cache["hid"]
    if layer == "W1":
        return (resid @ P["W2"]) * cache["dhid"], X
    raise ShapeError(f"unknown layer {layer!r}")


def per_sample_gradients(model: Model, X, labels, layer=None):
    """Stack of cross-entropy gradients, shape ``(N, m, n)``."""
    left, right = outer_factors(model, X, labels, layer)
    return left[:, :, None] * right[:, None, :]


def per_sample_gradient(model: Model, x, label, layer=None):
    if not 0 <= label < model.config.num_classes:
        raise ValueError(f"label {label} out of range")
    return per_sample_gradients(model, inputs_of(x), [label], layer)[0]


def full_gradient(model: Model, X, labels):
    """Mean gradient of every layer over the given rows."""
    return {
        name: per_sample_gradients(model, X, labels, name).mean(axis=0)
        for name in model.config.layer_shapes()
    }


def gradient_table(model: Model, data, layer=None):
    """Gradients for every (input, class) pair, shape ``(N, C, m, n)``."""
    X = inputs_of(data)
    C = model.config.num_classes
    if C > MAX_ENUMERATED_CLASSES:
        raise EnumerationLimitError(f"class enumeration limited to {MAX_ENUMERATED_CLASSES}")
    N = X.shape[0]
    labels = np.tile(np.arange(C), N)
    G = per_sample_gradients(model, np.repeat(X, C, axis=0), labels, layer)
    return G.reshape(N, C, *G.shape[1:])


# --------------------------------------------------------------------------
# gradient ensembles


@dataclass(frozen=True)
class GradientEnsemble:
    """Weighted gradient matrices ``{(G_k, w_k)}`` with ``sum w_k = 1``."""

    grads: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        G = np.asarray(self.grads, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if G.ndim != 3 or w.shape != (G.shape[0],):
            raise ShapeError(f"grads {G.shape} and weights {w.shape} are inconsistent")
        if G.shape[0] == 0:
            raise ShapeError("ensemble is empty")
        if not np.all(np.isfinite(G)):
            raise ShapeError("ensemble contains non-finite gradients")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ShapeError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "grads", G)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, grads):
        grads = np.asarray(grads, dtype=np.float64)
        return cls(grads, np.full(grads.shape[0], 1.0 / grads.shape[0]))

    @classmethod
    def weighted(cls, grads, weights):
        """Normalise arbitrary non-negative weights."""
        w = np.asarray(weights, dtype=np.float64)
        return cls(grads, w / w.sum())

    @property
    def m(self):
        return self.grads.shape[1]

    @property
    def n(self):
        return self.grads.shape[2]

    def __len__(self):
        return self.grads.shape[0]

    def vectors(self):
        """Rows are ``vec(G_k)`` (column-stacked)."""
        return self.grads.transpose(0, 2, 1).reshape(len(self), -1)

    def mean(self):
        return np.einsum("k,kij->ij", self.weights, self.grads)


def gn_ensemble_exact(model: Model, data, layer=None) -> GradientEnsemble:
    """Fisher / Gauss-Newton distribution: ``(G_{x,c}, p_c(x)/N)`` for all x, c."""
    X = inputs_of(data)
    table = gradient_table(model, X, layer)
    probs = predict_proba(model, X)
    N, C = probs.shape
    grads = table.reshape(N * C, *table.shape[2:])
    weights = (probs / N).reshape(-1)
    return GradientEnsemble(grads, weights / weights.sum())


def empirical_ensemble(model: Model, data, y=None, layer=None) -> GradientEnsemble:
    """Real-label distribution: ``(G_{x,y}, 1/N)`` (the empirical Fisher)."""
    X = inputs_of(data)
    y = getattr(data, "y", None) if y is None else y
    return GradientEnsemble.uniform(per_sample_gradients(model, X, y, layer))


def sample_labels(probs, rng):
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=1), probs.shape[1] - 1)


def sample_gradient_batch(model: Model, data, batch_size, label_mode="real", seed=0,
                          layer=None):
    """Mean gradient over a batch drawn i.i.d. with replacement.

    ``label_mode="sampled"`` draws each label from the model's own output
    distribution; ``"real"`` uses the dataset labels.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    mode = LabelMode(label_mode)
    rng = as_rng(seed, "batch")
    X = inputs_of(data)
    idx = rng.integers(0, X.shape[0], size=batch_size)
    if mode is LabelMode.REAL:
        labels = np.asarray(data.y)[idx]
    else:
        labels = sample_labels(predict_proba(model, X[idx]), rng)
    return per_sample_gradients(model, X[idx], labels, layer).mean(axis=0)
