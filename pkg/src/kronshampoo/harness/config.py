"""Strict JSON experiment configuration.

Unknown keys, wrong types and out-of-range values raise
:class:`~kronshampoo.errors.ConfigError` naming the offending key path.
:func:`resolve` returns the fully defaulted document; writing it back out
and loading it again reproduces the same run.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from pathlib import Path

from ..data import NORMALIZATIONS
from ..errors import ConfigError
from ..models import ACTIVATIONS, KINDS, LabelMode
from ..optim import OPTIMIZERS

ESTIMATOR_RE = re.compile(r"^(shampoo|shampoo_sq|kfac|opt_kron\((\d+)\))$")
TARGETS = ("gn", "adagrad")
COSINE_METHODS = ("exact", "hutchinson")
BATCH_METHODS = ("monte_carlo", "enumerate", "moments")

_DATASET_DEFAULTS = {
    "synth": {"kind": "synth", "d": 8, "num_classes": 3, "n_per_class": 40, "separation": 3.0},
    "idx": {"kind": "idx", "images": "", "labels": "", "normalization": "scale_255",
            "keep": None, "downsample": 1, "limit": None},
    "npz": {"kind": "npz", "path": ""},
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "dataset": _DATASET_DEFAULTS["synth"],
    "model": {"kind": "mlp2", "input_dim": None, "num_classes": None, "hidden_dim": 6,
              "probe_layer": "", "activation": "tanh"},
    "train": {"optimizer": "gd", "lr": 0.1, "momentum": 0.0, "shampoo_lambda": 0.99,
              "shampoo_eps": "auto", "exponent": 0.5, "batch_size": None, "steps": 32,
              "probe_schedule": None},
    "estimators": ["shampoo", "shampoo_sq", "opt_kron(5)", "kfac"],
    "curvature_targets": ["gn", "adagrad"],
    "cosine_method": "exact",
    "num_probes": 100,
    "batch_sweep": [1, 16, 256],
    "label_modes": ["real", "sampled"],
    "batch_trials": 2000,
    "batch_method": "monte_carlo",
    "checkpoint_step": None,
}


def _fail(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _merge(defaults, given, path):
    if not isinstance(given, dict):
        _fail(path, "expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        _fail(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _int(v, path, lo=None, allow_none=False):
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(path, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        _fail(path, f"must be >= {lo}")
    return v


def _num(v, path):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(path, f"expected a number, got {v!r}")
    return float(v)


def _choice(v, options, path):
    if v not in options:
        _fail(path, f"{v!r} is not one of {list(options)}")
    return v


def _str_list(v, path, nonempty=True):
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        _fail(path, "expected a list of strings")
    if nonempty and not v:
        _fail(path, "must not be empty")
    if len(set(v)) != len(v):
        _fail(path, "contains duplicates")
    return v


def _resolve_dataset(ds):
    if not isinstance(ds, dict):
        _fail("dataset", "expected an object")
    kind = ds.get("kind", "synth")
    _choice(kind, tuple(_DATASET_DEFAULTS), "dataset.kind")
    out = _merge(_DATASET_DEFAULTS[kind], ds, "dataset")
    if kind == "synth":
        for key in ("d", "num_classes", "n_per_class"):
            _int(out[key], f"dataset.{key}", 1)
        if _num(out["separation"], "dataset.separation") < 0:
            _fail("dataset.separation", "must be >= 0")
    elif kind == "idx":
        for key in ("images", "labels"):
            if not isinstance(out[key], str) or not out[key]:
                _fail(f"dataset.{key}", "path required")
        _choice(out["normalization"], NORMALIZATIONS, "dataset.normalization")
        if out["keep"] is not None and (
                not isinstance(out["keep"], list) or not out["keep"]
                or not all(isinstance(k, int) and not isinstance(k, bool) for k in out["keep"])):
            _fail("dataset.keep", "expected a non-empty list of integers")
        _int(out["downsample"], "dataset.downsample", 1)
        _int(out["limit"], "dataset.limit", 1, allow_none=True)
    elif not isinstance(out["path"], str) or not out["path"]:
        _fail("dataset.path", "path required")
    return out


def resolve(doc: dict) -> dict:
    """Validate ``doc`` and fill in every default."""
    cfg = _merge(DEFAULTS, doc, "")
    _int(cfg["seed"], "seed", 0)
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        _fail("output_dir", "expected a non-empty string")
    cfg["dataset"] = _resolve_dataset(cfg["dataset"])

    model = _merge(DEFAULTS["model"], cfg["model"], "model")
    _choice(model["kind"], KINDS, "model.kind")
    _int(model["input_dim"], "model.input_dim", 1, allow_none=True)
    _int(model["num_classes"], "model.num_classes", 2, allow_none=True)
    _int(model["hidden_dim"], "model.hidden_dim", 0)
    _choice(model["activation"], ACTIVATIONS, "model.activation")
    if not isinstance(model["probe_layer"], str):
        _fail("model.probe_layer", "expected a string")
    cfg["model"] = model

    train = _merge(DEFAULTS["train"], cfg["train"], "train")
    _choice(train["optimizer"], OPTIMIZERS, "train.optimizer")
    if _num(train["lr"], "train.lr") <= 0:
        _fail("train.lr", "must be > 0")
    _num(train["momentum"], "train.momentum")
    if not 0.0 <= _num(train["shampoo_lambda"], "train.shampoo_lambda") < 1.0:
        _fail("train.shampoo_lambda", "must lie in [0, 1)")
    if train["shampoo_eps"] != "auto" and _num(train["shampoo_eps"], "train.shampoo_eps") < 0:
        _fail("train.shampoo_eps", "must be >= 0 or \"auto\"")
    if _num(train["exponent"], "train.exponent") <= 0:
        _fail("train.exponent", "must be > 0")
    _int(train["batch_size"], "train.batch_size", 1, allow_none=True)
    _int(train["steps"], "train.steps", 0)
    if train["probe_schedule"] is not None:
        if not isinstance(train["probe_schedule"], list):
            _fail("train.probe_schedule", "expected a list of step indices")
        for i, s in enumerate(train["probe_schedule"]):
            _int(s, f"train.probe_schedule[{i}]", 0)
            if s > train["steps"]:
                _fail(f"train.probe_schedule[{i}]", "exceeds train.steps")
    cfg["train"] = train

    for i, name in enumerate(_str_list(cfg["estimators"], "estimators")):
        m = ESTIMATOR_RE.match(name)
        if not m or (m.group(2) is not None and int(m.group(2)) < 1):
            _fail(f"estimators[{i}]", f"unknown estimator {name!r}")
    for i, t in enumerate(_str_list(cfg["curvature_targets"], "curvature_targets")):
        _choice(t, TARGETS, f"curvature_targets[{i}]")
    _choice(cfg["cosine_method"], COSINE_METHODS, "cosine_method")
    _int(cfg["num_probes"], "num_probes", 1)
    if not isinstance(cfg["batch_sweep"], list):
        _fail("batch_sweep", "expected a list of batch sizes")
    for i, b in enumerate(cfg["batch_sweep"]):
        _int(b, f"batch_sweep[{i}]", 1)
    for i, mode in enumerate(_str_list(cfg["label_modes"], "label_modes")):
        _choice(mode, (LabelMode.REAL.value, LabelMode.SAMPLED.value), f"label_modes[{i}]")
    _int(cfg["batch_trials"], "batch_trials", 1)
    _choice(cfg["batch_method"], BATCH_METHODS, "batch_method")
    _int(cfg["checkpoint_step"], "checkpoint_step", 0, allow_none=True)
    if cfg["checkpoint_step"] is not None and cfg["checkpoint_step"] > train["steps"]:
        _fail("checkpoint_step", "exceeds train.steps")
    return cfg


def parse(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return resolve(doc)


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class Estimator:
    """Parsed estimator name; ``steps`` is set for ``opt_kron(k)``."""

    kind: str
    steps: int | None = None

    @classmethod
    def parse(cls, name):
        m = ESTIMATOR_RE.match(name)
        if not m:
            raise ConfigError(f"unknown estimator {name!r}")
        return cls("opt_kron", int(m.group(2))) if m.group(2) else cls(m.group(1))

    @property
    def name(self):
        return f"opt_kron({self.steps})" if self.kind == "opt_kron" else self.kind
