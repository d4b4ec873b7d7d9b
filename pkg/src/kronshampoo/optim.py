"""GD / SGD-with-momentum and Shampoo training drivers."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import kronalg
from .errors import NumericalError
from .curvature import ShampooState, shampoo_state_update
from .models import Model, full_gradient, loss
from .seeding import rng_for

OPTIMIZERS = ("gd", "sgd_momentum", "shampoo")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "gd"
    lr: float = 0.01
    momentum: float = 0.0
    shampoo_lambda: float = 0.99
    shampoo_eps: float | str = "auto"
    exponent: float = 0.5
    batch_size: int | None = None  # None = full batch
    steps: int = 25
    seed: int = 0
    probe_schedule: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.shampoo_lambda < 1.0:
            raise ValueError("shampoo_lambda must lie in [0, 1)")
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def schedule(self):
        """Probe steps; geometric ``0, 1, 2, 4, ..., steps`` unless given."""
        if self.probe_schedule is not None:
            return sorted(set(int(s) for s in self.probe_schedule if 0 <= s <= self.steps))
        return geometric_schedule(self.steps)


def geometric_schedule(steps):
    out, s = [0], 1
    while s < steps:
        out.append(s)
        s *= 2
    if steps > 0:
        out.append(steps)
    return sorted(set(out))


def sgd_step(params, grads, velocity, lr, momentum=0.0):
    """``v <- momentum * v + G``; ``W <- W - lr * v`` for every layer."""
    new_v = {k: momentum * velocity.get(k, 0.0) + grads[k] for k in grads}
    new_p = {k: params[k] - lr * new_v[k] for k in params}
    return new_p, new_v


def precondition(G, L, R, exponent=0.5, eps=0.0):
    """``L^{-exponent/2} G R^{-exponent/2}``.

    Equivalently ``(L^{1/2} (x) R^{1/2})^{-exponent}`` applied to ``vec(G)``;
    ``exponent=1/2`` is the classical Shampoo update ``L^{-1/4} G R^{-1/4}``.
    """
    q = -exponent / 2.0
    return kronalg.sym_power(L, q, eps) @ G @ kronalg.sym_power(R, q, eps)


def shampoo_step(params, grads, states, lr, exponent=0.5, eps="auto"):
    """Update every layer's EMA factors, then step along the preconditioned gradient.

    ``eps`` damps eigenvalues when the factors are inverted; it is not
    accumulated into the factors themselves.
    """
    new_states = {k: shampoo_state_update(states[k], grads[k]) for k in grads}
    new_p = {}
    for k, W in params.items():
        s = new_states[k]
        new_p[k] = W - lr * precondition(grads[k], s.L, s.R, exponent, eps)
    return new_p, new_states


@dataclass(frozen=True)
class TrainEvent:
    """Model ``W_t`` and the batch gradient ``G_t`` that moves it to ``W_{t+1}``."""

    step: int
    model: Model
    grads: dict
    loss: float


@dataclass
class Trainer:
    model: Model
    data: object
    config: TrainConfig
    velocity: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.config.optimizer == "shampoo" and not self.states:
            self.states = {
                k: ShampooState.zeros(*shape, lam=self.config.shampoo_lambda,
                                      eps=self.config.shampoo_eps)
                for k, shape in self.model.config.layer_shapes().items()
            }

    def batch_gradient(self, step):
        cfg, X, y = self.config, self.data.X, self.data.y
        if cfg.batch_size is None:
            return full_gradient(self.model, X, y)
        idx = rng_for(cfg.seed, "train_batch", step).integers(0, len(y), size=cfg.batch_size)
        return full_gradient(self.model, X[idx], y[idx])

    def apply(self, grads):
        cfg = self.config
        P = self.model.params
        if cfg.optimizer == "shampoo":
            P, self.states = shampoo_step(P, grads, self.states, cfg.lr, cfg.exponent,
                                          cfg.shampoo_eps)
        else:
            mom = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
            P, self.velocity = sgd_step(P, grads, self.velocity, cfg.lr, mom)
        self.model = replace(self.model, params=P)

    def run(self) -> Iterator[TrainEvent]:
        """Yield events for ``t = 0..steps``; the last one is not applied."""
        for t in range(self.config.steps + 1):
            grads = self.batch_gradient(t)
            value = loss(self.model, self.data)
            if not np.isfinite(value):
                raise NumericalError(f"loss is not finite at step {t}")
            yield TrainEvent(t, self.model, grads, value)
            if t < self.config.steps:
                self.apply(grads)
            if not all(np.all(np.isfinite(W)) for W in self.model.params.values()):
                raise NumericalError(f"training diverged at step {t}")


def train(model, data, config: TrainConfig):
    """Run to completion; returns the final model and the per-step losses."""
    trainer = Trainer(model, data, config)
    losses = [ev.loss for ev in trainer.run()]
    return trainer.model, losses
