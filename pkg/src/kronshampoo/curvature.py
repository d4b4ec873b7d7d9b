"""Curvature matrices and their Kronecker-factored estimators.

Everything here is built from a :class:`~kronshampoo.models.GradientEnsemble`
(a distribution over gradient matrices ``G``) or from a running stream of
gradients.  ``H = E[vec(G) vec(G)^T]`` covers both the Gauss-Newton/Fisher
matrix (sampled labels, batch size 1) and the Adagrad accumulator.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import kronalg
from .errors import EnumerationLimitError, ShapeError
from .kronalg import KronFactors
from .models import (
    GradientEnsemble,
    LabelMode,
    Model,
    inputs_of,
    gradient_table,
    outer_factors,
    per_sample_gradients,
    predict_proba,
)
from .seeding import rng_for

MAX_DENSE_ENTRIES = 1024
SOURCES = ("gn_exact", "empirical_fisher", "batch_cov", "adagrad", "custom")

ENUM_MAX_POINTS = 6
ENUM_MAX_CLASSES = 3
ENUM_MAX_BATCH = 3


@dataclass(frozen=True)
class CurvatureMatrix:
    m: int
    n: int
    H: np.ndarray
    source: str = "custom"

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        d = self.m * self.n
        if H.shape != (d, d):
            raise ShapeError(f"curvature must be {d}x{d}, got {H.shape}")
        object.__setattr__(self, "H", H)

    @property
    def dim(self):
        return self.m * self.n

    def rearranged(self):
        return kronalg.rearrange(self.H, self.m, self.n)

    def is_valid(self):
        """Symmetric within 1e-10 and PSD within ``-1e-8 * trace/dim``."""
        return kronalg.is_psd(self.H, 1e-8)


def assemble(e: GradientEnsemble, source="custom") -> CurvatureMatrix:
    """``H = sum_k w_k vec(G_k) vec(G_k)^T``."""
    if e.m * e.n > MAX_DENSE_ENTRIES:
        raise ShapeError(f"dense H limited to mn <= {MAX_DENSE_ENTRIES}")
    g = e.vectors()
    H = g.T @ (e.weights[:, None] * g)
    return CurvatureMatrix(e.m, e.n, 0.5 * (H + H.T), source)


def _second_moments(grads, weights):
    L = np.einsum("k,kij,klj->il", weights, grads, grads)
    R = np.einsum("k,kji,kjl->il", weights, grads, grads)
    return 0.5 * (L + L.T), 0.5 * (R + R.T)


def shampoo_sq_factors(e: GradientEnsemble) -> KronFactors:
    """``L = E[G G^T]``, ``R = E[G^T G]``: one power-iteration step from the identity."""
    L, R = _second_moments(e.grads, e.weights)
    return KronFactors(L, R, "shampoo_sq")


def shampoo_factors(e: GradientEnsemble) -> KronFactors:
    """Classical Shampoo: element-wise square roots of the Shampoo^2 factors."""
    sq = shampoo_sq_factors(e)
    return KronFactors(kronalg.sym_power(sq.L, 0.5), kronalg.sym_power(sq.R, 0.5), "shampoo")


def power_iteration_factors(e: GradientEnsemble, steps=5) -> KronFactors:
    """Matrix-free form of the power iteration:
    ``L_k = E[G R_{k-1} G^T]``, ``R_k = E[G^T L_{k-1} G]`` from the identity.

    Uses the same normalisation schedule as
    :func:`kronalg.nkp_power_iteration`, so the two agree to roundoff.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    G, w = e.grads, e.weights
    L, R = np.eye(e.m), np.eye(e.n)
    for k in range(steps):
        if k:
            L, R = L / np.linalg.norm(L), R / np.linalg.norm(R)
        L, R = (
            np.einsum("k,kij,jl,kpl->ip", w, G, R, G),
            np.einsum("k,kji,jl,klp->ip", w, G, L, G),
        )
    return KronFactors(L, R, "opt_kron", steps)


def opt_kron_factors(H: CurvatureMatrix, steps=5) -> KronFactors:
    return kronalg.nkp_power_iteration(H.H, H.m, H.n, steps)


def kfac_factors(model: Model, data, label_mode="sampled", layer=None) -> KronFactors:
    """K-FAC factors ``L = E[left left^T]``, ``R = E[right right^T]``.

    ``left``/``right`` are the per-sample vectors with ``G = left right^T``
    (see :mod:`kronshampoo.models`), so the dense estimate is
    ``E[right right^T] (x) E[left left^T]`` in ``vec(G)`` coordinates.  Each
    expectation is taken on its own over the same (input, label)
    distribution.  Without weight sharing the "reduce" and "expand"
    variants coincide, so this is both.
    """
    X = inputs_of(data)
    mode = LabelMode(label_mode)
    if mode is LabelMode.REAL:
        left, right = outer_factors(model, X, data.y, layer)
        w = np.full(X.shape[0], 1.0 / X.shape[0])
    else:
        probs = predict_proba(model, X)
        N, C = probs.shape
        labels = np.tile(np.arange(C), N)
        left, right = outer_factors(model, np.repeat(X, C, axis=0), labels, layer)
        w = (probs / N).reshape(-1)
        w = w / w.sum()
    L = np.einsum("k,ki,kj->ij", w, left, left)
    R = np.einsum("k,ki,kj->ij", w, right, right)
    return KronFactors(L, R, "kfac")


# --------------------------------------------------------------------------
# batch-gradient estimators


def batch_moment_ensemble(base: GradientEnsemble, batch_size, scale_by_batch) -> GradientEnsemble:
    """Ensemble whose second moments equal those of an i.i.d. batch mean.

    For ``G_B`` the mean of ``batch_size`` independent draws from ``base``,
    ``E[G_B G_B^T] = E[G G^T]/B + (1 - 1/B) E[G] E[G]^T`` (and likewise for
    ``vec``-outer products).  The returned mixture reproduces exactly that,
    multiplied by ``B`` when ``scale_by_batch``.
    """
    B = int(batch_size)
    if B < 1:
        raise ValueError("batch_size must be >= 1")
    c = np.sqrt(B) if scale_by_batch else 1.0
    grads = np.concatenate([c * base.grads, c * base.mean()[None]], axis=0)
    weights = np.concatenate([base.weights / B, [1.0 - 1.0 / B]])
    return GradientEnsemble(grads, weights / weights.sum())


def _enumerated_batches(model, data, B, mode, layer):
    X = inputs_of(data)
    N = X.shape[0]
    C = model.config.num_classes
    too_many_classes = mode is not LabelMode.REAL and C > ENUM_MAX_CLASSES
    if N > ENUM_MAX_POINTS or B > ENUM_MAX_BATCH or too_many_classes:
        raise EnumerationLimitError(
            f"batch enumeration needs N <= {ENUM_MAX_POINTS}, C <= {ENUM_MAX_CLASSES}, "
            f"|B| <= {ENUM_MAX_BATCH}; got N={N}, C={C}, |B|={B}"
        )
    if mode is LabelMode.REAL:
        G = per_sample_gradients(model, X, data.y, layer)
        grads, weights = [], []
        for tup in itertools.product(range(N), repeat=B):
            grads.append(G[list(tup)].mean(axis=0))
            weights.append(float(N) ** -B)
        return np.array(grads), np.array(weights)
    table = gradient_table(model, X, layer)
    probs = predict_proba(model, X)
    grads, weights = [], []
    for tup in itertools.product(range(N), repeat=B):
        for labs in itertools.product(range(C), repeat=B):
            w = float(N) ** -B
            for i, c in zip(tup, labs):
                w *= probs[i, c]
            grads.append(np.mean([table[i, c] for i, c in zip(tup, labs)], axis=0))
            weights.append(w)
    return np.array(grads), np.array(weights)


def _monte_carlo_batches(model, data, B, mode, trials, seed, layer):
    X = inputs_of(data)
    N = X.shape[0]
    idx = rng_for(seed, "batch").integers(0, N, size=(trials, B))
    if mode is LabelMode.REAL:
        flat = per_sample_gradients(model, X, data.y, layer)
        keys = idx
        K = N
    else:
        table = gradient_table(model, X, layer)
        probs = predict_proba(model, X)
        C = probs.shape[1]
        # inverse-CDF draw of one label per (trial, slot)
        cdf = np.cumsum(probs, axis=1)[idx]
        u = rng_for(seed, "labels").random((trials, B, 1)) * cdf[..., -1:]
        labels = np.minimum((u > cdf).sum(axis=2), C - 1)
        flat = table.reshape(N * C, *table.shape[2:])
        keys = idx * C + labels
        K = N * C
    counts = np.zeros((trials, K))
    np.add.at(counts, (np.repeat(np.arange(trials), B), keys.reshape(-1)), 1.0)
    m, n = flat.shape[1:]
    grads = (counts @ flat.reshape(K, m * n) / B).reshape(trials, m, n)
    return grads, np.full(trials, 1.0 / trials)


def batch_ensemble(model: Model, data, batch_size, label_mode="real", trials=2000, seed=0,
                   method="monte_carlo", layer=None) -> GradientEnsemble:
    """Distribution of batch gradients, scaled so second moments target ``H``.

    Sampled-label batches are multiplied by ``sqrt(|B|)`` (so ``assemble``
    gives ``|B| E[vec(G_B) vec(G_B)^T]``); real-label batches are left as is.

    ``method``:
      * ``"monte_carlo"`` -- ``trials`` seeded batches drawn with replacement;
      * ``"enumerate"`` -- every ordered |B|-tuple and label assignment
        (small problems only);
      * ``"moments"`` -- the closed-form mixture of
        :func:`batch_moment_ensemble`.
    """
    mode = LabelMode(label_mode)
    B = int(batch_size)
    if B < 1:
        raise ValueError("batch_size must be >= 1")
    scale = mode is not LabelMode.REAL
    if method == "moments":
        from .models import empirical_ensemble, gn_ensemble_exact

        base = (empirical_ensemble(model, data, layer=layer) if mode is LabelMode.REAL
                else gn_ensemble_exact(model, data, layer))
        return batch_moment_ensemble(base, B, scale)
    if method == "enumerate":
        grads, weights = _enumerated_batches(model, data, B, mode, layer)
    elif method == "monte_carlo":
        if trials < 1:
            raise ValueError("trials must be >= 1")
        grads, weights = _monte_carlo_batches(model, data, B, mode, int(trials), seed, layer)
    else:
        raise ValueError(f"unknown batch method {method!r}")
    if scale:
        grads = np.sqrt(B) * grads
    return GradientEnsemble(grads, weights / weights.sum())


def batch_covariance(model: Model, data, batch_size, label_mode="real", trials=2000, seed=0,
                     method="monte_carlo", layer=None) -> CurvatureMatrix:
    e = batch_ensemble(model, data, batch_size, label_mode, trials, seed, method, layer)
    return assemble(e, "batch_cov")


# --------------------------------------------------------------------------
# running accumulators


@dataclass(frozen=True)
class AdagradAccumulator:
    """Running ``sum g g^T`` together with its Shampoo factor sums."""

    m: int
    n: int
    L: np.ndarray
    R: np.ndarray
    H: np.ndarray | None = None
    steps: int = 0
    sq_norm: float = 0.0

    @classmethod
    def zeros(cls, m, n, exact=True):
        if exact and m * n > MAX_DENSE_ENTRIES:
            raise ShapeError(f"exact H storage limited to mn <= {MAX_DENSE_ENTRIES}")
        H = np.zeros((m * n, m * n)) if exact else None
        return cls(m, n, np.zeros((m, m)), np.zeros((n, n)), H)

    def curvature(self) -> CurvatureMatrix:
        if self.H is None:
            raise ValueError("accumulator was created without exact H storage")
        return CurvatureMatrix(self.m, self.n, self.H, "adagrad")

    def shampoo_sq(self) -> KronFactors:
        return KronFactors(self.L, self.R, "shampoo_sq")

    def shampoo(self) -> KronFactors:
        return KronFactors(kronalg.sym_power(self.L, 0.5), kronalg.sym_power(self.R, 0.5),
                           "shampoo")


def adagrad_update(acc: AdagradAccumulator, G) -> AdagradAccumulator:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (acc.m, acc.n):
        raise ShapeError(f"gradient must be {acc.m}x{acc.n}, got {G.shape}")
    H = acc.H
    if H is not None:
        g = kronalg.vec(G)
        H = H + np.outer(g, g)
    return replace(acc, L=acc.L + G @ G.T, R=acc.R + G.T @ G, H=H, steps=acc.steps + 1,
                   sq_norm=acc.sq_norm + float(np.sum(G * G)))


@dataclass(frozen=True)
class ShampooState:
    """Exponential moving averages ``L = lam L + (1-lam) G G^T`` (same for ``R``)."""

    L: np.ndarray
    R: np.ndarray
    lam: float = 0.99
    eps: float | str = "auto"
    steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lam must lie in [0, 1)")

    @classmethod
    def zeros(cls, m, n, lam=0.99, eps="auto"):
        return cls(np.zeros((m, m)), np.zeros((n, n)), lam, eps)


def shampoo_state_update(s: ShampooState, G) -> ShampooState:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (s.L.shape[0], s.R.shape[0]):
        raise ShapeError(f"gradient shape {G.shape} does not match state")
    lam = s.lam
    return replace(s, L=lam * s.L + (1 - lam) * (G @ G.T), R=lam * s.R + (1 - lam) * (G.T @ G),
                   steps=s.steps + 1)


# --------------------------------------------------------------------------
# rank factors and PSD-dominance gaps


def numerical_rank(G, rel_tol=1e-10):
    s = np.linalg.svd(np.asarray(G, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def max_sample_rank(grads):
    return max(numerical_rank(G) for G in grads)


def adagrad_bound_gap(acc: AdagradAccumulator, r=None, eps=1e-3):
    """``lambda_min`` of ``(eps I + L)^{1/2} (x) (eps I + R)^{1/2} - eps I - H / r``.

    Returns ``(lambda_min, trace of the Kronecker bound)``.  ``r`` defaults
    to ``min(m, n)``, the largest rank any gradient can have.
    """
    if acc.H is None:
        raise ValueError("needs exact H storage")
    r = min(acc.m, acc.n) if r is None else r
    Ls = kronalg.sym_power(acc.L + eps * np.eye(acc.m), 0.5)
    Rs = kronalg.sym_power(acc.R + eps * np.eye(acc.n), 0.5)
    bound = KronFactors(Ls, Rs).to_dense()
    gap = bound - eps * np.eye(acc.m * acc.n) - acc.H / r
    return float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0]), float(np.trace(bound))


def shampoo_bound_gap(e: GradientEnsemble, r=None):
    """``lambda_min`` of ``r * Shampoo - H`` and the trace of ``r * Shampoo``."""
    r = max_sample_rank(e.grads) if r is None else r
    bound = r * shampoo_factors(e).to_dense()
    gap = bound - assemble(e).H
    return float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0]), float(np.trace(bound))
