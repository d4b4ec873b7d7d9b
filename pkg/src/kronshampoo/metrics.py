"""Similarity measures between curvature matrices and their estimators.

Matrix-free operators are plain callables mapping a ``(dim, k)`` block of
vectors to ``H @ block``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kronalg
from .curvature import CurvatureMatrix
from .errors import DegenerateInputError, ShapeError
from .kronalg import KronFactors
from .models import GradientEnsemble
from .seeding import rng_for

DEFAULT_PROBES = 100


def cosine_similarity(M1, M2):
    """``Tr(M1 M2^T) / (||M1||_F ||M2||_F)``."""
    M1 = np.asarray(M1, dtype=np.float64)
    M2 = np.asarray(M2, dtype=np.float64)
    if M1.shape != M2.shape:
        raise ShapeError(f"shape mismatch {M1.shape} vs {M2.shape}")
    n1, n2 = np.linalg.norm(M1), np.linalg.norm(M2)
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateInputError("cosine similarity of a zero matrix is undefined")
    return float(np.clip(np.sum(M1 * M2) / (n1 * n2), -1.0, 1.0))


# --------------------------------------------------------------------------
# matrix-free operators


def dense_operator(H):
    H = H.H if isinstance(H, CurvatureMatrix) else np.asarray(H, dtype=np.float64)
    return lambda V: H @ V


def ensemble_operator(e: GradientEnsemble):
    """``H v = sum_k w_k (g_k . v) g_k`` without forming ``H``."""
    g = e.vectors()
    w = e.weights[:, None]
    return lambda V: g.T @ (w * (g @ V))


def gaussian_probes(dim, num_probes=DEFAULT_PROBES, seed=0):
    if num_probes < 1:
        raise ValueError("need at least one probe")
    return rng_for(seed, "probe").standard_normal((dim, num_probes))


def hutchinson_sq_samples(hv, dim, num_probes=DEFAULT_PROBES, seed=0):
    """Per-probe ``||H v||^2``; each is an unbiased estimate of ``||H||_F^2``."""
    V = gaussian_probes(dim, num_probes, seed)
    HV = hv(V)
    return np.einsum("ij,ij->j", HV, HV)


def hutchinson_frobenius(hv, dim, num_probes=DEFAULT_PROBES, seed=0):
    return float(np.sqrt(hutchinson_sq_samples(hv, dim, num_probes, seed).mean()))


def cosine_from_products(V, HV, K: KronFactors):
    """Three-step probe estimate of ``cos(H, K)`` given probe products ``H V``.

    1. ``||H||_F^2`` is estimated as the mean of ``||H v||^2``;
       ``||K||_F = ||L||_F ||R||_F`` is exact.
    2. ``K`` is rescaled to the estimated norm of ``H``.
    3. ``cos = 1 - ||H - S||_F^2 / (2 ||H||_F^2)``, with the residual norm
       estimated from the same probes.
    """
    kn = K.frobenius_norm()
    if kn == 0.0:
        raise DegenerateInputError("estimator is zero")
    h2 = np.mean(np.einsum("ij,ij->j", HV, HV))
    if h2 == 0.0:
        raise DegenerateInputError("target is zero on every probe")
    S_V = (np.sqrt(h2) / kn) * K.matvec(V)
    D = HV - S_V
    resid2 = np.mean(np.einsum("ij,ij->j", D, D))
    return float(1.0 - resid2 / (2.0 * h2))


def probe_cosine(hv, K: KronFactors, dim, num_probes=DEFAULT_PROBES, seed=0):
    if K.m * K.n != dim:
        raise ShapeError(f"estimator acts on {K.m * K.n} dims, target on {dim}")
    V = gaussian_probes(dim, num_probes, seed)
    return cosine_from_products(V, hv(V), K)


def cosine_similarity_kron(K: KronFactors, H, num_probes=DEFAULT_PROBES, seed=0, dim=None):
    """``cos(L (x) R, H)``.

    Dense ``H`` (array or :class:`CurvatureMatrix`) is handled exactly via
    ``vec(L)^T rearrange(H) vec(R)``.  A callable ``H`` is treated as a
    matrix-free operator: ``Tr((L (x) R) H)`` and ``||H||_F`` are then
    Hutchinson estimates over ``num_probes`` Gaussian probes.
    """
    kn = K.frobenius_norm()
    if kn == 0.0:
        raise DegenerateInputError("estimator is zero")
    if callable(H):
        dim = K.m * K.n if dim is None else dim
        V = gaussian_probes(dim, num_probes, seed)
        HV = H(V)
        KtV = kronalg.kron_matvec(K.R, K.L, V)  # (L (x) R)^T v
        inner = np.mean(np.einsum("ij,ij->j", KtV, HV))
        hn = np.sqrt(np.mean(np.einsum("ij,ij->j", HV, HV)))
        if hn == 0.0:
            raise DegenerateInputError("target is zero on every probe")
        return float(np.clip(inner / (kn * hn), -1.0, 1.0))
    Hm = H.H if isinstance(H, CurvatureMatrix) else np.asarray(H, dtype=np.float64)
    hn = np.linalg.norm(Hm)
    if hn == 0.0:
        raise DegenerateInputError("target is zero")
    Hhat = kronalg.rearrange(Hm, K.m, K.n).mat
    inner = kronalg.vec(K.L) @ Hhat @ kronalg.vec(K.R)
    return float(np.clip(inner / (kn * hn), -1.0, 1.0))


# --------------------------------------------------------------------------
# running H_Ada v products


@dataclass(frozen=True)
class ProbeBank:
    """Fixed probes ``v_k`` (rows) and running ``H_Ada v_k`` accumulators."""

    probes: np.ndarray
    hv: np.ndarray
    sq_norm: float = 0.0
    steps: int = 0

    @classmethod
    def create(cls, dim, num_probes=DEFAULT_PROBES, seed=0, probes=None):
        V = gaussian_probes(dim, num_probes, seed).T if probes is None else np.atleast_2d(
            np.asarray(probes, dtype=np.float64))
        return cls(V, np.zeros_like(V))

    @property
    def dim(self):
        return self.probes.shape[1]

    @property
    def num_probes(self):
        return self.probes.shape[0]

    def cosine(self, K: KronFactors):
        return cosine_from_products(self.probes.T, self.hv.T, K)

    def frobenius(self):
        return float(np.sqrt(np.mean(np.einsum("ij,ij->i", self.hv, self.hv))))


def adagrad_hv(bank: ProbeBank, g) -> ProbeBank:
    """Advance every accumulator by ``(g . v_k) g``; a matrix ``g`` is vectorized first."""
    g = np.asarray(g, dtype=np.float64)
    g = kronalg.vec(g) if g.ndim == 2 else g.reshape(-1)
    if g.size != bank.dim:
        raise ShapeError(f"gradient length {g.size} != probe dim {bank.dim}")
    return replace(bank, hv=bank.hv + np.outer(bank.probes @ g, g),
                   sq_norm=bank.sq_norm + float(g @ g), steps=bank.steps + 1)


# --------------------------------------------------------------------------
# spectrum of the rearranged matrix


def psd_status(M, rel_tol=1e-6):
    """True when ``M`` is symmetric and ``lambda_min >= -rel_tol * ||M||_F``."""
    M = np.asarray(M, dtype=np.float64)
    nrm = np.linalg.norm(M)
    if nrm == 0.0:
        return True
    if np.linalg.norm(M - M.T) > 1e-8 * nrm:
        return False
    return bool(np.linalg.eigvalsh(0.5 * (M + M.T))[0] >= -rel_tol * nrm)


def _ratio(alphas, sigmas):
    w = alphas * sigmas
    denom = np.sqrt(np.sum(w * w))
    return float(w[0] / denom) if denom > 0 else 0.0


@dataclass(frozen=True)
class SpectrumReport:
    """Singular values of ``rearrange(H)`` and identity overlaps.

    ``alphas_left[i] = Tr(U_i)`` and ``alphas_right[i] = Tr(V_i)``.
    ``ratio_L`` is the cosine between ``E[G G^T]`` (one step from the
    identity) and ``U_1``; it is driven by the right-side overlaps, since
    ``vec(E[G G^T]) = rearrange(H) vec(I_n)``.  ``ratio_R`` mirrors it.
    """

    sigmas: np.ndarray
    alphas_left: np.ndarray
    alphas_right: np.ndarray
    ratio_opt: float
    ratio_L: float
    ratio_R: float
    top_left_psd: bool
    top_right_psd: bool
    top_positive_definite: bool
    later_psd: np.ndarray

    @property
    def later_all_indefinite(self):
        return not bool(np.any(self.later_psd))


def spectrum_report(H, m=None, n=None, method="jacobi") -> SpectrumReport:
    if isinstance(H, CurvatureMatrix):
        m, n, H = H.m, H.n, H.H
    if m * n > 1024:
        raise ShapeError("spectrum reports are limited to mn <= 1024")
    res = kronalg.svd(kronalg.rearrange(H, m, n).mat, method=method)
    s, U, V = res.singular_values, res.left_vectors, res.right_vectors
    a_left = kronalg.vec(np.eye(m)) @ U
    a_right = kronalg.vec(np.eye(n)) @ V
    total = np.sqrt(np.sum(s * s))
    ratio_opt = float(s[0] / total) if total > 0 else 0.0
    U1, V1 = kronalg.unvec(U[:, 0], m, m), kronalg.unvec(V[:, 0], n, n)
    pd = bool(np.linalg.eigvalsh(0.5 * (V1 + V1.T))[0] > 1e-10 * np.linalg.norm(V1))
    later = np.array([psd_status(kronalg.unvec(V[:, i], n, n)) for i in range(1, s.size)],
                     dtype=bool)
    return SpectrumReport(s, a_left, a_right, ratio_opt, _ratio(a_right, s), _ratio(a_left, s),
                          psd_status(U1, 1e-8), psd_status(V1, 1e-8), pd, later)


# --------------------------------------------------------------------------
# identity as the max-min initialisation


@dataclass(frozen=True)
class MinimaxReport:
    m: int
    trials: int
    bound: float
    min_identity_dot: float
    identity_ok: bool
    max_adversary_dot: float
    adversary_ok: bool

    @property
    def passed(self):
        return self.identity_ok and self.adversary_ok


def random_unit_psd(m, count, rng):
    """Random PSD matrices of unit Frobenius norm with ranks spread over 1..m."""
    ranks = rng.integers(1, m + 1, size=count)
    A = rng.standard_normal((count, m, m))
    A *= (np.arange(m)[None, None, :] < ranks[:, None, None])
    M = A @ A.transpose(0, 2, 1)
    return M / np.linalg.norm(M, axis=(1, 2))[:, None, None]


def identity_minimax_check(m, trials, seed=0) -> MinimaxReport:
    """Check the max-min property of ``I/sqrt(m)`` over unit-norm PSD matrices.

    (a) every sampled ``M'`` has ``<I/sqrt(m), M'> >= 1/sqrt(m)``;
    (b) every sampled candidate ``M`` (not the scaled identity) loses to the
        adversary ``q q^T`` built from its smallest eigenvector:
        ``<M, q q^T> < 1/sqrt(m)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    bound = float(1.0 / np.sqrt(m))
    rng = rng_for(seed, "minimax")
    Mp = random_unit_psd(m, trials, rng)
    dots = np.trace(Mp, axis1=1, axis2=2) / np.sqrt(m)
    cand = random_unit_psd(m, trials, rng)
    lam, Q = np.linalg.eigh(cand)
    q = Q[:, :, 0]
    adv = np.einsum("ki,kij,kj->k", q, cand, q)
    return MinimaxReport(
        m, trials, bound,
        float(dots.min()), bool(np.all(dots >= bound - 1e-12)),
        float(adv.max()), bool(np.all(adv < bound)),
    )
