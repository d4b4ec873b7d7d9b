"""Kronecker-product algebra on dense float64 matrices.

Conventions used throughout the package:

* ``vec`` stacks columns: entry ``(i, j)`` of an ``m x n`` matrix lands at
  position ``j*m + i``.
* ``kron(A, B)[r*i + i', s*j + j'] = A[i, j] * B[i', j']`` (same as numpy).
* A curvature matrix ``H`` over an ``m x n`` weight is indexed by
  ``vec(G)``, so row ``(i, j)`` is ``j*m + i``.
* ``rearrange(H)[m*i + i', n*j + j'] = H[m*j + i, m*j' + i']`` maps
  ``H`` to an ``m^2 x n^2`` matrix in which Kronecker structure becomes
  rank-one structure.

Under these conventions the ``mn x mn`` operator whose rearrangement is
``vec(L) vec(R)^T`` is ``kron(R^T, L^T)`` -- for symmetric factors,
``kron(R, L)``, i.e. the map ``vec(G) -> vec(L G R)``.  :class:`KronFactors`
hides this ordering; code that needs the dense matrix should call
:meth:`KronFactors.to_dense` rather than ``kron(L, R)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateInputError,
    NegativeSpectrumError,
    NotSymmetricError,
    NumericalError,
    ShapeError,
)

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60
MAX_SVD_DIM = 1200

CURVATURE_PROVENANCES = ("shampoo", "shampoo_sq", "opt_kron", "kfac")


def _as_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {M.shape}")
    return M


def _check_finite(M, what):
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"{what} produced non-finite entries")
    return M


def vec(M):
    """Column-stacking vectorization."""
    M = _as_matrix(M)
    return M.reshape(-1, order="F").copy()


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != rows * cols:
        raise ShapeError(f"cannot unvec length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()


def kron(A, B):
    return np.kron(_as_matrix(A, "A"), _as_matrix(B, "B"))


def kron_matvec(A, B, g):
    """``kron(A, B) @ g`` computed as ``vec(B @ unvec(g) @ A.T)``.

    ``g`` may also be a 2-D array whose columns are multiplied independently.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    g = np.asarray(g, dtype=np.float64)
    q, s = A.shape[1], B.shape[1]
    if g.shape[0] != q * s:
        raise ShapeError(
            f"vector length {g.shape[0]} does not match kron of {A.shape} and {B.shape}"
        )
    if g.ndim == 1:
        X = g.reshape(s, q, order="F")
        return (B @ X @ A.T).reshape(-1, order="F")
    k = g.shape[1]
    # column c of g becomes the (s, q) matrix X[:, :, c]
    X = g.reshape(s, q, k, order="F")
    Y = np.einsum("ab,bck,dc->adk", B, X, A)
    return Y.reshape(-1, k, order="F")


@dataclass(frozen=True)
class RearrangedMatrix:
    """``rearrange(H)`` together with the base shape it came from."""

    m: int
    n: int
    mat: np.ndarray

    def __post_init__(self):
        if self.mat.shape != (self.m * self.m, self.n * self.n):
            raise ShapeError(
                f"rearranged matrix must be {(self.m**2, self.n**2)}, got {self.mat.shape}"
            )


def rearrange(H, m, n) -> RearrangedMatrix:
    H = _as_matrix(H, "H")
    if m < 1 or n < 1 or H.shape != (m * n, m * n):
        raise ShapeError(f"H of shape {H.shape} is not (m*n, m*n) for m={m}, n={n}")
    # H4[j, i, j', i'] = H[m j + i, m j' + i']
    H4 = H.reshape(n, m, n, m)
    return RearrangedMatrix(m, n, H4.transpose(1, 3, 0, 2).reshape(m * m, n * n).copy())


def inverse_rearrange(X) -> np.ndarray:
    if not isinstance(X, RearrangedMatrix):
        raise ShapeError("inverse_rearrange expects a RearrangedMatrix")
    m, n = X.m, X.n
    return X.mat.reshape(m, m, n, n).transpose(2, 0, 3, 1).reshape(m * n, m * n).copy()


# --------------------------------------------------------------------------
# SVD


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    sweeps: int = 0

    @property
    def rank(self):
        return self.singular_values.size

    def reconstruct(self):
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def _round_robin(n):
    """Yield rounds of disjoint column pairs covering every pair once."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    N = len(players)
    for _ in range(N - 1):
        pairs = [(players[i], players[N - 1 - i]) for i in range(N // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            yield np.array(pairs, dtype=np.intp)
        players = [players[0], players[-1]] + players[1:-1]


def _jacobi_tall(A, tol, max_sweeps):
    """One-sided Jacobi on a matrix with rows >= cols; returns (A V, V, sweeps)."""
    A = A.copy()
    n = A.shape[1]
    V = np.eye(n)
    if n == 1:
        return A, V, 0
    schedule = list(_round_robin(n))
    negligible = (1e-15 * np.linalg.norm(A)) ** 2
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for pairs in schedule:
            p, q = pairs[:, 0], pairs[:, 1]
            ap, aq = A[:, p], A[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (
                np.minimum(alpha, beta) > negligible
            )
            if not active.any():
                continue
            rotated = True
            zeta = np.where(active, (beta - alpha) / np.where(active, 2.0 * gamma, 1.0), 0.0)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return A, V, sweep
    raise ConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def _complete_columns(U, good):
    """Replace the columns of U not flagged ``good`` by an orthonormal completion."""
    if good.all():
        return U
    Ug = U[:, good]
    Q, _ = np.linalg.qr(Ug, mode="complete") if Ug.shape[1] else (np.eye(U.shape[0]), None)
    extra = Q[:, Ug.shape[1]:]
    out = U.copy()
    out[:, ~good] = extra[:, : int((~good).sum())]
    return out


def _fix_signs(U, V):
    """Flip each (u, v) pair so the largest-magnitude entry of u is positive.

    Near-ties (within 1e-9 relative) resolve to the first index, which keeps
    the choice stable under roundoff.
    """
    U = U.copy()
    V = V.copy()
    for k in range(U.shape[1]):
        mags = np.abs(U[:, k])
        top = mags.max()
        if top == 0.0:
            continue
        idx = int(np.argmax(mags >= top * (1 - 1e-9)))
        if U[idx, k] < 0:
            U[:, k] *= -1
            V[:, k] *= -1
    return U, V


def svd(M, rank=None, method="jacobi") -> SvdResult:
    """Thin SVD with non-increasing singular values and fixed signs.

    Parameters
    ----------
    M : array_like
        Finite matrix with ``min(M.shape) <= 1200``.
    rank : int or None
        Number of leading triples to keep; ``None`` keeps all ``min(M.shape)``.
    method : {"jacobi", "lapack"}
        ``"jacobi"`` runs one-sided Jacobi on the thinner orientation (hard
        cap of 60 sweeps, then :class:`ConvergenceError`); ``"lapack"``
        delegates to :func:`numpy.linalg.svd`.
    """
    M = _as_matrix(M, "M")
    if not np.all(np.isfinite(M)):
        raise NumericalError("svd input has non-finite entries")
    k = min(M.shape)
    if k > MAX_SVD_DIM:
        raise ShapeError(f"svd limited to min dimension {MAX_SVD_DIM}, got {k}")
    if rank is not None and not 1 <= rank <= k:
        raise ShapeError(f"rank must be in [1, {k}], got {rank}")

    sweeps = 0
    if method == "lapack":
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        V = Vt.T
    elif method == "jacobi":
        transposed = M.shape[1] > M.shape[0]
        A = M.T if transposed else M
        Q = None
        if A.shape[0] > 2 * A.shape[1]:
            # QR pre-reduction: Jacobi then only sees a square triangle
            Q, A = np.linalg.qr(A)
        AV, V, sweeps = _jacobi_tall(A, JACOBI_TOL, JACOBI_MAX_SWEEPS)
        if Q is not None:
            AV = Q @ AV
        s = np.linalg.norm(AV, axis=0)
        order = np.argsort(-s, kind="stable")
        s, AV, V = s[order], AV[:, order], V[:, order]
        good = s > 1e-15 * max(np.linalg.norm(M), np.finfo(float).tiny)
        U = np.zeros_like(AV)
        U[:, good] = AV[:, good] / s[good]
        U = _complete_columns(U, good)
        if transposed:
            U, V = V, U
    else:
        raise ValueError(f"unknown svd method {method!r}")

    U, V = _fix_signs(U, V)
    if rank is not None:
        s, U, V = s[:rank], U[:, :rank], V[:, :rank]
    return SvdResult(s.copy(), U, V, sweeps)


# --------------------------------------------------------------------------
# Kronecker factors and the nearest-Kronecker power iteration


@dataclass(frozen=True)
class KronFactors:
    """A Kronecker-structured estimate ``L (x) R`` of an ``mn x mn`` matrix.

    ``L`` is ``m x m`` (row side of the weight), ``R`` is ``n x n``.  The
    dense operator in ``vec(G)`` coordinates is ``vec(G) -> vec(L^T G R)``,
    i.e. ``vec(L G R)`` for the symmetric factors of every curvature estimator.
    """

    L: np.ndarray
    R: np.ndarray
    provenance: str = "custom"
    steps: int | None = field(default=None, compare=False)

    def __post_init__(self):
        L = _as_matrix(self.L, "L")
        R = _as_matrix(self.R, "R")
        if L.shape[0] != L.shape[1] or R.shape[0] != R.shape[1]:
            raise ShapeError(f"Kronecker factors must be square, got {L.shape}, {R.shape}")
        _check_finite(L, "L factor")
        _check_finite(R, "R factor")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "R", R)

    @property
    def m(self):
        return self.L.shape[0]

    @property
    def n(self):
        return self.R.shape[0]

    @property
    def name(self):
        if self.provenance == "opt_kron":
            return f"opt_kron({self.steps})"
        return self.provenance

    def to_dense(self):
        return np.kron(self.R.T, self.L.T)

    def rearranged(self):
        return np.outer(vec(self.L), vec(self.R))

    def frobenius_norm(self):
        return float(np.linalg.norm(self.L) * np.linalg.norm(self.R))

    def matvec(self, v):
        return kron_matvec(self.R.T, self.L.T, v)

    def scaled(self, c):
        return KronFactors(c * self.L, self.R, self.provenance, self.steps)


def identity_factors(m, n):
    return KronFactors(np.eye(m), np.eye(n), "custom")


def nkp_power_iteration(H, m, n, steps=5, init=None) -> KronFactors:
    """Alternating power iteration for the nearest Kronecker product of ``H``.

    Works on ``Hhat = rearrange(H)`` with the simultaneous update
    ``l_k = Hhat r_{k-1}``, ``r_k = Hhat^T l_{k-1}`` -- in factor form
    ``L_k = E[G R_{k-1} G^T]``, ``R_k = E[G^T L_{k-1} G]``.

    The first step uses ``init`` as given (identity by default), so
    ``steps=1`` returns exactly ``(E[G G^T], E[G^T G])``.  Later steps feed
    unit-normalised iterates back in; only the direction of the result is
    meaningful beyond the first step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    Hhat = H.mat if isinstance(H, RearrangedMatrix) else rearrange(H, m, n).mat
    if not np.any(Hhat):
        raise DegenerateInputError("H is identically zero; Kronecker direction undefined")
    if init is None:
        init = identity_factors(m, n)
    if init.L.shape != (m, m) or init.R.shape != (n, n):
        raise ShapeError(f"init factors must be {m}x{m} and {n}x{n}")
    ell, r = vec(init.L), vec(init.R)
    for k in range(steps):
        if k:
            nl, nr = np.linalg.norm(ell), np.linalg.norm(r)
            ell, r = ell / nl, r / nr
        ell, r = Hhat @ r, Hhat.T @ ell
        if not (np.any(ell) and np.any(r)):
            raise DegenerateInputError("power iteration collapsed to zero; init orthogonal to H")
    return KronFactors(unvec(ell, m, m), unvec(r, n, n), "opt_kron", steps)


# --------------------------------------------------------------------------
# symmetric matrix functions


def resolve_damping(M, eps):
    """Turn ``"auto"`` into ``1e-10 * trace(M)/dim + 1e-30``."""
    if isinstance(eps, str):
        if eps != "auto":
            raise ValueError(f"damping must be a number or 'auto', got {eps!r}")
        return 1e-10 * max(float(np.trace(M)), 0.0) / M.shape[0] + 1e-30
    if eps < 0:
        raise ValueError("damping must be non-negative")
    return float(eps)


def symmetric_eigh(M, sym_tol=1e-8):
    """Eigendecomposition of a numerically symmetric PSD matrix.

    Small negative eigenvalues (above ``-1e-8 * trace/dim``) are clamped to 0.
    """
    M = _as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise ShapeError(f"expected a square matrix, got {M.shape}")
    scale = np.linalg.norm(M)
    if np.linalg.norm(M - M.T) > sym_tol * max(scale, np.finfo(float).tiny):
        raise NotSymmetricError("matrix is not symmetric within tolerance")
    lam, Q = np.linalg.eigh(0.5 * (M + M.T))
    floor = -1e-8 * max(float(np.trace(M)), 0.0) / M.shape[0]
    if lam.size and lam[0] < floor:
        raise NegativeSpectrumError(
            f"eigenvalue {lam[0]:.3e} is below the PSD tolerance {floor:.3e}"
        )
    return np.clip(lam, 0.0, None), Q


def sym_power(M, p, eps=0.0):
    """``Q (Lambda + eps I)^p Q^T`` for symmetric PSD ``M``.

    ``eps`` may be ``"auto"`` (see :func:`resolve_damping`).  Raises
    :class:`NumericalError` when a negative power meets a zero eigenvalue.
    """
    lam, Q = symmetric_eigh(M)
    eps = resolve_damping(M, eps)
    lam = lam + eps
    if p < 0 and np.any(lam == 0.0):
        raise NumericalError("negative power of a singular matrix; add damping")
    out = (Q * lam**p) @ Q.T
    return _check_finite(out, "sym_power")


def is_psd(M, rel_tol=1e-8):
    """Symmetric and ``lambda_min >= -rel_tol * trace/dim``."""
    M = np.asarray(M, dtype=np.float64)
    scale = np.linalg.norm(M)
    if scale == 0.0:
        return True
    if np.linalg.norm(M - M.T) > 1e-10 * scale:
        return False
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(lam[0] >= -rel_tol * abs(np.trace(M)) / M.shape[0])
