"""Dense small-matrix kernels: rank revelation, Lyapunov/Sylvester solves,
spectra and stability predicates.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every public
function validates finiteness of its inputs and never mutates them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NonFinite, NotHurwitz, RankDeficient, SingularSystem

HURWITZ_MARGIN = 1e-9
LYAPUNOV_MARGIN = 1e-12


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a finite 2-D float array (1-D input becomes a column)."""
    arr = np.array(M, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} has non-finite entries")
    return arr


def _square(M, name):
    M = as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    return M


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class RankRevealing:
    orthonormal_rows: np.ndarray
    rank: int
    singular_values: np.ndarray
    tolerance_used: float


def rank_reveal(M, rel_tol: float = 1e-9) -> RankRevealing:
    """Orthonormal basis (as rows) of the column space of ``M`` via SVD.

    ``rank`` counts singular values strictly above ``rel_tol * sigma_max``.
    For the filter data matrix this gives the projection whose product with
    the data has full row rank.
    """
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    M = as_matrix(M, "M")
    U, s, _ = np.linalg.svd(M, full_matrices=False)
    tol = rel_tol * (s[0] if s.size else 0.0)
    r = int(np.sum(s > tol))
    return RankRevealing(U[:, :r].T.copy(), r, s, float(tol))


def numerical_rank(M, rel_tol: float = 1e-9) -> int:
    return rank_reveal(M, rel_tol).rank


def eig_real_parts(M) -> np.ndarray:
    M = _square(M, "M")
    return np.linalg.eigvals(M).real


def spectral_abscissa(M) -> float:
    return float(np.max(eig_real_parts(M)))


def is_hurwitz(M, margin: float = HURWITZ_MARGIN) -> bool:
    return spectral_abscissa(M) < -margin


def kron_lyapunov_operator(M: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> M^T X + X M`` acting on column-major ``vec(X)``."""
    n = M.shape[0]
    eye = np.eye(n)
    return np.kron(eye, M.T) + np.kron(M.T, eye)


def solve_lyapunov(M, W) -> np.ndarray:
    """Solve ``M^T X + X M + W = 0`` for symmetric ``X`` with ``M`` Hurwitz."""
    M = _square(M, "M")
    W = _square(W, "W")
    if W.shape != M.shape:
        raise ValueError("M and W must have the same shape")
    if spectral_abscissa(M) >= -LYAPUNOV_MARGIN:
        raise NotHurwitz(f"spectral abscissa {spectral_abscissa(M):.3e} is not negative")
    n = M.shape[0]
    op = kron_lyapunov_operator(M)
    try:
        lu, piv = scipy.linalg.lu_factor(op, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularSystem(str(exc)) from exc
    if np.min(np.abs(np.diag(lu))) <= 1e-14 * np.max(np.abs(np.diag(lu))):
        raise SingularSystem("vectorized Lyapunov operator is numerically singular")
    x = scipy.linalg.lu_solve((lu, piv), -W.reshape(-1, order="F"), check_finite=False)
    return sym(x.reshape(n, n, order="F"))


def pinv_right(M, rel_tol: float = 1e-9) -> np.ndarray:
    """Right inverse ``M^+`` of a full-row-rank ``M`` (so ``M @ M^+ = I``)."""
    M = as_matrix(M, "M")
    r, T = M.shape
    if r > T:
        raise RankDeficient(f"{r}x{T} matrix cannot have full row rank")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[-1] <= rel_tol * s[0]:
        raise RankDeficient(
            f"min singular value {s[-1]:.3e} below {rel_tol:g} * sigma_max {s[0]:.3e}"
        )
    return (Vt.T / s) @ U.T


def solve_generalized_sylvester(Z, P0, W, rel_tol: float = 1e-9) -> np.ndarray:
    """Solve ``Z^T X P0 + P0^T X Z + W = 0`` for symmetric ``X`` (r x r).

    ``P0`` (r x T) must have full row rank. The equation is reduced to the
    Lyapunov equation ``M^T X + X M + W_red = 0`` with ``M = Z P0^+`` and
    ``W_red = (P0^+)^T W P0^+``.
    """
    Z = as_matrix(Z, "Z")
    P0 = as_matrix(P0, "P0")
    W = _square(W, "W")
    if Z.shape != P0.shape or W.shape[0] != P0.shape[1]:
        raise ValueError("inconsistent shapes for Z, P0, W")
    P0_pinv = pinv_right(P0, rel_tol)
    M = Z @ P0_pinv
    W_red = sym(P0_pinv.T @ sym(W) @ P0_pinv)
    return solve_lyapunov(M, W_red)


def matrix_exponential(M, t: float = 1.0) -> np.ndarray:
    """``exp(M t)`` by scaling-and-squaring Pade (scipy)."""
    M = _square(M, "M")
    if not np.isfinite(t):
        raise NonFinite("t must be finite")
    out = scipy.linalg.expm(M * t)
    if not np.all(np.isfinite(out)):
        raise NonFinite("matrix exponential overflowed")
    return out


def psd_project(M, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    M = _square(M, "M")
    if np.max(np.abs(M - M.T)) > sym_tol * max(1.0, np.max(np.abs(M))):
        raise ValueError("matrix is not symmetric within tolerance")
    S = sym(M)
    w, V = np.linalg.eigh(S)
    if w[0] >= 0.0:
        return S
    return sym((V * np.clip(w, 0.0, None)) @ V.T)


def companion(coeffs) -> np.ndarray:
    """Bottom-row companion matrix of the monic polynomial
    ``s^n + c[n-1] s^(n-1) + ... + c[0]`` given ``coeffs = [c0, ..., c(n-1)]``."""
    c = np.asarray(coeffs, dtype=float).ravel()
    n = c.size
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -c
    return A
