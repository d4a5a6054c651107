"""Model-based ground truth.

Everything here uses the hidden plant matrices and exists for verification:
the state-parameterization matrix ``S`` with ``x = S eta``, Kleinman's
iteration for the true Riccati solution, the transformed problem seen
through the projection ``F1``, and the stabilizability/detectability checks
of that transformed problem. The model-free solvers never import this module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import (NoConvergence, NotObservable, NotStabilizing,
                     PlacementFailed, SingularEtaKrylov)
from .lti_sim import (CostSpec, LtiPlant, hautus_detectable, hautus_stabilizable,
                      observability_matrix)
from .substitute_state import FilterBank, char_poly_coeffs


# -- observer placement ----------------------------------------------------

def _poly_of_matrix(coeffs_low_first, A):
    """``A^n + c[n-1] A^(n-1) + ... + c[0] I``."""
    n = A.shape[0]
    out = np.eye(n) * coeffs_low_first[0]
    Ak = np.eye(n)
    for c in coeffs_low_first[1:]:
        Ak = Ak @ A
        out = out + c * Ak
    return out + Ak @ A


def _ackermann_observer(A, c_row, coeffs):
    n = A.shape[0]
    O = observability_matrix(A, c_row)
    e_n = np.zeros((n, 1))
    e_n[-1, 0] = 1.0
    return _poly_of_matrix(coeffs, A) @ np.linalg.solve(O, e_n)


def _spectrum_matches(M, eigs, tol):
    got = np.sort_complex(np.linalg.eigvals(M))
    want = np.sort_complex(np.asarray(eigs, complex))
    if np.max(np.abs(got - want)) <= tol * max(1.0, np.max(np.abs(want))):
        return True
    # repeated roots are ill-conditioned as eigenvalues, not as coefficients
    c_got, c_want = np.poly(M), np.real(np.poly(want))
    return np.max(np.abs(c_got - c_want)) <= tol * max(1.0, np.max(np.abs(c_want)))


def _real_block_diag(eigs):
    eigs = np.asarray(eigs, complex)
    blocks, used = [], np.zeros(eigs.size, bool)
    for i, lam in enumerate(eigs):
        if used[i]:
            continue
        used[i] = True
        if abs(lam.imag) < 1e-12:
            blocks.append(np.array([[lam.real]]))
        else:
            j = next(k for k in range(eigs.size)
                     if not used[k] and abs(eigs[k] - lam.conjugate()) < 1e-9)
            used[j] = True
            blocks.append(np.array([[lam.real, lam.imag], [-lam.imag, lam.real]]))
    n = eigs.size
    out = np.zeros((n, n))
    k = 0
    for b in blocks:
        out[k:k + b.shape[0], k:k + b.shape[0]] = b
        k += b.shape[0]
    return out


def place_observer(plant: LtiPlant, eigenvalues, rng: np.random.Generator | None = None,
                   tries: int = 10, tol: float = 1e-6) -> np.ndarray:
    """Observer gain ``L`` with ``spec(A - L C)`` equal to ``eigenvalues``.

    Single output: Ackermann's formula on the dual pair. Multiple outputs:
    Sylvester assignment ``A^T X - X Lam = C^T G``, ``L = (G X^-1)^T`` with
    random ``G``; when the target spectrum meets ``spec(A)`` or repeats, the
    pair is first made cyclic by a random output injection and Ackermann is
    applied to a random output combination.
    """
    A, C = plant.A, plant.C
    n, p = plant.n, plant.p
    eigs = np.asarray(eigenvalues, complex).ravel()
    if eigs.size != n:
        raise ValueError(f"need {n} eigenvalues, got {eigs.size}")
    if linalg.numerical_rank(observability_matrix(A, C), 1e-10) < n:
        raise NotObservable("(A, C) is not observable")
    coeffs = char_poly_coeffs(eigs)
    if p == 1:
        L = _ackermann_observer(A, C, coeffs)
        if _spectrum_matches(A - L @ C, eigs, tol):
            return L
        raise PlacementFailed("Ackermann placement missed the target spectrum")

    rng = rng if rng is not None else np.random.default_rng(0)
    Lam = _real_block_diag(eigs)
    spec_A = np.linalg.eigvals(A)
    disjoint = np.min(np.abs(spec_A[:, None] - eigs[None, :])) > 1e-6
    distinct = np.unique(np.round(eigs, 9)).size == n
    if disjoint and distinct:
        import scipy.linalg
        for _ in range(tries):
            G = rng.standard_normal((p, n))
            # A^T X - X Lam = C^T G
            X = scipy.linalg.solve_sylvester(A.T, -Lam, C.T @ G)
            if np.linalg.cond(X) > 1e10:
                continue
            L = np.linalg.solve(X.T, G.T)
            if _spectrum_matches(A - L @ C, eigs, tol):
                return L
    for _ in range(tries):
        L0 = rng.standard_normal((n, p))
        w = rng.standard_normal((p, 1))
        A0 = A - L0 @ C
        c_row = w.T @ C
        if np.linalg.cond(observability_matrix(A0, c_row)) > 1e10:
            continue
        ell = _ackermann_observer(A0, c_row, coeffs)
        L = L0 + ell @ w.T
        if _spectrum_matches(A - L @ C, eigs, tol):
            return L
    raise PlacementFailed(f"no placement after {tries} random draws")


# -- state parameterization ------------------------------------------------

def adjugate_blocks(M: np.ndarray, coeffs) -> list[np.ndarray]:
    """``D_0 .. D_(n-1)`` with ``adj(sI - M) = sum_i D_i s^i``.

    ``D_i = sum_{j=1}^{n-i} a_(n-j+1) M^(n-i-j)`` with ``a_n = 1``.
    """
    n = M.shape[0]
    a = list(np.asarray(coeffs, float)) + [1.0]
    powers = [np.eye(n)]
    for _ in range(n):
        powers.append(powers[-1] @ M)
    return [sum(a[n - j + 1] * powers[n - i - j] for j in range(1, n - i + 1))
            for i in range(n)]


def _script_D_times(D_blocks, v):
    """``[D_0, ..., D_(n-1)] (I_n (x) v) = [D_0 v, ..., D_(n-1) v]``."""
    return np.column_stack([D @ v for D in D_blocks])


@dataclass(frozen=True)
class StateParameterization:
    L: np.ndarray
    D_blocks: list
    S_u: np.ndarray
    S_y: np.ndarray
    S_eps: np.ndarray
    S: np.ndarray


def build_state_parameterization(plant: LtiPlant, bank: FilterBank, L: np.ndarray,
                                 epsilon0) -> StateParameterization:
    """``S = [S^u, S^y, S^eps]`` with ``x_t = S eta_t`` along every trajectory
    started at ``x_0 = epsilon0`` with the filter at ``bank.eta0``."""
    A_LC = plant.A - L @ plant.C
    if not _spectrum_matches(A_LC, bank.observer_eigenvalues, 1e-6):
        raise ValueError("spec(A - LC) does not match the bank's observer eigenvalues")
    D = adjugate_blocks(A_LC, bank.char_coeffs)
    D_eps = adjugate_blocks(bank.A_eps, bank.char_coeffs)
    S_u = np.hstack([_script_D_times(D, plant.B[:, i]) for i in range(plant.m)])
    S_y = np.hstack([_script_D_times(D, L[:, j]) for j in range(plant.p)])
    eps0 = np.asarray(epsilon0, float).ravel()
    S_eps_x = _script_D_times(D, eps0)
    S_eps_eta = _script_D_times(D_eps, bank.eta0_eps)
    if np.linalg.cond(S_eps_eta) > 1e12:
        raise SingularEtaKrylov("D_eps (I (x) eta0_eps) is numerically singular")
    S_eps = np.linalg.solve(S_eps_eta.T, S_eps_x.T).T
    return StateParameterization(L, D, S_u, S_y, S_eps, np.hstack([S_u, S_y, S_eps]))


def parameterize(plant: LtiPlant, bank: FilterBank, x0) -> StateParameterization:
    """Place the observer on the bank's spectrum and build ``S`` for ``x0``."""
    L = place_observer(plant, bank.observer_eigenvalues)
    return build_state_parameterization(plant, bank, L, x0)


# -- Riccati solution ------------------------------------------------------

@dataclass(frozen=True)
class AreSolution:
    P_star: np.ndarray
    K_star: np.ndarray
    iterations: int
    residual: float
    P_history: tuple = ()
    K_history: tuple = ()


def are_residual(A, B, Qx, R, P) -> float:
    return float(np.linalg.norm(
        A.T @ P + P @ A + Qx - P @ B @ np.linalg.solve(R, B.T @ P)))


def stabilizing_gain(A, B) -> np.ndarray:
    """A gain with ``A - B K`` Hurwitz (zero when ``A`` already is).

    Otherwise Bass's construction: with ``beta`` large enough that
    ``-(A + beta I)`` is Hurwitz, solve ``(A + beta I) X + X (A + beta I)^T = 2 B B^T`` and take
    ``K = B^T X^-1``.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    if linalg.is_hurwitz(A):
        return np.zeros((B.shape[1], A.shape[0]))
    beta = max(0.0, -np.min(linalg.eig_real_parts(A))) + 1.0
    Ab = -(A + beta * np.eye(A.shape[0]))
    X = linalg.solve_lyapunov(Ab.T, 2 * B @ B.T)
    K = B.T @ np.linalg.pinv(X)
    if not linalg.is_hurwitz(A - B @ K):
        raise NotStabilizing("Bass construction failed (pair not controllable?)")
    return K


def kleinman_iterate(A, B, Qx, R, K0, tol: float = 1e-12, max_iter: int = 200,
                     keep_history: bool = False) -> AreSolution:
    """Kleinman's policy iteration ``(A-BK)^T P + P (A-BK) + Qx + K^T R K = 0``,
    ``K <- R^-1 B^T P`` from a stabilizing ``K0``."""
    A, B, Qx, R = (np.asarray(M, float) for M in (A, B, Qx, R))
    K = np.asarray(K0, float).reshape(B.shape[1], A.shape[0])
    if not linalg.is_hurwitz(A - B @ K):
        raise NotStabilizing("initial gain does not stabilize A - B K0")
    Ps, Ks = [], [K]
    for it in range(1, max_iter + 1):
        P = linalg.solve_lyapunov(A - B @ K, Qx + K.T @ R @ K)
        K_new = np.linalg.solve(R, B.T @ P)
        Ps.append(P)
        Ks.append(K_new)
        done = np.linalg.norm(K_new - K) <= tol * max(1.0, np.linalg.norm(K_new))
        K = K_new
        if done:
            return AreSolution(P, K, it, are_residual(A, B, Qx, R, P),
                               tuple(Ps) if keep_history else (),
                               tuple(Ks) if keep_history else ())
    raise NoConvergence(f"Kleinman iteration did not converge in {max_iter} steps")


def kleinman_solve(plant: LtiPlant, cost: CostSpec, K0=None, **kw) -> AreSolution:
    """True optimal ``P*_x``, ``K*_x`` of the state-feedback problem."""
    K0 = stabilizing_gain(plant.A, plant.B) if K0 is None else K0
    return kleinman_iterate(plant.A, plant.B, cost.state_weight(plant), cost.R, K0, **kw)


# -- transformed problem ---------------------------------------------------

@dataclass(frozen=True)
class TransformedProblem:
    A_F: np.ndarray
    B_F: np.ndarray
    Q_phi: np.ndarray
    C_F: np.ndarray
    SF1t: np.ndarray


def transformed_problem(param: StateParameterization, bank: FilterBank, F1,
                        plant: LtiPlant, cost: CostSpec) -> TransformedProblem:
    S = param.S
    iso = bank.script_A + bank.B_y @ plant.C @ S
    A_F = F1 @ iso @ F1.T
    B_F = F1 @ bank.B_u
    C_F = plant.C @ S @ F1.T
    return TransformedProblem(A_F, B_F, linalg.sym(C_F.T @ cost.Q @ C_F), C_F, S @ F1.T)


def verify_identities(param: StateParameterization, bank: FilterBank, F1,
                  plant: LtiPlant) -> dict:
    """Frobenius residuals of the identities linking the projected isosystem
    to the plant.

    ``*_relative`` entries divide by the size of the terms that cancel.
    ``S B_y C S`` grows like ``|S|^2``, so for nearly unobservable plants
    (large observer gain, large ``S``) the absolute residuals reflect
    rounding at that scale rather than a failed identity.
    """
    S = param.S
    iso = bank.script_A + bank.B_y @ plant.C @ S
    SF = S @ F1.T
    F_iso = F1 @ iso @ F1.T
    nrm = np.linalg.norm
    res = {
        "input_identity": (SF @ F1 @ bank.B_u - plant.B,
                           nrm(SF) * nrm(F1 @ bank.B_u) + nrm(plant.B)),
        "dynamics_identity": (SF @ F_iso - plant.A @ SF,
                              nrm(SF) * nrm(F_iso) + nrm(plant.A) * nrm(SF)),
        "unprojected_input_identity": (S @ bank.B_u - plant.B,
                                       nrm(S) * nrm(bank.B_u) + nrm(plant.B)),
        "unprojected_dynamics_identity": (S @ iso - plant.A @ S,
                                          nrm(S) * nrm(iso) + nrm(plant.A) * nrm(S)),
    }
    out = {}
    for name, (R, scale) in res.items():
        out[name] = float(nrm(R))
        out[name + "_relative"] = float(nrm(R) / scale) if scale > 0 else 0.0
    return out


def _sqrt_psd(M):
    w, V = np.linalg.eigh(linalg.sym(M))
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def verify_regularity(bank: FilterBank, param: StateParameterization, F1,
                      plant: LtiPlant, cost: CostSpec) -> tuple[bool, bool]:
    """(stabilizable, detectable) for the projected problem."""
    tp = transformed_problem(param, bank, F1, plant, cost)
    return (hautus_stabilizable(tp.A_F, tp.B_F),
            hautus_detectable(tp.A_F, _sqrt_psd(cost.Q) @ tp.C_F))


def transformed_optimum(param: StateParameterization, bank: FilterBank, F1,
                        plant: LtiPlant, cost: CostSpec, K0_x=None,
                        keep_history: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma*, K*_phi)`` of the projected LQR problem by Kleinman iteration.

    The initial gain is ``K0_x S F1^T`` (default ``K0_x`` from
    :func:`stabilizing_gain`), which stabilizes the projected closed loop.
    """
    sol = transformed_kleinman(param, bank, F1, plant, cost, K0_x, keep_history)
    return sol.P_star, sol.K_star


def transformed_kleinman(param, bank, F1, plant, cost, K0_x=None,
                         keep_history: bool = False, K0_phi=None) -> AreSolution:
    tp = transformed_problem(param, bank, F1, plant, cost)
    if K0_phi is None:
        K0_x = stabilizing_gain(plant.A, plant.B) if K0_x is None else K0_x
        K0_phi = np.asarray(K0_x) @ tp.SF1t
    return kleinman_iterate(tp.A_F, tp.B_F, tp.Q_phi, cost.R, K0_phi,
                            keep_history=keep_history)


def optimal_phi_gain(plant: LtiPlant, cost: CostSpec, param: StateParameterization,
                     F1) -> np.ndarray:
    """``K*_x S F1^T``: the true optimal gain expressed on the substitute state."""
    return kleinman_solve(plant, cost).K_star @ param.S @ F1.T
