"""Off-policy policy iteration and value iteration on substitute-state data.

Both algorithms consume a :class:`~ddlqr.substitute_state.ProjectedData`
(``Phi0``, ``Phi1``, ``B_F``, ``U0``, ``Y0``) and never touch plant matrices.
Because ``Phi0`` has full row rank, the data equations are multiplied from
the right by ``Phi0^+`` once, giving

    W_hat = (Phi1 - B_F U0) Phi0^+,    C_hat = Y0 Phi0^+,

and each iteration is then an ``r x r`` problem.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import linalg
from .errors import DestabilizedGain, Diverged, NonFinite, NotHurwitz, ValidationError
from .lti_sim import CostSpec, LtiPlant, divergence_guard, rk4_linear
from .substitute_state import FilterBank, ProjectedData

log = logging.getLogger(__name__)


def opnorm(M) -> float:
    """Spectral norm (largest singular value)."""
    return float(np.linalg.norm(M, 2))


@dataclass
class PiConfig:
    K0: np.ndarray | None = None
    epsilon: float = 0.01
    max_iterations: int = 100

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")


@dataclass
class ViConfig:
    Sigma0: np.ndarray | None = None
    epsilon: float = 0.01
    max_iterations: int = 3000
    step_numerator: float = 10.0
    step_offset: float = 1000.0
    set_growth: float = 1e5
    max_resets: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if not (self.step_numerator > 0 and self.step_offset > 0):
            raise ValidationError("step size c/(i+d) needs c > 0 and d > 0")

    def step(self, i: int) -> float:
        return self.step_numerator / (i + self.step_offset)


@dataclass
class IterationRecord:
    gain_delta: float
    sigma_delta: float
    closed_loop_spectral_abscissa: float | None = None


@dataclass
class SolveReport:
    method: str
    iterations_run: int
    final_gain: np.ndarray
    final_sigma: np.ndarray
    per_iteration: list
    termination: str
    resets: int = 0
    gain_history: list = field(default_factory=list)
    sigma_history: list = field(default_factory=list)

    def to_dict(self, history: bool = False) -> dict:
        d = {
            "method": self.method,
            "iterations_run": self.iterations_run,
            "termination": self.termination,
            "resets": self.resets,
            "final_gain": self.final_gain.tolist(),
            "final_sigma": self.final_sigma.tolist(),
            "per_iteration": [
                {"gain_delta": r.gain_delta, "sigma_delta": r.sigma_delta,
                 "abscissa": r.closed_loop_spectral_abscissa}
                for r in self.per_iteration
            ],
        }
        if history:
            d["gain_history"] = [K.tolist() for K in self.gain_history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolveReport":
        recs = [IterationRecord(r["gain_delta"], r["sigma_delta"], r.get("abscissa"))
                for r in d["per_iteration"]]
        return cls(d["method"], int(d["iterations_run"]),
                   np.array(d["final_gain"], float), np.array(d["final_sigma"], float),
                   recs, d["termination"], int(d.get("resets", 0)),
                   [np.array(K, float) for K in d.get("gain_history", [])])

    def trace_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "gain_delta", "sigma_delta", "abscissa"])
            for i, r in enumerate(self.per_iteration):
                ab = "" if r.closed_loop_spectral_abscissa is None else \
                    repr(r.closed_loop_spectral_abscissa)
                w.writerow([i, repr(r.gain_delta), repr(r.sigma_delta), ab])


@dataclass(frozen=True)
class ReducedData:
    """``W_hat``, ``C_hat`` and ``B_F`` in the coordinates of ``phi``."""

    W_hat: np.ndarray
    C_hat: np.ndarray
    B_F: np.ndarray


def reduce(data: ProjectedData) -> ReducedData:
    Phi0_pinv = linalg.pinv_right(data.Phi0)
    W_hat = (data.Phi1 - data.B_F @ data.U0) @ Phi0_pinv
    C_hat = data.Y0 @ Phi0_pinv
    return ReducedData(W_hat, C_hat, data.B_F)


def _check_cost(data: ProjectedData, cost: CostSpec):
    if cost.R.shape[0] != data.B_F.shape[1] or cost.Q.shape[0] != data.Y0.shape[0]:
        raise ValidationError("cost weights do not match the data dimensions")


def unreduced_policy_evaluation(data: ProjectedData, cost: CostSpec, K) -> np.ndarray:
    """Policy evaluation solved directly on the ``T x T`` data equation by
    least squares over symmetric ``Sigma``; used to cross-check the
    reduced route."""
    Phi0, U0, Y0 = data.Phi0, data.U0, data.Y0
    Z = data.Phi1 - data.B_F @ (K @ Phi0 + U0)
    W = Y0.T @ cost.Q @ Y0 + Phi0.T @ K.T @ cost.R @ K @ Phi0
    return _unreduced_sylvester(Z, Phi0, W)


def _unreduced_sylvester(Z, P0, W) -> np.ndarray:
    r = P0.shape[0]
    iu = np.triu_indices(r)
    cols = []
    for a, b in zip(*iu):
        E = np.zeros((r, r))
        E[a, b] = E[b, a] = 1.0
        cols.append((Z.T @ E @ P0 + P0.T @ E @ Z).ravel())
    Amat = np.column_stack(cols)
    sol, *_ = np.linalg.lstsq(Amat, -W.ravel(), rcond=None)
    X = np.zeros((r, r))
    X[iu] = sol
    return X + np.triu(X, 1).T


def unreduced_vi_omega(data: ProjectedData, cost: CostSpec, Sigma) -> np.ndarray:
    """``Omega`` from ``Phi0^T Omega Phi0 = (Phi1 - B_F U0)^T Sigma Phi0 + ...``
    solved by least squares without right-multiplying by ``Phi0^+``."""
    Phi0 = data.Phi0
    G = data.Phi1 - data.B_F @ data.U0
    rhs = G.T @ Sigma @ Phi0 + Phi0.T @ Sigma @ G + data.Y0.T @ cost.Q @ data.Y0
    # Phi0^T Omega Phi0 = rhs  <=>  (Phi0^T (x) Phi0^T) vec(Omega) = vec(rhs)
    Amat = np.kron(Phi0.T, Phi0.T)
    sol, *_ = np.linalg.lstsq(Amat, rhs.ravel(order="F"), rcond=None)
    r = Phi0.shape[0]
    return linalg.sym(sol.reshape(r, r, order="F"))


def policy_iteration(data: ProjectedData, cost: CostSpec, cfg: PiConfig | None = None,
                     reduced: bool = True) -> SolveReport:
    """Model-free PI: evaluate ``Sigma^i`` from the data Sylvester equation,
    improve ``K^(i+1) = R^-1 B_F^T Sigma^i``; stop on ``|K^(i+1) - K^i| <= eps``.

    ``reduced=False`` solves each evaluation on the full ``T x T`` equation.
    """
    cfg = cfg or PiConfig()
    _check_cost(data, cost)
    red = reduce(data)
    r, m = data.rank_r, data.B_F.shape[1]
    K = np.zeros((m, r)) if cfg.K0 is None else np.asarray(cfg.K0, float)
    if K.shape != (m, r):
        raise ValidationError(f"K0 must be {m}x{r}, got {K.shape}")
    QC = red.C_hat.T @ cost.Q @ red.C_hat
    recs, gains, sigmas = [], [K], []
    Sigma_prev = None
    for i in range(cfg.max_iterations):
        M = red.W_hat - red.B_F @ K
        abscissa = linalg.spectral_abscissa(M)
        if abscissa >= -linalg.HURWITZ_MARGIN:
            raise DestabilizedGain(
                f"iterate {i}: reduced closed loop has spectral abscissa {abscissa:.3e}")
        if reduced:
            try:
                Sigma = linalg.solve_lyapunov(M, linalg.sym(QC + K.T @ cost.R @ K))
            except NotHurwitz as exc:
                raise DestabilizedGain(str(exc)) from exc
        else:
            Sigma = unreduced_policy_evaluation(data, cost, K)
        K_new = np.linalg.solve(cost.R, red.B_F.T @ Sigma)
        dK = opnorm(K_new - K)
        dS = float("nan") if Sigma_prev is None else opnorm(Sigma - Sigma_prev)
        recs.append(IterationRecord(dK, dS, abscissa))
        gains.append(K_new)
        sigmas.append(Sigma)
        log.debug("PI %d: |dK|=%.3e abscissa=%.3e", i, dK, abscissa)
        Sigma_prev = Sigma
        K = K_new
        if dK <= cfg.epsilon:
            return SolveReport("PI", i + 1, K, Sigma, recs, "Converged", 0, gains, sigmas)
    return SolveReport("PI", cfg.max_iterations, K, Sigma_prev, recs, "MaxIterations",
                       0, gains, sigmas)


def vi_increment(red: ReducedData, cost: CostSpec, Sigma) -> np.ndarray:
    """``Omega - Sigma B_F R^-1 B_F^T Sigma`` with
    ``Omega = W_hat^T Sigma + Sigma W_hat + C_hat^T Q C_hat``."""
    Omega = linalg.sym(red.W_hat.T @ Sigma + Sigma @ red.W_hat
                       + red.C_hat.T @ cost.Q @ red.C_hat)
    SB = Sigma @ red.B_F
    return Omega - SB @ np.linalg.solve(cost.R, SB.T)


def _in_constraint_set(Sigma, bound) -> bool:
    nrm = opnorm(Sigma)
    return bool(np.isfinite(nrm) and nrm < bound)


def value_iteration(data: ProjectedData, cost: CostSpec, cfg: ViConfig | None = None,
                    reduced: bool = True) -> SolveReport:
    """Model-free VI with step sizes ``c/(i+d)`` and growing norm balls
    ``{|Sigma| < set_growth (j+1)}``; iterates leaving the
    current ball restart from ``Sigma0``. A restart step never counts as
    convergence."""
    cfg = cfg or ViConfig()
    _check_cost(data, cost)
    red = reduce(data)
    r = data.rank_r
    Sigma0 = np.eye(r) if cfg.Sigma0 is None else np.asarray(cfg.Sigma0, float)
    if Sigma0.shape != (r, r):
        raise ValidationError(f"Sigma0 must be {r}x{r}")
    if np.min(np.linalg.eigvalsh(linalg.sym(Sigma0))) < -1e-8:
        raise ValidationError("Sigma0 must be positive semidefinite")
    Sigma0 = linalg.psd_project(Sigma0)
    Rinv_BT = np.linalg.solve(cost.R, red.B_F.T)
    Sigma = Sigma0
    K = Rinv_BT @ Sigma
    j = 0
    resets = 0
    recs, gains = [], [K]
    for i in range(cfg.max_iterations):
        delta = cfg.step(i)
        if reduced:
            inc = vi_increment(red, cost, Sigma)
        else:
            SB = Sigma @ red.B_F
            inc = unreduced_vi_omega(data, cost, Sigma) - SB @ np.linalg.solve(cost.R, SB.T)
        Sigma_new = linalg.sym(Sigma + delta * inc)
        if not np.all(np.isfinite(Sigma_new)):
            raise NonFinite(f"VI iterate {i} is not finite")
        reset = not _in_constraint_set(Sigma_new, cfg.set_growth * (j + 1))
        if reset:
            Sigma_new = Sigma0
            j += 1
            resets += 1
            if resets > cfg.max_resets:
                raise Diverged(f"VI exceeded {cfg.max_resets} constraint-set resets")
        step_norm = opnorm(Sigma_new - Sigma) / delta
        K_new = Rinv_BT @ Sigma_new
        recs.append(IterationRecord(opnorm(K_new - K), step_norm, None))
        gains.append(K_new)
        Sigma, K = Sigma_new, K_new
        if not reset and step_norm <= cfg.epsilon:
            return SolveReport("VI", i + 1, K, Sigma, recs, "Converged", resets, gains)
    return SolveReport("VI", cfg.max_iterations, K, Sigma, recs, "MaxIterations",
                       resets, gains)


def closed_loop_matrix(plant: LtiPlant, bank: FilterBank, F1, K) -> np.ndarray:
    """Plant plus filter bank under ``u = -K F1 eta``; state ``[x; eta]``."""
    n, N = plant.n, bank.dim
    KF = np.asarray(K) @ F1
    M = np.zeros((n + N, n + N))
    M[:n, :n] = plant.A
    M[:n, n:] = -plant.B @ KF
    M[n:, :n] = bank.B_y @ plant.C
    M[n:, n:] = bank.script_A - bank.B_u @ KF
    return M


def evaluate_controller(plant: LtiPlant, bank: FilterBank, F1, K, cost: CostSpec, x0,
                        horizon: float = 40.0, dt_integration: float = 1e-3) -> float:
    """Realized cost ``int_0^horizon (y^T Q y + u^T R u) dt`` of ``u = -K F1 eta``,
    trapezoid rule on the RK4 grid."""
    from .errors import Unstable
    from .lti_sim import grid_steps
    M = closed_loop_matrix(plant, bank, F1, K)
    z0 = np.concatenate([np.asarray(x0, float).ravel(), bank.eta0])
    steps = grid_steps(horizon, dt_integration, "horizon")
    try:
        _, Z = rk4_linear(M, np.zeros((M.shape[0], 0)), z0, None, 0.0, dt_integration,
                          steps, divergence_guard(1e9))
    except NonFinite as exc:
        raise Unstable(str(exc)) from exc
    n = plant.n
    Y = Z[:, :n] @ plant.C.T
    U = -Z[:, n:] @ (np.asarray(K) @ F1).T
    g = np.einsum("ki,ij,kj->k", Y, cost.Q, Y) + np.einsum("ki,ij,kj->k", U, cost.R, U)
    return float(np.trapezoid(g, dx=dt_integration))


def relative_error(K, K_ref) -> float:
    return opnorm(np.asarray(K) - K_ref) / opnorm(K_ref)
