"""Model-free trajectory generation from one recorded input-output window.

At time ``t`` the delayed Hankel matrices of the recording are

    H1(u)(t) = [u(t), u(t + dt_s), ..., u(t + (T-1) dt_s)],

and likewise for ``y``, ``u'`` and the filter state. A weight vector
``alpha_t`` turns them into a new signal pair ``(H1(u) alpha, H1(y) alpha)``.
That pair is a trajectory of the hidden plant whenever
``Phi0(t) alpha' = 0`` with ``Phi0(t) = F1 H1(eta)(t)``.

The recording lives on the fine RK4 grid, so the weight ODE is integrated
with steps of two grid intervals: every stage then lands on a stored sample.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import linalg
from .errors import InconsistentInitialCondition, RankDeficient, ValidationError
from .lti_sim import SinusoidInput, check_pe_order, grid_steps, write_trajectory_csv
from .substitute_state import CoSimulation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajGenData:
    """A recorded window plus the projection ``F1``; Hankel matrices are
    sliced from it at any grid time at or after ``anchor_time``."""

    t: np.ndarray
    u: np.ndarray
    u_dot: np.ndarray
    y: np.ndarray
    eta: np.ndarray
    F1: np.ndarray
    anchor_time: float
    sample_dt: float
    T: int
    dt_integration: float
    pe_order_verified: int | None = None

    @property
    def r(self) -> int:
        return self.F1.shape[0]

    @property
    def stride(self) -> int:
        return grid_steps(self.sample_dt, self.dt_integration, "sample_dt")

    @property
    def anchor_index(self) -> int:
        return grid_steps(self.anchor_time - self.t[0], self.dt_integration, "anchor_time")

    def max_offset(self) -> float:
        """Longest horizon the recording supports after the anchor."""
        last = self.anchor_index + self.stride * (self.T - 1)
        return (self.t.size - 1 - last) * self.dt_integration

    def columns(self, k: int) -> np.ndarray:
        """Fine-grid indices of the ``T`` Hankel columns ``k`` steps after the anchor."""
        return self.anchor_index + k + self.stride * np.arange(self.T)

    def hankel(self, k: int):
        """``(Phi0, H1(u), H1(u'), H1(y))`` at ``k`` fine steps after the anchor."""
        idx = self.columns(k)
        if idx[-1] >= self.t.size:
            raise ValidationError("recording too short for the requested horizon")
        return (self.F1 @ self.eta[idx].T, self.u[idx].T, self.u_dot[idx].T,
                self.y[idx].T)

    @property
    def Phi0(self) -> np.ndarray:
        return self.hankel(0)[0]

    @property
    def U_hankel(self) -> np.ndarray:
        return self.hankel(0)[1]

    @property
    def Y_hankel(self) -> np.ndarray:
        return self.hankel(0)[3]


def trajgen_data(sim: CoSimulation, F1, anchor_time: float, sample_dt: float, T: int,
                 input: SinusoidInput | None = None, n: int | None = None) -> TrajGenData:
    """Package a co-simulation for trajectory generation.

    With ``input`` and ``n`` given, persistent excitation of order ``2n+1`` is
    checked over the Hankel time window; order ``2n`` is tried as a fallback
    and a warning is issued if only that holds.
    """
    data = TrajGenData(sim.t, sim.u, sim.u_dot, sim.y, sim.eta, np.asarray(F1, float),
                       float(anchor_time), float(sample_dt), int(T), sim.dt_integration)
    if data.T <= data.r:
        raise ValidationError(f"need T > r for a nontrivial null space (T={T}, r={data.r})")
    s = np.linalg.svd(data.Phi0, compute_uv=False)
    if s[-1] <= 1e-9 * s[0]:
        raise RankDeficient("Phi0 at the anchor time is not full row rank")
    verified = None
    if input is not None and n is not None:
        # dense times: the Hankel sample times can alias commensurate frequencies
        times = np.linspace(anchor_time, anchor_time + (T - 1) * sample_dt,
                            8 * input.m * (2 * n + 1))
        if check_pe_order(input, 2 * n + 1, times)[0]:
            verified = 2 * n + 1
        elif check_pe_order(input, 2 * n, times)[0]:
            verified = 2 * n
            warnings.warn("input verified persistently exciting of order 2n only; "
                          "trajectory generation assumes order 2n+1", stacklevel=2)
    return TrajGenData(data.t, data.u, data.u_dot, data.y, data.eta, data.F1,
                       data.anchor_time, data.sample_dt, data.T, data.dt_integration,
                       verified)


@dataclass
class WeightTrajectory:
    t: np.ndarray
    alpha: np.ndarray
    alpha_dot: np.ndarray
    u_bar: np.ndarray
    y_bar: np.ndarray

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.t, np.zeros((self.t.size, 0)), self.u_bar, self.y_bar)


def _weight_rk4(data: TrajGenData, alpha0, rate: Callable, t_end: float,
                correct: Callable | None = None):
    """RK4 on ``alpha' = rate(k, alpha)`` where ``k`` counts fine grid steps;
    ``correct(k, alpha)`` may adjust each accepted step."""
    steps = grid_steps(t_end, 2 * data.dt_integration, "t_end")
    if t_end > data.max_offset() + 1e-12:
        raise ValidationError(
            f"recording supports at most {data.max_offset():.4g} s after the anchor")
    h = 2 * data.dt_integration
    alpha = np.array(alpha0, float)
    A = np.empty((steps + 1, data.T))
    Ad = np.empty((steps + 1, data.T))
    A[0] = alpha
    for s in range(steps):
        k = 2 * s
        k1 = rate(k, alpha)
        Ad[s] = k1
        k2 = rate(k + 1, alpha + 0.5 * h * k1)
        k3 = rate(k + 1, alpha + 0.5 * h * k2)
        k4 = rate(k + 2, alpha + h * k3)
        alpha = alpha + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if correct is not None:
            alpha = correct(k + 2, alpha)
        A[s + 1] = alpha
    Ad[steps] = rate(2 * steps, alpha)
    return h * np.arange(steps + 1), A, Ad


def _outputs(data: TrajGenData, t, A):
    U = np.empty((t.size, data.u.shape[1]))
    Y = np.empty((t.size, data.y.shape[1]))
    for s in range(t.size):
        _, Hu, _, Hy = data.hankel(2 * s)
        U[s] = Hu @ A[s]
        Y[s] = Hy @ A[s]
    return U, Y


def nullspace_basis(M, rel_tol: float = 1e-9) -> np.ndarray:
    """Orthonormal columns spanning the right null space of full-row-rank ``M``."""
    _, s, Vt = np.linalg.svd(M)
    r = int(np.sum(s > rel_tol * s[0]))
    if r < M.shape[0]:
        raise RankDeficient("matrix is not full row rank")
    return Vt[r:].T


def generate_trajectory_a(data: TrajGenData, alpha0, nullspace_coeffs: Callable,
                          t_end: float) -> WeightTrajectory:
    """Synthesize ``(u_bar, y_bar)`` with ``alpha' = P(t) N c(t)``.

    ``N`` is an orthonormal null-space basis of ``Phi0`` at the anchor and
    ``P(t) = I - Phi0(t)^+ Phi0(t)`` the null-space projector at time ``t``,
    so ``Phi0(t) alpha' = 0`` holds at every stage. ``nullspace_coeffs(t)``
    returns the ``T - r`` coefficients; ``t`` is measured from the anchor.
    """
    alpha0 = np.asarray(alpha0, float).ravel()
    if alpha0.size != data.T:
        raise ValidationError(f"alpha0 must have length T={data.T}")
    N0 = nullspace_basis(data.Phi0)
    dt = data.dt_integration

    def rate(k, alpha):
        c = np.asarray(nullspace_coeffs(k * dt), float).ravel()
        if c.size != N0.shape[1]:
            raise ValidationError(f"nullspace_coeffs must return {N0.shape[1]} values")
        v = N0 @ c
        if not np.any(v):
            return v
        Phi0 = data.hankel(k)[0]
        return v - linalg.pinv_right(Phi0) @ (Phi0 @ v)

    t, A, Ad = _weight_rk4(data, alpha0, rate, t_end)
    U, Y = _outputs(data, t, A)
    return WeightTrajectory(t, A, Ad, U, Y)


def generate_output_b(data: TrajGenData, u_bar: SinusoidInput, alpha0,
                      t_end: float, tol: float = 1e-8,
                      rank_tol: float = 1e-12) -> WeightTrajectory:
    """Output of the hidden plant under ``u_bar`` by integrating

        [H1(u); Phi0] alpha' = -[H1(u'); 0] alpha + [u_bar'; 0]

    with the least-norm ``alpha'`` at every RK4 stage. ``alpha0`` must satisfy
    ``H1(u) alpha0 = u_bar(0)``; it fixes the initial plant state.
    After each step the input constraint is re-imposed by a least-norm
    correction in the null space of ``Phi0``. The stacked matrix can be
    poorly conditioned at isolated times while still of full rank, hence the
    loose default ``rank_tol``.
    """
    alpha0 = np.asarray(alpha0, float).ravel()
    if alpha0.size != data.T:
        raise ValidationError(f"alpha0 must have length T={data.T}")
    if u_bar.m != data.u.shape[1]:
        raise ValidationError("u_bar channel count does not match the recording")
    t_anchor = data.anchor_time
    u0 = u_bar(t_anchor).ravel()
    gap = np.linalg.norm(data.U_hankel @ alpha0 - u0)
    if gap > tol * max(1.0, np.linalg.norm(u0)):
        raise InconsistentInitialCondition(
            f"|H1(u) alpha0 - u_bar(0)| = {gap:.3e} exceeds {tol:g}")
    r, m = data.r, data.u.shape[1]
    dt = data.dt_integration

    def rate(k, alpha):
        Phi0, Hu, Hud, _ = data.hankel(k)
        lhs = np.vstack([Hu, Phi0])
        rhs = np.concatenate([u_bar.derivative(t_anchor + k * dt, 1).ravel() - Hud @ alpha,
                              np.zeros(r)])
        return linalg.pinv_right(lhs, rank_tol) @ rhs

    def correct(k, alpha):
        # remove drift from H1(u) alpha = u_bar inside null(Phi0): the
        # implied plant state F1-projection is untouched
        Phi0, Hu, _, _ = data.hankel(k)
        miss = u_bar(t_anchor + k * dt).ravel() - Hu @ alpha
        lhs = np.vstack([Hu, Phi0])
        return alpha + linalg.pinv_right(lhs, rank_tol) @ np.concatenate([miss, np.zeros(r)])

    try:
        t, A, Ad = _weight_rk4(data, alpha0, rate, t_end, correct)
    except RankDeficient as exc:
        raise RankDeficient(f"[H1(u); Phi0] lost full row rank {m + r}: {exc}") from exc
    U, Y = _outputs(data, t, A)
    return WeightTrajectory(t, A, Ad, U, Y)


def initial_weights(data: TrajGenData, eta_bar, u_bar0=None) -> np.ndarray:
    """Least-norm ``alpha`` with ``Phi0 alpha = F1 eta_bar``, i.e. ``Phi0^+ F1 eta_bar``.

    With ``u_bar0`` the input constraint ``H1(u) alpha = u_bar0`` is stacked
    on, as needed by :func:`generate_output_b`.
    """
    target = data.F1 @ np.asarray(eta_bar, float).ravel()
    if u_bar0 is None:
        return linalg.pinv_right(data.Phi0) @ target
    M = np.vstack([data.U_hankel, data.Phi0])
    return linalg.pinv_right(M) @ np.concatenate([np.asarray(u_bar0, float).ravel(), target])
