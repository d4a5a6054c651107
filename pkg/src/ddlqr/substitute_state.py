"""Input-output filter bank, data collection and the rank-revealing
projection that turns the filter data into a full-row-rank substitute state.

The filter bank is

    eta' = As eta + Bs [u; y; 0],   eta(0) = [0, ..., 0, eta0_eps]

with ``As = diag(I_(m+p) (x) A_s, A_eps)``, ``Bs = diag(I_(m+p) (x) b_s, 0)``
and ``A_s`` the companion matrix of the chosen observer polynomial. Its
construction needs only the chosen eigenvalues, never the plant.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import (DegenerateEta0, InsufficientExcitation, UnstableSpectrum,
                     ValidationError)
from .lti_sim import (DEFAULT_DT, DIVERGENCE_NORM, LtiPlant, SinusoidInput,
                      divergence_guard, grid_steps, rk4_linear)

log = logging.getLogger(__name__)

KRYLOV_COND_LIMIT = 1e12


def char_poly_coeffs(eigenvalues) -> np.ndarray:
    """``[a0, ..., a(n-1)]`` of the monic polynomial with the given roots."""
    eigs = np.asarray(eigenvalues, dtype=complex).ravel()
    c = np.poly(eigs)
    if np.max(np.abs(c.imag)) > 1e-9 * max(1.0, np.max(np.abs(c.real))):
        raise ValidationError("complex eigenvalues must come in conjugate pairs")
    return c.real[1:][::-1].copy()


def krylov_matrix(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``[A^(n-1) v, ..., A v, v]``."""
    n = A.shape[0]
    cols = [np.asarray(v, float).ravel()]
    for _ in range(n - 1):
        cols.append(A @ cols[-1])
    return np.column_stack(cols[::-1])


@dataclass(frozen=True)
class FilterBank:
    observer_eigenvalues: np.ndarray
    char_coeffs: np.ndarray
    A_s: np.ndarray
    b_s: np.ndarray
    A_eps: np.ndarray
    script_A: np.ndarray
    script_B: np.ndarray
    eta0_eps: np.ndarray
    m: int
    p: int

    @property
    def n(self) -> int:
        return self.A_s.shape[0]

    @property
    def dim(self) -> int:
        return (self.m + self.p + 1) * self.n

    @property
    def B_u(self) -> np.ndarray:
        return self.script_B[:, :self.m]

    @property
    def B_y(self) -> np.ndarray:
        return self.script_B[:, self.m:self.m + self.p]

    @property
    def eta0(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[-self.n:] = self.eta0_eps
        return out

    def rhs(self, eta, u, y) -> np.ndarray:
        """``eta'`` from the bank's own right-hand side (columns allowed)."""
        return self.script_A @ eta + self.B_u @ u + self.B_y @ y

    def to_dict(self) -> dict:
        eig = np.asarray(self.observer_eigenvalues)
        return {
            "observer_eigenvalues": {"re": eig.real.tolist(), "im": eig.imag.tolist()},
            "m": self.m,
            "p": self.p,
            "eta0_eps": self.eta0_eps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterBank":
        ev = d["observer_eigenvalues"]
        if isinstance(ev, dict):
            ev = np.array(ev["re"]) + 1j * np.array(ev["im"])
        return build_filter_bank(ev, d["m"], d["p"], d["eta0_eps"])


def build_filter_bank(observer_eigenvalues, m: int, p: int, eta0_eps="random",
                      rng: np.random.Generator | None = None) -> FilterBank:
    """Assemble the filter bank for the assigned observer spectrum.

    ``eta0_eps="random"`` draws entries from U[-1, 1] (up to 10 attempts)
    until the Krylov matrix of ``(A_eps, eta0_eps)`` is well conditioned.
    """
    eigs = np.asarray(observer_eigenvalues, dtype=complex).ravel()
    if eigs.size < 1:
        raise ValidationError("need at least one observer eigenvalue")
    if np.any(eigs.real >= 0):
        raise UnstableSpectrum(f"observer eigenvalues must be stable, got {eigs}")
    if m < 1 or p < 1:
        raise ValidationError("m and p must be positive")
    coeffs = char_poly_coeffs(eigs)
    n = coeffs.size
    A_s = linalg.companion(coeffs)
    b_s = np.zeros((n, 1))
    b_s[-1, 0] = 1.0
    A_eps = A_s.copy()

    def ok(v):
        v = np.asarray(v, float).ravel()
        return v.shape == (n,) and np.any(v != 0) and \
            np.linalg.cond(krylov_matrix(A_eps, v)) < KRYLOV_COND_LIMIT

    if isinstance(eta0_eps, str):
        if eta0_eps != "random":
            raise ValidationError("eta0_eps must be a vector or 'random'")
        rng = rng if rng is not None else np.random.default_rng()
        for _ in range(10):
            cand = rng.uniform(-1.0, 1.0, size=n)
            if ok(cand):
                eta0_eps = cand
                break
        else:
            raise DegenerateEta0("no admissible eta0_eps in 10 draws")
    else:
        if not ok(eta0_eps):
            raise DegenerateEta0("eta0_eps is zero or its Krylov matrix is singular")
    eta0_eps = np.asarray(eta0_eps, float).ravel().copy()

    k = m + p
    script_A = np.zeros(((k + 1) * n, (k + 1) * n))
    script_A[:k * n, :k * n] = np.kron(np.eye(k), A_s)
    script_A[k * n:, k * n:] = A_eps
    script_B = np.zeros(((k + 1) * n, k + n))
    script_B[:k * n, :k] = np.kron(np.eye(k), b_s)
    return FilterBank(eigs if np.any(eigs.imag) else eigs.real, coeffs, A_s, b_s,
                      A_eps, script_A, script_B, eta0_eps, m, p)


@dataclass(frozen=True)
class CoSimulation:
    """Plant and filter bank integrated together on one RK4 grid."""

    t: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    y: np.ndarray
    u_dot: np.ndarray
    dt_integration: float


def joint_matrices(plant: LtiPlant, bank: FilterBank):
    """State matrix and input matrix of ``z = [x; eta]`` driven by ``u``."""
    n, N = plant.n, bank.dim
    M = np.zeros((n + N, n + N))
    M[:n, :n] = plant.A
    M[n:, :n] = bank.B_y @ plant.C
    M[n:, n:] = bank.script_A
    G = np.vstack([plant.B, bank.B_u])
    return M, G


def cosimulate(plant: LtiPlant, bank: FilterBank, input: SinusoidInput, x0,
               t_end: float, dt_integration: float = DEFAULT_DT) -> CoSimulation:
    """Run plant and filter bank from ``t = 0`` (filter starts at ``bank.eta0``)."""
    if bank.m != plant.m or bank.p != plant.p or input.m != plant.m:
        raise ValidationError("plant, bank and input dimensions disagree")
    M, G = joint_matrices(plant, bank)
    z0 = np.concatenate([np.asarray(x0, float).ravel(), bank.eta0])
    steps = grid_steps(t_end, dt_integration, "t_end")
    t, Z = rk4_linear(M, G, z0, input, 0.0, dt_integration, steps,
                      divergence_guard(DIVERGENCE_NORM))
    n = plant.n
    x = Z[:, :n]
    return CoSimulation(t, x, Z[:, n:], input(t).T, x @ plant.C.T,
                        input.derivative(t, 1).T, dt_integration)


@dataclass(frozen=True)
class RawDataset:
    U0: np.ndarray
    Y0: np.ndarray
    E0: np.ndarray
    E1: np.ndarray
    t0: float
    sample_dt: float
    T: int

    @property
    def m(self) -> int:
        return self.U0.shape[0]

    @property
    def p(self) -> int:
        return self.Y0.shape[0]

    def to_dict(self) -> dict:
        return {"U0": self.U0.tolist(), "Y0": self.Y0.tolist(),
                "E0": self.E0.tolist(), "E1": self.E1.tolist(),
                "t0": self.t0, "sample_dt": self.sample_dt, "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "RawDataset":
        a = {k: np.array(d[k], float) for k in ("U0", "Y0", "E0", "E1")}
        for k in ("U0", "Y0"):
            a[k] = a[k].reshape(-1, int(d["T"]))
        return cls(a["U0"], a["Y0"], a["E0"], a["E1"], float(d["t0"]),
                   float(d["sample_dt"]), int(d["T"]))


def default_T(m: int, n: int) -> int:
    return 2 * (m + 2) * n


def sample_indices(t0: float, sample_dt: float, T: int, dt: float) -> np.ndarray:
    i0 = grid_steps(t0, dt, "t0")
    stride = grid_steps(sample_dt, dt, "sample_dt")
    if stride < 1:
        raise ValidationError("sample_dt must be at least one integration step")
    return i0 + stride * np.arange(T)


def dataset_from_cosim(sim: CoSimulation, bank: FilterBank, t0: float,
                       sample_dt: float, T: int) -> RawDataset:
    idx = sample_indices(t0, sample_dt, T, sim.dt_integration)
    if idx[-1] >= sim.t.size:
        raise ValidationError("co-simulation too short for the requested samples")
    E0 = sim.eta[idx].T
    U0 = sim.u[idx].T
    Y0 = sim.y[idx].T
    E1 = bank.rhs(E0, U0, Y0)
    return RawDataset(U0, Y0, E0, E1, float(t0), float(sample_dt), int(T))


def collect_data(plant: LtiPlant, bank: FilterBank, input: SinusoidInput, x0,
                 t0: float = 0.0, sample_dt: float = 0.2, T: int | None = None,
                 dt_integration: float = DEFAULT_DT) -> RawDataset:
    """Sample ``u``, ``y``, ``eta`` at ``t0 + k*sample_dt``; ``E1`` columns are
    evaluated from the filter right-hand side, not differenced."""
    T = default_T(plant.m, plant.n) if T is None else int(T)
    if T < (plant.m + 2) * bank.n:
        warnings.warn(f"T={T} is below the minimum {(plant.m + 2) * bank.n}; "
                      "the projected data cannot have full row rank", stacklevel=2)
    t_end = t0 + (T - 1) * sample_dt
    t_end = max(t_end, dt_integration)
    sim = cosimulate(plant, bank, input, x0, t_end, dt_integration)
    return dataset_from_cosim(sim, bank, t0, sample_dt, T)


@dataclass(frozen=True)
class ProjectedData:
    F1: np.ndarray
    Phi0: np.ndarray
    Phi1: np.ndarray
    B_F: np.ndarray
    rank_r: int
    order_estimate: int
    min_singular_Phi0: float
    U0: np.ndarray
    Y0: np.ndarray
    singular_values_E0: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.Phi0.shape[1]

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in
             ("F1", "Phi0", "Phi1", "B_F", "U0", "Y0")}
        d.update(rank_r=self.rank_r, order_estimate=self.order_estimate,
                 min_singular_Phi0=self.min_singular_Phi0)
        if self.singular_values_E0 is not None:
            d["singular_values_E0"] = self.singular_values_E0.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectedData":
        r = int(d["rank_r"])
        arr = {k: np.array(d[k], float) for k in ("F1", "Phi0", "Phi1", "B_F", "U0", "Y0")}
        T = arr["Phi0"].reshape(r, -1).shape[1]
        sv = d.get("singular_values_E0")
        return cls(arr["F1"].reshape(r, -1), arr["Phi0"].reshape(r, T),
                   arr["Phi1"].reshape(r, T), arr["B_F"].reshape(r, -1), r,
                   int(d["order_estimate"]), float(d["min_singular_Phi0"]),
                   arr["U0"].reshape(-1, T), arr["Y0"].reshape(-1, T),
                   None if sv is None else np.array(sv, float))


def project(data: RawDataset, bank: FilterBank, rel_tol: float = 1e-9) -> ProjectedData:
    """Compress ``E0`` onto its numerical row space and form the
    full-row-rank substitute-state data."""
    rr = linalg.rank_reveal(data.E0, rel_tol)
    F1 = rr.orthonormal_rows
    r = rr.rank
    m = data.m
    Phi0 = F1 @ data.E0
    Phi1 = F1 @ data.E1
    B_F = F1 @ bank.B_u
    if r == 0 or r % (m + 2):
        raise InsufficientExcitation(
            f"rank(E0)={r} is not a multiple of m+2={m + 2}; input not exciting enough")
    s_phi = np.linalg.svd(Phi0, compute_uv=False)
    smin = float(s_phi[-1]) if r <= Phi0.shape[1] else 0.0
    if r > Phi0.shape[1] or smin <= rr.tolerance_used:
        raise InsufficientExcitation("projected data matrix is not full row rank")
    if not np.any(data.U0) or linalg.numerical_rank(data.U0, rel_tol) < m:
        raise InsufficientExcitation("input samples do not excite every channel")
    if data.T == r:
        warnings.warn("T equals the minimum (m+2)n; Phi0 is square and may be "
                      "poorly conditioned", stacklevel=2)
    order = r // (m + 2)
    log.debug("rank(E0)=%d of %d rows, order estimate %d", r, data.E0.shape[0], order)
    return ProjectedData(F1, Phi0, Phi1, B_F, r, order, smin, data.U0.copy(),
                         data.Y0.copy(), rr.singular_values)


def write_matrix_csv(path, M) -> None:
    """Plain CSV, one matrix row per line, header ``col1..colN``."""
    M = np.atleast_2d(np.asarray(M, float))
    header = ",".join(f"col{j + 1}" for j in range(M.shape[1]))
    np.savetxt(path, M, delimiter=",", header=header, comments="", fmt="%.17g")


def gamma_eta(E0: np.ndarray) -> np.ndarray:
    """Columns ``vec(eta eta^T)`` for each sample."""
    N, T = E0.shape
    return np.einsum("ik,jk->jik", E0, E0).reshape(N * N, T)


def gamma_eta_rank_demo(data: RawDataset, n: int | None = None,
                        rel_tol: float = 1e-9) -> tuple[int, int]:
    """Numerical rank of the quadratic regressor ``Gamma_eta`` and the
    ``((m+2) n)^2`` ceiling imposed by the filter-state span."""
    m, p = data.m, data.p
    N = data.E0.shape[0]
    n = N // (m + p + 1) if n is None else n
    bound = ((m + 2) * n) ** 2
    if data.T < bound:
        warnings.warn(f"T={data.T} < {bound}: the rank is capped by T, not the span",
                      stacklevel=2)
    return linalg.numerical_rank(gamma_eta(data.E0), rel_tol), bound
