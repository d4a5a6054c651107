"""Continuous-time LTI plants, fixed-step RK4 simulation, sinusoidal inputs
and persistent-excitation / structural checks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .errors import NonFinite, ValidationError

DEFAULT_DT = 1e-3
DIVERGENCE_NORM = 1e12


@dataclass(frozen=True)
class LtiPlant:
    """``x' = A x + B u``, ``y = C x``; the hidden system."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = linalg.as_matrix(self.A, "A")
        B = linalg.as_matrix(self.B, "B")
        C = linalg.as_matrix(self.C, "C")
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValidationError(
                f"inconsistent plant shapes A{A.shape} B{B.shape} C{C.shape}"
            )
        if linalg.numerical_rank(C, 1e-10) != C.shape[0]:
            raise ValidationError("output matrix C must have full row rank")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = linalg.as_matrix(self.Q, "Q")
        R = linalg.as_matrix(self.R, "R")
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T)) > 1e-10:
                raise ValidationError(f"{name} must be square symmetric")
        if np.min(np.linalg.eigvalsh(Q)) < -1e-10:
            raise ValidationError("Q must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(R)) <= 1e-10:
            raise ValidationError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    def state_weight(self, plant: LtiPlant) -> np.ndarray:
        return plant.C.T @ self.Q @ plant.C


@dataclass(frozen=True)
class SinusoidInput:
    """Per channel ``offset + sum_k a_k sin(w_k t + phi_k)``.

    ``channels[i]`` is a list of ``(amplitude, angular_frequency, phase)``
    triples. Cosine terms are sine terms with phase ``+pi/2``.
    """

    channels: tuple
    offsets: tuple = ()

    def __post_init__(self):
        chans = tuple(tuple((float(a), float(w), float(ph)) for a, w, ph in ch)
                      for ch in self.channels)
        if not chans or any(len(ch) == 0 for ch in chans):
            raise ValidationError("each input channel needs at least one term")
        offs = tuple(float(o) for o in self.offsets) or (0.0,) * len(chans)
        if len(offs) != len(chans):
            raise ValidationError("one offset per channel required")
        vals = [v for ch in chans for term in ch for v in term] + list(offs)
        if not np.all(np.isfinite(vals)):
            raise ValidationError("input parameters must be finite")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "offsets", offs)

    @property
    def m(self) -> int:
        return len(self.channels)

    def derivative(self, t, k: int = 0) -> np.ndarray:
        """k-th time derivative at times ``t``; shape ``(m,)`` or ``(m, len(t))``."""
        t_arr = np.asarray(t, dtype=float)
        out = np.empty((self.m,) + t_arr.shape)
        for i, (terms, off) in enumerate(zip(self.channels, self.offsets)):
            acc = np.full(t_arr.shape, off if k == 0 else 0.0)
            for a, w, ph in terms:
                acc = acc + a * w**k * np.sin(w * t_arr + ph + k * np.pi / 2)
            out[i] = acc
        return out

    def __call__(self, t) -> np.ndarray:
        return self.derivative(t, 0)

    def to_dict(self) -> dict:
        return {
            "channels": [[list(term) for term in ch] for ch in self.channels],
            "offsets": list(self.offsets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SinusoidInput":
        return cls(channels=d["channels"], offsets=d.get("offsets", ()))

    @classmethod
    def zero(cls, m: int) -> "SinusoidInput":
        return cls(channels=[[(0.0, 0.0, 0.0)]] * m)


@dataclass(frozen=True)
class Trajectory:
    """Samples on a uniform grid; row ``k`` of each array is time ``t[k]``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    dt_integration: float = DEFAULT_DT

    @property
    def t0(self) -> float:
        return float(self.t[0])

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self.t, self.x, self.u, self.y)


def write_trajectory_csv(path, t, x, u, y) -> None:
    x, u, y = (np.atleast_2d(np.asarray(a)) for a in (x, u, y))
    header = (["t"] + [f"x{i + 1}" for i in range(x.shape[1])]
              + [f"u{i + 1}" for i in range(u.shape[1])]
              + [f"y{i + 1}" for i in range(y.shape[1])])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(t)):
            w.writerow([repr(float(v)) for v in
                        np.concatenate(([t[k]], x[k], u[k], y[k]))])


def grid_steps(span: float, dt: float, what: str = "span") -> int:
    """Number of ``dt`` steps in ``span``; ``span`` must be an integer multiple."""
    k = int(round(span / dt))
    if k < 0 or abs(k * dt - span) > 1e-9 * max(1.0, abs(span)):
        raise ValidationError(f"{what} {span} is not an integer multiple of dt={dt}")
    return k


def rk4_linear(M: np.ndarray, G: np.ndarray, z0: np.ndarray, forcing: Callable,
               t0: float, dt: float, steps: int, watch: Callable | None = None):
    """Classical RK4 for ``z' = M z + G f(t)`` on a uniform grid.

    ``forcing(t)`` takes an array of times and returns ``(dim_f, len(t))``.
    It is evaluated at each step's start, midpoint and end. Returns the
    ``(steps + 1, dim_z)`` array of grid states.
    """
    dim = M.shape[0]
    h = dt
    I = np.eye(dim)
    hM = h * M
    hM2 = hM @ hM
    hM3 = hM2 @ hM
    # One RK4 step written as z+ = P z + h (N1 g1 + N2 g2 + N3 g3), g = G f.
    P = I + hM + hM2 / 2 + hM3 / 6 + hM3 @ hM / 24
    N1 = (I + hM + hM2 / 2 + hM3 / 4) / 6
    N2 = (4 * I + 2 * hM + hM2 / 2) / 6
    N3 = I / 6
    n_f = G.shape[1]
    times = t0 + h * np.arange(steps + 1)
    if n_f:
        f_grid = G @ np.atleast_2d(forcing(times))
        f_mid = G @ np.atleast_2d(forcing(times[:-1] + h / 2))
        drive = h * (N1 @ f_grid[:, :-1] + N2 @ f_mid + N3 @ f_grid[:, 1:])
    else:
        drive = np.zeros((dim, steps))
    Z = np.empty((steps + 1, dim))
    z = np.array(z0, dtype=float)
    Z[0] = z
    for k in range(steps):
        z = P @ z + drive[:, k]
        Z[k + 1] = z
        if watch is not None and (k & 255) == 0:
            watch(z)
    if not np.all(np.isfinite(Z)):
        raise NonFinite("state became non-finite during integration")
    if watch is not None:
        watch(z)
    return times, Z


def divergence_guard(limit):
    def watch(z):
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > limit:
            raise NonFinite(f"state norm exceeded {limit:g}")
    return watch


def simulate(plant: LtiPlant, input: SinusoidInput, x0, t_end: float,
             dt_integration: float = DEFAULT_DT, t0: float = 0.0) -> Trajectory:
    """Integrate the plant from ``t0`` to ``t_end`` with fixed-step RK4."""
    if dt_integration <= 0 or t_end - t0 < dt_integration - 1e-15:
        raise ValidationError("need dt_integration > 0 and t_end - t0 >= dt_integration")
    if input.m != plant.m:
        raise ValidationError("input channel count does not match plant")
    x0 = np.asarray(x0, dtype=float).reshape(plant.n)
    steps = grid_steps(t_end - t0, dt_integration, "t_end - t0")
    t, X = rk4_linear(plant.A, plant.B, x0, input, t0, dt_integration, steps,
                      watch=divergence_guard(DIVERGENCE_NORM))
    U = input(t).T
    return Trajectory(t, X, U, X @ plant.C.T, dt_integration)


def evaluate_input_derivatives(input: SinusoidInput, t: float, order: int) -> np.ndarray:
    """Stacked ``[u; u'; ...; u^(order-1)]`` at time ``t`` (length ``m*order``)."""
    if order < 1:
        raise ValidationError("order must be >= 1")
    return np.concatenate([input.derivative(t, k) for k in range(order)])


def derivative_sampling_matrix(input: SinusoidInput, order: int, sample_times) -> np.ndarray:
    ts = np.asarray(sample_times, dtype=float)
    return np.vstack([input.derivative(ts, k) for k in range(order)])


def check_pe_order(input: SinusoidInput, order: int, sample_times,
                   rel_tol: float = 1e-9) -> tuple[bool, float]:
    """Whether the derivative sampling matrix of the given order has full
    row rank ``m*order``; also returns its smallest singular value.

    Rows are normalized first: high derivatives of fast sinusoids differ in
    scale by many orders of magnitude, which row scaling does not affect
    the rank of."""
    H = derivative_sampling_matrix(input, order, sample_times)
    norms = np.linalg.norm(H, axis=1)
    if not np.all(norms > 0):
        return False, 0.0
    H = H / norms[:, None]
    if H.shape[1] < H.shape[0]:
        raise ValidationError(f"need at least {H.shape[0]} sample times")
    s = np.linalg.svd(H, compute_uv=False)
    smin = float(s[-1])
    return bool(s[0] > 0 and smin > rel_tol * s[0]), smin


def controllability_matrix(A, B) -> np.ndarray:
    A = np.asarray(A, float)
    blocks = [np.asarray(B, float)]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def observability_matrix(A, C) -> np.ndarray:
    return controllability_matrix(np.asarray(A, float).T, np.asarray(C, float).T).T


def controllability_rank(plant: LtiPlant, rel_tol: float = 1e-10) -> int:
    return linalg.numerical_rank(controllability_matrix(plant.A, plant.B), rel_tol)


def observability_rank(plant: LtiPlant, rel_tol: float = 1e-10) -> int:
    return linalg.numerical_rank(observability_matrix(plant.A, plant.C), rel_tol)


def _hautus(A, E, stacked_rows: bool) -> bool:
    A = np.asarray(A, float)
    E = np.atleast_2d(np.asarray(E, float))
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < -1e-9:
            continue
        pencil = lam * np.eye(n) - A
        H = np.vstack([pencil, E]) if stacked_rows else np.hstack([pencil, E])
        s = np.linalg.svd(H, compute_uv=False)
        if np.sum(s > 1e-8 * s[0]) < n:
            return False
    return True


def hautus_stabilizable(A, B) -> bool:
    """Every eigenvalue with ``Re >= -1e-9`` satisfies ``rank[lI - A, B] = n``."""
    return _hautus(A, B, stacked_rows=False)


def hautus_detectable(A, C) -> bool:
    """Every eigenvalue with ``Re >= -1e-9`` satisfies ``rank[lI - A; C] = n``."""
    return _hautus(A, C, stacked_rows=True)


def satisfies_standing_assumption(plant: LtiPlant, cost: CostSpec) -> bool:
    """(A, B) controllable, (A, C) and (A, Q_x^(1/2)) observable."""
    n = plant.n
    Qx = cost.state_weight(plant)
    w, V = np.linalg.eigh(Qx)
    Qx_half = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
    return (controllability_rank(plant) == n and observability_rank(plant) == n
            and linalg.numerical_rank(observability_matrix(plant.A, Qx_half), 1e-10) == n)


def random_plant(rng: np.random.Generator, n: int, m: int, p: int,
                 eig_interval: Sequence[float] = (-2.0, 0.0),
                 cost: CostSpec | None = None, max_tries: int = 1000) -> LtiPlant:
    """Symmetric ``A`` with eigenvalues uniform in ``eig_interval`` (random
    orthogonal similarity), ``B`` and ``C`` entrywise uniform on (0, 1].

    Draws are repeated until controllability and observability hold.
    """
    lo, hi = eig_interval
    for _ in range(max_tries):
        eigs = rng.uniform(lo, hi, size=n)
        if np.any(eigs >= hi) or np.any(eigs <= lo):
            continue
        Qo, Rr = np.linalg.qr(rng.standard_normal((n, n)))
        Qo = Qo * np.sign(np.diag(Rr))
        A = linalg.sym(Qo @ np.diag(eigs) @ Qo.T)
        B = 1.0 - rng.uniform(0.0, 1.0, size=(n, m))
        C = 1.0 - rng.uniform(0.0, 1.0, size=(p, n))
        try:
            plant = LtiPlant(A, B, C)
        except ValidationError:
            continue
        c = cost or CostSpec(np.eye(p), np.eye(m))
        if satisfies_standing_assumption(plant, c):
            return plant
    raise ValidationError("could not draw a plant satisfying the rank assumptions")


# -- JSON round trip -------------------------------------------------------

def plant_to_dict(plant: LtiPlant) -> dict:
    return {"A": plant.A.tolist(), "B": plant.B.tolist(), "C": plant.C.tolist()}


def plant_from_dict(d: dict) -> LtiPlant:
    return LtiPlant(np.array(d["A"], float), np.array(d["B"], float),
                    np.array(d["C"], float))


def cost_to_dict(cost: CostSpec) -> dict:
    return {"Q": cost.Q.tolist(), "R": cost.R.tolist()}


def cost_from_dict(d: dict) -> CostSpec:
    return CostSpec(np.array(d["Q"], float), np.array(d["R"], float))
