"""Recording and plant re-simulation helpers shared by the trajectory tests."""
import numpy as np

from ddlqr import lti_sim, trajgen
from ddlqr.lti_sim import SinusoidInput
from ddlqr.substitute_state import cosimulate, dataset_from_cosim, project

DT = 1e-3


def richer_input(base):
    """The two-channel exploration signal plus one extra sinusoid per channel,
    giving persistent excitation of order 2n+1."""
    ch = [list(c) for c in base.channels]
    ch[0].append((0.2, 1.3 * np.pi, 0.3))
    ch[1].append((0.2, 2.3 * np.pi, 0.9))
    return SinusoidInput(ch, base.offsets)


def recording(plant, bank, input, x0, T, t_tail=2.5, dt_s=0.2):
    """Co-simulate long enough for a ``t_tail`` horizon after the last
    Hankel column and package the result for trajectory generation."""
    sim = cosimulate(plant, bank, input, x0, (T - 1) * dt_s + t_tail, DT)
    pd = project(dataset_from_cosim(sim, bank, 0.0, dt_s, T), bank)
    return sim, trajgen.trajgen_data(sim, pd.F1, 0.0, dt_s, T, input, plant.n)


def resimulate_output(plant, x0, u_samples, h):
    """RK4 on the plant with step ``h`` from inputs sampled every ``h/2``."""
    def forcing(t):
        return u_samples[np.rint(np.atleast_1d(t) / (h / 2)).astype(int)].T
    steps = (u_samples.shape[0] - 1) // 2
    _, X = lti_sim.rk4_linear(plant.A, plant.B, np.asarray(x0, float), forcing,
                              0.0, h, steps)
    return X @ plant.C.T


def state_weights(sim, data, alpha):
    """Plant state implied by the weights: the delayed state Hankel times alpha."""
    return sim.x[data.columns(0)].T @ alpha
