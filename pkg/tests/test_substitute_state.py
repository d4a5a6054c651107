import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddlqr import linalg
from ddlqr.errors import (DegenerateEta0, InsufficientExcitation, UnstableSpectrum,
                          ValidationError)
from ddlqr.lti_sim import LtiPlant, SinusoidInput
from ddlqr.substitute_state import (FilterBank, ProjectedData, RawDataset,
                                    build_filter_bank, char_poly_coeffs, collect_data,
                                    cosimulate, gamma_eta_rank_demo, krylov_matrix,
                                    project, write_matrix_csv)
from fixtures_data import ETA0_EPS, INPUT, OBS_EIGS, PLANT, X0


# -- filter bank -----------------------------------------------------------

def test_bank_two_poles_single_channel():
    bank = build_filter_bank([-5, -6], 1, 1, [1.0, 0.0])
    np.testing.assert_allclose(bank.char_coeffs, [30, 11])
    np.testing.assert_array_equal(bank.A_s, [[0, 1], [-30, -11]])
    np.testing.assert_array_equal(bank.b_s, [[0], [1]])
    np.testing.assert_array_equal(bank.A_eps, bank.A_s)


def test_bank_four_poles_two_channels():
    bank = build_filter_bank(OBS_EIGS, 2, 2, ETA0_EPS)
    np.testing.assert_allclose(bank.char_coeffs, [120, 154, 71, 14])
    assert bank.script_A.shape == (20, 20)
    assert bank.script_B.shape == (20, 8)
    assert bank.dim == 20
    # the error-filter block receives no input
    np.testing.assert_array_equal(bank.script_B[16:], 0)
    np.testing.assert_array_equal(bank.script_B[:16, 4:], 0)


def test_bank_first_order():
    bank = build_filter_bank([-1], 1, 1, [0.5])
    np.testing.assert_array_equal(bank.A_s, [[-1]])
    np.testing.assert_array_equal(bank.b_s, [[1]])


@pytest.mark.parametrize("eigs", [[1.0], [-1.0, 0.0], [2, 3, 4, 5]])
def test_bank_rejects_unstable_spectrum(eigs):
    with pytest.raises(UnstableSpectrum):
        build_filter_bank(eigs, 1, 1)


def test_bank_rejects_zero_eta0():
    with pytest.raises(DegenerateEta0):
        build_filter_bank([-1, -2], 1, 1, [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-8, -0.2), min_size=1, max_size=5),
       st.integers(0, 2**31 - 1))
def test_bank_invariants(eigs, seed):
    bank = build_filter_bank(eigs, 1, 2, "random", np.random.default_rng(seed))
    n = len(eigs)
    # A_s and A_eps share the characteristic polynomial of the assigned spectrum
    np.testing.assert_allclose(np.poly(bank.A_s)[1:][::-1], bank.char_coeffs,
                               rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(np.poly(bank.A_eps), np.poly(bank.A_s), rtol=1e-12)
    assert np.any(bank.eta0_eps != 0)
    assert np.linalg.matrix_rank(krylov_matrix(bank.A_eps, bank.eta0_eps)) == n
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(bank.script_A).real).min(),
                               min(eigs), rtol=1e-3, atol=1e-3)


def test_char_poly_of_complex_pair():
    np.testing.assert_allclose(char_poly_coeffs([-1 + 2j, -1 - 2j]), [5, 2])


def test_bank_json_roundtrip():
    bank = build_filter_bank(OBS_EIGS, 2, 2, ETA0_EPS)
    back = FilterBank.from_dict(json.loads(json.dumps(bank.to_dict())))
    np.testing.assert_array_equal(back.script_A, bank.script_A)
    np.testing.assert_array_equal(back.eta0_eps, bank.eta0_eps)
    assert (back.m, back.p) == (2, 2)


# -- data collection -------------------------------------------------------

def test_zero_input_excites_only_error_filter():
    plant = LtiPlant(PLANT.A, PLANT.B, PLANT.C)
    bank = build_filter_bank(OBS_EIGS, 2, 2, ETA0_EPS)
    raw = collect_data(plant, bank, SinusoidInput.zero(2), np.zeros(4), T=20)
    np.testing.assert_array_equal(raw.U0, 0)
    np.testing.assert_array_equal(raw.Y0, 0)
    np.testing.assert_array_equal(raw.E0[:16], 0)
    assert np.all(np.linalg.norm(raw.E0[16:], axis=0) > 0)
    with pytest.raises(InsufficientExcitation):
        project(raw, bank)


def test_E1_is_filter_rhs(mimo):
    raw, bank = mimo.raw, mimo.bank
    Z = np.zeros((bank.n, raw.T))
    expected = bank.script_A @ raw.E0 + bank.script_B @ np.vstack([raw.U0, raw.Y0, Z])
    np.testing.assert_array_equal(raw.E1, expected)


def test_samples_match_cosimulation(mimo):
    raw = mimo.raw
    sim = cosimulate(mimo.plant, mimo.bank, INPUT, X0, 2.0, 1e-3)
    np.testing.assert_allclose(raw.E0[:, :11], sim.eta[::200].T, atol=1e-12)
    np.testing.assert_allclose(raw.U0[:, :11], sim.u[::200].T, atol=1e-12)


def test_mimo_rank_and_order(mimo):
    pd = mimo.projected
    assert mimo.raw.E0.shape == (20, 48)
    assert pd.rank_r == 16 and pd.order_estimate == 4
    assert pd.rank_r % (2 + 2) == 0


def test_siso_f1_square_orthogonal(siso):
    pd = siso.projected
    assert pd.rank_r == 6 and pd.order_estimate == 2
    np.testing.assert_allclose(pd.F1 @ pd.F1.T, np.eye(6), atol=1e-10)
    np.testing.assert_allclose(pd.F1.T @ pd.F1, np.eye(6), atol=1e-10)


def test_minimal_T_gives_square_invertible_phi0(siso):
    inst = siso
    from fixtures_data import SISO
    with pytest.warns(UserWarning, match="square"):
        raw = collect_data(inst.plant, inst.bank, SISO.input, inst.x0, T=6)
        pd = project(raw, inst.bank)
    assert pd.Phi0.shape == (6, 6)
    assert np.linalg.matrix_rank(pd.Phi0) == 6


def test_T_below_minimum_warns(siso):
    from fixtures_data import SISO
    with pytest.warns(UserWarning, match="below the minimum"):
        raw = collect_data(siso.plant, siso.bank, SISO.input, siso.x0, T=5)
    with pytest.raises(InsufficientExcitation):
        project(raw, siso.bank)


def test_collect_rejects_off_grid_sampling(siso):
    from fixtures_data import SISO
    with pytest.raises(ValidationError):
        collect_data(siso.plant, siso.bank, SISO.input, siso.x0,
                     sample_dt=0.2005)


# -- projection invariants -------------------------------------------------

@pytest.mark.parametrize("name", ["mimo", "siso"])
def test_projection_invariants(name, request):
    inst = request.getfixturevalue(name)
    raw, pd = inst.raw, inst.projected
    np.testing.assert_allclose(pd.F1 @ pd.F1.T, np.eye(pd.rank_r), atol=1e-10)
    np.testing.assert_array_equal(pd.Phi0, pd.F1 @ raw.E0)
    np.testing.assert_array_equal(pd.Phi1, pd.F1 @ raw.E1)
    np.testing.assert_array_equal(pd.B_F, pd.F1 @ inst.bank.B_u)
    assert np.linalg.norm(pd.F1.T @ pd.F1 @ raw.E0 - raw.E0) <= 1e-8 * np.linalg.norm(raw.E0)
    assert pd.min_singular_Phi0 > 1e-9 * np.linalg.norm(raw.E0, 2)


@pytest.mark.parametrize("name", ["mimo", "siso"])
def test_data_consistency(name, request):
    pd = request.getfixturevalue(name).projected
    pinv = np.linalg.pinv(pd.Phi0)
    A_hat = (pd.Phi1 - pd.B_F @ pd.U0) @ pinv
    C_hat = pd.Y0 @ pinv
    scale = np.linalg.norm(pd.Phi1)
    assert np.linalg.norm(A_hat @ pd.Phi0 + pd.B_F @ pd.U0 - pd.Phi1) <= 1e-8 * scale
    assert np.linalg.norm(C_hat @ pd.Phi0 - pd.Y0) <= 1e-8 * max(1, np.linalg.norm(pd.Y0))


@pytest.mark.parametrize("name", ["mimo", "siso"])
def test_parameterization_inclusion(name, request, rng):
    # every [I; K] lies in the image of [Phi0; U0], so any gain is reachable
    pd = request.getfixturevalue(name).projected
    M = np.vstack([pd.Phi0, pd.U0])
    assert linalg.numerical_rank(M) == pd.rank_r + pd.U0.shape[0]
    K = rng.normal(size=(pd.U0.shape[0], pd.rank_r))
    target = np.vstack([np.eye(pd.rank_r), K])
    G = np.linalg.lstsq(M, target, rcond=None)[0]
    assert np.linalg.norm(M @ G - target) <= 1e-8 * np.linalg.norm(target)


def test_projected_json_roundtrip(mimo):
    pd = mimo.projected
    back = ProjectedData.from_dict(json.loads(json.dumps(pd.to_dict())))
    for k in ("F1", "Phi0", "Phi1", "B_F", "U0", "Y0", "singular_values_E0"):
        np.testing.assert_array_equal(getattr(back, k), getattr(pd, k))
    assert (back.rank_r, back.order_estimate) == (16, 4)


def test_raw_json_roundtrip(siso):
    raw = siso.raw
    back = RawDataset.from_dict(json.loads(json.dumps(raw.to_dict())))
    for k in ("U0", "Y0", "E0", "E1"):
        np.testing.assert_array_equal(getattr(back, k), getattr(raw, k))
    assert (back.T, back.t0, back.sample_dt) == (raw.T, raw.t0, raw.sample_dt)


def test_matrix_csv_export(tmp_path, siso):
    path = tmp_path / "E0.csv"
    write_matrix_csv(path, siso.raw.E0)
    lines = path.read_text().splitlines()
    assert lines[0].split(",")[:2] == ["col1", "col2"]
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back, siso.raw.E0)


# -- quadratic regressor rank ----------------------------------------------

def test_gamma_eta_rank_mimo(mimo):
    inst = mimo
    raw = collect_data(inst.plant, inst.bank, INPUT, inst.x0, T=120)
    with pytest.warns(UserWarning, match="capped by T"):
        rank, bound = gamma_eta_rank_demo(raw, 4)
    assert bound == 256 and bound < 20 ** 2
    assert rank <= 120


def test_gamma_eta_rank_long_record_hits_bound(siso):
    from fixtures_data import SISO
    raw = collect_data(siso.plant, siso.bank, SISO.input, siso.x0, T=60)
    rank, bound = gamma_eta_rank_demo(raw, 2)
    # symmetric vec(eta eta^T) spans at most r(r+1)/2 directions
    assert bound == 36 and rank <= 21


def test_gamma_eta_toy_bound():
    plant = LtiPlant([[-1.0]], [[1.0]], [[1.0]])
    bank = build_filter_bank([-2], 1, 1, [1.0])
    u = SinusoidInput([[(1.0, 1.0, 0.0), (0.7, 2.3, 0.4)]])
    raw = collect_data(plant, bank, u, [0.5], T=20)
    rank, bound = gamma_eta_rank_demo(raw, 1)
    assert bound == 9 and rank <= 9


def test_gamma_eta_zero_input():
    bank = build_filter_bank(OBS_EIGS, 2, 2, ETA0_EPS)
    raw = collect_data(PLANT, bank, SinusoidInput.zero(2), np.zeros(4), T=40)
    with pytest.warns(UserWarning):
        rank, _ = gamma_eta_rank_demo(raw, 4)
    assert 0 < rank <= 4 ** 2
