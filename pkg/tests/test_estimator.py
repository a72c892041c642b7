import itertools

import numpy as np
import pytest
from conftest import angle_between, random_rotation
from hypothesis import given, settings
from hypothesis import strategies as st

from tetraloc.channel import (
    TICK_S,
    IQSample,
    NoiseModel,
    RppObservation,
    TruePose,
    TwrTimestamps,
    synth_phases,
    synth_twr,
    wrap,
)
from tetraloc.errors import (
    AmbiguousBearingError,
    CalibrationError,
    DegenerateGeometryError,
    InsufficientGeometryError,
    NoFirstPathError,
    RangingError,
)
from tetraloc.estimator import (
    ZERO_CALIBRATION,
    CalibrationTable,
    EstimatorConfig,
    IncidenceAngleSet,
    calibrate_bias,
    compose_estimate,
    estimate_aoa,
    estimate_aoa_batch,
    estimate_aoa_detailed,
    estimate_relative,
    incidence_angles,
    normalize,
    phase_differences,
    phase_of_arrival,
    select_rows,
    solve_bearing,
    twr_range,
)
from tetraloc.geometry import baseline_matrix, build_orthogonal, build_rta, direction

C = 299_792_458.0
QUIET = NoiseModel()
EXACT = EstimatorConfig(mode="exact")
PAPER = EstimatorConfig(mode="paper")
THRESH = np.deg2rad(165.0)


def all_valid(alpha):
    alpha = np.asarray(alpha, dtype=float)
    return IncidenceAngleSet(alpha, np.ones(alpha.shape, dtype=bool))


# phase_of_arrival ----------------------------------------------------------------

def test_phase_of_arrival_examples():
    assert phase_of_arrival(IQSample(1.0, 0.0), 0.0) == 0.0
    assert abs(phase_of_arrival(IQSample(0.0, 1.0), np.pi / 2)) < 1e-15
    assert abs(phase_of_arrival(IQSample(np.cos(2.5), np.sin(2.5)), 1.0) - 1.5) < 1e-12


def test_phase_of_arrival_zero_amplitude():
    with pytest.raises(NoFirstPathError):
        phase_of_arrival(IQSample(0.0, 0.0))


def test_phase_of_arrival_wraps():
    v = phase_of_arrival(IQSample(-1.0, -1e-9), 1.0)
    assert -np.pi <= v < np.pi


# phase_differences ------------------------------------------------------------------

def test_equal_phases_give_zero():
    d = phase_differences([0.7] * 4)
    np.testing.assert_array_equal(d.values, np.zeros(6))


def test_difference_sign():
    d = phase_differences([0.5, 0.2, 0.0, 0.0])
    assert np.isclose(d.values[0], -0.3)


def test_difference_wraps():
    d = phase_differences([0.0, 3.5, 0.0, 0.0])
    assert np.isclose(d.values[0], 3.5 - 2 * np.pi)
    assert np.isclose(d.values[0], -2.783, atol=1e-3)
    assert np.all(d.values >= -np.pi) and np.all(d.values < np.pi)


def test_difference_adds_bias():
    calib = CalibrationTable((0.1, 0.2, 0.3, 0.4, 0.5, 0.6))
    d = phase_differences([0.0] * 4, calib)
    np.testing.assert_allclose(d.values, calib.pair_biases)
    np.testing.assert_allclose(d.bias_applied, calib.pair_biases)


# incidence_angles ---------------------------------------------------------------------

def test_zero_difference_zero_angle():
    for mode in ("paper", "exact"):
        assert incidence_angles(np.zeros(6), mode).values[0] == 0.0


def test_sixty_degree_example():
    dphi = 0.95 * np.pi * np.sin(np.deg2rad(60))
    assert np.isclose(dphi, 2.584, atol=1e-3)
    exact = np.rad2deg(incidence_angles([dphi], "exact").values[0])
    paper = np.rad2deg(incidence_angles([dphi], "paper").values[0])
    assert abs(exact - 60.0) < 1e-9
    oracle = np.rad2deg(np.arcsin(dphi / np.pi) / 0.95)
    assert abs(paper - oracle) < 1e-12
    assert abs(paper - 58.272) < 1e-3


def test_thirty_degree_exact():
    assert np.isclose(np.rad2deg(incidence_angles([0.475 * np.pi], "exact").values[0]), 30.0)


def test_clamping_is_flagged():
    a = incidence_angles([0.99 * np.pi, 0.1], "exact")
    assert a.clamped.tolist() == [True, False]
    assert np.isclose(a.values[0], np.pi / 2)
    assert not incidence_angles([0.99 * np.pi], "paper").clamped[0]


@pytest.mark.parametrize("mode", ["paper", "exact"])
def test_incidence_monotone(mode):
    x = np.linspace(-0.95 * np.pi, 0.95 * np.pi, 5001)
    assert np.all(np.diff(incidence_angles(x, mode).values) > 0)


def test_valid_mask_from_threshold():
    a = incidence_angles(np.deg2rad([0, 164.9, 165.0, 170, -170, -10]), "paper")
    assert a.valid_mask.tolist() == [True, True, True, False, False, True]


# select_rows ------------------------------------------------------------------------

def test_select_all_rows():
    assert select_rows(np.zeros(6)).tolist() == [True] * 6


def test_select_rejects_one_pair():
    v = np.full(6, 0.1)
    v[2] = np.deg2rad(170)
    assert np.isclose(v[2], 2.967, atol=1e-3)
    assert select_rows(v).tolist() == [True, True, False, True, True, True]


def test_select_four_pairs_over():
    v = np.zeros(6)
    v[:4] = np.deg2rad(170)
    with pytest.raises(InsufficientGeometryError):
        select_rows(v)


# solve_bearing / normalize --------------------------------------------------------------

def test_zero_sines_give_zero():
    sol = solve_bearing(baseline_matrix(build_rta()), all_valid(np.zeros(6)))
    np.testing.assert_array_equal(sol.raw, np.zeros(3))
    with pytest.raises(AmbiguousBearingError):
        normalize(sol.raw)


def test_apex_direction_round_trip(rta):
    rows = baseline_matrix(rta).rows
    u = np.array([0.0, 1.0, 0.0])
    alpha = np.arcsin(rows @ u)
    sol = solve_bearing(rows, all_valid(alpha))
    np.testing.assert_allclose(normalize(sol.raw), u, atol=1e-9)
    assert sol.rows_used == 6


def test_three_row_exact_solve(rta):
    rows = baseline_matrix(rta).rows
    u = direction(0.3, 0.4)
    mask = np.array([True, True, False, True, False, False])
    sol = solve_bearing(rows, all_valid(np.arcsin(rows @ u)), mask)
    np.testing.assert_allclose(sol.raw, np.linalg.solve(rows[mask], rows[mask] @ u), atol=1e-12)
    assert sol.residual < 1e-12


def test_rank_deficient_subset():
    rows = baseline_matrix(build_rta()).rows
    # The three base pairs are coplanar.
    with pytest.raises(DegenerateGeometryError):
        solve_bearing(rows, all_valid(np.zeros(6)), np.array([True, True, True, False, False, False]))


def test_too_few_rows():
    with pytest.raises(InsufficientGeometryError):
        solve_bearing(baseline_matrix(build_rta()), all_valid(np.zeros(6)), np.array([1, 1, 0, 0, 0, 0], bool))


def test_normalize_examples():
    np.testing.assert_allclose(normalize([2, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(normalize([1, 1, 1]), np.full(3, 1 / np.sqrt(3)))
    with pytest.raises(AmbiguousBearingError):
        normalize([0, 0, 0])


def test_subsets_agree_on_consistent_data(rta):
    rows = baseline_matrix(rta).rows
    u = direction(-1.1, 0.25)
    ang = all_valid(np.arcsin(rows @ u))
    full = solve_bearing(rows, ang).raw
    for k in (3, 4, 5):
        for idx in itertools.combinations(range(6), k):
            m = np.zeros(6, bool)
            m[list(idx)] = True
            if np.linalg.matrix_rank(rows[m]) < 3:
                continue
            np.testing.assert_allclose(solve_bearing(rows, ang, m).raw, full, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), st.integers(0, 63))
def test_row_removal_never_increases_residual(sines, drop):
    rows = baseline_matrix(build_rta()).rows
    ang = all_valid(np.arcsin(np.array(sines)))
    keep = np.array([(drop >> k) & 1 == 0 for k in range(6)])
    if keep.sum() < 3 or np.linalg.matrix_rank(rows[keep]) < 3:
        return
    full = solve_bearing(rows, ang).raw
    sub = solve_bearing(rows, ang, keep)
    rhs = np.array(sines)[keep]
    assert sub.residual <= np.linalg.norm(rows[keep] @ full - rhs) + 1e-12


# estimate_aoa ------------------------------------------------------------------------------

def test_noiseless_exact_round_trip(rta):
    u = direction(np.deg2rad(45), 0.0)
    est = estimate_aoa(synth_phases(rta, u, QUIET), rta, config=EXACT)
    assert angle_between(est, u) < 1e-9


def test_paper_mode_at_sixty_elevation(rta):
    u = direction(np.deg2rad(30), np.deg2rad(60))
    est = estimate_aoa(synth_phases(rta, u, QUIET), rta, config=PAPER)
    assert np.rad2deg(angle_between(est, u)) <= 2.5


def test_four_pairs_over_threshold_fail(rta):
    phases = np.array([0.0, 2.967, 0.0, 2.967])  # pairs (2,1),(3,2),(4,1),(4,3) exceed 165 deg
    assert (np.abs(phase_differences(phases).values) > THRESH).sum() == 4
    with pytest.raises(InsufficientGeometryError):
        estimate_aoa(phases, rta)
    res = estimate_aoa_batch(phases[None], rta)
    assert not res.ok[0] and res.failure[0] == "insufficient_rows"


def test_observation_with_iq(rta):
    u = direction(1.0, -0.3)
    noise = NoiseModel(sfd_true=(0.5, -0.5, 1.0, 2.0))
    from tetraloc.channel import synth_iq

    iq, sfd = synth_iq(rta, u, noise, np.random.default_rng(1))
    est = estimate_aoa(RppObservation(iq=iq, sfd=sfd), rta, config=EXACT)
    assert angle_between(est, u) < 1e-9


def test_equivariance(rta, rng):
    for _ in range(50):
        R = random_rotation(rng)
        u = direction(rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0))
        phases = synth_phases(rta, u, QUIET, rng)
        est = estimate_aoa(phases, rta, config=EXACT)
        turned = rta.rotated(R)
        est_rot = estimate_aoa(synth_phases(turned, R @ u, QUIET, rng), turned, config=EXACT)
        np.testing.assert_allclose(R.T @ est_rot, est, atol=1e-9)


def test_batch_matches_single(rta, rng):
    noise = NoiseModel(0.2, 0.2, seed=2)
    u = direction(rng.uniform(-np.pi, np.pi, 300), rng.uniform(-1.4, 1.4, 300))
    phases = synth_phases(rta, u, noise, rng)
    batch = estimate_aoa_batch(phases, rta)
    for k in range(len(u)):
        try:
            single = estimate_aoa_detailed(phases[k], rta)
        except (InsufficientGeometryError, DegenerateGeometryError, AmbiguousBearingError):
            assert not batch.ok[k]
            continue
        assert batch.ok[k]
        np.testing.assert_allclose(batch.bearings[k], single.bearing, atol=1e-12)
        assert batch.rows_used[k] == single.rows_used


def test_orthogonal_array_aliasing_rows_excluded(rng):
    arr = build_orthogonal()
    u = direction(rng.uniform(-np.pi, np.pi, 200), rng.uniform(-1.0, 1.0, 200))
    res = estimate_aoa_batch(synth_phases(arr, u, QUIET, rng), arr, config=EXACT)
    # The diagonal pairs are sqrt(2) d long, beyond half a wavelength.
    assert np.all(res.rows_used[res.ok] == 3)
    assert np.all(angle_between(res.bearings[res.ok], u[res.ok]) < 1e-9)


def test_paper_matrix_mode_runs(rta):
    u = direction(0.0, 0.0)
    est = estimate_aoa(synth_phases(rta, u, QUIET), rta, config=EstimatorConfig(matrix="paper"))
    assert np.isclose(np.linalg.norm(est), 1.0)


# twr_range / compose -------------------------------------------------------------------------

def test_twr_three_metres():
    assert abs(twr_range(synth_twr(3.0, QUIET)) - 3.0) < 0.01


def test_twr_round_equals_reply_is_zero():
    ts = TwrTimestamps(0, 100, 1100, 1000, 2000, 2100)
    assert ts.intervals == (1000, 1000, 1000, 1000)
    assert twr_range(ts) == 0.0


def test_twr_dstwr_formula():
    ts = TwrTimestamps(0, 700, 26_000_700, 26_001_500, 52_001_500, 52_002_300)
    r1, d1, r2, d2 = ts.intervals
    expected = C * TICK_S * (r1 * r2 - d1 * d2) / (r1 + r2 + d1 + d2)
    assert twr_range(ts) == pytest.approx(expected, rel=1e-12)


def test_twr_negative_tof():
    with pytest.raises(RangingError):
        twr_range(TwrTimestamps(0, 100, 1200, 1000, 2000, 2100))


def test_twr_equal_drift_cancels():
    for ppm in (-20.0, 5.0, 20.0):
        ts = synth_twr(6.0, QUIET, drift_ppm=(ppm, ppm))
        assert abs(twr_range(ts) - 6.0) < C * TICK_S


def test_twr_opposing_drift_seven_metres():
    est = twr_range(synth_twr(7.0, QUIET, drift_ppm=(20.0, -20.0)))
    assert abs(est - 7.0) <= 0.25


def test_compose_examples():
    np.testing.assert_allclose(compose_estimate(2.0, [1, 0, 0]).position, [2, 0, 0])
    np.testing.assert_allclose(compose_estimate(1.5, [0, 0, 1]).position, [0, 0, 1.5])
    e = compose_estimate(3.0, [1 / np.sqrt(2), 1 / np.sqrt(2), 0])
    np.testing.assert_allclose(e.position, [2.1213203, 2.1213203, 0], atol=1e-6)


def test_estimate_relative(rta):
    pose = TruePose([2.0, 1.0, -1.0], [0, 0, 0])
    obs = RppObservation(phases=synth_phases(rta, pose.relative_position / pose.distance, QUIET),
                         twr=synth_twr(pose, QUIET), truth=pose)
    est = estimate_relative(obs, rta, config=EXACT)
    np.testing.assert_allclose(est.position, est.range * est.bearing)
    assert np.linalg.norm(est.position - pose.relative_position) < 0.01
    assert est.rows_used == 6 and np.isfinite(est.condition_number)


# calibrate_bias -------------------------------------------------------------------------------

def _samples(array, noise, n, seed):
    rng = np.random.default_rng(seed)
    u = direction(rng.uniform(-np.pi, np.pi, n), rng.uniform(-1.0, 1.0, n))
    return u, synth_phases(array, u, noise, rng)


def test_calibration_recovers_pair_bias(rta):
    noise = NoiseModel.from_antenna_offsets([0.2, 0.0, 0.0, 0.0])
    assert np.isclose(noise.bias_true[0], 0.2)
    table = calibrate_bias(_samples(rta, noise, 50, 0), rta)
    np.testing.assert_allclose(table.pair_biases, noise.bias_true, atol=1e-9)
    assert table.residual_rms < 1e-9


def test_calibration_zero_bias(rta):
    table = calibrate_bias(_samples(rta, QUIET, 50, 1), rta)
    np.testing.assert_allclose(table.pair_biases, 0.0, atol=1e-9)


def test_calibration_with_noise(rta):
    noise = NoiseModel.from_antenna_offsets([0.2, 0.0, 0.0, 0.0], phase_sigma0=0.05, seed=5)
    table = calibrate_bias(_samples(rta, noise, 500, 2), rta)
    assert np.max(np.abs(wrap(np.array(table.pair_biases) - noise.bias_true))) < 0.01


def test_calibrated_estimate_is_unbiased(rta):
    noise = NoiseModel.from_antenna_offsets([0.3, -0.2, 0.1, -0.25])
    table = calibrate_bias(_samples(rta, noise, 50, 3), rta)
    u = direction(0.7, 0.2)
    phases = synth_phases(rta, u, noise)
    assert angle_between(estimate_aoa(phases, rta, table, EXACT), u) < 1e-9
    assert angle_between(estimate_aoa(phases, rta, ZERO_CALIBRATION, EXACT), u) > 1e-3


def test_calibration_needs_samples(rta):
    with pytest.raises(CalibrationError):
        calibrate_bias([], rta)
    u = np.tile([1.0, 0.0, 0.0], (5, 1))
    with pytest.raises(CalibrationError):
        calibrate_bias((u, np.zeros((5, 4))), rta)


def test_calibration_text_round_trip():
    t = CalibrationTable((0.1, -0.2, 1 / 3, 0.0, 2.5, -3.0), 0.05)
    assert CalibrationTable.from_text(t.to_text()) == t
    assert "pair_2_1 = 0.1" in t.to_text()
    with pytest.raises(CalibrationError):
        CalibrationTable.from_text("pair_2_1 = 0.1\n")
    with pytest.raises(CalibrationError):
        CalibrationTable.from_text(t.to_text() + "bogus = 1\n")
