from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tetraloc.channel import NoiseModel, TruePose
from tetraloc.errors import InsufficientDataError, InvalidParameterError, InvalidSeriesError
from tetraloc.estimator import EstimatorConfig, compose_estimate
from tetraloc.protocol import NodeConfig
from tetraloc.sim import (
    DEFAULT_NOISE,
    Agent,
    Circular,
    CurvedForward,
    ExperimentConfig,
    RppNetwork,
    Static,
    covariance_cell,
    default_agents,
    lowpass_filter,
    measure_throughput,
    pan_tilt_rotation,
    run_covariance_experiment,
    run_trajectory_experiment,
    single_exchange,
    summarize_covariance,
)

QUIET = NoiseModel()
SMALL = dict(pan_min=-30.0, pan_max=30.0, tilt_min=-45.0, tilt_max=45.0, range_min=1.5, range_max=3.5,
             range_step=2.0, pan_step=30.0, tilt_step=45.0, readings_per_cell=10)


# covariance_cell ------------------------------------------------------------------------

def cov_oracle(q, truth):
    e = np.mean((q - truth) ** 2, axis=0)
    s = np.cov(q.T, ddof=1)
    return np.linalg.det(np.diag(e) + s)


def test_perfect_estimates_zero():
    truth = np.array([1.0, 2.0, -0.5])
    cell = covariance_cell(np.tile(truth, (50, 1)), truth)
    assert cell.cov_scalar == 0.0
    np.testing.assert_array_equal(cell.cov_e, 0.0)


def test_two_point_oracle():
    eps = 0.3
    truth = np.array([2.0, 0.0, 1.0])
    q = truth + np.array([[eps, 0, 0], [-eps, 0, 0]])
    cell = covariance_cell(q, truth)
    # cov_e = (eps^2, 0, 0); sample covariance xx = 2 eps^2 (ddof 1), rest 0.
    np.testing.assert_allclose(cell.cov_e, [eps**2, 0, 0], atol=1e-15)
    np.testing.assert_allclose(cell.cov_sigma, np.diag([2 * eps**2, 0, 0]), atol=1e-15)
    assert cell.cov_scalar == pytest.approx(0.0, abs=1e-12)
    # A non-degenerate two-point case with a hand-computed determinant.
    q = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0]])
    truth = np.zeros(3)
    # cov_e = (0.5, 0.5, 2); sample cov = 0.5 * d d^T with d = (1, -1, -2)
    d = np.array([1.0, -1.0, -2.0])
    hand = np.linalg.det(np.diag([0.5, 0.5, 2.0]) + 0.5 * np.outer(d, d))
    # det(D + v v^T) = det(D) (1 + v^T D^-1 v), v = d / sqrt(2)
    assert hand == pytest.approx(0.5 * 0.5 * 2.0 * (1 + 0.5 * (1 / 0.5 + 1 / 0.5 + 4 / 2.0)), abs=1e-12)
    assert covariance_cell(q, truth).cov_scalar == pytest.approx(hand, abs=1e-12)


def test_needs_two_estimates():
    with pytest.raises(InsufficientDataError):
        covariance_cell(np.zeros((1, 3)), np.zeros(3))


def test_accepts_estimates_and_pose():
    pose = TruePose([3.0, 0.0, 0.0], [0, 0, 0])
    ests = [compose_estimate(3.0, [1, 0, 0]), compose_estimate(3.1, [1, 0, 0])]
    cell = covariance_cell(ests, pose)
    assert cell.cov_scalar >= 0 and cell.n_readings == 2


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=st.floats(-50, 50)),
       arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_cov_scalar_nonnegative(q, truth):
    cell = covariance_cell(q, truth)
    assert cell.cov_scalar >= 0
    np.testing.assert_allclose(cell.cov_sigma, cell.cov_sigma.T)
    assert np.linalg.eigvalsh(cell.cov_sigma).min() >= -1e-9 * max(1.0, np.abs(cell.cov_sigma).max())


def test_matches_oracle(rng):
    for _ in range(200):
        q = rng.normal(size=(int(rng.integers(2, 60)), 3))
        t = rng.normal(size=3)
        assert covariance_cell(q, t).cov_scalar == pytest.approx(cov_oracle(q, t), rel=1e-9, abs=1e-12)


# covariance experiment --------------------------------------------------------------------

def test_paper_grid_size():
    cfg = ExperimentConfig()
    assert (len(cfg.ranges), len(cfg.pans), len(cfg.tilts)) == (7, 25, 13)
    assert len(cfg.cells()) == 2275
    assert cfg.readings_per_cell == 50


@pytest.mark.parametrize("field, value", [("range_step", 0.0), ("pan_step", 7.0), ("readings_per_cell", 1),
                                          ("range_min", 0.0)])
def test_config_validation(field, value):
    with pytest.raises(InvalidParameterError):
        ExperimentConfig(**{field: value})


def test_cells_account_for_every_reading():
    cells = run_covariance_experiment(ExperimentConfig(**SMALL))
    assert len(cells) == 2 * 3 * 3
    assert all(c.n_readings + c.n_failures == 10 for c in cells)
    assert all(c.cov_scalar >= 0 for c in cells)


def test_zero_noise_exact_mode_is_deterministic():
    cfg = ExperimentConfig(noise=QUIET, estimator=EstimatorConfig(mode="exact"), tilt_min=-45.0, tilt_max=45.0,
                           range_min=1.5, range_max=7.5, range_step=3.0, readings_per_cell=5)
    cells = run_covariance_experiment(cfg)
    assert all(c.n_failures == 0 for c in cells)
    assert max(c.cov_scalar for c in cells) < 1e-12


def test_pan_tilt_truth():
    # Static source along +x; the receiver pans and tilts under it.
    np.testing.assert_allclose(pan_tilt_rotation(0.0, 0.0), np.eye(3))
    R = pan_tilt_rotation(np.deg2rad(90), 0.0)
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1)


def test_parallel_matches_serial():
    cfg = ExperimentConfig(**SMALL)
    a = run_covariance_experiment(cfg, jobs=1)
    b = run_covariance_experiment(cfg, jobs=2)
    for x, y in zip(a, b):
        assert x.grid_index == y.grid_index
        np.testing.assert_array_equal(x.cov_sigma, y.cov_sigma)


def test_adding_cells_does_not_perturb_existing():
    small = run_covariance_experiment(ExperimentConfig(**SMALL))
    bigger = run_covariance_experiment(ExperimentConfig(**{**SMALL, "range_max": 5.5}))
    by_key = {(c.range, c.pan, c.tilt): c for c in bigger}
    for c in small:
        np.testing.assert_array_equal(by_key[(c.range, c.pan, c.tilt)].cov_sigma, c.cov_sigma)


def test_summary_keys():
    s = summarize_covariance(run_covariance_experiment(ExperimentConfig(**SMALL)))
    for key in ("operational_mean_bearing_error_deg", "range_rmse_m", "failure_rate", "cells"):
        assert key in s


# agents -------------------------------------------------------------------------------------

def test_trajectories_continuous():
    for traj in (Static((1, 2, 3)), Circular((3, 0, -1), 1.0, 0.2), CurvedForward((1, 0, 2), 0.0, 0.08, 0.08),
                 CurvedForward((0, 0, 0), 0.5, 0.0, 1.0)):
        t = np.linspace(0, 60, 6001)
        p = np.array([traj(x) for x in t])
        # Steps bounded by speed * dt (speeds here are at most 1 m/s).
        assert np.max(np.linalg.norm(np.diff(p, axis=0), axis=1)) <= 0.01 + 1e-12


def test_circle_radius_and_period():
    c = Circular((3, 0, -1), 1.0, 0.2)
    for t in np.linspace(0, 30, 50):
        assert np.isclose(np.linalg.norm(c(t) - np.array([3, 0, -1])), 1.0)
    np.testing.assert_allclose(c(2 * np.pi / 0.2), c(0.0), atol=1e-12)


def test_curved_forward_speed():
    c = CurvedForward((1, 0, 2), 0.0, 0.08, 0.5)
    dt = 1e-4
    assert np.isclose(np.linalg.norm(c(10 + dt) - c(10)) / dt, 0.5, rtol=1e-3)


# network ------------------------------------------------------------------------------------------

def test_single_exchange_is_46ms():
    net = single_exchange()
    assert [t.duration for t in net.transactions] == [46.0]
    assert len(net.frames) == 7


def test_two_node_mutual_exclusion():
    agents = [Agent(1, Static((2.0, 0, 0))), Agent(2, Static((0.0, 0, 0)))]
    net = RppNetwork(agents, seed=3)
    net.saturate(1, 2)
    net.saturate(2, 1)
    net.run(20_000)
    assert len(net.transactions) > 100
    assert net.overlapping_transactions() == []
    assert net.collisions == 0
    # At any instant at most one initiator is mid-transaction.
    busy = sorted((t.start, t.end) for t in net.transactions)
    assert all(b[0] >= a[1] for a, b in zip(busy, busy[1:]))


def test_event_log_time_ordered():
    res = run_trajectory_experiment(duration=10.0, seed=1)
    times = [t for t, _, _ in res.network.event_log]
    assert times == sorted(times)


def test_static_noiseless_constant_estimates():
    agents = [Agent(1, Static((2.0, 0.5, 1.0))), Agent(2, Static((-1.0, 0.2, 2.0))), Agent(3, Static((0, 0, 0)))]
    res = run_trajectory_experiment(agents, duration=5.0, noise=QUIET, seed=2)
    for src in (1, 2):
        pos = np.array([p.estimate.position for p in res.pings if p.source == src])
        assert len(pos) > 10
        assert np.ptp(pos, axis=0).max() < 1e-9


def test_over_capacity_rejected():
    with pytest.raises(InvalidParameterError):
        run_trajectory_experiment(duration=1.0, rpp_rate=10.5)


def test_trajectory_max_rate_per_agent():
    res = run_trajectory_experiment(duration=30.0, rpp_rate=10.0, seed=4)
    for src in (1, 2):
        rate = sum(1 for p in res.pings if p.source == src and p.estimate is not None) / 30.0
        assert abs(rate - 10.0) <= 1.0
    assert res.network.overlapping_transactions() == []


def test_trajectory_tracks_truth():
    res = run_trajectory_experiment(duration=60.0, seed=5)
    for src in (1, 2):
        pings = [p for p in res.pings if p.source == src and p.estimate is not None]
        t = np.array([p.t for p in pings])
        err = np.array([p.estimate.position - p.truth for p in pings])
        filt = lowpass_filter(t, np.array([p.estimate.position for p in pings]), 0.5)
        truth = np.array([p.truth for p in pings])
        # Composed budget: 0.25 m range plus 15 deg of bearing at the farthest point.
        budget = 0.25 + np.linalg.norm(truth, axis=1).max() * np.deg2rad(15)
        assert np.sqrt(np.mean(np.sum(err**2, axis=1))) <= budget
        assert np.sqrt(np.mean(np.sum((filt - truth) ** 2, axis=1))) <= budget
    # Agent 1 closes its loop (0.2 rad/s sweeps 2 pi in ~31 s) and the
    # filtered estimates circle the right centre.
    ones = [p for p in res.pings if p.source == 1 and p.estimate is not None]
    truth = np.array([p.truth for p in ones])
    sweep = np.unwrap(np.arctan2(truth[:, 2] + 1.0, truth[:, 0] - 3.0))
    assert np.ptp(sweep) > 2 * np.pi
    filt = lowpass_filter([p.t for p in ones], np.array([p.estimate.position for p in ones]), 0.5)
    assert np.linalg.norm(filt.mean(axis=0) - np.array([3.0, 0.0, -1.0])) < 0.5


def test_network_determinism():
    a = run_trajectory_experiment(duration=10.0, seed=7)
    b = run_trajectory_experiment(duration=10.0, seed=7)
    assert len(a.pings) == len(b.pings)
    for x, y in zip(a.pings, b.pings):
        assert x.t == y.t and x.source == y.source
        np.testing.assert_array_equal(x.estimate.position, y.estimate.position)


def test_frame_errors_fail_transactions():
    # Corrupted frames terminate transactions; the network keeps going.
    # Mutual exclusion is only guaranteed on an error-free channel: a node
    # that missed a corrupted init cannot know a transaction is running.
    res = run_trajectory_experiment(duration=20.0, seed=8, frame_error_rate=0.2)
    outcomes = [t.outcome for t in res.network.transactions]
    assert outcomes.count("done") > 20
    assert {"crc", "timeout"} & set(outcomes)
    assert any(p.failure for p in res.pings)


# throughput ----------------------------------------------------------------------------------------

def test_two_agent_throughput():
    r = measure_throughput(2, 120, 60.0, seed=1)
    assert 19.6 <= r.total_rate <= 21.8
    assert r.min_duration_ms == 46.0
    assert r.overlaps == 0


def test_three_agent_per_agent_rate():
    r = measure_throughput(3, 120, 60.0, seed=2)
    assert abs(r.per_agent_rate - 10.0) <= 1.0
    assert r.overlaps == 0


def test_longer_messages_lower_throughput():
    assert measure_throughput(2, 1200, 30.0, seed=3).total_rate < measure_throughput(2, 120, 30.0, seed=3).total_rate


def test_throughput_needs_two_agents():
    with pytest.raises(InvalidParameterError):
        measure_throughput(1)


# lowpass ---------------------------------------------------------------------------------------------

def test_lowpass_constant():
    t = np.linspace(0, 5, 101)
    x = np.tile([1.0, -2.0, 3.0], (101, 1))
    np.testing.assert_array_equal(lowpass_filter(t, x, 1.0), x)


def test_lowpass_step_time_constant():
    fc = 1.0
    t = np.arange(0, 3, 0.001)
    y = lowpass_filter(t, np.r_[0.0, np.ones(len(t) - 1)], fc)
    assert np.all(np.diff(y) >= 0) and y[-1] <= 1.0
    tau = t[np.argmax(y >= 1 - np.exp(-1))]
    assert tau == pytest.approx(1 / (2 * np.pi * fc), rel=0.05)


def test_lowpass_reduces_noise(rng):
    t = np.arange(0, 200, 1 / 20)
    y = lowpass_filter(t, rng.standard_normal(len(t)), 1.0)
    assert y[100:].std() < 0.5


def test_lowpass_errors():
    with pytest.raises(InvalidSeriesError):
        lowpass_filter([0, 2, 1], [0, 0, 0], 1.0)
    with pytest.raises(InvalidParameterError):
        lowpass_filter([0, 1], [0, 0], 0.0)
    assert lowpass_filter([], np.zeros((0, 3)), 1.0).shape == (0, 3)


def test_default_agents():
    ids = [a.id for a in default_agents()]
    assert ids == [1, 2, 3]
    assert DEFAULT_NOISE.phase_sigma0 > 0 and DEFAULT_NOISE.phase_sigma_slope > 0


def test_node_config_scaling_keeps_46ms():
    net = single_exchange(node_cfg=replace(NodeConfig(), timeout=50.0))
    assert net.transactions[0].duration == 46.0
