"""Simulation experiments.

* ``run_covariance_experiment`` - pan/tilt/range grid with repeated readings
  per cell, summarised by the conservative covariance scalar
  det(diag(mean squared error) + sample covariance).
* ``RppNetwork`` - discrete-event multi-agent world running the RPP state
  machine over a shared channel with carrier sensing.
* ``run_trajectory_experiment`` / ``measure_throughput`` - built on it.
* ``lowpass_filter`` - first-order smoothing of estimate time series.

Network times are reported in milliseconds; trajectories take seconds.
"""

from __future__ import annotations

import heapq
import itertools
import struct
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .channel import (
    NoiseModel,
    RppObservation,
    TruePose,
    rotation_about,
    stream_key,
    synth_phases,
    synth_twr,
    true_bearing,
    wrap,
)
from .errors import (
    AmbiguousBearingError,
    DegenerateGeometryError,
    InsufficientDataError,
    InsufficientGeometryError,
    InvalidParameterError,
    InvalidSeriesError,
    RangingError,
)
from .estimator import (
    ZERO_CALIBRATION,
    CalibrationTable,
    EstimatorConfig,
    RelativeEstimate,
    estimate_aoa_batch,
    estimate_relative,
    twr_range,
)
from .geometry import AntennaArray, azimuth_elevation, build_rta, direction
from .protocol import (
    Backoff,
    Deliver,
    Event,
    EventKind,
    Failure,
    Finished,
    Frame,
    NodeConfig,
    Phase,
    Role,
    RppState,
    SendFrame,
    SetTimer,
    StartCompute,
    csma_try_send,
    rpp_duration,
    rpp_step,
)

CHANNEL_CAPACITY = 20.0
"Transactions per second the shared channel is rated for."

DEFAULT_NOISE = NoiseModel(
    phase_sigma0=0.10,
    phase_sigma_slope=0.15,
    range_sigma=0.15,
    clock_drift_ppm=20.0,
)
"Noise calibrated by demos/calibrate_noise.py against the target accuracy."


def angular_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    "Angle in radians between (batches of) vectors; accurate near zero."
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def pan_tilt_rotation(pan: float, tilt: float) -> np.ndarray:
    """World-to-body rotation of a receiver on a pan/tilt rig.

    A source on the world +x axis appears at body azimuth ``pan`` and
    elevation ``tilt`` (radians).
    """
    return rotation_about("y", -pan) @ rotation_about("z", tilt)


# --------------------------------------------------------------------------
# Covariance map


@dataclass(frozen=True)
class ExperimentConfig:
    pan_min: float = -180.0
    pan_max: float = 180.0
    pan_step: float = 15.0
    tilt_min: float = -90.0
    tilt_max: float = 90.0
    tilt_step: float = 15.0
    range_min: float = 1.5
    range_max: float = 7.5
    range_step: float = 1.0
    readings_per_cell: int = 50
    seed: int = 20240101
    noise: NoiseModel = DEFAULT_NOISE
    array: AntennaArray = field(default_factory=build_rta)
    estimator: EstimatorConfig = EstimatorConfig()
    calibration: CalibrationTable = ZERO_CALIBRATION
    reply_delays: tuple[float, float] = (400e-6, 400e-6)

    def __post_init__(self):
        for prefix in ("pan", "tilt", "range"):
            lo, hi, step = (getattr(self, f"{prefix}_{s}") for s in ("min", "max", "step"))
            if not step > 0:
                raise InvalidParameterError(f"{prefix}_step must be positive")
            if hi < lo:
                raise InvalidParameterError(f"{prefix}_max must be >= {prefix}_min")
            n = (hi - lo) / step
            if abs(n - round(n)) > 1e-9:
                raise InvalidParameterError(f"{prefix}_step does not divide [{lo}, {hi}]")
        if self.range_min <= 0:
            raise InvalidParameterError("range_min must be positive")
        if self.readings_per_cell < 2:
            raise InvalidParameterError("readings_per_cell must be >= 2")

    @staticmethod
    def _axis(lo, hi, step):
        return lo + step * np.arange(int(round((hi - lo) / step)) + 1)

    @property
    def pans(self) -> np.ndarray:
        return self._axis(self.pan_min, self.pan_max, self.pan_step)

    @property
    def tilts(self) -> np.ndarray:
        return self._axis(self.tilt_min, self.tilt_max, self.tilt_step)

    @property
    def ranges(self) -> np.ndarray:
        return self._axis(self.range_min, self.range_max, self.range_step)

    def cells(self) -> list[tuple[int, int, int]]:
        "Grid indices (range, pan, tilt) in output order."
        return list(itertools.product(range(len(self.ranges)), range(len(self.pans)), range(len(self.tilts))))


@dataclass
class CovarianceMapCell:
    grid_index: tuple[int, int, int]
    range: float
    pan: float
    tilt: float
    truth: np.ndarray
    n_readings: int
    n_failures: int
    mean_err: np.ndarray
    cov_e: np.ndarray
    cov_sigma: np.ndarray
    cov_scalar: float
    mean_bearing_err_deg: float = float("nan")
    rms_azimuth_err_deg: float = float("nan")
    rms_elevation_err_deg: float = float("nan")
    range_rmse: float = float("nan")
    range_mean_err: float = float("nan")
    bearing_errors_deg: np.ndarray = field(default=None, repr=False)
    range_errors: np.ndarray = field(default=None, repr=False)


def covariance_moments(positions: np.ndarray, truth: np.ndarray):
    """Mean error, per-component mean squared error, sample covariance and
    the scalar det(diag(mse) + covariance)."""
    q = np.asarray(positions, dtype=float)
    if q.ndim != 2 or q.shape[0] < 2:
        raise InsufficientDataError("need at least 2 estimates")
    err = q - np.asarray(truth, dtype=float)
    mean_err = err.mean(axis=0)
    cov_e = np.mean(err**2, axis=0)
    cov_sigma = np.cov(q, rowvar=False, ddof=1)
    cov_scalar = float(np.linalg.det(np.diag(cov_e) + cov_sigma))
    # diag(mse) + PSD is PSD; clip round-off below zero.
    return mean_err, cov_e, cov_sigma, max(cov_scalar, 0.0)


def covariance_cell(estimates: Sequence[RelativeEstimate] | np.ndarray, truth: TruePose | np.ndarray,
                    grid_index=(0, 0, 0), n_failures: int = 0) -> CovarianceMapCell:
    "Summarise estimates of one fixed relative position."
    if isinstance(estimates, np.ndarray):
        positions = estimates
    else:
        positions = np.array([e.position for e in estimates])
    if len(positions) < 2:
        raise InsufficientDataError("need at least 2 estimates")
    q = truth.relative_position if isinstance(truth, TruePose) else np.asarray(truth, dtype=float)
    mean_err, cov_e, cov_sigma, scalar = covariance_moments(positions, q)
    r = float(np.linalg.norm(q))
    with np.errstate(invalid="ignore", divide="ignore"):  # direction undefined at the origin
        az, el = azimuth_elevation(q)
    return CovarianceMapCell(tuple(grid_index), r, float(np.degrees(az)), float(np.degrees(el)), q,
                             len(positions), n_failures, mean_err, cov_e, cov_sigma, scalar)


def _run_cell(cfg: ExperimentConfig, index: tuple[int, int, int]) -> CovarianceMapCell:
    ir, ip, it = index
    rng_m, pan, tilt = float(cfg.ranges[ir]), float(cfg.pans[ip]), float(cfg.tilts[it])
    pose = TruePose(np.array([rng_m, 0.0, 0.0]), np.zeros(3), pan_tilt_rotation(np.radians(pan), np.radians(tilt)))
    bearing = true_bearing(pose)
    q = pose.relative_position
    noise = replace(cfg.noise, seed=cfg.seed)
    rng = noise.rng("covmap", ir, ip, it)
    n = cfg.readings_per_cell

    phases = synth_phases(cfg.array, np.broadcast_to(bearing, (n, 3)), noise, rng)
    aoa = estimate_aoa_batch(phases, cfg.array, cfg.calibration, cfg.estimator)
    ranges = np.full(n, np.nan)
    for k in range(n):
        try:
            ranges[k] = twr_range(synth_twr(rng_m, noise, cfg.reply_delays, rng))
        except RangingError:
            pass
    ok = aoa.ok & np.isfinite(ranges)
    positions = aoa.bearings[ok] * ranges[ok, None]
    n_ok = int(ok.sum())

    nan3 = np.full(3, np.nan)
    if n_ok >= 2:
        mean_err, cov_e, cov_sigma, scalar = covariance_moments(positions, q)
    else:
        mean_err, cov_e, cov_sigma, scalar = nan3, nan3, np.full((3, 3), np.nan), float("nan")

    b_err = np.degrees(angular_error(aoa.bearings[ok], bearing))
    r_err = ranges[ok] - rng_m
    cell = CovarianceMapCell((ir, ip, it), rng_m, pan, tilt, q, n_ok, n - n_ok,
                             mean_err, cov_e, cov_sigma, scalar,
                             bearing_errors_deg=b_err, range_errors=r_err)
    if n_ok:
        az_t, el_t = azimuth_elevation(bearing)
        az_e, el_e = azimuth_elevation(aoa.bearings[ok])
        cell.mean_bearing_err_deg = float(b_err.mean())
        cell.rms_azimuth_err_deg = float(np.degrees(np.sqrt(np.mean(wrap(az_e - az_t) ** 2))))
        cell.rms_elevation_err_deg = float(np.degrees(np.sqrt(np.mean((el_e - el_t) ** 2))))
        cell.range_rmse = float(np.sqrt(np.mean(r_err**2)))
        cell.range_mean_err = float(r_err.mean())
    return cell


def _run_cells(args):
    cfg, indices = args
    return [_run_cell(cfg, idx) for idx in indices]


def run_covariance_experiment(cfg: ExperimentConfig = ExperimentConfig(), jobs: int = 1) -> list[CovarianceMapCell]:
    """Simulate ``readings_per_cell`` transactions at every grid cell.

    Each cell draws from its own random sub-stream, so results do not depend
    on ``jobs`` or on which other cells are present. Failed readings (row
    rejection, rank deficiency, ranging) are counted and left out of the
    moments.
    """
    cells = cfg.cells()
    if jobs <= 1:
        return [_run_cell(cfg, idx) for idx in cells]
    chunks = [cells[k::jobs] for k in range(jobs)]
    out: dict[tuple, CovarianceMapCell] = {}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for part in pool.map(_run_cells, [(cfg, c) for c in chunks]):
            out.update({c.grid_index: c for c in part})
    return [out[idx] for idx in cells]


def summarize_covariance(cells: Sequence[CovarianceMapCell], max_tilt: float = 60.0,
                         max_range: float = 7.0) -> dict:
    """Aggregate accuracy over the operational region (|tilt| < max_tilt,
    range <= max_range) and the whole grid."""
    op = [c for c in cells if abs(c.tilt) < max_tilt and c.range <= max_range]
    near = [c for c in cells if c.range <= max_range]

    def cat(cs, attr):
        parts = [getattr(c, attr) for c in cs if getattr(c, attr) is not None]
        return np.concatenate(parts) if parts else np.array([])

    op_b = cat(op, "bearing_errors_deg")
    near_r = cat(near, "range_errors")
    n_total = sum(c.n_readings + c.n_failures for c in cells)
    n_fail = sum(c.n_failures for c in cells)
    return {
        "cells": len(cells),
        "operational_cells": len(op),
        "operational_mean_bearing_error_deg": float(op_b.mean()) if op_b.size else float("nan"),
        "operational_median_bearing_error_deg": float(np.median(op_b)) if op_b.size else float("nan"),
        "mean_bearing_error_deg": float(cat(cells, "bearing_errors_deg").mean()),
        "range_rmse_m": float(np.sqrt(np.mean(near_r**2))) if near_r.size else float("nan"),
        "range_mean_abs_error_m": float(np.mean(np.abs(near_r))) if near_r.size else float("nan"),
        "readings": n_total,
        "failures": n_fail,
        "failure_rate": n_fail / n_total if n_total else 0.0,
    }


# --------------------------------------------------------------------------
# Agents


@dataclass(frozen=True)
class Static:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.position, dtype=float)


@dataclass(frozen=True)
class Circular:
    "Circle in the horizontal (x-z) plane at the centre's height."

    center: tuple[float, float, float]
    radius: float
    rate: float  # rad/s
    phase: float = 0.0

    def __call__(self, t: float) -> np.ndarray:
        a = self.phase + self.rate * t
        return np.array(self.center, dtype=float) + self.radius * np.array([np.cos(a), 0.0, np.sin(a)])


@dataclass(frozen=True)
class CurvedForward:
    "Constant-speed, constant-curvature arc in the x-z plane."

    start: tuple[float, float, float]
    heading: float   # rad, from +x towards +z
    curvature: float  # 1/m
    speed: float     # m/s

    def __call__(self, t: float) -> np.ndarray:
        p0 = np.array(self.start, dtype=float)
        s = self.speed * t
        h = self.heading
        if abs(self.curvature) < 1e-12:
            return p0 + s * np.array([np.cos(h), 0.0, np.sin(h)])
        k = self.curvature
        th = h + k * s
        return p0 + np.array([(np.sin(th) - np.sin(h)) / k, 0.0, (np.cos(h) - np.cos(th)) / k])


@dataclass(frozen=True)
class Agent:
    id: int
    trajectory: Callable[[float], np.ndarray] = Static()
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3), compare=False)

    def position(self, t: float) -> np.ndarray:
        return self.trajectory(t)

    def pose_towards(self, other: "Agent", t: float) -> TruePose:
        "Pose with ``other`` as transmitter and this agent as receiver."
        return TruePose(other.position(t), self.position(t), self.rotation)


def default_agents() -> list[Agent]:
    """Two movers around a static observer (agent 3) at the origin."""
    return [
        Agent(1, Circular(center=(3.0, 0.0, -1.0), radius=1.0, rate=0.2)),
        Agent(2, CurvedForward(start=(1.0, 0.0, 2.0), heading=0.0, curvature=0.08, speed=0.08)),
        Agent(3, Static((0.0, 0.0, 0.0))),
    ]


# --------------------------------------------------------------------------
# Discrete-event network


class Ping(NamedTuple):
    t: float              # seconds
    source: int
    receiver: int
    estimate: Optional[RelativeEstimate]
    truth: np.ndarray      # relative position in receiver body frame
    failure: str


class Transaction(NamedTuple):
    transaction_id: int
    initiator: int
    dest: int
    start: float  # ms
    end: float    # ms
    outcome: str
    duration: float  # ms, computed from integer time so it is exact


@dataclass
class _Node:
    state: RppState
    cfg: NodeConfig
    rng: np.random.Generator
    pending: deque = field(default_factory=deque)
    attempt_token: int = 0
    attempt_at: Optional[float] = None
    saturated: bool = False
    dest: Optional[int] = None
    msg_len: int = 120
    sent_count: int = 0
    started_at: Optional[float] = None


NS_PER_MS = 1_000_000


def _ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def _scaled(cfg: NodeConfig) -> NodeConfig:
    "Copy of ``cfg`` with every duration in integer nanoseconds."
    names = ("backoff_min", "backoff_max", "t_init", "t_frame", "t_ranging", "t_bearing",
             "t_compute", "timeout", "turnaround", "contention_window")
    return replace(cfg, **{n: _ns(getattr(cfg, n)) for n in names})


class RppNetwork:
    """Agents running the RPP protocol over one broadcast channel.

    Every idle node that hears a message init joins the transaction as a
    listener, which is what makes them defer their own sends. Events are
    processed in (time, node id, insertion order). Internally time is kept
    in integer nanoseconds so durations come out exact; everything exposed
    (``transactions``, ``frames``) is in milliseconds.
    """

    def __init__(self, agents: Sequence[Agent], node_cfg: NodeConfig = NodeConfig(),
                 array: AntennaArray | None = None, noise: NoiseModel = DEFAULT_NOISE,
                 estimator: EstimatorConfig = EstimatorConfig(),
                 calibration: CalibrationTable = ZERO_CALIBRATION, seed: int = 0,
                 frame_error_rate: float = 0.0, record_frames: bool = False):
        self.agents = {a.id: a for a in agents}
        self.array = array if array is not None else build_rta()
        self.noise = replace(noise, seed=seed)
        self.estimator = estimator
        self.calibration = calibration
        self.seed = seed
        self.frame_error_rate = frame_error_rate
        self.record_frames = record_frames
        self.nodes = {
            a.id: _Node(RppState(node_id=a.id), _scaled(replace(node_cfg, node_id=a.id)),
                        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=stream_key("node", a.id))))
            for a in agents
        }
        self._channel_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=stream_key("channel")))
        self._link_rngs: dict[tuple[int, int], np.random.Generator] = {}
        self._heap: list = []
        self._counter = itertools.count()
        self.now = 0
        self.on_air_until = -1
        self._air: list[tuple[float, float, int]] = []
        self.frames: list[tuple[float, int, str]] = []
        self.transactions: list[Transaction] = []
        self.pings: list[Ping] = []
        self.collisions = 0
        self.event_log: list[tuple[float, int, str]] = []
        self._truth: dict[tuple[int, int], np.ndarray] = {}

    # scheduling -----------------------------------------------------------
    @property
    def now_ms(self) -> float:
        return self.now / NS_PER_MS

    def _push(self, t: int, node_id: int, kind: str, payload=None):
        heapq.heappush(self._heap, (int(t), node_id, next(self._counter), kind, payload))

    def _schedule_attempt(self, node_id: int, at: int):
        node = self.nodes[node_id]
        node.attempt_token += 1
        node.attempt_at = at
        self._push(at, node_id, "attempt", node.attempt_token)

    # traffic ----------------------------------------------------------------
    def _message(self, node_id: int) -> bytes:
        node = self.nodes[node_id]
        node.sent_count += 1
        head = struct.pack(">HI", node_id, node.sent_count)
        return (head + bytes(max(0, node.msg_len - len(head))))[: max(node.msg_len, 0)]

    def saturate(self, node_id: int, dest: int, msg_len: int = 120, start_ms: float = 0.0):
        "Give ``node_id`` an always-full send queue addressed to ``dest``."
        node = self.nodes[node_id]
        node.saturated, node.dest, node.msg_len = True, dest, msg_len
        node.pending.append((self._message(node_id), dest))
        self._schedule_attempt(node_id, _ns(start_ms))

    def periodic(self, node_id: int, dest: int, rate_hz: float, until_ms: float, msg_len: int = 120,
                 offset_ms: float | None = None):
        "Host hands the node a new message every 1/rate_hz seconds."
        node = self.nodes[node_id]
        node.dest, node.msg_len = dest, msg_len
        period = 1000.0 / rate_hz
        offset = node.rng.uniform(0, period) if offset_ms is None else offset_ms
        k = 0
        while offset + k * period < until_ms:
            self._push(_ns(offset + k * period), node_id, "host", dest)
            k += 1

    # main loop ---------------------------------------------------------------
    def run(self, until_ms: float):
        until = _ns(until_ms)
        while self._heap and self._heap[0][0] <= until:
            t, node_id, _, kind, payload = heapq.heappop(self._heap)
            if t < self.now:
                raise RuntimeError("simulated time went backwards")
            self.now = t
            if kind == "event":
                self._step(node_id, payload)
            elif kind == "attempt":
                self._attempt(node_id, payload)
            elif kind == "host":
                node = self.nodes[node_id]
                node.pending.append((self._message(node_id), payload))
                if node.attempt_at is None:
                    self._attempt(node_id, node.attempt_token)
        self.now = max(self.now, until)
        return self

    def _attempt(self, node_id: int, token: int):
        node = self.nodes[node_id]
        if token != node.attempt_token:
            return
        node.attempt_at = None
        if not node.pending:
            return
        decision = csma_try_send(node.state, node.rng, node.cfg, channel_busy=self.now < self.on_air_until)
        if not decision.send_now:
            self._schedule_attempt(node_id, self.now + int(round(decision.delay)))
            return
        message, dest = node.pending[0]
        node.started_at = self.now
        self._step(node_id, Event(EventKind.HOST_SEND, message, dest=dest))

    def _step(self, node_id: int, event: Event):
        node = self.nodes[node_id]
        before = node.state.phase
        node.state, actions = rpp_step(node.state, event, self.now, node.rng, node.cfg)
        if node.state.phase is not before:
            self.event_log.append((self.now_ms, node_id, node.state.phase.value))
        for action in actions:
            self._apply(node_id, action)

    def _apply(self, node_id: int, action):
        node = self.nodes[node_id]
        if isinstance(action, SendFrame):
            self._transmit(node_id, action.frame)
        elif isinstance(action, SetTimer):
            self._push(action.at, node_id, "event", Event(EventKind.TIMER, name=action.name))
        elif isinstance(action, Backoff):
            self._schedule_attempt(node_id, self.now + int(round(action.delay)))
        elif isinstance(action, StartCompute):
            result = self._measure(action.peer, node_id) if action.addressed else None
            self._push(self.now + node.cfg.t_compute, node_id, "event",
                       Event(EventKind.COMPUTE_DONE, result=result))
        elif isinstance(action, Deliver):
            if action.estimate is not None or (action.source, node_id) in self._truth:
                truth = self._truth.pop((action.source, node_id), np.full(3, np.nan))
                self.pings.append(Ping(self.now / 1e9, action.source, node_id, action.estimate, truth, ""))
        elif isinstance(action, Finished):
            self._finish(node_id, action)

    def _finish(self, node_id: int, action: Finished):
        node = self.nodes[node_id]
        state = node.state
        if state.role is Role.INITIATOR:
            self.transactions.append(Transaction(state.transaction_id, node_id, state.peer or 0,
                                                 node.started_at / NS_PER_MS, self.now_ms,
                                                 "done" if action.phase is Phase.DONE else action.cause.value,
                                                 (self.now - node.started_at) / NS_PER_MS))
            if node.pending:
                node.pending.popleft()
            if node.saturated:
                node.pending.append((self._message(node_id), node.dest))
        elif state.addressed and action.phase is Phase.FAILED:
            truth = self._truth.pop((state.peer, node_id), np.full(3, np.nan))
            self.pings.append(Ping(self.now / 1e9, state.peer, node_id, None, truth, action.cause.value))
        self._step(node_id, Event(EventKind.RESET))
        if node.pending:
            cfg = node.cfg
            delay = cfg.turnaround + int(round(node.rng.uniform(0, cfg.contention_window)))
            self._schedule_attempt(node_id, self.now + delay)

    def _transmit(self, node_id: int, frame: Frame):
        cfg = self.nodes[node_id].cfg
        start, end = self.now, self.now + cfg.airtime(frame.frame_type)
        collided = any(s < end and start < e for s, e, _ in self._air if e > start)
        if collided:
            self.collisions += 1
        self._air = [x for x in self._air if x[1] > start] + [(start, end, node_id)]
        self.on_air_until = max(self.on_air_until, end)
        data = frame.to_bytes()
        if self.record_frames:
            self.frames.append((start / NS_PER_MS, node_id, data.hex()))
        self._push(end, node_id, "event", Event(EventKind.TX_DONE, frame_type=frame.frame_type))
        for other in self.nodes:
            if other == node_id:
                continue
            rx = data
            if collided or (self.frame_error_rate > 0 and self._channel_rng.random() < self.frame_error_rate):
                bit = int(self._channel_rng.integers(len(data) * 8))
                rx = bytearray(data)
                rx[bit // 8] ^= 1 << (bit % 8)
                rx = bytes(rx)
            self._push(end, other, "event", Event(EventKind.FRAME_RX, rx))

    def _link_rng(self, tx: int, rx: int) -> np.random.Generator:
        key = (tx, rx)
        if key not in self._link_rngs:
            self._link_rngs[key] = self.noise.rng("link", tx, rx)
        return self._link_rngs[key]

    def _measure(self, tx: int, rx: int):
        "Synthesize and estimate one observation of ``tx`` as seen by ``rx``."
        t_s = self.now / 1e9
        pose = self.agents[rx].pose_towards(self.agents[tx], t_s)
        self._truth[(tx, rx)] = pose.relative_position
        rng = self._link_rng(tx, rx)
        try:
            bearing = true_bearing(pose)
        except Exception:
            return Failure.RANK_DEFICIENT
        obs = RppObservation(phases=synth_phases(self.array, bearing, self.noise, rng),
                             twr=synth_twr(pose, self.noise, rng=rng), truth=pose)
        try:
            return estimate_relative(obs, self.array, self.calibration, self.estimator)
        except InsufficientGeometryError:
            return Failure.INSUFFICIENT_ROWS
        except (DegenerateGeometryError, AmbiguousBearingError):
            return Failure.RANK_DEFICIENT
        except RangingError:
            return Failure.RANGING

    # checks ---------------------------------------------------------------
    def overlapping_transactions(self) -> list[tuple[Transaction, Transaction]]:
        "Pairs of initiator transactions whose [start, end) intervals overlap."
        txs = sorted(self.transactions, key=lambda x: x.start)
        return [(a, b) for a, b in zip(txs, txs[1:]) if b.start < a.end]


# --------------------------------------------------------------------------
# Experiments on the network


class TrajectoryResult(NamedTuple):
    pings: list[Ping]
    network: RppNetwork


def run_trajectory_experiment(agents: Sequence[Agent] | None = None, observer_id: int = 3,
                              duration: float = 60.0, rpp_rate: float = 5.0,
                              node_cfg: NodeConfig = NodeConfig(), noise: NoiseModel = DEFAULT_NOISE,
                              estimator: EstimatorConfig = EstimatorConfig(),
                              calibration: CalibrationTable = ZERO_CALIBRATION,
                              array: AntennaArray | None = None, seed: int = 0, msg_len: int = 32,
                              record_frames: bool = False, frame_error_rate: float = 0.0) -> TrajectoryResult:
    """Every non-observer agent pings the observer at ``rpp_rate`` Hz.

    Returns the observer's per-ping estimates with ground truth.
    """
    agents = list(agents) if agents is not None else default_agents()
    senders = [a.id for a in agents if a.id != observer_id]
    if observer_id not in {a.id for a in agents}:
        raise InvalidParameterError(f"no agent with id {observer_id}")
    if rpp_rate <= 0 or rpp_rate * len(senders) > CHANNEL_CAPACITY + 1e-9:
        raise InvalidParameterError(
            f"rpp_rate * {len(senders)} senders exceeds channel capacity of {CHANNEL_CAPACITY}/s")
    net = RppNetwork(agents, node_cfg, array, noise, estimator, calibration, seed,
                     frame_error_rate=frame_error_rate, record_frames=record_frames)
    until = duration * 1000.0
    for sid in senders:
        net.periodic(sid, observer_id, rpp_rate, until, msg_len)
    net.run(until)
    pings = [p for p in net.pings if p.receiver == observer_id]
    return TrajectoryResult(pings, net)


class ThroughputResult(NamedTuple):
    total_rate: float
    per_agent_rates: dict[int, float]
    per_agent_rate: float
    duration: float
    transactions: int
    min_duration_ms: float
    overlaps: int


def measure_throughput(n_agents: int = 2, msg_len: int = 120, duration: float = 60.0,
                       node_cfg: NodeConfig = NodeConfig(), seed: int = 0,
                       noise: NoiseModel = DEFAULT_NOISE, frame_error_rate: float = 0.0) -> ThroughputResult:
    """Completed transactions per second with n_agents - 1 saturated senders
    all addressing one observer."""
    if n_agents < 2:
        raise InvalidParameterError("need at least 2 agents")
    agents = [Agent(k, Static((float(k), 0.0, 0.0))) for k in range(1, n_agents + 1)]
    observer = n_agents
    net = RppNetwork(agents, node_cfg, noise=noise, seed=seed, frame_error_rate=frame_error_rate)
    for k in range(1, n_agents):
        net.saturate(k, observer, msg_len)
    net.run(duration * 1000.0)
    done = [t for t in net.transactions if t.outcome == "done"]
    per_agent = {k: sum(1 for t in done if t.initiator == k) / duration for k in range(1, n_agents)}
    durations = [t.duration for t in done]
    return ThroughputResult(len(done) / duration, per_agent, float(np.mean(list(per_agent.values()))),
                            duration, len(done), min(durations) if durations else float("nan"),
                            len(net.overlapping_transactions()))


def single_exchange(msg_len: int = 32, node_cfg: NodeConfig = NodeConfig(), seed: int = 0,
                    noise: NoiseModel = DEFAULT_NOISE) -> RppNetwork:
    "One uncontended RPP from agent 1 to agent 2, with every frame recorded."
    agents = [Agent(1, Static((2.0, 0.0, 1.0))), Agent(2, Static((0.0, 0.0, 0.0)))]
    net = RppNetwork(agents, node_cfg, noise=noise, seed=seed, record_frames=True)
    net.periodic(1, 2, 1.0, 1.0, msg_len, offset_ms=0.0)
    net.run(rpp_duration(msg_len, node_cfg) + node_cfg.timeout + 1.0)
    return net


class CalibrationRun(NamedTuple):
    table: CalibrationTable
    bearings: np.ndarray
    phases: np.ndarray


def run_calibration_experiment(array: AntennaArray | None = None, noise: NoiseModel = DEFAULT_NOISE,
                               n_samples: int = 500, max_elevation_deg: float = 60.0,
                               wavelength: float | None = None) -> CalibrationRun:
    """Collect phases at random known bearings and fit the pair bias table.

    Azimuth is uniform over the full circle and elevation uniform within
    +-max_elevation_deg, which keeps most pairs away from endfire.
    """
    from .estimator import calibrate_bias

    array = array if array is not None else build_rta()
    rng = noise.rng("calibrate")
    az = rng.uniform(-np.pi, np.pi, n_samples)
    el = np.deg2rad(rng.uniform(-max_elevation_deg, max_elevation_deg, n_samples))
    bearings = direction(az, el)
    phases = synth_phases(array, bearings, noise, rng, wavelength)
    return CalibrationRun(calibrate_bias((bearings, phases), array, wavelength), bearings, phases)


# --------------------------------------------------------------------------
# Filtering


def lowpass_filter(times: Sequence[float], series, cutoff: float) -> np.ndarray:
    """First-order low-pass (exponential smoothing) with cutoff in Hz.

    The smoothing factor for a step of dt seconds is 1 - exp(-2 pi cutoff dt),
    which matches a continuous RC filter sampled at irregular times.
    """
    if not cutoff > 0:
        raise InvalidParameterError("cutoff must be positive")
    t = np.asarray(times, dtype=float)
    x = np.asarray(series, dtype=float)
    if x.shape[0] != t.shape[0]:
        raise InvalidSeriesError("times and series lengths differ")
    if t.size == 0:
        return x.copy()
    dt = np.diff(t)
    if np.any(dt < 0):
        raise InvalidSeriesError("timestamps must be non-decreasing")
    alpha = 1.0 - np.exp(-2 * np.pi * cutoff * dt)
    y = np.empty_like(x)
    y[0] = x[0]
    for k in range(1, len(x)):
        y[k] = y[k - 1] + alpha[k - 1] * (x[k] - y[k - 1])
    return y
