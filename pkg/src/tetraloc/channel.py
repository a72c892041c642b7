"""Forward signal model: phases of arrival, first-path I/Q samples and
double-sided two-way-ranging timestamps for a known relative geometry.

Far-field, line-of-sight only. Phase noise is applied in the phase domain
with a standard deviation that grows with the largest incidence magnitude
over the six antenna pairs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegeneratePoseError, InvalidParameterError
from .geometry import (
    PAIR_DIFFERENCE,
    SPEED_OF_LIGHT,
    AntennaArray,
    baseline_matrix,
    carrier_wavelength,
)

TICK_S = 15.65e-12
"DW1000 timestamp resolution (1 / (128 * 499.2 MHz)), seconds."

DEFAULT_REPLY_DELAYS = (400e-6, 400e-6)


def wrap(angle):
    "Wrap angles into [-pi, pi)."
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def stream_key(*parts) -> tuple[int, ...]:
    """Turn names and integers into a spawn key for ``np.random.SeedSequence``.

    Strings are hashed with CRC-32 so keys are stable across processes.
    """
    key = []
    for p in parts:
        if isinstance(p, str):
            key.append(zlib.crc32(p.encode()))
        else:
            key.append(int(p))
    return tuple(key)


def rotation_about(axis: str, angle: float) -> np.ndarray:
    "Active right-handed rotation matrix about a coordinate axis."
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    raise InvalidParameterError(f"unknown axis {axis!r}")


@dataclass(frozen=True)
class TruePose:
    """Ground-truth positions of transmitter i and receiver j.

    ``rotation`` maps world-frame vectors into receiver j's body frame.
    """

    p_i: np.ndarray
    p_j: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        for name in ("p_i", "p_j", "rotation"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        R = self.rotation
        if R.shape != (3, 3):
            raise InvalidParameterError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise InvalidParameterError("rotation must be orthonormal with det +1")

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.p_i - self.p_j))

    @property
    def relative_position(self) -> np.ndarray:
        "q_ij: transmitter position in the receiver body frame."
        return self.rotation @ (self.p_i - self.p_j)


def true_bearing(pose: TruePose) -> np.ndarray:
    "Unit vector towards the transmitter, expressed in the receiver body frame."
    q = pose.relative_position
    n = np.linalg.norm(q)
    if n == 0:
        raise DegeneratePoseError("transmitter and receiver coincide")
    return q / n


@dataclass(frozen=True)
class NoiseModel:
    """Noise, bias and clock parameters for the forward model.

    ``bias_true`` holds the six per-pair compensation terms a perfect
    calibration should recover: the raw pair difference is the ideal one
    minus ``bias_true``. Offsets are physically per-antenna, so the six values
    must be differences of four antenna offsets (see ``from_antenna_offsets``).
    ``sfd_true`` is the per-antenna SFD angle reported alongside each I/Q sample.
    """

    phase_sigma0: float = 0.0
    phase_sigma_slope: float = 0.0
    range_sigma: float = 0.0
    clock_drift_ppm: float = 0.0
    bias_true: tuple[float, ...] = (0.0,) * 6
    sfd_true: tuple[float, ...] = (0.0,) * 4
    seed: int = 0
    bias_lookup: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("phase_sigma0", "phase_sigma_slope", "range_sigma", "clock_drift_ppm"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be >= 0, got {v}")
        bias = tuple(float(b) for b in self.bias_true)
        sfd = tuple(float(b) for b in self.sfd_true)
        if len(bias) != 6 or len(sfd) != 4:
            raise InvalidParameterError("bias_true needs 6 values and sfd_true 4")
        object.__setattr__(self, "bias_true", bias)
        object.__setattr__(self, "sfd_true", sfd)
        offsets = self.antenna_offsets()
        if np.max(np.abs(PAIR_DIFFERENCE @ offsets + np.array(bias))) > 1e-9:
            raise InvalidParameterError(
                "bias_true is not realisable as per-antenna offsets "
                "(values must satisfy b21 + b32 + b13 = 0 etc.)"
            )

    @classmethod
    def from_antenna_offsets(cls, offsets: Sequence[float], **kwargs) -> "NoiseModel":
        "Build a model whose pair biases come from per-antenna phase offsets."
        bias = -(PAIR_DIFFERENCE @ np.asarray(offsets, dtype=float))
        return cls(bias_true=tuple(bias), **kwargs)

    def antenna_offsets(self) -> np.ndarray:
        "Zero-mean per-antenna offsets c with c_n - c_o = -bias_true for each pair."
        c, *_ = np.linalg.lstsq(PAIR_DIFFERENCE, -np.array(self.bias_true), rcond=None)
        return c - c.mean()

    @property
    def noiseless(self) -> bool:
        return self.phase_sigma0 == 0 and self.phase_sigma_slope == 0 and self.range_sigma == 0

    def rng(self, *key) -> np.random.Generator:
        "Independent generator for a named sub-stream of this model's seed."
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=stream_key(*key)))


@dataclass(frozen=True)
class IQSample:
    i_component: float
    q_component: float
    first_path_time: float = 0.0

    @property
    def amplitude(self) -> float:
        return float(np.hypot(self.i_component, self.q_component))


@dataclass(frozen=True)
class TwrTimestamps:
    """Double-sided TWR timestamps in device ticks.

    poll_tx, resp_rx and final_tx are read on the initiator's clock; poll_rx,
    resp_tx and final_rx on the responder's.
    """

    t_poll_tx: int
    t_poll_rx: int
    t_resp_tx: int
    t_resp_rx: int
    t_final_tx: int
    t_final_rx: int
    tick_s: float = TICK_S

    @property
    def intervals(self) -> tuple[int, int, int, int]:
        "(round1, reply1, round2, reply2) in ticks."
        return (
            self.t_resp_rx - self.t_poll_tx,
            self.t_resp_tx - self.t_poll_rx,
            self.t_final_rx - self.t_resp_tx,
            self.t_final_tx - self.t_resp_rx,
        )


@dataclass(frozen=True)
class RppObservation:
    """Raw measurements from one completed transaction.

    Exactly one of ``phases`` (4 corrected phases of arrival) or ``iq``
    (4 first-path samples plus the reported SFD angles ``sfd``) is set.
    ``truth`` is for evaluation only and is never read by the estimator.
    """

    phases: Optional[np.ndarray] = None
    iq: Optional[tuple[IQSample, ...]] = None
    sfd: Optional[np.ndarray] = None
    twr: Optional[TwrTimestamps] = None
    truth: Optional[TruePose] = field(default=None, compare=False)

    def __post_init__(self):
        if (self.phases is None) == (self.iq is None):
            raise InvalidParameterError("provide either phases or iq samples")
        if self.phases is not None:
            ph = np.asarray(self.phases, dtype=float)
            if ph.shape != (4,) or not np.all(np.isfinite(ph)):
                raise InvalidParameterError("phases must be 4 finite values")
            object.__setattr__(self, "phases", ph)
        else:
            if len(self.iq) != 4:
                raise InvalidParameterError("need 4 I/Q samples")
            sfd = np.zeros(4) if self.sfd is None else np.asarray(self.sfd, dtype=float)
            object.__setattr__(self, "sfd", sfd)


def phase_scale(array: AntennaArray, wavelength: float | None = None) -> np.ndarray:
    "Radians of pair phase difference per unit of (row . bearing), per pair."
    lam = carrier_wavelength() if wavelength is None else wavelength
    return 2 * np.pi * array.baseline_lengths / lam


def synth_phases(
    array: AntennaArray,
    bearing,
    noise: NoiseModel,
    rng: np.random.Generator | None = None,
    wavelength: float | None = None,
) -> np.ndarray:
    """Phases of arrival at the four antennas for a far-field source.

    ``bearing`` may be a single unit vector or an (..., 3) batch; the result
    has shape (..., 4). The phase at antenna n leads by (2 pi / lambda) a_n . u,
    so that a noiseless pair difference equals 0.95 pi (row . u) on an array
    spaced at 0.95 lambda / 2.
    """
    lam = carrier_wavelength() if wavelength is None else wavelength
    u = np.asarray(bearing, dtype=float)
    if not np.allclose(np.linalg.norm(u, axis=-1), 1.0, atol=1e-9):
        raise InvalidParameterError("bearing must be unit norm")
    if rng is None:
        rng = noise.rng("phases")
    batch = u.shape[:-1]

    phases = (2 * np.pi / lam) * (u @ array.positions.T)
    phases = phases + noise.antenna_offsets()
    if noise.bias_lookup is not None:
        phases = phases + np.asarray(noise.bias_lookup(u))
    # Absolute carrier phase is arbitrary; only differences carry information.
    phases = phases + rng.uniform(-np.pi, np.pi, size=batch + (1,))

    if noise.phase_sigma0 > 0 or noise.phase_sigma_slope > 0:
        rows = baseline_matrix(array).rows
        steepest = np.max(np.abs(np.arcsin(np.clip(u @ rows.T, -1.0, 1.0))), axis=-1)
        sigma = noise.phase_sigma0 + noise.phase_sigma_slope * steepest
        phases = phases + rng.standard_normal(batch + (4,)) * np.asarray(sigma)[..., None]
    return wrap(phases)


def iq_from_phase(phase: float, amplitude: float = 1.0, beta: float = 0.0,
                  first_path_time: float = 0.0) -> IQSample:
    "First-path I/Q sample whose angle, minus the SFD angle ``beta``, is ``phase``."
    if not amplitude > 0:
        raise InvalidParameterError("amplitude must be positive")
    return IQSample(amplitude * np.cos(phase + beta), amplitude * np.sin(phase + beta), first_path_time)


def synth_iq(array: AntennaArray, bearing, noise: NoiseModel, rng: np.random.Generator | None = None,
             amplitude: float = 1.0, wavelength: float | None = None) -> tuple[tuple[IQSample, ...], np.ndarray]:
    "I/Q samples for a single bearing plus the SFD angles the receivers report."
    phases = synth_phases(array, bearing, noise, rng, wavelength)
    sfd = np.array(noise.sfd_true)
    samples = tuple(iq_from_phase(p, amplitude, b) for p, b in zip(phases, sfd))
    return samples, sfd


def rx_jitter_sigma(range_sigma: float) -> float:
    """Per-reception timestamp jitter giving a DS-TWR range std of ``range_sigma``.

    With delayed transmissions scheduled from measured receptions, the
    time-of-flight error is (e_poll + 2 e_resp + e_final) / 4, whose standard
    deviation is sigma * sqrt(6) / 4.
    """
    return 4.0 / np.sqrt(6.0) * range_sigma / SPEED_OF_LIGHT


def synth_twr(
    pose_or_distance,
    noise: NoiseModel,
    reply_delays: tuple[float, float] = DEFAULT_REPLY_DELAYS,
    rng: np.random.Generator | None = None,
    drift_ppm: tuple[float, float] | None = None,
    tick_s: float = TICK_S,
) -> TwrTimestamps:
    """Timestamps for a poll / response / final exchange.

    Both clocks start aligned at true time zero; each runs fast by its drift
    (drawn uniformly from +-clock_drift_ppm unless ``drift_ppm`` is given).
    Reply delays are programmed in each device's own clock relative to its
    measured reception time.
    """
    if isinstance(pose_or_distance, TruePose):
        distance = pose_or_distance.distance
    else:
        distance = float(pose_or_distance)
    if distance < 0:
        raise InvalidParameterError("distance must be >= 0")
    reply1, reply2 = reply_delays
    if not (reply1 > 0 and reply2 > 0):
        raise InvalidParameterError("reply delays must be positive")
    if rng is None:
        rng = noise.rng("twr")

    if drift_ppm is None:
        e_i, e_j = rng.uniform(-noise.clock_drift_ppm, noise.clock_drift_ppm, size=2) * 1e-6
    else:
        e_i, e_j = drift_ppm[0] * 1e-6, drift_ppm[1] * 1e-6
    jitter = rx_jitter_sigma(noise.range_sigma)
    eps = rng.standard_normal(3) * jitter if jitter > 0 else np.zeros(3)

    tof = distance / SPEED_OF_LIGHT
    clock_i = lambda t: t * (1 + e_i)  # noqa: E731
    clock_j = lambda t: t * (1 + e_j)  # noqa: E731

    def ticks(device_seconds):
        return int(np.round(device_seconds / tick_s))

    t_poll_tx = 0.0
    poll_rx = ticks(clock_j(t_poll_tx + tof + eps[0]))
    resp_tx = poll_rx + ticks(reply1)
    t_resp_tx = resp_tx * tick_s / (1 + e_j)
    resp_rx = ticks(clock_i(t_resp_tx + tof + eps[1]))
    final_tx = resp_rx + ticks(reply2)
    t_final_tx = final_tx * tick_s / (1 + e_i)
    final_rx = ticks(clock_j(t_final_tx + tof + eps[2]))
    return TwrTimestamps(ticks(clock_i(t_poll_tx)), poll_rx, resp_tx, resp_rx, final_tx, final_rx, tick_s)
