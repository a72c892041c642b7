"""Bearing and range estimation from one transaction's raw measurements.

Pipeline for the bearing: phase differences with bias compensation,
per-pair incidence angles, row rejection, a pseudo-inverse solve against the
baseline direction matrix and normalisation. Range comes from double-sided
two-way ranging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .channel import IQSample, RppObservation, TwrTimestamps, wrap
from .errors import (
    AmbiguousBearingError,
    CalibrationError,
    DegenerateGeometryError,
    InsufficientGeometryError,
    InvalidParameterError,
    NoFirstPathError,
    RangingError,
)
from .geometry import (
    PAIR_N,
    PAIR_O,
    PAIR_ORDER,
    SPACING_FACTOR,
    SPEED_OF_LIGHT,
    AntennaArray,
    DirectionMatrix,
    baseline_matrix,
    carrier_wavelength,
    paper_matrix,
)

DEFAULT_THRESHOLD = np.deg2rad(165.0)
MODES = ("paper", "exact")
MATRICES = ("canonical", "paper")
MAX_CONDITION = 1e8
PINV_RCOND = 1e-10


@dataclass(frozen=True)
class CalibrationTable:
    "Per-pair bias compensation terms (radians), ordered like ``PAIR_ORDER``."

    pair_biases: tuple[float, ...] = (0.0,) * 6
    residual_rms: float = 0.0

    def __post_init__(self):
        b = tuple(float(x) for x in self.pair_biases)
        if len(b) != 6 or not all(np.isfinite(b)):
            raise InvalidParameterError("need 6 finite pair biases")
        if not (np.isfinite(self.residual_rms) and self.residual_rms >= 0):
            raise InvalidParameterError("residual_rms must be finite and >= 0")
        object.__setattr__(self, "pair_biases", b)

    def to_text(self) -> str:
        lines = [f"pair_{n}_{o} = {b!r}" for (n, o), b in zip(PAIR_ORDER, self.pair_biases)]
        lines.append(f"residual_rms = {float(self.residual_rms)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CalibrationTable":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CalibrationError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                values[key] = float(val)
            except ValueError:
                raise CalibrationError(f"line {lineno}: {val!r} is not a number") from None
        keys = [f"pair_{n}_{o}" for n, o in PAIR_ORDER]
        missing = [k for k in keys if k not in values]
        if missing:
            raise CalibrationError(f"missing keys: {', '.join(missing)}")
        unknown = set(values) - set(keys) - {"residual_rms"}
        if unknown:
            raise CalibrationError(f"unknown keys: {', '.join(sorted(unknown))}")
        return cls(tuple(values[k] for k in keys), values.get("residual_rms", 0.0))


ZERO_CALIBRATION = CalibrationTable()


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs for the bearing estimator.

    mode: ``paper`` uses (1/0.95) asin(dphi / pi); ``exact`` inverts the
    plane-wave model, asin(dphi / (0.95 pi)).
    matrix: ``canonical`` derives the direction matrix from the array;
    ``paper`` uses the published rows verbatim.
    """

    mode: str = "paper"
    threshold: float = DEFAULT_THRESHOLD
    matrix: str = "canonical"
    wavelength: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {MODES}")
        if self.matrix not in MATRICES:
            raise InvalidParameterError(f"matrix must be one of {MATRICES}")
        if not 0 < self.threshold <= np.pi:
            raise InvalidParameterError("threshold must lie in (0, pi]")


@dataclass(frozen=True)
class PhaseDifferenceSet:
    values: np.ndarray
    bias_applied: np.ndarray


@dataclass(frozen=True)
class IncidenceAngleSet:
    values: np.ndarray
    valid_mask: np.ndarray
    clamped: np.ndarray = field(default=None)


@dataclass(frozen=True)
class RelativeEstimate:
    range: float
    bearing: np.ndarray
    position: np.ndarray
    rows_used: int = 6
    condition_number: float = float("nan")


class BearingSolution(NamedTuple):
    raw: np.ndarray
    condition_number: float
    rows_used: int
    residual: float


def phase_of_arrival(sample: IQSample, beta: float = 0.0) -> float:
    "Phase of the first-path I/Q sample corrected by the SFD angle, in [-pi, pi)."
    if sample.i_component == 0 and sample.q_component == 0:
        raise NoFirstPathError("first-path sample has zero amplitude")
    return float(wrap(np.arctan2(sample.q_component, sample.i_component) - beta))


def phase_differences(phases, calib: CalibrationTable = ZERO_CALIBRATION) -> PhaseDifferenceSet:
    """wrap(phi_n - phi_o + bias) for each pair; accepts (..., 4) batches."""
    ph = np.asarray(phases, dtype=float)
    if ph.shape[-1] != 4 or not np.all(np.isfinite(ph)):
        raise InvalidParameterError("expected 4 finite phases")
    bias = np.asarray(calib.pair_biases)
    return PhaseDifferenceSet(wrap(ph[..., PAIR_N] - ph[..., PAIR_O] + bias), bias)


def row_mask(values, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    "True where |dphi| <= threshold. Never raises."
    return np.abs(np.asarray(values)) <= threshold


def select_rows(diffs: PhaseDifferenceSet | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Keep pairs whose phase difference magnitude is within ``threshold``.

    Large differences correspond to near-endfire incidence, where phase
    noise is worst.
    """
    values = diffs.values if isinstance(diffs, PhaseDifferenceSet) else np.asarray(diffs)
    mask = row_mask(values, threshold)
    if np.any(mask.sum(axis=-1) < 3):
        raise InsufficientGeometryError(f"only {int(mask.sum(axis=-1).min())} rows below threshold")
    return mask


def incidence_angles(
    diffs: PhaseDifferenceSet | np.ndarray,
    mode: str = "paper",
    threshold: float = DEFAULT_THRESHOLD,
    factor=SPACING_FACTOR,
) -> IncidenceAngleSet:
    """Per-pair incidence angles from phase differences.

    ``factor`` is the pair spacing in units of half a wavelength (0.95 for the
    default array); it may be a scalar or one value per pair. Arguments to
    arcsin outside [-1, 1] are clamped and flagged.
    """
    values = diffs.values if isinstance(diffs, PhaseDifferenceSet) else np.asarray(diffs, dtype=float)
    f = np.asarray(factor, dtype=float)
    if mode == "paper":
        arg = values / np.pi
    elif mode == "exact":
        arg = values / (f * np.pi)
    else:
        raise InvalidParameterError(f"mode must be one of {MODES}")
    clamped = np.abs(arg) > 1.0
    s = np.arcsin(np.clip(arg, -1.0, 1.0))
    alpha = s / f if mode == "paper" else s
    return IncidenceAngleSet(alpha, row_mask(values, threshold), clamped)


def _pinv(rows: np.ndarray) -> tuple[np.ndarray, float]:
    u, s, vt = np.linalg.svd(rows, full_matrices=False)
    cond = s[0] / s[-1] if s[-1] > 0 else np.inf
    keep = s > PINV_RCOND * s[0]
    inv = (vt[keep].T / s[keep]) @ u[:, keep].T
    return inv, float(cond)


def solve_bearing(matrix: DirectionMatrix | np.ndarray, angles: IncidenceAngleSet,
                  mask: np.ndarray | None = None) -> BearingSolution:
    """Least-squares solve of A_valid u = sin(alpha_valid).

    Rows are those flagged valid in ``angles`` (further restricted by
    ``mask`` if given).
    """
    rows = matrix.rows if isinstance(matrix, DirectionMatrix) else np.asarray(matrix, dtype=float)
    valid = np.asarray(angles.valid_mask, dtype=bool)
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    if valid.sum() < 3:
        raise InsufficientGeometryError(f"only {int(valid.sum())} usable rows")
    sub = rows[valid]
    inv, cond = _pinv(sub)
    if cond > MAX_CONDITION:
        raise DegenerateGeometryError(f"selected rows are rank deficient (cond={cond:.3g})")
    rhs = np.sin(np.asarray(angles.values)[valid])
    raw = inv @ rhs
    residual = float(np.linalg.norm(sub @ raw - rhs))
    return BearingSolution(raw, cond, int(valid.sum()), residual)


def normalize(raw) -> np.ndarray:
    v = np.asarray(raw, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise AmbiguousBearingError("raw bearing is the zero vector")
    return v / n


def pair_factors(array: AntennaArray, wavelength: float | None = None) -> np.ndarray:
    "Baseline length of each pair in units of half a carrier wavelength."
    lam = carrier_wavelength() if wavelength is None else wavelength
    return 2.0 * array.baseline_lengths / lam


def _direction_rows(array: AntennaArray, config: EstimatorConfig) -> np.ndarray:
    if config.matrix == "paper":
        return paper_matrix().rows
    return baseline_matrix(array).rows


def observation_phases(obs: RppObservation) -> np.ndarray:
    "The four corrected phases of arrival, extracting them from I/Q if needed."
    if obs.phases is not None:
        return obs.phases
    return np.array([phase_of_arrival(s, b) for s, b in zip(obs.iq, obs.sfd)])


class AoaResult(NamedTuple):
    bearing: np.ndarray
    rows_used: int
    condition_number: float
    mask: np.ndarray


def estimate_aoa_detailed(phases, array: AntennaArray, calib: CalibrationTable = ZERO_CALIBRATION,
                          config: EstimatorConfig = EstimatorConfig()) -> AoaResult:
    diffs = phase_differences(phases, calib)
    factors = pair_factors(array, config.wavelength)
    angles = incidence_angles(diffs, config.mode, config.threshold, factors)
    # Pairs longer than half a wavelength alias; they never enter the solve.
    usable = factors <= 1.0 + 1e-12
    select_rows(np.where(usable, diffs.values, np.inf), config.threshold)
    sol = solve_bearing(_direction_rows(array, config), angles, usable)
    return AoaResult(normalize(sol.raw), sol.rows_used, sol.condition_number, angles.valid_mask & usable)


def estimate_aoa(obs: RppObservation | np.ndarray, array: AntennaArray,
                 calib: CalibrationTable = ZERO_CALIBRATION,
                 config: EstimatorConfig = EstimatorConfig()) -> np.ndarray:
    """Unit bearing of the transmitter in the receiver body frame.

    Raises InsufficientGeometryError, DegenerateGeometryError or
    AmbiguousBearingError when no bearing can be formed.
    """
    phases = observation_phases(obs) if isinstance(obs, RppObservation) else obs
    return estimate_aoa_detailed(phases, array, calib, config).bearing


class BatchResult(NamedTuple):
    bearings: np.ndarray      # (N, 3), NaN where failed
    ok: np.ndarray            # (N,) bool
    rows_used: np.ndarray     # (N,) int
    condition_number: np.ndarray
    failure: np.ndarray       # (N,) str, '' when ok


def estimate_aoa_batch(phases: np.ndarray, array: AntennaArray,
                       calib: CalibrationTable = ZERO_CALIBRATION,
                       config: EstimatorConfig = EstimatorConfig()) -> BatchResult:
    """Vectorised :func:`estimate_aoa` over an (N, 4) array of phases.

    Failures are reported per row instead of raised.
    """
    phases = np.atleast_2d(phases)
    n = phases.shape[0]
    diffs = phase_differences(phases, calib)
    factors = pair_factors(array, config.wavelength)
    angles = incidence_angles(diffs, config.mode, config.threshold, factors)
    masks = angles.valid_mask & (factors <= 1.0 + 1e-12)
    rows = _direction_rows(array, config)
    sines = np.sin(angles.values)

    bearings = np.full((n, 3), np.nan)
    ok = np.zeros(n, dtype=bool)
    rows_used = masks.sum(axis=1)
    cond = np.full(n, np.inf)
    failure = np.full(n, "", dtype=object)

    codes = masks @ (1 << np.arange(6))
    for code in np.unique(codes):
        idx = np.nonzero(codes == code)[0]
        m = masks[idx[0]]
        if m.sum() < 3:
            failure[idx] = "insufficient_rows"
            continue
        inv, c = _pinv(rows[m])
        cond[idx] = c
        if c > MAX_CONDITION:
            failure[idx] = "rank_deficient"
            continue
        raw = sines[idx][:, m] @ inv.T
        norms = np.linalg.norm(raw, axis=1)
        good = norms > 0
        bearings[idx[good]] = raw[good] / norms[good, None]
        ok[idx[good]] = True
        failure[idx[~good]] = "ambiguous_bearing"
    return BatchResult(bearings, ok, rows_used, cond, failure)


def twr_range(ts: TwrTimestamps) -> float:
    """Asymmetric double-sided TWR range in metres.

    tof = (round1 * round2 - reply1 * reply2) / (round1 + round2 + reply1 + reply2)
    """
    round1, reply1, round2, reply2 = ts.intervals
    if min(round1, reply1, round2, reply2) <= 0:
        raise RangingError("non-positive TWR interval")
    # Python ints keep the products exact.
    num = round1 * round2 - reply1 * reply2
    den = round1 + round2 + reply1 + reply2
    if num < 0:
        raise RangingError("negative time of flight")
    return SPEED_OF_LIGHT * (num / den) * ts.tick_s


def compose_estimate(range_m: float, bearing, rows_used: int = 6,
                     condition_number: float = float("nan")) -> RelativeEstimate:
    "Relative position = range * bearing."
    b = np.asarray(bearing, dtype=float)
    if range_m < 0:
        raise InvalidParameterError("range must be non-negative")
    return RelativeEstimate(float(range_m), b, float(range_m) * b, int(rows_used), float(condition_number))


def estimate_relative(obs: RppObservation, array: AntennaArray,
                      calib: CalibrationTable = ZERO_CALIBRATION,
                      config: EstimatorConfig = EstimatorConfig()) -> RelativeEstimate:
    "Bearing plus TWR range for one observation."
    if obs.twr is None:
        raise RangingError("observation carries no TWR timestamps")
    res = estimate_aoa_detailed(observation_phases(obs), array, calib, config)
    return compose_estimate(twr_range(obs.twr), res.bearing, res.rows_used, res.condition_number)


def _as_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) == 2:
        bearings, phases = samples
    else:
        samples = list(samples)
        if not samples:
            raise CalibrationError("no calibration samples")
        bearings = [s[0] for s in samples]
        phases = [s[1] for s in samples]
    return np.asarray(bearings, dtype=float), np.asarray(phases, dtype=float)


def calibrate_bias(samples: Iterable[tuple[Sequence[float], Sequence[float]]] | tuple[np.ndarray, np.ndarray],
                   array: AntennaArray, wavelength: float | None = None) -> CalibrationTable:
    """Estimate per-pair bias compensation from samples with known bearings.

    For each pair the bias is the circular mean of (expected - measured)
    phase difference, where the expectation comes from the array geometry.
    ``samples`` is an iterable of (true bearing, 4 phases) or a pair of
    (N, 3) / (N, 4) arrays.
    """
    bearings, phases = _as_samples(samples)
    if bearings.ndim != 2 or bearings.shape[1] != 3 or phases.shape != (len(bearings), 4):
        raise CalibrationError("expected (N, 3) bearings and (N, 4) phases")
    if len(bearings) < 2:
        raise CalibrationError("need at least 2 samples")
    if np.allclose(bearings, bearings[0], atol=1e-12):
        raise CalibrationError("need samples from at least 2 distinct bearings")
    lam = carrier_wavelength() if wavelength is None else wavelength
    expected = (2 * np.pi / lam) * (bearings @ array.baselines.T)
    measured = phases[:, PAIR_N] - phases[:, PAIR_O]
    delta = expected - measured
    bias = np.angle(np.mean(np.exp(1j * delta), axis=0))
    resid = wrap(delta - bias)
    return CalibrationTable(tuple(bias), float(np.sqrt(np.mean(resid**2))))
