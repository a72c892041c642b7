"""Four-element antenna array layouts and their baseline direction matrices.

Body-frame convention used throughout the package: the regular tetrahedron
has its base triangle (A1, A2, A3) in the x-z plane and its apex A4 on +y.
"Up" for elevation purposes is therefore +y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, InvalidParameterError

SPEED_OF_LIGHT = 299_792_458.0
"Speed of light in vacuum, m/s."

CHANNEL5_CENTER_HZ = 6489.6e6
"DW1000 channel 5 centre frequency."

SPACING_FACTOR = 0.95
"Antenna spacing as a fraction of half a carrier wavelength."

# 1-based antenna indices (n, o); row k of the direction matrix is a_n - a_o.
PAIR_ORDER: tuple[tuple[int, int], ...] = ((2, 1), (3, 2), (1, 3), (4, 1), (4, 2), (4, 3))

KINDS = ("rta", "orthogonal", "custom")


def carrier_wavelength(frequency_hz: float = CHANNEL5_CENTER_HZ) -> float:
    "Carrier wavelength in metres."
    return SPEED_OF_LIGHT / frequency_hz


def default_spacing(frequency_hz: float = CHANNEL5_CENTER_HZ) -> float:
    "Edge length 0.95 * lambda / 2, about 21.9 mm on channel 5."
    return SPACING_FACTOR * carrier_wavelength(frequency_hz) / 2.0


def _pair_index_arrays() -> tuple[np.ndarray, np.ndarray]:
    n = np.array([p[0] - 1 for p in PAIR_ORDER])
    o = np.array([p[1] - 1 for p in PAIR_ORDER])
    return n, o


PAIR_N, PAIR_O = _pair_index_arrays()

# 6x4 incidence matrix D so that D @ phases gives phi_n - phi_o per pair.
PAIR_DIFFERENCE = np.zeros((6, 4))
PAIR_DIFFERENCE[np.arange(6), PAIR_N] = 1.0
PAIR_DIFFERENCE[np.arange(6), PAIR_O] = -1.0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AntennaArray:
    """Positions of the four antennas in the receiver body frame (metres)."""

    positions: np.ndarray
    spacing: float
    kind: str = "custom"

    def __post_init__(self):
        pos = _frozen(self.positions)
        if pos.shape != (4, 3) or not np.all(np.isfinite(pos)):
            raise InvalidParameterError("positions must be a finite 4x3 array")
        if not self.spacing > 0:
            raise InvalidParameterError(f"spacing must be positive, got {self.spacing}")
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown array kind {self.kind!r}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "spacing", float(self.spacing))
        # Rejects coincident and coplanar layouts alike.
        baseline_matrix(self)

    @property
    def baselines(self) -> np.ndarray:
        "Unnormalised baseline vectors a_n - a_o, one row per pair."
        return self.positions[PAIR_N] - self.positions[PAIR_O]

    @property
    def baseline_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.baselines, axis=1)

    def rotated(self, rotation: np.ndarray) -> "AntennaArray":
        "Return the array with every position mapped by ``rotation``."
        return AntennaArray(self.positions @ np.asarray(rotation).T, self.spacing, self.kind)

    def translated(self, offset: Sequence[float]) -> "AntennaArray":
        return AntennaArray(self.positions + np.asarray(offset, dtype=float), self.spacing, self.kind)


@dataclass(frozen=True)
class DirectionMatrix:
    """Six unit baseline directions, ordered by ``pair_order``."""

    rows: np.ndarray
    pair_order: tuple[tuple[int, int], ...] = PAIR_ORDER
    lengths: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows))
        if self.lengths is not None:
            object.__setattr__(self, "lengths", _frozen(self.lengths))

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.rows, tol=1e-9))

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.rows, compute_uv=False)


def _check_spacing(spacing: float) -> float:
    if not np.isfinite(spacing) or spacing <= 0:
        raise InvalidParameterError(f"spacing must be positive, got {spacing}")
    return float(spacing)


def build_rta(spacing: float = default_spacing()) -> AntennaArray:
    """Regular tetrahedral array with edge length ``spacing``.

    A1..A3 form an equilateral base in the x-z plane; A4 (the antenna also
    used for transmission) sits at the apex on +y.
    """
    d = _check_spacing(spacing)
    positions = np.array(
        [
            [0.0, 0.0, 0.0],
            [d, 0.0, 0.0],
            [d / 2, 0.0, d * np.sqrt(3) / 2],
            [d / 2, d * np.sqrt(6) / 3, d * np.sqrt(3) / 6],
        ]
    )
    return AntennaArray(positions, d, "rta")


def build_orthogonal(spacing: float = default_spacing()) -> AntennaArray:
    "Reference antenna A1 at the origin plus one antenna along each body axis."
    d = _check_spacing(spacing)
    positions = np.array([[0.0, 0.0, 0.0], [d, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, d]])
    return AntennaArray(positions, d, "orthogonal")


def build_custom(positions: Sequence[Sequence[float]]) -> AntennaArray:
    """Arbitrary non-coplanar four-antenna layout.

    ``spacing`` is taken as the shortest pairwise distance.
    """
    pos = np.asarray(positions, dtype=float)
    if pos.shape != (4, 3):
        raise InvalidParameterError("custom arrays need exactly 4 xyz positions")
    lengths = np.linalg.norm(pos[PAIR_N] - pos[PAIR_O], axis=1)
    if np.any(lengths <= 0):
        raise DegenerateGeometryError("coincident antennas")
    return AntennaArray(pos, float(lengths.min()), "custom")


def baseline_matrix(array: AntennaArray) -> DirectionMatrix:
    """Unit baseline directions (a_n - a_o)/|a_n - a_o| for each pair."""
    b = array.positions[PAIR_N] - array.positions[PAIR_O]
    lengths = np.linalg.norm(b, axis=1)
    if np.any(lengths <= 1e-15 * max(array.spacing, 1.0)):
        raise DegenerateGeometryError("coincident antennas")
    rows = b / lengths[:, None]
    s = np.linalg.svd(rows, compute_uv=False)
    if s[-1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("antennas are coplanar; direction matrix has rank < 3")
    return DirectionMatrix(rows, PAIR_ORDER, lengths)


def paper_matrix() -> DirectionMatrix:
    """The six rows exactly as originally published for the tetrahedral array.

    Rows 4-6 are not consistent with rows 1-3 under any single placement of
    the antennas; use ``baseline_matrix(build_rta())`` for a self-consistent
    matrix. This one exists for side-by-side comparison.
    """
    r3, r6 = np.sqrt(3), np.sqrt(6)
    rows = np.array(
        [
            [1.0, 0.0, 0.0],
            [-0.5, 0.0, r3 / 2],
            [-0.5, 0.0, -r3 / 2],
            [0.5, r3 / 6, r6 / 3],
            [0.5, r3 / 6, -r6 / 3],
            [0.0, r6 / 3, 1 / r3],
        ]
    )
    return DirectionMatrix(rows, PAIR_ORDER, None)


def direction(azimuth: float | np.ndarray, elevation: float | np.ndarray) -> np.ndarray:
    """Unit vector for body-frame azimuth/elevation in radians.

    Elevation is measured from the x-z plane towards +y; azimuth is measured
    in the x-z plane from +x towards +z.
    """
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    return np.stack([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)], axis=-1)


def azimuth_elevation(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    "Inverse of :func:`direction` for (batches of) non-zero vectors."
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1)
    el = np.arcsin(np.clip(v[..., 1] / n, -1.0, 1.0))
    az = np.arctan2(v[..., 2], v[..., 0])
    return az, el
