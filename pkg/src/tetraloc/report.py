"""Tabular and JSON output for experiment results.

CSV files have a fixed column order and are written with a header even when
there are no rows. Floats use ``repr`` so a rerun with the same seed gives
byte-identical files. JSON is written with sorted keys; NaN becomes null.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sim import CovarianceMapCell, Ping, lowpass_filter

COVMAP_COLUMNS = (
    "range_idx", "pan_idx", "tilt_idx", "range_m", "pan_deg", "tilt_deg",
    "truth_x", "truth_y", "truth_z", "n_readings", "n_failures",
    "mean_err_x", "mean_err_y", "mean_err_z", "cov_e_x", "cov_e_y", "cov_e_z",
    "cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz", "cov_scalar",
    "mean_bearing_err_deg", "rms_azimuth_err_deg", "rms_elevation_err_deg",
    "range_rmse_m", "range_mean_err_m",
)

TRAJECTORY_COLUMNS = (
    "t_s", "source", "receiver", "ok", "failure", "range_m",
    "bearing_x", "bearing_y", "bearing_z", "est_x", "est_y", "est_z",
    "truth_x", "truth_y", "truth_z", "filt_x", "filt_y", "filt_z",
    "rows_used", "condition_number",
)

FRAME_COLUMNS = ("t_ms", "node", "frame_hex")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    return obj


def write_json(path: str | Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def covmap_rows(cells: Sequence[CovarianceMapCell]) -> list[dict]:
    rows = []
    for c in cells:
        s = c.cov_sigma
        rows.append({
            "range_idx": c.grid_index[0], "pan_idx": c.grid_index[1], "tilt_idx": c.grid_index[2],
            "range_m": c.range, "pan_deg": c.pan, "tilt_deg": c.tilt,
            **{f"truth_{a}": c.truth[k] for k, a in enumerate("xyz")},
            "n_readings": c.n_readings, "n_failures": c.n_failures,
            **{f"mean_err_{a}": c.mean_err[k] for k, a in enumerate("xyz")},
            **{f"cov_e_{a}": c.cov_e[k] for k, a in enumerate("xyz")},
            "cov_xx": s[0, 0], "cov_xy": s[0, 1], "cov_xz": s[0, 2],
            "cov_yy": s[1, 1], "cov_yz": s[1, 2], "cov_zz": s[2, 2],
            "cov_scalar": c.cov_scalar,
            "mean_bearing_err_deg": c.mean_bearing_err_deg,
            "rms_azimuth_err_deg": c.rms_azimuth_err_deg,
            "rms_elevation_err_deg": c.rms_elevation_err_deg,
            "range_rmse_m": c.range_rmse, "range_mean_err_m": c.range_mean_err,
        })
    return rows


def trajectory_rows(pings: Sequence[Ping], cutoff_hz: float) -> list[dict]:
    """One row per ping, with a per-source low-pass of the position estimate.

    Failed pings keep their row (``ok`` = 0, NaN estimates) and do not feed
    the filter.
    """
    nan3 = np.full(3, np.nan)
    filt: dict[int, np.ndarray] = {}
    for src in sorted({p.source for p in pings}):
        ok = [p for p in pings if p.source == src and p.estimate is not None]
        if ok:
            y = lowpass_filter([p.t for p in ok], np.array([p.estimate.position for p in ok]), cutoff_hz)
            for p, v in zip(ok, y):
                filt[id(p)] = v
    rows = []
    for p in pings:
        e = p.estimate
        bearing = e.bearing if e is not None else nan3
        pos = e.position if e is not None else nan3
        f = filt.get(id(p), nan3)
        rows.append({
            "t_s": p.t, "source": p.source, "receiver": p.receiver, "ok": e is not None,
            "failure": p.failure, "range_m": e.range if e is not None else float("nan"),
            **{f"bearing_{a}": bearing[k] for k, a in enumerate("xyz")},
            **{f"est_{a}": pos[k] for k, a in enumerate("xyz")},
            **{f"truth_{a}": p.truth[k] for k, a in enumerate("xyz")},
            **{f"filt_{a}": f[k] for k, a in enumerate("xyz")},
            "rows_used": e.rows_used if e is not None else 0,
            "condition_number": e.condition_number if e is not None else float("nan"),
        })
    return rows


def trajectory_summary(rows: Sequence[dict], duration: float) -> dict:
    "Per-source ping counts, rates and raw / filtered position RMSE."
    out = {}
    for src in sorted({r["source"] for r in rows}):
        mine = [r for r in rows if r["source"] == src]
        ok = [r for r in mine if r["ok"]]

        def rmse(prefix):
            if not ok:
                return float("nan")
            d = np.array([[r[f"{prefix}_{a}"] - r[f"truth_{a}"] for a in "xyz"] for r in ok])
            return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))

        out[str(src)] = {
            "pings": len(mine), "ok": len(ok), "failures": len(mine) - len(ok),
            "rate_hz": len(ok) / duration, "rmse_m": rmse("est"), "filtered_rmse_m": rmse("filt"),
        }
    return out


def frame_rows(frames: Sequence[tuple[float, int, str]]) -> list[dict]:
    return [{"t_ms": t, "node": n, "frame_hex": h} for t, n, h in frames]
