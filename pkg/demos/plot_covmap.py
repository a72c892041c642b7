"""
Plotting a covariance map
=========================

Reads the ``covmap.csv`` written by ``tetraloc covmap`` and draws, for one
range ring, the mean bearing error over pan and tilt next to log10 of the
scalar covariance. Needs matplotlib.

Run::

    tetraloc covmap --out out
    python demos/plot_covmap.py out/covmap.csv 3.5 covmap.png
"""

import csv
import sys

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "out/covmap.csv"
ring = float(sys.argv[2]) if len(sys.argv) > 2 else 3.5
out = sys.argv[3] if len(sys.argv) > 3 else "covmap.png"

with open(path) as fh:
    rows = [r for r in csv.DictReader(fh) if abs(float(r["range_m"]) - ring) < 1e-6]
if not rows:
    sys.exit(f"no cells at range {ring} m in {path}")

pans = sorted({float(r["pan_deg"]) for r in rows})
tilts = sorted({float(r["tilt_deg"]) for r in rows})
err = np.full((len(tilts), len(pans)), np.nan)
cov = np.full_like(err, np.nan)
for r in rows:
    i, k = tilts.index(float(r["tilt_deg"])), pans.index(float(r["pan_deg"]))
    err[i, k] = float(r["mean_bearing_err_deg"])
    cov[i, k] = np.log10(max(float(r["cov_scalar"]), 1e-30))

fig, axes = plt.subplots(1, 2, figsize=(12, 4.5))
extent = (pans[0], pans[-1], tilts[0], tilts[-1])
for ax, data, title in ((axes[0], err, "mean bearing error (deg)"), (axes[1], cov, "log10 cov scalar")):
    im = ax.imshow(data, origin="lower", extent=extent, aspect="auto", cmap="viridis")
    ax.set_xlabel("pan (deg)")
    ax.set_ylabel("tilt (deg)")
    ax.set_title(f"{title}, range {ring} m")
    fig.colorbar(im, ax=ax)
fig.tight_layout()
fig.savefig(out, dpi=120)
print(f"wrote {out}")
