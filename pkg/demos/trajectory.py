"""
Tracking two moving agents
==========================

Agent 1 drives a circle and agent 2 a slow arc while agent 3 sits at the
origin and estimates both from the pings it receives. The raw estimates are
noisy; a 0.5 Hz first-order low-pass takes most of the jitter out. Pass an
output path to save a top-down plot (needs matplotlib).

Run::

    python demos/trajectory.py [trajectory.png]
"""

import sys

import numpy as np

from tetraloc.report import trajectory_rows, trajectory_summary
from tetraloc.sim import run_trajectory_experiment

DURATION = 60.0

res = run_trajectory_experiment(duration=DURATION, rpp_rate=5.0, seed=1)
rows = trajectory_rows(res.pings, cutoff_hz=0.5)
for src, s in trajectory_summary(rows, DURATION).items():
    print(f"agent {src}: {s['ok']} fixes at {s['rate_hz']:.2f} Hz, "
          f"raw RMSE {s['rmse_m']:.3f} m, filtered {s['filtered_rmse_m']:.3f} m")

if len(sys.argv) > 1:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    for src, colour in ((1, "tab:blue"), (2, "tab:orange")):
        mine = [r for r in rows if r["source"] == src and r["ok"]]
        get = lambda p: np.array([[r[f"{p}_x"], r[f"{p}_z"]] for r in mine])
        ax.scatter(*get("est").T, s=4, alpha=0.3, color=colour)
        ax.plot(*get("filt").T, color=colour, label=f"agent {src} filtered")
        ax.plot(*get("truth").T, "k--", lw=0.8)
    ax.plot(0, 0, "k^", label="observer")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("z (m)")
    ax.set_aspect("equal")
    ax.legend()
    fig.savefig(sys.argv[1], dpi=120)
    print(f"wrote {sys.argv[1]}")
