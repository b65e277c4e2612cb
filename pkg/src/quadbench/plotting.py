"""Figures from result CSVs: latency curves, gain heatmaps, learning curves
and trajectory overlays. The CSV kind is detected from its header."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .bench import RESULT_HEADER
from .policy import CURVE_HEADER
from .trajgen import CSV_HEADER


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def detect_kind(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header == RESULT_HEADER:
        rows = _rows(path)
        if len({(r["scale_p"], r["scale_d"]) for r in rows}) > 1:
            return "gains"
        return "latency"
    if header == CURVE_HEADER:
        return "curve"
    if header == CSV_HEADER.split(","):
        return "trajectory"
    if header[:2] == ["t", "x0"]:
        return "episode"
    raise ValueError(f"{path}: unrecognized CSV header")


def _errors(rows):
    return np.array([np.inf if r["crashed"] == "1" else float(r["avg_error_cm"]) for r in rows])


def plot_csv(path, out):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kind = detect_kind(path)
    fig = plt.figure(figsize=(6, 4.5))
    if kind == "latency":
        ax = fig.add_subplot()
        rows = _rows(path)
        for ctrl in sorted({r["controller"] for r in rows}):
            sel = [r for r in rows if r["controller"] == ctrl]
            lat = np.array([float(r["latency_ms"]) for r in sel])
            err = _errors(sel)
            order = np.argsort(lat, kind="stable")
            ok = np.isfinite(err[order])
            ax.plot(lat[order][ok], err[order][ok], "o-", label=ctrl)
            crash = lat[order][~ok]
            if len(crash):
                ax.plot(crash, np.full(len(crash), np.nanmax(np.r_[err[np.isfinite(err)], 1.0])), "x",
                        color="red")
        ax.set_xlabel("latency [ms]")
        ax.set_ylabel("avg. position error [cm]")
        if np.any(_errors(rows) > 0):
            ax.set_yscale("log")
        ax.legend()
    elif kind == "gains":
        ax = fig.add_subplot()
        rows = _rows(path)
        ps = sorted({float(r["scale_p"]) for r in rows})
        ds = sorted({float(r["scale_d"]) for r in rows})
        grid = np.full((len(ps), len(ds)), np.nan)
        for r in rows:
            grid[ps.index(float(r["scale_p"])), ds.index(float(r["scale_d"]))] = float(r["clipped_error_cm"]) / 100
        im = ax.imshow(grid, origin="lower", cmap="viridis", vmin=0.0, vmax=5.0)
        ax.set_xticks(range(len(ds)), [f"{d:g}" for d in ds], rotation=60)
        ax.set_yticks(range(len(ps)), [f"{p:g}" for p in ps])
        ax.set_xlabel("D scale")
        ax.set_ylabel("P scale")
        fig.colorbar(im, label="avg. position error [m] (clipped at 5)")
    elif kind == "curve":
        ax = fig.add_subplot()
        rows = _rows(path)
        steps = np.array([float(r["env_steps"]) for r in rows])
        ax.plot(steps, [float(r["mean_pos_error_cm"]) for r in rows])
        ax.set_xlabel("environment steps")
        ax.set_ylabel("mean position error [cm]")
    else:
        ax = fig.add_subplot(projection="3d")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if kind == "trajectory":
            ax.plot(data[:, 1], data[:, 2], data[:, 3], label="reference")
        else:
            ax.plot(data[:, 18], data[:, 19], data[:, 20], "--", label="reference")
            ax.plot(data[:, 1], data[:, 2], data[:, 3], label="flown")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_zlabel("z [m]")
        ax.legend()
    fig.tight_layout()
    out = Path(out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
