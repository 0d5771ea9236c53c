"""Matplotlib renderings of topologies, spectra and load trajectories."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.spatial import QhullError, Voronoi, voronoi_plot_2d  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_topology(ax, topology, assignment=None):
    pts = topology.positions
    if topology.n >= 4:
        try:
            voronoi_plot_2d(Voronoi(pts), ax=ax, show_points=False, show_vertices=False,
                            line_colors="0.75", line_width=0.6)
        except QhullError:
            pass
    for i, j in topology.sorted_edges():
        ax.plot(pts[[i, j], 0], pts[[i, j], 1], color="k", lw=0.6, zorder=1)
    sleepy = np.zeros(topology.n, dtype=bool)
    if assignment is not None:
        sleepy[assignment.sleep_capable_cells()] = True
    ax.scatter(pts[~sleepy, 0], pts[~sleepy, 1], s=18, c="tab:blue", zorder=2, label="active")
    if sleepy.any():
        ax.scatter(pts[sleepy, 0], pts[sleepy, 1], s=50, c="tab:orange", marker="*", zorder=2, label="sleep-capable")
        ax.legend(loc="upper right")
    w, h = topology.region
    ax.set_xlim(0, w)
    ax.set_ylim(0, h)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    return ax


def plot_spectrum(ax, eigenvalues, bins: int = 20):
    ax.hist(eigenvalues, bins=bins, color="tab:blue", edgecolor="k", lw=0.4)
    ax.set_xlabel(r"Laplacian eigenvalue $\lambda$")
    ax.set_ylabel("count")
    return ax


def plot_trajectory(ax, trajectory, gamma: float | None = None):
    ax.plot(trajectory.times, trajectory.states, lw=0.8)
    ax.axhline(1.0, color="k", ls="--", lw=0.6)
    if gamma is not None:
        ax.axhline(gamma, color="tab:red", ls=":", lw=0.8, label=r"sleep threshold $\gamma$")
        ax.legend(loc="lower right")
    ax.set_xlabel("t")
    ax.set_ylabel("load $l_i$")
    return ax


def render_report(out_dir, topology, assignment, eigenvalues, trajectory) -> list[Path]:
    """Write topology.png, spectrum.png and trajectory.png into ``out_dir``."""
    out = Path(out_dir)
    gammas = [p.mode.gamma for p in assignment.local if p.mode.sleep_capable]
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        plot_topology(ax, topology, assignment)
        paths.append(_save(fig, out / "topology.png"))
        fig, ax = plt.subplots(figsize=(4, 3))
        plot_spectrum(ax, eigenvalues)
        paths.append(_save(fig, out / "spectrum.png"))
        fig, ax = plt.subplots(figsize=(5, 3))
        plot_trajectory(ax, trajectory, max(gammas) if gammas else None)
        paths.append(_save(fig, out / "trajectory.png"))
    return paths
