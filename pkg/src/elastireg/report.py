"""Figure and artifact rendering for the command-line drivers.

Every report goes to files: delimited data next to PNG figures rendered with
the non-interactive matplotlib backend.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import Domain2, GridDeformation, MeshDeformation, Monotone1DMap
from .imagery import GridImage, Signal1D

__all__ = [
    "save_deformation_figure",
    "save_convergence_figure",
    "save_morph_figures",
    "save_map1d_figure",
    "save_image_figure",
    "write_json",
]


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _plot_domain(ax, domain: Domain2, **kw):
    v = np.vstack([domain.vertices, domain.vertices[:1]])
    ax.plot(v[:, 0], v[:, 1], **kw)


def save_deformation_figure(path, deformation: MeshDeformation,
                            title: str = "deformed mesh"):
    """Reference mesh beside the deformed mesh over the target outline."""
    mesh = deformation.mesh
    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    for ax, pos, dom, name in (
            (axes[0], mesh.nodes, mesh.domain, "reference"),
            (axes[1], deformation.positions, deformation.target, "deformed")):
        ax.triplot(pos[:, 0], pos[:, 1], mesh.triangles, lw=0.4, color="tab:blue")
        _plot_domain(ax, dom, color="black", lw=1.2)
        ax.set_aspect("equal")
        ax.set_title(name)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_grid_deformation_figure(path, gdef: GridDeformation,
                                 title: str = "deformed grid"):
    fig, ax = plt.subplots(figsize=(6, 6))
    p = gdef.positions
    for i in range(p.shape[0]):
        ax.plot(p[i, :, 0], p[i, :, 1], lw=0.5, color="tab:blue")
    for j in range(p.shape[1]):
        ax.plot(p[:, j, 0], p[:, j, 1], lw=0.5, color="tab:blue")
    _plot_domain(ax, gdef.target, color="black", lw=1.2)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_convergence_figure(path, trajectory, title: str = "energy trajectory"):
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.asarray(trajectory, dtype=float)
    ax.plot(np.arange(len(t)), t, lw=1.0)
    floor = t.min()
    if np.all(t - floor > 0) or np.any(t - floor > 0):
        ax.set_yscale("symlog", linthresh=max(1e-12, abs(floor) * 1e-9 + 1e-12))
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_image_figure(path, img: GridImage, title: str = "intensity"):
    fig, ax = plt.subplots(figsize=(5, 5))
    xmin, ymin, xmax, ymax = img.domain.bounding_box
    ax.imshow(img.samples[:, :, 0].T, origin="lower", cmap="gray",
              vmin=0, vmax=1, extent=(xmin, xmax, ymin, ymax))
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_morph_figures(outdir, frames, title: str = "morph"):
    """One PNG per intensity frame, plus a filmstrip overview."""
    outdir = Path(outdir)
    n = len(frames)
    for i, frame in enumerate(frames):
        save_image_figure(outdir / f"frame_{i:03d}.png", frame,
                          f"{title} frame {i}/{n - 1}")
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    if n == 1:
        axes = [axes]
    for i, (ax, frame) in enumerate(zip(axes, frames)):
        ax.imshow(frame.samples[:, :, 0].T, origin="lower", cmap="gray",
                  vmin=0, vmax=1)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(str(i), fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(outdir) / "filmstrip.png", dpi=130)
    plt.close(fig)


def save_map1d_figure(path, y: Monotone1DMap, c1: Signal1D, c2: Signal1D,
                      title: str = "one-dimensional map"):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(y.grid, y.values, lw=1.2)
    axes[0].plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    axes[0].set_title(title)
    axes[0].set_xlabel("x")
    axes[0].set_ylabel("y(x)")
    x = np.linspace(0, 1, 2049)
    axes[1].plot(x, c1(x), lw=1.0, label="source signal")
    axes[1].plot(x, c2(y(x)), lw=1.0, label="target pulled back")
    axes[1].legend()
    axes[1].set_xlabel("x")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
