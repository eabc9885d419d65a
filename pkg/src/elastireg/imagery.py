"""Images as intensity fields on rectangles, plus pull-backs and related pairs.

Intensities are only bounded measurable in the underlying model, so the
default interpolation is nearest (piecewise-constant); bilinear is offered
for smooth synthetic tests.  All values live in K = [0,1]^m and are clipped
on load.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .geometry import AffineMap, Domain2, GeometryError, MeshDeformation

__all__ = [
    "ImageError",
    "GridImage",
    "Signal1D",
    "make_related_pair",
    "pullback",
    "change_of_variables_check",
    "quadrature_points",
    "read_pgm",
    "write_pgm",
]


class ImageError(ValueError):
    pass


def _rect_params(domain: Domain2):
    xmin, ymin, xmax, ymax = domain.bounding_box
    if abs(domain.area - (xmax - xmin) * (ymax - ymin)) > 1e-9 * max(1.0, domain.area):
        raise ImageError("image domain must be an axis-aligned rectangle")
    return xmin, ymin, xmax, ymax


@dataclass
class GridImage:
    """Intensity samples on a regular lattice of cell centers over a rectangle."""

    domain: Domain2
    samples: np.ndarray  # (nx, ny, m), values in [0,1]
    interpolation: str = "nearest"  # or "bilinear"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 2:
            s = s[..., None]
        if s.ndim != 3:
            raise ImageError("samples must have shape (nx, ny) or (nx, ny, m)")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ImageError(f"unknown interpolation {self.interpolation!r}")
        self.samples = np.clip(s, 0.0, 1.0)
        _rect_params(self.domain)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.samples.shape[0], self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    @property
    def cell_size(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = _rect_params(self.domain)
        nx, ny = self.resolution
        return (xmax - xmin) / nx, (ymax - ymin) / ny

    @staticmethod
    def from_function(fn, domain: Domain2, nx: int, ny: int,
                      interpolation: str = "nearest") -> "GridImage":
        """Sample fn at the cell centers; fn maps (N,2) points to (N,) or (N,m)."""
        xmin, ymin, xmax, ymax = _rect_params(domain)
        xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
        ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = np.asarray(fn(pts), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return GridImage(domain, vals.reshape(nx, ny, -1), interpolation)

    @staticmethod
    def constant(value: float, domain: Domain2, nx: int = 8, ny: int = 8) -> "GridImage":
        return GridImage(domain, np.full((nx, ny, 1), float(value)))

    def cell_centers(self) -> np.ndarray:
        xmin, ymin, xmax, ymax = _rect_params(self.domain)
        nx, ny = self.resolution
        xs = xmin + (np.arange(nx) + 0.5) * (xmax - xmin) / nx
        ys = ymin + (np.arange(ny) + 0.5) * (ymax - ymin) / ny
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([X, Y], axis=-1)

    # -- sampling ----------------------------------------------------------

    def _normalized(self, points: np.ndarray, clamp_tol: float):
        xmin, ymin, xmax, ymax = _rect_params(self.domain)
        p = np.atleast_2d(np.asarray(points, dtype=float))
        margin = clamp_tol * max(xmax - xmin, ymax - ymin, 1.0)
        bad = ((p[:, 0] < xmin - margin) | (p[:, 0] > xmax + margin)
               | (p[:, 1] < ymin - margin) | (p[:, 1] > ymax + margin))
        if np.any(bad):
            k = int(np.nonzero(bad)[0][0])
            raise ImageError(f"sample point {p[k].tolist()} is outside the image domain")
        u = np.clip((p[:, 0] - xmin) / (xmax - xmin), 0.0, 1.0)
        v = np.clip((p[:, 1] - ymin) / (ymax - ymin), 0.0, 1.0)
        return u, v

    def sample(self, points: np.ndarray, clamp_tol: float = 1e-7) -> np.ndarray:
        """Intensity at each point; values within clamp_tol outside are clamped."""
        u, v = self._normalized(points, clamp_tol)
        nx, ny = self.resolution
        if self.interpolation == "nearest":
            ix = np.minimum((u * nx).astype(int), nx - 1)
            iy = np.minimum((v * ny).astype(int), ny - 1)
            out = self.samples[ix, iy]
        else:
            out = self._bilinear(u, v)[0]
        return np.clip(out, 0.0, 1.0)

    def sample_with_gradient(self, points: np.ndarray, clamp_tol: float = 1e-7):
        """(values, spatial gradients); gradients are zero for nearest sampling."""
        u, v = self._normalized(points, clamp_tol)
        if self.interpolation == "nearest":
            vals = self.sample(points, clamp_tol)
            return vals, np.zeros(vals.shape + (2,))
        vals, grads = self._bilinear(u, v)
        return np.clip(vals, 0.0, 1.0), grads

    def _bilinear(self, u, v):
        nx, ny = self.resolution
        xmin, ymin, xmax, ymax = _rect_params(self.domain)
        hx, hy = (xmax - xmin) / nx, (ymax - ymin) / ny
        # sample points sit at cell centers; clamp at the half-cell border
        fx = np.clip(u * nx - 0.5, 0.0, nx - 1.0)
        fy = np.clip(v * ny - 0.5, 0.0, ny - 1.0)
        ix = np.minimum(fx.astype(int), nx - 2) if nx > 1 else np.zeros_like(fx, int)
        iy = np.minimum(fy.astype(int), ny - 2) if ny > 1 else np.zeros_like(fy, int)
        tx = fx - ix if nx > 1 else np.zeros_like(fx)
        ty = fy - iy if ny > 1 else np.zeros_like(fy)
        ix1 = np.minimum(ix + 1, nx - 1)
        iy1 = np.minimum(iy + 1, ny - 1)
        c00 = self.samples[ix, iy]
        c10 = self.samples[ix1, iy]
        c01 = self.samples[ix, iy1]
        c11 = self.samples[ix1, iy1]
        wx, wy = tx[:, None], ty[:, None]
        vals = (c00 * (1 - wx) * (1 - wy) + c10 * wx * (1 - wy)
                + c01 * (1 - wx) * wy + c11 * wx * wy)
        ddx = ((c10 - c00) * (1 - wy) + (c11 - c01) * wy) / hx
        ddy = ((c01 - c00) * (1 - wx) + (c11 - c10) * wx) / hy
        grads = np.stack([ddx, ddy], axis=-1)
        return vals, grads

    def integral(self) -> np.ndarray:
        """Exact integral of the piecewise-constant interpretation, per channel."""
        hx, hy = self.cell_size
        return self.samples.sum(axis=(0, 1)) * hx * hy

    # -- I/O ---------------------------------------------------------------

    def to_csv(self) -> str:
        """Channel blocks of nx rows x ny columns, repeated per channel."""
        nx, ny, m = self.samples.shape
        buf = io.StringIO()
        xmin, ymin, xmax, ymax = _rect_params(self.domain)
        buf.write(f"# rect {xmin!r} {ymin!r} {xmax!r} {ymax!r} nx {nx} ny {ny} m {m}\n")
        for ch in range(m):
            for i in range(nx):
                buf.write(",".join(repr(float(x)) for x in self.samples[i, :, ch]))
                buf.write("\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str, interpolation: str = "nearest") -> "GridImage":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[0] != "#" or head[1] != "rect":
            raise ImageError("missing image CSV header")
        xmin, ymin, xmax, ymax = map(float, head[2:6])
        nx, ny, m = int(head[7]), int(head[9]), int(head[11])
        rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
        arr = np.array(rows).reshape(m, nx, ny).transpose(1, 2, 0)
        dom = Domain2.rectangle(xmax - xmin, ymax - ymin, (xmin, ymin))
        return GridImage(dom, arr, interpolation)


def read_pgm(path) -> GridImage:
    """P2/P5 PGM, one channel, rescaled to [0,1]; domain is the unit-aspect rectangle."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if data[i:i + 1] == b"#":
            i = data.index(b"\n", i) + 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j > i:
            tokens.append(data[i:j])
        i = j + 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        raw = np.frombuffer(data[i:], dtype=np.uint8 if maxval < 256 else ">u2",
                            count=w * h).astype(float)
    elif magic == b"P2":
        raw = np.array(data[i:].split()[: w * h], dtype=float)
    else:
        raise ImageError("only P2/P5 PGM supported")
    arr = (raw / maxval).reshape(h, w)  # row-major, top row first
    samples = arr[::-1].T[:, :, None]   # to (nx, ny) with y increasing upward
    dom = Domain2.rectangle(w / max(w, h), h / max(w, h))
    return GridImage(dom, samples)


def write_pgm(img: GridImage, path, maxval: int = 255):
    if img.channels != 1:
        raise ImageError("PGM output requires a single channel")
    arr = np.round(img.samples[:, :, 0].T[::-1] * maxval).astype(int)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


@dataclass
class Signal1D:
    """Piecewise-constant signal on a uniform grid over (0,1), values in [0,1]."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1 or len(s) < 1:
            raise ImageError("signal must be a nonempty 1D array")
        self.samples = np.clip(s, 0.0, 1.0)

    @property
    def breakpoints(self) -> np.ndarray:
        J = len(self.samples)
        return np.arange(1, J) / J

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        J = len(self.samples)
        idx = np.clip((x * J).astype(int), 0, J - 1)
        return self.samples[idx]

    @staticmethod
    def indicator(a: float, b: float, J: int = 256) -> "Signal1D":
        x = (np.arange(J) + 0.5) / J
        return Signal1D(((x > a) & (x < b)).astype(float))

    def to_csv(self) -> str:
        return "\n".join(repr(float(v)) for v in self.samples) + "\n"

    @staticmethod
    def from_csv(text: str) -> "Signal1D":
        return Signal1D(np.array([float(v) for v in text.split()]))


# ---------------------------------------------------------------------------
# quadrature on meshes
# ---------------------------------------------------------------------------

def quadrature_points(mesh, order: int = 1):
    """(points, weights, triangle index) of a per-triangle rule on the reference mesh.

    Order 1 is the midpoint (centroid) rule; order 2 the 3-point edge-midpoint
    rule, exact for quadratics.
    """
    p = mesh.nodes[mesh.triangles]  # (T,3,2)
    if order == 1:
        pts = p.mean(axis=1)
        w = mesh.ref_areas
        tri = np.arange(mesh.num_triangles)
    elif order == 2:
        mids = np.stack([(p[:, 0] + p[:, 1]) / 2,
                         (p[:, 1] + p[:, 2]) / 2,
                         (p[:, 2] + p[:, 0]) / 2], axis=1)
        pts = mids.reshape(-1, 2)
        w = np.repeat(mesh.ref_areas / 3.0, 3)
        tri = np.repeat(np.arange(mesh.num_triangles), 3)
    else:
        raise ImageError("quadrature order must be 1 or 2")
    return pts, w, tri


def _deformed_quadrature(deformation: MeshDeformation, order: int = 1):
    """Same rule on the deformed configuration, with exact affine pre-images."""
    mesh = deformation.mesh
    p = deformation.positions[mesh.triangles]
    r = mesh.nodes[mesh.triangles]
    areas = deformation.deformed_areas()
    if order == 1:
        z = p.mean(axis=1)
        x = r.mean(axis=1)
        w = areas
        tri = np.arange(mesh.num_triangles)
    elif order == 2:
        z = np.stack([(p[:, 0] + p[:, 1]) / 2, (p[:, 1] + p[:, 2]) / 2,
                      (p[:, 2] + p[:, 0]) / 2], axis=1).reshape(-1, 2)
        x = np.stack([(r[:, 0] + r[:, 1]) / 2, (r[:, 1] + r[:, 2]) / 2,
                      (r[:, 2] + r[:, 0]) / 2], axis=1).reshape(-1, 2)
        w = np.repeat(areas / 3.0, 3)
        tri = np.repeat(np.arange(mesh.num_triangles), 3)
    else:
        raise ImageError("quadrature order must be 1 or 2")
    return z, x, w, tri


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def make_related_pair(img: GridImage, affine: AffineMap, mode: str = "intensity",
                      resolution: tuple[int, int] | None = None) -> GridImage:
    """Second image of an affinely related pair.

    Intensity mode keeps values, c2(Mx+a) = c1(x); mass mode conserves total
    integrated intensity, c2(Mx+a) = c1(x)/det M.  The result is sampled on
    the bounding rectangle of the mapped domain (values outside the mapped
    polygon come from clamped sampling of c1).
    """
    if mode not in ("intensity", "mass"):
        raise ImageError(f"unknown mode {mode!r}")
    det = affine.det
    if mode == "mass":
        peak = float(img.samples.max()) / det
        if peak > 1.0 + 1e-12:
            raise ImageError(
                f"mass mode overflows K=[0,1]; rescale c1 by {1.0 / peak:.6g} first")
    target = img.domain.transformed(affine.A, affine.a)
    xmin, ymin, xmax, ymax = target.bounding_box
    rect = Domain2.rectangle(xmax - xmin, ymax - ymin, (xmin, ymin))
    nx, ny = resolution or img.resolution
    inv = affine.inverse()

    def fn(pts):
        vals = img.sample(inv(pts), clamp_tol=np.inf)
        return vals / det if mode == "mass" else vals

    return GridImage.from_function(fn, rect, nx, ny, img.interpolation)


def pullback(img2: GridImage, deformation: MeshDeformation, order: int = 1,
             clamp_tol: float = 1e-7) -> np.ndarray:
    """c2(y(x_q)) at the quadrature points of the reference mesh."""
    pts, _, tri = quadrature_points(deformation.mesh, order)
    p = deformation.positions[deformation.mesh.triangles]
    if order == 1:
        mapped = p.mean(axis=1)
    else:
        mapped = np.stack([(p[:, 0] + p[:, 1]) / 2, (p[:, 1] + p[:, 2]) / 2,
                           (p[:, 2] + p[:, 0]) / 2], axis=1).reshape(-1, 2)
    return img2.sample(mapped, clamp_tol=clamp_tol)


def change_of_variables_check(img2: GridImage, deformation: MeshDeformation,
                              rhs_order: int = 1) -> float:
    """Residual between int c2(y) det Dy over the source and int c2 over the image.

    With rhs_order=1 both quadratures use matched points, so the residual
    certifies the discrete change-of-variables identity (machine zero for a
    consistent fold-free deformation).  rhs_order=2 uses an independent rule
    on the deformed elements and senses interpolation error, O(h^2) for
    smooth bilinear images under refinement.
    """
    mesh = deformation.mesh
    dets = deformation.dets()
    pts, w, tri = quadrature_points(mesh, 1)
    lhs_vals = pullback(img2, deformation, order=1)
    lhs = float(np.sum(w[:, None] * dets[tri][:, None] * lhs_vals, axis=0).sum())
    z, _, wz, _ = _deformed_quadrature(deformation, rhs_order)
    rhs = float(np.sum(wz[:, None] * img2.sample(z, clamp_tol=1e-6), axis=0).sum())
    return abs(lhs - rhs)
