"""Domains, triangulations and discrete orientation-preserving homeomorphisms.

A deformation is stored as one deformed position per mesh node and interpreted
as a piecewise-affine map, so the deformation gradient is constant per triangle
and global injectivity (no folding, no element overlap) is checkable exactly.
Curved boundaries are approximated by inscribed polygons.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.strtree import STRtree

__all__ = [
    "GeometryError",
    "Domain2",
    "Mesh",
    "MeshDeformation",
    "GridDeformation",
    "ValidationReport",
    "Monotone1DMap",
    "AffineMap",
    "ShearFactor",
    "build_mesh",
    "validate_homeomorphism",
    "RadialMap",
    "radial_map",
    "shear_decompose",
    "boundary_cyclic_order",
    "cyclic_orders_equal",
    "evaluate_map",
    "invert_map",
    "disk_polygon",
    "BoundaryParam",
]

TOL_BND = 1e-9
_MAX_TRIANGLES = 2_000_000


class GeometryError(ValueError):
    """Raised for invalid domains, degenerate meshes or infeasible requests."""


# ---------------------------------------------------------------------------
# domains
# ---------------------------------------------------------------------------

def _shoelace(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class Domain2:
    """A bounded simple polygon with positively oriented (CCW) vertex list."""

    vertices: np.ndarray  # (k, 2)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        object.__setattr__(self, "vertices", v)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise GeometryError("polygon needs at least 3 planar vertices")
        if not np.all(np.isfinite(v)):
            raise GeometryError("polygon vertices must be finite")
        area = _shoelace(v)
        if abs(area) < 1e-14:
            raise GeometryError("degenerate polygon (zero area)")
        if area < 0:
            raise GeometryError("polygon must be counterclockwise")
        poly = ShapelyPolygon(v)
        if not poly.is_valid or not poly.is_simple:
            raise GeometryError("polygon must be simple (no self-intersection)")

    @staticmethod
    def rectangle(width: float, height: float, origin=(0.0, 0.0)) -> "Domain2":
        if width <= 0 or height <= 0:
            raise GeometryError("rectangle sides must be positive")
        x0, y0 = origin
        return Domain2(np.array([
            [x0, y0], [x0 + width, y0], [x0 + width, y0 + height], [x0, y0 + height],
        ]))

    @staticmethod
    def polygon(vertices) -> "Domain2":
        return Domain2(np.asarray(vertices, dtype=float))

    @property
    def area(self) -> float:
        return _shoelace(self.vertices)

    @property
    def diameter(self) -> float:
        v = self.vertices
        d2 = np.sum((v[:, None, :] - v[None, :, :]) ** 2, axis=-1)
        return math.sqrt(float(d2.max()))

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)."""
        v = self.vertices
        return (float(v[:, 0].min()), float(v[:, 1].min()),
                float(v[:, 0].max()), float(v[:, 1].max()))

    def shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.vertices)

    def contains(self, points: np.ndarray, tol: float = TOL_BND) -> np.ndarray:
        poly = self.shapely().buffer(tol)
        pts = np.atleast_2d(points)
        from shapely.geometry import Point
        return np.array([poly.contains(Point(p)) or poly.touches(Point(p)) for p in pts])

    def transformed(self, A: np.ndarray, a=(0.0, 0.0)) -> "Domain2":
        """Image polygon A v + a (requires det A > 0 to keep orientation)."""
        A = np.asarray(A, dtype=float)
        if np.linalg.det(A) <= 0:
            raise GeometryError("transform must preserve orientation")
        return Domain2(self.vertices @ A.T + np.asarray(a, dtype=float))

    def to_json(self) -> dict:
        return {"vertices": self.vertices.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "Domain2":
        return Domain2(np.asarray(obj["vertices"], dtype=float))


def disk_polygon(radius: float, center=(0.0, 0.0), segments: int = 64) -> Domain2:
    """Inscribed-polygon approximation of a disk.

    Area error relative to the disk is radius^2*(pi - n/2*sin(2*pi/n)),
    about 0.16% at the default 64 segments.
    """
    th = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    c = np.asarray(center, dtype=float)
    return Domain2(c + radius * np.stack([np.cos(th), np.sin(th)], axis=1))


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    """Conforming triangulation with CCW triangles and an ordered boundary cycle."""

    nodes: np.ndarray        # (N, 2)
    triangles: np.ndarray    # (T, 3) int
    boundary_cycle: np.ndarray  # node indices, CCW around the domain
    domain: Domain2
    # caches, filled in __post_init__
    ref_areas: np.ndarray = field(init=False)
    shape_grads: np.ndarray = field(init=False)  # (T, 3, 2): Dy = sum_v P_v (x) g_v
    is_boundary: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.boundary_cycle = np.asarray(self.boundary_cycle, dtype=np.int64)
        p = self.nodes[self.triangles]  # (T,3,2)
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            raise GeometryError("reference triangles must be positively oriented")
        self.ref_areas = 0.5 * det
        # rows of inv([e1 e2]) give shape-function gradients of vertices 1,2
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        g = np.empty((len(det), 3, 2))
        g[:, 1] = inv[:, 0]
        g[:, 2] = inv[:, 1]
        g[:, 0] = -inv[:, 0] - inv[:, 1]
        self.shape_grads = g
        mask = np.zeros(len(self.nodes), dtype=bool)
        mask[self.boundary_cycle] = True
        self.is_boundary = mask

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def identity_deformation(self, target: Domain2 | None = None) -> "MeshDeformation":
        return MeshDeformation(self, self.nodes.copy(), target or self.domain)


def _boundary_cycle_from_triangles(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, chained into a single CCW cycle."""
    from collections import defaultdict
    count: dict[tuple[int, int], int] = defaultdict(int)
    directed: dict[tuple[int, int], tuple[int, int]] = {}
    for (i, j, k) in triangles:
        for a, b in ((i, j), (j, k), (k, i)):
            key = (min(a, b), max(a, b))
            count[key] += 1
            directed[key] = (a, b)
    nxt: dict[int, int] = {}
    for key, c in count.items():
        if c == 1:
            a, b = directed[key]  # CCW triangle orientation => boundary runs CCW
            nxt[a] = b
    if not nxt:
        raise GeometryError("mesh has no boundary")
    start = min(nxt)
    cycle = [start]
    cur = nxt[start]
    while cur != start:
        cycle.append(cur)
        cur = nxt[cur]
        if len(cycle) > len(nxt):
            raise GeometryError("boundary is not a single cycle")
    if len(cycle) != len(nxt):
        raise GeometryError("boundary is not a single cycle")
    return np.array(cycle, dtype=np.int64)


def _ear_clip(vertices: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate a simple CCW polygon by ear clipping (vertex indices)."""
    n = len(vertices)
    idx = list(range(n))
    tris: list[tuple[int, int, int]] = []

    def cross(o, a, b):
        return ((vertices[a, 0] - vertices[o, 0]) * (vertices[b, 1] - vertices[o, 1])
                - (vertices[a, 1] - vertices[o, 1]) * (vertices[b, 0] - vertices[o, 0]))

    def point_in_tri(p, a, b, c):
        d1 = (vertices[p, 0] - vertices[b, 0]) * (vertices[a, 1] - vertices[b, 1]) - \
             (vertices[a, 0] - vertices[b, 0]) * (vertices[p, 1] - vertices[b, 1])
        d2 = (vertices[p, 0] - vertices[c, 0]) * (vertices[b, 1] - vertices[c, 1]) - \
             (vertices[b, 0] - vertices[c, 0]) * (vertices[p, 1] - vertices[c, 1])
        d3 = (vertices[p, 0] - vertices[a, 0]) * (vertices[c, 1] - vertices[a, 1]) - \
             (vertices[c, 0] - vertices[a, 0]) * (vertices[p, 1] - vertices[a, 1])
        neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
        pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
        return not (neg and pos)

    guard = 0
    while len(idx) > 3:
        guard += 1
        if guard > 4 * n * n:
            raise GeometryError("ear clipping failed (polygon may be degenerate)")
        clipped = False
        for k in range(len(idx)):
            a, b, c = idx[k - 1], idx[k], idx[(k + 1) % len(idx)]
            if cross(a, b, c) <= 1e-15 * max(1.0, np.abs(vertices).max()) ** 2:
                continue  # reflex or collinear
            if any(point_in_tri(p, a, b, c) for p in idx if p not in (a, b, c)):
                continue
            tris.append((a, b, c))
            idx.pop(k)
            clipped = True
            break
        if not clipped:
            raise GeometryError("ear clipping failed (polygon may be degenerate)")
    tris.append((idx[0], idx[1], idx[2]))
    return tris


def _subdivide(nodes: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One uniform 4-way refinement; shared edge midpoints are deduplicated."""
    nodes_list = list(map(tuple, nodes))
    lookup = {pt: i for i, pt in enumerate(nodes_list)}

    def midpoint(a: int, b: int) -> int:
        p = (0.5 * (nodes[a, 0] + nodes[b, 0]), 0.5 * (nodes[a, 1] + nodes[b, 1]))
        if p not in lookup:
            lookup[p] = len(nodes_list)
            nodes_list.append(p)
        return lookup[p]

    out = []
    for (i, j, k) in triangles:
        ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        out += [(i, ij, ki), (ij, j, jk), (ki, jk, k), (ij, jk, ki)]
    return np.array(nodes_list, dtype=float), np.array(out, dtype=np.int64)


def _max_edge(nodes: np.ndarray, triangles: np.ndarray) -> float:
    p = nodes[triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
    return float(np.sqrt((e ** 2).sum(axis=-1)).max())


def _is_axis_rectangle(domain: Domain2) -> bool:
    v = domain.vertices
    if len(v) != 4:
        return False
    xs, ys = np.unique(np.round(v[:, 0], 12)), np.unique(np.round(v[:, 1], 12))
    return len(xs) == 2 and len(ys) == 2


def build_mesh(domain: Domain2, target_h: float) -> Mesh:
    """Conforming triangulation with max edge length <= 1.5 * target_h.

    Axis-aligned rectangles get a structured grid split into triangle pairs;
    general polygons are ear-clipped then uniformly refined.
    """
    if target_h <= 0:
        raise GeometryError("target_h must be positive")
    if target_h >= domain.diameter:
        raise GeometryError("target_h must be smaller than the domain diameter")
    est = 2.0 * domain.area / max(target_h, 1e-300) ** 2
    if est > _MAX_TRIANGLES:
        raise GeometryError(
            f"target_h={target_h:g} would need ~{est:.2g} triangles "
            f"(limit {_MAX_TRIANGLES})")

    if _is_axis_rectangle(domain):
        xmin, ymin, xmax, ymax = domain.bounding_box
        nx = max(1, math.ceil((xmax - xmin) / target_h))
        ny = max(1, math.ceil((ymax - ymin) / target_h))
        xs = np.linspace(xmin, xmax, nx + 1)
        ys = np.linspace(ymin, ymax, ny + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

        def nid(ix, iy):
            return ix * (ny + 1) + iy

        tris = []
        for ix in range(nx):
            for iy in range(ny):
                a, b = nid(ix, iy), nid(ix + 1, iy)
                c, d = nid(ix + 1, iy + 1), nid(ix, iy + 1)
                tris += [(a, b, c), (a, c, d)]
        triangles = np.array(tris, dtype=np.int64)
    else:
        nodes = domain.vertices.copy()
        triangles = np.array(_ear_clip(nodes), dtype=np.int64)
        while _max_edge(nodes, triangles) > 1.5 * target_h:
            if 4 * len(triangles) > _MAX_TRIANGLES:
                raise GeometryError("refinement exceeds triangle budget")
            nodes, triangles = _subdivide(nodes, triangles)

    cycle = _boundary_cycle_from_triangles(nodes, triangles)
    return Mesh(nodes, triangles, cycle, domain)


# ---------------------------------------------------------------------------
# deformations
# ---------------------------------------------------------------------------

@dataclass
class MeshDeformation:
    """Piecewise-affine map given by one deformed position per mesh node."""

    mesh: Mesh
    positions: np.ndarray  # (N, 2)
    target: Domain2

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.shape != self.mesh.nodes.shape:
            raise GeometryError("one deformed position per node is required")

    def gradients(self) -> np.ndarray:
        """Per-triangle deformation gradient, shape (T, 2, 2)."""
        p = self.positions[self.mesh.triangles]  # (T,3,2)
        return np.einsum("tva,tvb->tab", p, self.mesh.shape_grads)

    def dets(self) -> np.ndarray:
        F = self.gradients()
        return F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]

    def deformed_areas(self) -> np.ndarray:
        p = self.positions[self.mesh.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def compose_affine(self, A: np.ndarray, a=(0.0, 0.0),
                       target: Domain2 | None = None) -> "MeshDeformation":
        """Post-compose with the affine map z -> A z + a."""
        A = np.asarray(A, dtype=float)
        tgt = target or self.target.transformed(A, a)
        return MeshDeformation(self.mesh, self.positions @ A.T + np.asarray(a), tgt)


@dataclass
class ValidationReport:
    """Outcome of the discrete-homeomorphism checks; failures are recorded, not raised."""

    det_signs: np.ndarray
    min_det: float
    negative_triangles: list[int]
    boundary_residual: float
    overlap_pairs: list[tuple[int, int]]
    boundary_simple: bool
    boundary_ccw: bool
    passed: bool

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state}: min det={self.min_det:.3e}, "
                f"folded={len(self.negative_triangles)}, "
                f"boundary residual={self.boundary_residual:.3e}, "
                f"overlaps={len(self.overlap_pairs)}, "
                f"simple={self.boundary_simple}, ccw={self.boundary_ccw}")


def _distance_to_polygon(points: np.ndarray, domain: Domain2) -> np.ndarray:
    """Unsigned distance from each point to the polygon boundary."""
    v = domain.vertices
    w = np.roll(v, -1, axis=0)
    p = points[:, None, :]
    a, b = v[None, :, :], w[None, :, :]
    ab = b - a
    t = np.clip(np.einsum("pki,pki->pk", p - a, ab) /
                np.maximum((ab ** 2).sum(-1), 1e-300), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(-1)).min(axis=1)


def validate_homeomorphism(deformation: MeshDeformation,
                           tol_bnd: float = TOL_BND,
                           check_overlap: bool = True) -> ValidationReport:
    """Check orientation, boundary placement and global injectivity.

    Overlap is detected by exact polygon intersection on deformed elements
    (shared edges do not count); the deformed boundary cycle must stay a
    simple CCW polygon.
    """
    mesh = deformation.mesh
    dets = deformation.dets()
    negative = [int(i) for i in np.nonzero(dets <= 0)[0]]

    bpos = deformation.positions[mesh.boundary_cycle]
    bres = float(_distance_to_polygon(bpos, deformation.target).max())

    ring = ShapelyPolygon(bpos)
    simple = bool(ring.is_valid and ring.is_simple)
    ccw = _shoelace(bpos) > 0

    overlaps: list[tuple[int, int]] = []
    if check_overlap and not negative:
        polys = [ShapelyPolygon(deformation.positions[t]) for t in mesh.triangles]
        tree = STRtree(polys)
        areas = deformation.deformed_areas()
        for i, poly in enumerate(polys):
            for j in tree.query(poly):
                j = int(j)
                if j <= i:
                    continue
                inter = poly.intersection(polys[j])
                if inter.area > 1e-12 * min(areas[i], areas[j]):
                    overlaps.append((i, int(j)))

    passed = (not negative) and bres <= tol_bnd and simple and ccw and not overlaps
    return ValidationReport(np.sign(dets), float(dets.min()), negative, bres,
                            overlaps, simple, ccw, passed)


# ---------------------------------------------------------------------------
# point evaluation and inversion
# ---------------------------------------------------------------------------

def _barycentric(tri_nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    a, b, c = tri_nodes
    T = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    lm = np.linalg.solve(T, np.asarray(x, dtype=float) - a)
    return np.array([1.0 - lm[0] - lm[1], lm[0], lm[1]])


def _locate(nodes: np.ndarray, triangles: np.ndarray, x, tol: float = 1e-9):
    """Return (triangle index, barycentric coords) of the triangle containing x."""
    x = np.asarray(x, dtype=float)
    p = nodes[triangles]
    best = None
    best_viol = np.inf
    # bounding-box prefilter
    lo = p.min(axis=1) - tol
    hi = p.max(axis=1) + tol
    cand = np.nonzero(np.all((x >= lo) & (x <= hi), axis=1))[0]
    for t in cand:
        lam = _barycentric(p[t], x)
        viol = -lam.min()
        if viol <= tol:
            return int(t), lam
        if viol < best_viol:
            best_viol, best = viol, (int(t), lam)
    if best is not None and best_viol <= 1e-6:
        return best
    raise GeometryError(f"point {x.tolist()} is outside the triangulation")


def evaluate_map(deformation: "MeshDeformation | Monotone1DMap", x):
    """Piecewise-affine (or piecewise-linear 1D) evaluation at a point."""
    if isinstance(deformation, Monotone1DMap):
        return deformation(x)
    t, lam = _locate(deformation.mesh.nodes, deformation.mesh.triangles, x)
    return lam @ deformation.positions[deformation.mesh.triangles[t]]


def invert_map(deformation: "MeshDeformation | Monotone1DMap", z):
    """Inverse located by point search in the deformed triangles."""
    if isinstance(deformation, Monotone1DMap):
        return deformation.inverse(z)
    t, lam = _locate(deformation.positions, deformation.mesh.triangles, z)
    return lam @ deformation.mesh.nodes[deformation.mesh.triangles[t]]


# ---------------------------------------------------------------------------
# 1D monotone maps
# ---------------------------------------------------------------------------

@dataclass
class Monotone1DMap:
    """Strictly increasing piecewise-linear map of [0,1] with pinned endpoints."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.shape != v.shape or g.ndim != 1 or len(g) < 2:
            raise GeometryError("grid and values must be matching 1D arrays")
        if abs(g[0]) > 1e-12 or abs(g[-1] - 1) > 1e-12:
            raise GeometryError("grid must span [0,1]")
        if abs(v[0]) > 1e-12 or abs(v[-1] - 1) > 1e-12:
            raise GeometryError("endpoints must be pinned: y(0)=0, y(1)=1")
        if np.any(np.diff(g) <= 0) or np.any(np.diff(v) <= 0):
            raise GeometryError("grid and values must be strictly increasing")
        self.grid, self.values = g, v

    def __call__(self, x):
        return np.interp(x, self.grid, self.values)

    def inverse(self, z):
        return np.interp(z, self.values, self.grid)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.grid)


# ---------------------------------------------------------------------------
# affine maps and radial maps
# ---------------------------------------------------------------------------

@dataclass
class AffineMap:
    """x -> A x + a with det A > 0."""

    A: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.a.shape != (n,):
            raise GeometryError("A must be n x n and a an n-vector")
        if np.linalg.det(self.A) <= 0:
            raise GeometryError("affine map must have det A > 0")

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.A.T + self.a

    def inverse(self) -> "AffineMap":
        Ainv = np.linalg.inv(self.A)
        return AffineMap(Ainv, -Ainv @ self.a)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.A))


class RadialMap:
    """Continuous radial map with piecewise-constant Jacobian determinant.

    The radius profile satisfies r^n = p R^n on [0, lam^(1/n)],
    q R^n + lam (p - q) on [lam^(1/n), 1] and m R^n beyond, where
    m = lam p + (1 - lam) q, so det Dy equals p, q, m on the three shells
    and B(center, 2) maps onto B(center, 2 m^(1/n)).
    """

    def __init__(self, p: float, q: float, lam: float, center=(0.0, 0.0), n: int = 2):
        if not (0.0 < lam < 1.0):
            raise GeometryError("lambda must lie in (0,1)")
        if p <= 0 or q <= 0 or p > q:
            raise GeometryError("need 0 < p <= q")
        self.p, self.q, self.lam, self.n = float(p), float(q), float(lam), int(n)
        self.center = np.asarray(center, dtype=float)
        self.m = lam * p + (1.0 - lam) * q

    def radius_profile(self, R):
        R = np.asarray(R, dtype=float)
        s = R ** self.n
        rn = np.where(s <= self.lam, self.p * s,
                      np.where(s <= 1.0, self.q * s + self.lam * (self.p - self.q),
                               self.m * s))
        return rn ** (1.0 / self.n)

    def jac_det(self, R):
        """det Dy = d(r^n)/d(R^n), piecewise constant in R."""
        s = np.asarray(R, dtype=float) ** self.n
        return np.where(s <= self.lam, self.p, np.where(s <= 1.0, self.q, self.m))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.center
        R = np.sqrt((d ** 2).sum(axis=-1))
        scale = np.where(R > 0, self.radius_profile(R) / np.maximum(R, 1e-300), self.p ** (1.0 / self.n))
        return self.center + d * scale[..., None]

    def as_mesh_deformation(self, mesh: Mesh, target: Domain2 | None = None) -> MeshDeformation:
        if target is None:
            # the sampled map sends the mesh boundary radially; scale the domain polygon
            scale = self.m ** (1.0 / self.n)
            target = Domain2(self.center + scale * (mesh.domain.vertices - self.center))
        return MeshDeformation(mesh, self(mesh.nodes), target)


def radial_map(p: float, q: float, lam: float, center=(0.0, 0.0), n: int = 2) -> RadialMap:
    return RadialMap(p, q, lam, center, n)


# ---------------------------------------------------------------------------
# shear decomposition of SL(n)
# ---------------------------------------------------------------------------

@dataclass
class ShearFactor:
    """Transvection 1 + p (x) nu with p orthogonal to the unit vector nu."""

    p: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        nrm = np.linalg.norm(self.nu)
        if abs(nrm - 1.0) > 1e-9:
            raise GeometryError("nu must be a unit vector")
        if abs(self.p @ self.nu) > 1e-12 * max(1.0, float(np.linalg.norm(self.p))):
            raise GeometryError("p must be orthogonal to nu")
        # remove the numerical residual so det(1 + p (x) nu) = 1 + p.nu stays at 1
        self.p = self.p - (self.p @ self.nu) * self.nu

    def matrix(self) -> np.ndarray:
        n = len(self.p)
        return np.eye(n) + np.outer(self.p, self.nu)


def _transvection_factors(M: np.ndarray) -> list[tuple[int, int, float]]:
    """Factor M in SL(n) as a product of 1 + alpha e_i e_j^T (i != j).

    Row-reduces M to the identity using only row additions; the inverses of
    the elimination steps, in order, are the factors.
    """
    n = M.shape[0]
    W = M.astype(float).copy()
    ops: list[tuple[int, int, float]] = []  # applied left factors (1 + a e_i e_j^T)

    def rowadd(i, j, a):
        # W <- (1 + a e_i e_j^T) W
        if a != 0.0:
            W[i] += a * W[j]
            ops.append((i, j, a))

    for col in range(n - 1):
        # pivot W[col, col] must become exactly 1 using row additions only
        if abs(W[col, col] - 1.0) > 1e-14:
            below = np.abs(W[col + 1:, col])
            donor = col + 1 + int(np.argmax(below)) if len(below) else col
            if len(below) == 0 or below.max() < 1e-12:
                if abs(W[col, col]) < 1e-12:
                    raise GeometryError("matrix is numerically singular in SL reduction")
                # no usable entry below; seed one from the pivot row first
                donor = col + 1
                rowadd(donor, col, 1.0)
            rowadd(col, donor, (1.0 - W[col, col]) / W[donor, col])
        for r in range(n):
            if r != col and abs(W[r, col]) > 0.0:
                rowadd(r, col, -W[r, col])
    # bottom-right entry equals det = 1; clear the rest of the last column
    for r in range(n - 1):
        if abs(W[r, n - 1]) > 0.0:
            rowadd(r, n - 1, -W[r, n - 1])
    # E_k ... E_1 M = 1  =>  M = E_1^-1 ... E_k^-1, and (1+a e_ij)^-1 = 1 - a e_ij
    return [(i, j, -a) for (i, j, a) in reversed(ops)]


def shear_decompose(M: np.ndarray, frame: np.ndarray | None = None) -> list[ShearFactor]:
    """Factor M in SL(n) into shears 1 + p (x) nu with nu drawn from a frame.

    The standard-basis transvection factorization is conjugated into the frame:
    with A = [nu_1 ... nu_n] the factor 1 + a e_i e_j^T becomes
    1 + (a A^-T e_i) (x) nu_j.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n):
        raise GeometryError("M must be square")
    if abs(np.linalg.det(M) - 1.0) > 1e-10:
        raise GeometryError("shear decomposition requires det M = 1")
    if frame is None:
        frame = np.eye(n)
    A = np.asarray(frame, dtype=float).T  # columns are the frame vectors
    if np.linalg.matrix_rank(A, tol=1e-10) < n:
        raise GeometryError("frame must span R^n")
    norms = np.linalg.norm(A, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise GeometryError("frame vectors must be unit length")
    if np.allclose(M, np.eye(n), atol=1e-14):
        return []
    Ainv = np.linalg.inv(A)
    D = A.T @ M @ Ainv.T  # in SL(n); M = A^-T D A^T
    factors = []
    for (i, j, a) in _transvection_factors(D):
        p = a * Ainv.T[:, i]
        nu = A[:, j]
        factors.append(ShearFactor(p, nu))
    return factors


# ---------------------------------------------------------------------------
# cyclic order along the boundary
# ---------------------------------------------------------------------------

def _boundary_arclength(mesh_or_domain, points: np.ndarray, tol: float) -> np.ndarray:
    if isinstance(mesh_or_domain, Mesh):
        cyc = mesh_or_domain.nodes[mesh_or_domain.boundary_cycle]
    else:
        cyc = mesh_or_domain.vertices
    nxt = np.roll(cyc, -1, axis=0)
    seg = nxt - cyc
    seglen = np.sqrt((seg ** 2).sum(-1))
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    out = np.empty(len(points))
    for k, pt in enumerate(np.atleast_2d(points)):
        t = np.clip(((pt - cyc) * seg).sum(-1) / np.maximum(seglen ** 2, 1e-300), 0, 1)
        proj = cyc + t[:, None] * seg
        d = np.sqrt(((pt - proj) ** 2).sum(-1))
        i = int(np.argmin(d))
        if d[i] > tol:
            raise GeometryError(f"point {pt.tolist()} is not on the boundary (dist {d[i]:.2e})")
        out[k] = cum[i] + t[i] * seglen[i]
    return out


def boundary_cyclic_order(mesh_or_domain, points, tol: float = 1e-7) -> tuple[int, ...]:
    """Indices of the points in counterclockwise boundary order.

    The returned tuple is normalized to start at point 0, so it is invariant
    under rotation of the input list.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    s = _boundary_arclength(mesh_or_domain, pts, tol)
    order = list(np.argsort(s, kind="stable"))
    k = order.index(0)
    return tuple(int(order[(k + i) % len(order)]) for i in range(len(order)))


def cyclic_orders_equal(a, b) -> bool:
    a, b = tuple(a), tuple(b)
    if len(a) != len(b):
        return False
    for shift in range(len(a)):
        if tuple(b[(shift + i) % len(b)] for i in range(len(b))) == a:
            return True
    return False


# ---------------------------------------------------------------------------
# boundary sliding parametrization
# ---------------------------------------------------------------------------

class BoundaryParam:
    """Arclength parametrization of a target polygon for sliding boundary nodes."""

    def __init__(self, domain: Domain2):
        v = domain.vertices
        seg = np.roll(v, -1, axis=0) - v
        self.vertices = v
        self.seg = seg
        self.seglen = np.sqrt((seg ** 2).sum(-1))
        self.cum = np.concatenate([[0.0], np.cumsum(self.seglen)])
        self.total = float(self.cum[-1])

    def point(self, t: np.ndarray) -> np.ndarray:
        t = np.mod(np.asarray(t, dtype=float), self.total)
        i = np.clip(np.searchsorted(self.cum, t, side="right") - 1, 0, len(self.seglen) - 1)
        local = (t - self.cum[i]) / self.seglen[i]
        return self.vertices[i] + local[:, None] * self.seg[i]

    def tangent(self, t: np.ndarray) -> np.ndarray:
        t = np.mod(np.asarray(t, dtype=float), self.total)
        i = np.clip(np.searchsorted(self.cum, t, side="right") - 1, 0, len(self.seglen) - 1)
        return self.seg[i] / self.seglen[i][:, None]

    def project(self, points: np.ndarray) -> np.ndarray:
        """Arclength parameter of the closest boundary point for each input."""
        pts = np.atleast_2d(points)
        out = np.empty(len(pts))
        for k, pt in enumerate(pts):
            t = np.clip(((pt - self.vertices) * self.seg).sum(-1)
                        / np.maximum(self.seglen ** 2, 1e-300), 0, 1)
            proj = self.vertices + t[:, None] * self.seg
            d = ((pt - proj) ** 2).sum(-1)
            i = int(np.argmin(d))
            out[k] = self.cum[i] + t[i] * self.seglen[i]
        return out


# ---------------------------------------------------------------------------
# structured-grid deformations (second-order model)
# ---------------------------------------------------------------------------

@dataclass
class GridDeformation:
    """Deformation sampled on a structured grid over a rectangle.

    Needed by the second-order energy, whose second differences require grid
    structure; `positions` has shape (gx, gy, 2).
    """

    domain: Domain2
    positions: np.ndarray
    target: Domain2

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 3 or self.positions.shape[2] != 2:
            raise GeometryError("positions must have shape (gx, gy, 2)")
        if self.positions.shape[0] < 3 or self.positions.shape[1] < 3:
            raise GeometryError("grid too coarse: need at least 3 nodes per axis")
        if not _is_axis_rectangle(self.domain):
            raise GeometryError("grid deformations live on axis-aligned rectangles")

    @property
    def shape(self) -> tuple[int, int]:
        return self.positions.shape[0], self.positions.shape[1]

    def reference_nodes(self) -> np.ndarray:
        gx, gy = self.shape
        xmin, ymin, xmax, ymax = self.domain.bounding_box
        xs = np.linspace(xmin, xmax, gx)
        ys = np.linspace(ymin, ymax, gy)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @staticmethod
    def identity(domain: Domain2, gx: int, gy: int) -> "GridDeformation":
        d = GridDeformation.__new__(GridDeformation)
        d.domain = domain
        xmin, ymin, xmax, ymax = domain.bounding_box
        xs = np.linspace(xmin, xmax, gx)
        ys = np.linspace(ymin, ymax, gy)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        d.positions = np.stack([X, Y], axis=-1)
        d.target = domain
        d.__post_init__()
        return d

    def to_mesh_deformation(self) -> MeshDeformation:
        gx, gy = self.shape
        ref = self.reference_nodes().reshape(-1, 2)
        pos = self.positions.reshape(-1, 2)

        def nid(ix, iy):
            return ix * gy + iy

        tris = []
        for ix in range(gx - 1):
            for iy in range(gy - 1):
                a, b = nid(ix, iy), nid(ix + 1, iy)
                c, d = nid(ix + 1, iy + 1), nid(ix, iy + 1)
                tris += [(a, b, c), (a, c, d)]
        cycle = _boundary_cycle_from_triangles(ref, np.array(tris))
        mesh = Mesh(ref, np.array(tris, dtype=np.int64), cycle, self.domain)
        return MeshDeformation(mesh, pos, self.target)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def deformation_to_csv(deformation: MeshDeformation) -> str:
    """Two-section CSV: node,ref_x,ref_y,def_x,def_y then tri,i,j,k."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["node", "ref_x", "ref_y", "def_x", "def_y"])
    for i, (r, d) in enumerate(zip(deformation.mesh.nodes, deformation.positions)):
        w.writerow([i, repr(float(r[0])), repr(float(r[1])),
                    repr(float(d[0])), repr(float(d[1]))])
    w.writerow(["tri", "i", "j", "k"])
    for t, (i, j, k) in enumerate(deformation.mesh.triangles):
        w.writerow([t, int(i), int(j), int(k)])
    return buf.getvalue()


def deformation_from_csv(text: str, domain: Domain2, target: Domain2) -> MeshDeformation:
    nodes, pos, tris = [], [], []
    section = None
    for row in csv.reader(io.StringIO(text)):
        if not row:
            continue
        if row[0] == "node":
            section = "node"
            continue
        if row[0] == "tri":
            section = "tri"
            continue
        if section == "node":
            nodes.append([float(row[1]), float(row[2])])
            pos.append([float(row[3]), float(row[4])])
        elif section == "tri":
            tris.append([int(row[1]), int(row[2]), int(row[3])])
    nodes = np.array(nodes)
    tris = np.array(tris, dtype=np.int64)
    cycle = _boundary_cycle_from_triangles(nodes, tris)
    mesh = Mesh(nodes, tris, cycle, domain)
    return MeshDeformation(mesh, np.array(pos), target)
