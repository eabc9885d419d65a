"""Minimization drivers.

Free-boundary registration by projected gradient descent (boundary nodes slide
along the target polygon by arclength), landmark-pinned registration, affine
part matching with an outer search, morphing sequences and the induced
pseudometric estimate, the curvature-penalized grid model, and the
one-dimensional closed-form demonstration.

All randomness flows from one seeded generator per driver call; with a fixed
seed the energy trajectory is bit-for-bit reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import (
    DET_FLOOR,
    EnergyBreakdown,
    EnergyError,
    EnergySpec,
    SecondOrderSpec,
    energy_first_order,
    gradient,
)
from .geometry import (
    AffineMap,
    BoundaryParam,
    Domain2,
    GridDeformation,
    Mesh,
    MeshDeformation,
    Monotone1DMap,
    boundary_cyclic_order,
    build_mesh,
    cyclic_orders_equal,
    validate_homeomorphism,
)
from .imagery import GridImage, Signal1D, quadrature_points

__all__ = [
    "SolveError",
    "OptimizerParams",
    "RegisterResult",
    "LandmarkSet",
    "LandmarkVerdict",
    "AffineSearchSet",
    "MorphSequence",
    "register",
    "validate_landmarks",
    "register_landmarks",
    "match_part",
    "morph_F",
    "morph_sequence",
    "concatenate_paths",
    "estimate_rho",
    "register_second_order",
    "demo_1d",
    "two_slope_oracle",
    "detect_two_slopes",
    "fidelity_1d",
    "energy_1d",
    "random_deformation_onto",
]


class SolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerParams:
    max_iter: int = 1500
    grad_tol: float = 1e-6
    barrier_mu: float = 1e-3
    barrier_factor: float = 0.05
    barrier_rounds: int = 3
    ls_shrink: float = 0.5
    ls_c1: float = 1e-4
    multistart: int = 1
    seed: int = 0
    det_floor: float = 1e-8
    mesh_h: float = 1.0 / 16.0
    debug: bool = False

    def __post_init__(self):
        if min(self.max_iter, self.multistart, self.barrier_rounds) <= 0:
            raise SolveError("iteration counts must be positive")
        if min(self.grad_tol, self.barrier_mu, self.det_floor, self.mesh_h) <= 0:
            raise SolveError("tolerances must be positive")
        if not (0 < self.ls_shrink < 1 and 0 < self.ls_c1 < 1):
            raise SolveError("line-search constants must lie in (0,1)")


@dataclass
class RegisterResult:
    deformation: MeshDeformation
    breakdown: EnergyBreakdown
    trajectory: list
    converged: bool
    iterations: int
    grad_norm: float

    def __iter__(self):
        return iter((self.deformation, self.breakdown))


# ---------------------------------------------------------------------------
# parametrization of the free degrees of freedom
# ---------------------------------------------------------------------------

class _DeformationParam:
    """Free variables: interior (x,y) pairs plus boundary arclength parameters.

    Pinned nodes (landmarks, probe corners) are excluded and held at fixed
    positions.
    """

    def __init__(self, mesh: Mesh, target: Domain2,
                 pinned: np.ndarray | None = None,
                 pinned_positions: np.ndarray | None = None):
        self.mesh = mesh
        self.target = target
        self.bp = BoundaryParam(target)
        n = mesh.num_nodes
        self.pinned = np.zeros(n, dtype=bool) if pinned is None else pinned.copy()
        self.pinned_positions = pinned_positions
        self.free_interior = np.flatnonzero(~mesh.is_boundary & ~self.pinned)
        self.free_boundary = np.flatnonzero(mesh.is_boundary & ~self.pinned)
        self.size = 2 * len(self.free_interior) + len(self.free_boundary)

    def pack(self, positions: np.ndarray) -> np.ndarray:
        t = self.bp.project(positions[self.free_boundary])
        return np.concatenate([positions[self.free_interior].ravel(), t])

    def unpack(self, theta: np.ndarray, base: np.ndarray) -> np.ndarray:
        k = 2 * len(self.free_interior)
        pos = base.copy()
        pos[self.free_interior] = theta[:k].reshape(-1, 2)
        pos[self.free_boundary] = self.bp.point(theta[k:])
        if self.pinned_positions is not None:
            pos[self.pinned] = self.pinned_positions[self.pinned]
        return pos

    def grad(self, node_grad: np.ndarray, theta: np.ndarray) -> np.ndarray:
        k = 2 * len(self.free_interior)
        tan = self.bp.tangent(theta[k:])
        gb = np.einsum("ka,ka->k", node_grad[self.free_boundary], tan)
        return np.concatenate([node_grad[self.free_interior].ravel(), gb])


def _barrier(deformation: MeshDeformation, mu: float):
    """mu * sum a_T (det - 1 - log det) and its per-node gradient."""
    mesh = deformation.mesh
    F = deformation.gradients()
    det = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    a = mesh.ref_areas
    val = mu * float(np.sum(a * (det - 1.0 - np.log(det))))
    invT = np.empty_like(F)
    invT[:, 0, 0] = F[:, 1, 1]
    invT[:, 0, 1] = -F[:, 1, 0]
    invT[:, 1, 0] = -F[:, 0, 1]
    invT[:, 1, 1] = F[:, 0, 0]
    invT /= det[:, None, None]
    coef = mu * a * (det - 1.0)
    per_vertex = np.einsum("t,tab,tvb->tva", coef, invT, mesh.shape_grads)
    g = np.zeros_like(deformation.positions)
    np.add.at(g, mesh.triangles.ravel(), per_vertex.reshape(-1, 2))
    return val, g


def _descend(value_grad, theta0: np.ndarray, params: OptimizerParams,
             trajectory: list | None = None):
    """Barzilai-Borwein scaled descent with backtracking; rejects invalid steps.

    value_grad(theta) -> (value, grad) or (inf, None) for infeasible theta.
    """
    theta = theta0.copy()
    f, g = value_grad(theta)
    if not np.isfinite(f):
        raise SolveError("infeasible initial deformation")
    step = 1e-2 / max(1.0, float(np.linalg.norm(g)))
    prev_theta = prev_g = None
    it = 0
    for it in range(params.max_iter):
        gnorm = float(np.linalg.norm(g, ord=np.inf))
        if trajectory is not None:
            trajectory.append(f)
        if gnorm <= params.grad_tol:
            return theta, f, g, True, it
        if prev_theta is not None:
            s = theta - prev_theta
            y = g - prev_g
            sy = float(s @ y)
            if sy > 1e-300:
                step = float(s @ s) / sy
        step = min(max(step, 1e-12), 1e3)
        d = -g
        gd = float(g @ d)
        alpha = step
        accepted = False
        for _ in range(60):
            cand = theta + alpha * d
            fc, gc = value_grad(cand)
            if np.isfinite(fc) and fc <= f + params.ls_c1 * alpha * gd:
                prev_theta, prev_g = theta, g
                theta, f, g = cand, fc, gc
                accepted = True
                break
            alpha *= params.ls_shrink
        if not accepted:
            return theta, f, g, gnorm <= 10 * params.grad_tol, it
    return theta, f, g, False, params.max_iter


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------

def _cycle_affine_candidates(source: Domain2, target: Domain2):
    """Least-squares affine maps matching the vertex cycles of the polygons."""
    vs, vt = source.vertices, target.vertices
    out = []
    if len(vs) == len(vt):
        A_ls = np.hstack([vs, np.ones((len(vs), 1))])
        for shift in range(len(vt)):
            w = np.roll(vt, -shift, axis=0)
            sol, *_ = np.linalg.lstsq(A_ls, w, rcond=None)
            A = sol[:2].T
            a = sol[2]
            if np.linalg.det(A) > 1e-12:
                out.append((A, a))
    # bounding-box fit as fallback
    sx0, sy0, sx1, sy1 = source.bounding_box
    tx0, ty0, tx1, ty1 = target.bounding_box
    A = np.diag([(tx1 - tx0) / (sx1 - sx0), (ty1 - ty0) / (sy1 - sy0)])
    a = np.array([tx0, ty0]) - A @ np.array([sx0, sy0])
    out.append((A, a))
    return out


def _initial_deformation(mesh: Mesh, target: Domain2, score) -> MeshDeformation:
    best = None
    best_val = np.inf
    bp = BoundaryParam(target)
    for A, a in _cycle_affine_candidates(mesh.domain, target):
        pos = mesh.nodes @ A.T + a
        idx = mesh.boundary_cycle
        pos[idx] = bp.point(bp.project(pos[idx]))
        cand = MeshDeformation(mesh, pos, target)
        if np.any(cand.dets() <= 0):
            continue
        v = score(cand)
        if v < best_val:
            best, best_val = cand, v
    if best is None:
        raise SolveError("no valid initializer found for the target domain")
    return best


def register(spec: EnergySpec, P1: GridImage, P2: GridImage,
             params: OptimizerParams | None = None,
             source: Domain2 | None = None, target: Domain2 | None = None,
             mesh: Mesh | None = None, init: MeshDeformation | None = None,
             pinned: np.ndarray | None = None,
             pinned_positions: np.ndarray | None = None,
             pin_corners: bool = True,
             clamp_tol: float = 1e-6) -> RegisterResult:
    """Locally minimize the registration energy over sliding-boundary maps.

    With pin_corners (the default) each vertex of the target polygon is held
    by the boundary node the initializer places closest to it, so the deformed
    mesh covers the target exactly instead of shaving its corners; the
    remaining boundary nodes slide freely.
    """
    params = params or OptimizerParams()
    source = source or P1.domain
    target = target or P2.domain
    if mesh is None:
        mesh = build_mesh(source, params.mesh_h)

    def breakdown(d: MeshDeformation) -> EnergyBreakdown:
        return energy_first_order(spec, P1, P2, d, clamp_tol=clamp_tol, check=False)

    if init is None:
        init = _initial_deformation(mesh, target, lambda d: breakdown(d).total)
    elif init.mesh is not mesh:
        init = MeshDeformation(mesh, init.positions.copy(), target)

    if pin_corners:
        pinned = (np.zeros(mesh.num_nodes, dtype=bool) if pinned is None
                  else pinned.copy())
        if pinned_positions is None:
            pinned_positions = np.zeros((mesh.num_nodes, 2))
        else:
            pinned_positions = pinned_positions.copy()
        bidx = mesh.boundary_cycle
        for v in target.vertices:
            free = bidx[~pinned[bidx]]
            j = free[np.argmin(((init.positions[free] - v) ** 2).sum(-1))]
            pinned[j] = True
            pinned_positions[j] = v

    param = _DeformationParam(mesh, target, pinned, pinned_positions)
    base = init.positions.copy()

    def make_value_grad(mu):
        def value_grad(theta):
            pos = param.unpack(theta, base)
            d = MeshDeformation(mesh, pos, target)
            dets = d.dets()
            if np.any(dets <= params.det_floor) or np.any(dets <= DET_FLOOR):
                return np.inf, None
            try:
                bd = breakdown(d)
                g = gradient(spec, P1, P2, d, clamp_tol=clamp_tol,
                             project_boundary=False)
            except (EnergyError, Exception) as exc:
                if isinstance(exc, (EnergyError,)):
                    return np.inf, None
                raise
            val = bd.total
            if mu > 0:
                bval, bg = _barrier(d, mu)
                val += bval
                g = g + bg
            if params.debug:
                rep = validate_homeomorphism(d, check_overlap=False)
                if not rep.passed:
                    return np.inf, None
            return val, param.grad(g, theta)
        return value_grad

    theta = param.pack(base)
    trajectory: list = []
    converged = False
    iters = 0
    gnorm = np.inf
    mu = params.barrier_mu
    for round_idx in range(params.barrier_rounds):
        is_last = round_idx == params.barrier_rounds - 1
        theta, f, g, converged, it = _descend(
            make_value_grad(0.0 if is_last else mu), theta, params, trajectory)
        iters += it
        gnorm = float(np.linalg.norm(g, ord=np.inf))
        mu *= params.barrier_factor
    pos = param.unpack(theta, base)
    out = MeshDeformation(mesh, pos, target)
    return RegisterResult(out, breakdown(out), trajectory, converged, iters, gnorm)


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LandmarkSet:
    """Point correspondences p_i -> q_i with interior/boundary flags."""

    p: np.ndarray
    q: np.ndarray
    boundary: np.ndarray  # bool per pair

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        b = np.atleast_1d(np.asarray(self.boundary, dtype=bool))
        if not (len(p) == len(q) == len(b)) or len(p) == 0:
            raise SolveError("landmark arrays must be nonempty and matching")
        for arr, name in ((p, "source"), (q, "target")):
            d = np.linalg.norm(arr[:, None] - arr[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            if d.min() < 1e-12:
                raise SolveError(f"{name} landmarks must be pairwise distinct")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "boundary", b)


@dataclass
class LandmarkVerdict:
    passed: bool
    failures: list


def validate_landmarks(lm: LandmarkSet, source: Domain2, target: Domain2,
                       tol_bnd: float = 1e-7) -> LandmarkVerdict:
    """Boundary<->boundary consistency and preserved cyclic boundary order."""
    failures = []
    from .geometry import _distance_to_polygon
    dp = _distance_to_polygon(lm.p, source)
    dq = _distance_to_polygon(lm.q, target)
    scale_s = max(1.0, source.diameter)
    scale_t = max(1.0, target.diameter)
    for i in range(len(lm.p)):
        p_on = dp[i] <= tol_bnd * scale_s
        q_on = dq[i] <= tol_bnd * scale_t
        if lm.boundary[i] and not (p_on and q_on):
            failures.append(f"pair {i}: flagged boundary but off the boundary")
        if not lm.boundary[i] and (p_on or q_on):
            failures.append(f"pair {i}: flagged interior but on a boundary")
        if not lm.boundary[i]:
            if not (source.contains(lm.p[i:i + 1])[0] and target.contains(lm.q[i:i + 1])[0]):
                failures.append(f"pair {i}: interior landmark outside its domain")
    bidx = np.flatnonzero(lm.boundary)
    if len(bidx) >= 3 and not failures:
        op = boundary_cyclic_order(source, lm.p[bidx])
        oq = boundary_cyclic_order(target, lm.q[bidx])
        if not cyclic_orders_equal(op, oq):
            failures.append("boundary landmarks change cyclic order "
                            f"({op} vs {oq}); no orientation-preserving "
                            "homeomorphism can match them")
    return LandmarkVerdict(not failures, failures)


def register_landmarks(spec: EnergySpec, P1: GridImage, P2: GridImage,
                       lm: LandmarkSet, params: OptimizerParams | None = None,
                       source: Domain2 | None = None, target: Domain2 | None = None,
                       mesh: Mesh | None = None, **kw) -> RegisterResult:
    """Registration with landmark nodes pinned exactly at their targets."""
    params = params or OptimizerParams()
    source = source or P1.domain
    target = target or P2.domain
    verdict = validate_landmarks(lm, source, target)
    if not verdict.passed:
        raise SolveError("landmark validation failed: " + "; ".join(verdict.failures))
    if mesh is None:
        mesh = build_mesh(source, params.mesh_h)
    # snap each source landmark to its nearest mesh node (boundary landmarks
    # to boundary nodes) and pin that node at the target point
    pinned = np.zeros(mesh.num_nodes, dtype=bool)
    pinned_positions = np.zeros((mesh.num_nodes, 2))
    bp = BoundaryParam(target)
    for i in range(len(lm.p)):
        cand = np.flatnonzero(mesh.is_boundary if lm.boundary[i]
                              else ~mesh.is_boundary)
        j = cand[np.argmin(((mesh.nodes[cand] - lm.p[i]) ** 2).sum(-1))]
        if pinned[j]:
            raise SolveError("two landmarks snapped to the same mesh node; "
                             "refine the mesh")
        pinned[j] = True
        qi = lm.q[i]
        if lm.boundary[i]:
            qi = bp.point(bp.project(qi[None]))[0]
        pinned_positions[j] = qi
    res = register(spec, P1, P2, params, source, target, mesh,
                   pinned=pinned, pinned_positions=pinned_positions, **kw)
    resid = float(np.max(np.linalg.norm(
        res.deformation.positions[pinned] - pinned_positions[pinned], axis=-1)))
    if resid > 1e-9:
        raise SolveError(f"landmark constraint violated (residual {resid:g})")
    return res


# ---------------------------------------------------------------------------
# affine part matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineSearchSet:
    """Search set of affine placements a + A x.

    variant "scaling": A = mu * identity, mu in [lam_min, lam_max].
    variant "rotscale": A = mu * rotation.
    variant "general": entries of A in entry_box = (lo, hi), det A >= det_min.
    """

    variant: str
    lam_min: float = 1.0
    lam_max: float = 1.0
    entry_box: tuple = (-2.0, 2.0)
    det_min: float = 1e-2

    def __post_init__(self):
        if self.variant not in ("scaling", "rotscale", "general"):
            raise SolveError(f"unknown search variant {self.variant!r}")
        if not (0 < self.lam_min <= self.lam_max):
            raise SolveError("need 0 < lam_min <= lam_max")
        if self.det_min <= 0:
            raise SolveError("det_min must be positive")

    def matrices(self, n_scale: int = 7, n_angle: int = 12, rng=None):
        if self.variant == "scaling":
            for mu in np.linspace(self.lam_min, self.lam_max, n_scale):
                yield mu * np.eye(2)
        elif self.variant == "rotscale":
            for mu in np.linspace(self.lam_min, self.lam_max, n_scale):
                for th in np.linspace(0, 2 * np.pi, n_angle, endpoint=False):
                    c, s = np.cos(th), np.sin(th)
                    yield mu * np.array([[c, -s], [s, c]])
        else:
            rng = rng or np.random.default_rng(0)
            lo, hi = self.entry_box
            count = 0
            while count < n_scale * n_angle:
                A = rng.uniform(lo, hi, size=(2, 2))
                if np.linalg.det(A) >= self.det_min:
                    count += 1
                    yield A


def match_part(spec: EnergySpec, P1: GridImage, P2: GridImage,
               S: AffineSearchSet, params: OptimizerParams | None = None,
               source: Domain2 | None = None, scene: Domain2 | None = None,
               grid: int = 9, top_k: int = 3) -> tuple:
    """Find the best affine placement of the template inside the scene.

    Outer grid over (a, A) in S keeping only placements with a + A*source
    contained in the scene polygon (exact containment check); the cheapest
    candidates are refined by full registration onto the placed target.
    Returns (AffineMap, MeshDeformation, EnergyBreakdown).
    """
    params = params or OptimizerParams()
    source = source or P1.domain
    scene = scene or P2.domain
    rng = np.random.default_rng(params.seed)
    mesh = build_mesh(source, params.mesh_h)
    scene_poly = scene.shapely()
    sx0, sy0, sx1, sy1 = scene.bounding_box
    verts = source.vertices
    scored = []
    for A in S.matrices(rng=rng):
        av = verts @ A.T
        w = av[:, 0].max() - av[:, 0].min()
        h = av[:, 1].max() - av[:, 1].min()
        ax = np.linspace(sx0 - av[:, 0].min(), sx1 - av[:, 0].min() - w, grid)
        ay = np.linspace(sy0 - av[:, 1].min(), sy1 - av[:, 1].min() - h, grid)
        if w > sx1 - sx0 + 1e-12 or h > sy1 - sy0 + 1e-12:
            continue
        for a0 in ax:
            for a1 in ay:
                a = np.array([a0, a1])
                placed = source.transformed(A, a)
                if not scene_poly.covers(placed.shapely().buffer(-1e-12)):
                    continue
                pos = mesh.nodes @ A.T + a
                d = MeshDeformation(mesh, pos, placed)
                bd = energy_first_order(spec, P1, P2, d, check=False)
                scored.append((bd.total, A, a))
    if not scored:
        raise SolveError("no feasible affine placement inside the scene")
    scored.sort(key=lambda s: s[0])
    best = None
    for total, A, a in scored[:top_k]:
        placed = source.transformed(A, a)
        init = MeshDeformation(mesh, mesh.nodes @ A.T + a, placed)
        res = register(spec, P1, P2, params, source, placed, mesh, init=init)
        if best is None or res.breakdown.total < best[2].total:
            best = (AffineMap(A, a), res.deformation, res.breakdown)
    return best


# ---------------------------------------------------------------------------
# morphing
# ---------------------------------------------------------------------------

def _rescale(P):
    if P in (None, "id", "identity"):
        return lambda t: t
    if P == "sqrt":
        return math.sqrt
    if callable(P):
        return P
    raise SolveError(f"unknown rescale {P!r}")


def morph_F(spec: EnergySpec, c: GridImage, d: GridImage, P="id",
            params: OptimizerParams | None = None, **kw) -> float:
    """Upper bound on the one-step morphing cost F(c, d) = P(min energy)."""
    res = register(spec, c, d, params, **kw)
    return _rescale(P)(res.breakdown.total)


@dataclass
class MorphSequence:
    frames: list            # N+1 GridImages
    maps: list              # N MeshDeformations
    step_energies: list     # N floats (unrescaled energies)
    P: object = "id"

    @property
    def N(self) -> int:
        return len(self.maps)

    @property
    def F_N(self) -> float:
        P = _rescale(self.P)
        return float(sum(P(e) for e in self.step_energies))


def _intensity_update(spec: EnergySpec, frames, maps, i, clamp_tol=1e-6):
    """Closed-form per-cell weighted least squares for an interior frame.

    Frame i appears in step i-1 (as the pulled-back target) and step i (as the
    source); each quadrature point contributes one linear residual per cell.
    """
    img = frames[i]
    nx, ny = img.resolution
    xmin, ymin, xmax, ymax = img.domain.bounding_box
    num = np.zeros((nx, ny, img.channels))
    den = np.zeros((nx, ny, 1))

    def cells(points):
        u = np.clip((points[:, 0] - xmin) / (xmax - xmin), 0, 1 - 1e-12)
        v = np.clip((points[:, 1] - ymin) / (ymax - ymin), 0, 1 - 1e-12)
        return (u * nx).astype(int), (v * ny).astype(int)

    def add(points, weight, coef, targets):
        # residual weight * (targets - coef * c_cell)^2
        ix, iy = cells(points)
        np.add.at(num, (ix, iy), (weight * coef)[:, None] * targets)
        np.add.at(den, (ix, iy, 0), weight * coef ** 2)

    mass = spec.fidelity.family == "mass"
    eps = spec.fidelity.epsilon
    # step i-1: residual c_{i-1}(x) - c_i(y(x)) [* det for mass]
    y = maps[i - 1]
    pts, w, tri = quadrature_points(y.mesh, 1)
    det = y.dets()[tri]
    b = frames[i - 1].sample(pts, clamp_tol=clamp_tol)
    ypts = y.positions[y.mesh.triangles].mean(axis=1)
    if mass:
        add(ypts, w * (1 + 1 / det), det, b)
    else:
        add(ypts, w * (1 + det) / eps, np.ones_like(det), b)
    # step i: residual c_i(x) - c_{i+1}(y_i(x)) * [det for mass]
    y = maps[i]
    pts, w, tri = quadrature_points(y.mesh, 1)
    det = y.dets()[tri]
    ypts = y.positions[y.mesh.triangles].mean(axis=1)
    t = frames[i + 1].sample(ypts, clamp_tol=clamp_tol)
    if mass:
        add(pts, w * (1 + 1 / det), np.ones(len(det)), t * det[:, None])
    else:
        add(pts, w * (1 + det) / eps, np.ones_like(det), t)

    new = img.samples.copy()
    hit = den[..., 0] > 1e-300
    new[hit] = np.clip(num[hit] / den[hit], 0.0, 1.0)
    return GridImage(img.domain, new, img.interpolation)


def morph_sequence(spec: EnergySpec, c: GridImage, d: GridImage, N: int,
                   params: OptimizerParams | None = None, P="id",
                   init_frames=None, init_maps=None, rounds: int = 3,
                   mesh: Mesh | None = None) -> MorphSequence:
    """Block-coordinate descent over N+1 intensity frames and N maps."""
    if N < 1:
        raise SolveError("need N >= 1")
    params = params or OptimizerParams()
    dom = c.domain
    if mesh is None:
        mesh = build_mesh(dom, params.mesh_h)

    if init_frames is not None:
        frames = list(init_frames)
        if len(frames) != N + 1:
            raise SolveError("init_frames must have N+1 entries")
    else:
        frames = [GridImage(dom, ((N - i) * c.samples + i * d.samples) / N,
                            c.interpolation) for i in range(N + 1)]
    frames[0], frames[N] = c, d
    if init_maps is not None:
        maps = [MeshDeformation(mesh, m.positions.copy(), dom) if m.mesh is not mesh
                else m for m in init_maps]
        if len(maps) != N:
            raise SolveError("init_maps must have N entries")
    else:
        maps = [mesh.identity_deformation(dom) for _ in range(N)]

    def step_energy(i):
        return energy_first_order(spec, frames[i], frames[i + 1], maps[i],
                                  check=False).total

    energies = [step_energy(i) for i in range(N)]
    total = sum(energies)
    for _ in range(rounds):
        # maps block
        for i in range(N):
            res = register(spec, frames[i], frames[i + 1], params, dom, dom,
                           mesh, init=maps[i])
            new_e = res.breakdown.total
            if new_e <= energies[i] + 1e-12:
                maps[i], energies[i] = res.deformation, new_e
        # intensities block (interior frames only)
        for i in range(1, N):
            cand = _intensity_update(spec, frames, maps, i)
            old = frames[i]
            old_pair = energies[i - 1] + energies[i]
            frames[i] = cand
            e1, e2 = step_energy(i - 1), step_energy(i)
            if e1 + e2 <= old_pair + 1e-12:
                energies[i - 1], energies[i] = e1, e2
            else:
                frames[i] = old
        new_total = sum(energies)
        if new_total > total + 1e-9:
            raise SolveError("morph energy increased across a block update")
        if total - new_total < 1e-12:
            total = new_total
            break
        total = new_total
    return MorphSequence(frames, maps, energies, P)


def concatenate_paths(seq1: MorphSequence, seq2: MorphSequence):
    """Warm start for the triangle property: path c->d joined with d->e."""
    frames = list(seq1.frames) + list(seq2.frames[1:])
    maps = list(seq1.maps) + list(seq2.maps)
    return frames, maps


def estimate_rho(spec: EnergySpec, c: GridImage, d: GridImage, N_max: int,
                 params: OptimizerParams | None = None, P="id",
                 rounds: int = 3) -> tuple[list, list]:
    """Upper bounds F_1..F_{N_max}; each run warm starts from the previous path
    by splitting its most expensive step, so the table is non-increasing up to
    optimizer tolerance.  Returns (values, sequences).
    """
    params = params or OptimizerParams()
    values = []
    seqs = []
    seq = morph_sequence(spec, c, d, 1, params, P, rounds=rounds)
    values.append(seq.F_N)
    seqs.append(seq)
    for N in range(2, N_max + 1):
        k = int(np.argmax(seq.step_energies))
        mid = GridImage(c.domain,
                        0.5 * (seq.frames[k].samples + seq.frames[k + 1].samples),
                        c.interpolation)
        frames = seq.frames[:k + 1] + [mid] + seq.frames[k + 1:]
        mesh = seq.maps[0].mesh
        ident = mesh.identity_deformation(c.domain)
        maps = seq.maps[:k] + [ident, ident] + seq.maps[k + 1:]
        seq = morph_sequence(spec, c, d, N, params, P,
                             init_frames=frames, init_maps=maps,
                             rounds=rounds, mesh=mesh)
        values.append(seq.F_N)
        seqs.append(seq)
    return values, seqs


# ---------------------------------------------------------------------------
# second-order registration
# ---------------------------------------------------------------------------

def register_second_order(sos: SecondOrderSpec, P1: GridImage, P2: GridImage,
                          params: OptimizerParams | None = None,
                          source: Domain2 | None = None,
                          target: Domain2 | None = None,
                          grid_shape: tuple = (24, 24),
                          init: GridDeformation | None = None):
    """Minimize the curvature-penalized energy on a structured grid.

    Boundary-ring nodes slide along the target polygon (gradient projected to
    the tangent, positions reprojected); the four grid corners are pinned to
    the affine image of the source corners from the initializer.
    Returns (GridDeformation, EnergyBreakdown, info dict).
    """
    from .secondorder import SecondOrderEnergy, grid_dets

    params = params or OptimizerParams()
    source = source or P1.domain
    target = target or P2.domain
    gx, gy = grid_shape
    gdef = GridDeformation.identity(source, gx, gy)
    E = SecondOrderEnergy.for_deformation(sos, P1, P2, gdef)
    bp = BoundaryParam(target)

    ring = np.zeros((gx, gy), dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    corners = np.zeros((gx, gy), dtype=bool)
    corners[0, 0] = corners[0, -1] = corners[-1, 0] = corners[-1, -1] = True

    if init is None:
        ref = gdef.reference_nodes()
        best = None
        for A, a in _cycle_affine_candidates(source, target):
            pos = ref @ A.T + a
            if grid_dets(GridDeformation(source, pos, target)).min() <= 0:
                continue
            v = E.value(pos)
            if best is None or v < best[0]:
                best = (v, pos)
        if best is None:
            raise SolveError("no valid initializer found for the target domain")
        pos = best[1]
    else:
        pos = init.positions.copy()
    pos[ring] = bp.point(bp.project(pos[ring].reshape(-1, 2))).reshape(-1, 2)
    corner_pos = pos[corners].copy()

    def project_grad(g, p):
        g = g.copy()
        slide = ring & ~corners
        t = bp.project(p[slide].reshape(-1, 2))
        tan = bp.tangent(t)
        comp = np.einsum("ka,ka->k", g[slide].reshape(-1, 2), tan)
        g[slide] = (tan * comp[:, None]).reshape(g[slide].shape)
        g[corners] = 0.0
        return g

    def clean(p):
        p = p.copy()
        slide = ring & ~corners
        p[slide] = bp.point(bp.project(p[slide].reshape(-1, 2))).reshape(p[slide].shape)
        p[corners] = corner_pos
        return p

    f, g = E.value_and_grad(pos)
    g = project_grad(g, pos)
    trajectory = [f]
    step = 1e-2 / max(1.0, float(np.linalg.norm(g)))
    prev_pos = prev_g = None
    converged = False
    for it in range(params.max_iter):
        gnorm = float(np.abs(g).max())
        if gnorm <= params.grad_tol:
            converged = True
            break
        if prev_pos is not None:
            s = (pos - prev_pos).ravel()
            y = (g - prev_g).ravel()
            sy = float(s @ y)
            if sy > 1e-300:
                step = float(s @ s) / sy
        step = min(max(step, 1e-12), 1e3)
        gd = -float((g ** 2).sum())
        alpha = step
        accepted = False
        for _ in range(60):
            cand = clean(pos - alpha * g)
            if grid_dets(GridDeformation(source, cand, target)).min() > params.det_floor:
                fc = E.value(cand)
                if np.isfinite(fc) and fc <= f + params.ls_c1 * alpha * gd:
                    prev_pos, prev_g = pos, g
                    pos = cand
                    f, gc = E.value_and_grad(pos)
                    g = project_grad(gc, pos)
                    trajectory.append(f)
                    accepted = True
                    break
            alpha *= params.ls_shrink
        if not accepted:
            break
    out = GridDeformation(source, pos, target)
    bd = E.breakdown(pos)
    info = {"trajectory": trajectory, "converged": converged,
            "iterations": len(trajectory) - 1}
    return out, bd, info


# ---------------------------------------------------------------------------
# quasiconvexity probe helper
# ---------------------------------------------------------------------------

def random_deformation_onto(mesh: Mesh, M: np.ndarray, rng: np.random.Generator,
                            amplitude: float = 0.15) -> MeshDeformation:
    """Random valid deformation with image M * (mesh domain).

    Polygon corners are pinned to their affine images so the deformed mesh
    tiles the target exactly; edge nodes jitter along their edge without
    reordering; interior nodes jitter freely.  The perturbation is halved
    until all element determinants are positive.
    """
    M = np.asarray(M, dtype=float)
    target = mesh.domain.transformed(M)
    base = mesh.nodes @ M.T
    bp = BoundaryParam(target)
    idx = mesh.boundary_cycle
    t = bp.project(base[idx])
    corner_t = bp.cum[:-1]
    is_corner = np.min(np.abs(t[:, None] - corner_t[None, :]), axis=1) <= 1e-9 * max(1.0, bp.total)
    # bound the jitter of each sliding node by its gap to the neighbors
    order = np.argsort(t)
    gaps = np.diff(np.concatenate([np.sort(t), [np.sort(t)[0] + bp.total]]))
    gap_of = np.empty_like(t)
    gap_of[order] = np.minimum(gaps, np.roll(gaps, 1))
    h = math.sqrt(mesh.ref_areas.mean())
    for _ in range(40):
        pos = base.copy()
        pos[~mesh.is_boundary] += amplitude * h * rng.standard_normal(
            (int((~mesh.is_boundary).sum()), 2))
        jitter = rng.uniform(-0.45, 0.45, size=len(t)) * gap_of
        tj = np.where(is_corner, t, t + jitter * min(1.0, amplitude / 0.15))
        pos[idx] = bp.point(tj)
        d = MeshDeformation(mesh, pos, target)
        if d.dets().min() > 1e-10:
            return d
        amplitude *= 0.5
    raise SolveError("failed to draw a valid random deformation")


# ---------------------------------------------------------------------------
# one-dimensional demonstration
# ---------------------------------------------------------------------------

def _default_Psi(p):
    return p + 1.0 / p - 2.0


def _default_dPsi(p):
    return 1.0 - 1.0 / p ** 2


def fidelity_1d(y: Monotone1DMap, c1: Signal1D, c2: Signal1D) -> float:
    """Exact integral of (1 + y')|c1(x) - c2(y(x))|^2 for piecewise data.

    Between consecutive breakpoints of c1, y and y^{-1}(breaks of c2) the
    integrand is constant and (1 + y') integrates to dx + dy.
    """
    b1 = c1.breakpoints[np.diff(c1.samples) != 0]
    b2 = c2.breakpoints[np.diff(c2.samples) != 0]
    cuts = np.concatenate([y.grid, b1, y.inverse(b2)])
    cuts = np.unique(np.clip(cuts, 0.0, 1.0))
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    vals = (c1(mids) - c2(y(mids))) ** 2
    dx = np.diff(cuts)
    dy = np.diff(y(cuts))
    return float(np.sum((dx + dy) * vals))


def energy_1d(y: Monotone1DMap, c1: Signal1D, c2: Signal1D,
              eps: float, Psi=_default_Psi) -> float:
    s = y.slopes()
    stored = float(np.sum(np.diff(y.grid) * Psi(s)))
    return eps * stored + fidelity_1d(y, c1, c2)


def _project_simplex(u: np.ndarray, lo: float) -> np.ndarray:
    """Euclidean projection onto {u >= lo, sum u = 1}."""
    n = len(u)
    if lo * n >= 1.0:
        raise SolveError("lower bound infeasible")
    # find shift tau with sum(max(u - tau, lo)) = 1 by bisection
    tlo = u.min() - 1.0
    thi = u.max()
    for _ in range(200):
        tau = 0.5 * (tlo + thi)
        s = np.maximum(u - tau, lo).sum()
        if s > 1.0:
            tlo = tau
        else:
            thi = tau
    return np.maximum(u - 0.5 * (tlo + thi), lo)


def _signal_changes(sig: Signal1D):
    """(positions, left values, right values) of the true jumps of a signal."""
    idx = np.flatnonzero(np.diff(sig.samples) != 0)
    J = len(sig.samples)
    return (idx + 1) / J, sig.samples[idx], sig.samples[idx + 1]


def demo_1d(eps: float = 1e-3, J: int = 512, Psi=_default_Psi,
            dPsi=_default_dPsi, c1: Signal1D | None = None,
            c2: Signal1D | None = None, max_iter: int = 300,
            cycles: int = 4, seed: int = 0):
    """Projected descent for the one-dimensional model problem.

    Default signals: c1 the indicator of (0, 1/2), c2 of (0, 3/4).  The exact
    energy is piecewise smooth; its fidelity subgradient concentrates at the
    crossings y(x) = (jump of c2) and y(jump of c1), where moving the map
    shifts an intensity-mismatch interval.  Descent alternates with an exact
    slope-equalization pass between crossing-pinned nodes (the convex stored
    term is minimized by uniform slopes; the pass is kept only if the exact
    energy decreases).  Returns (Monotone1DMap, energy, info).
    """
    if eps <= 0 or J < 4:
        raise SolveError("need eps > 0 and J >= 4")
    c1 = c1 or Signal1D.indicator(0.0, 0.5, J)
    c2 = c2 or Signal1D.indicator(0.0, 0.75, J)
    h = 1.0 / J
    grid = np.linspace(0.0, 1.0, J + 1)
    u_min = 1e-4 * h
    z2, c2l, c2r = _signal_changes(c2)
    x1, _, _ = _signal_changes(c1)
    tiny = 1e-9

    def make_map(u):
        vals = np.concatenate([[0.0], np.cumsum(u)])
        vals[-1] = 1.0
        return Monotone1DMap(grid, vals)

    def exact(u):
        return energy_1d(make_map(u), c1, c2, eps, Psi)

    def subgrad(u):
        y = make_map(u)
        gY = np.zeros(J + 1)
        # crossings y(t) = jump of c2: moving t by dt changes the reference-
        # side mismatch integral by (left value - right value) dt
        for z, cl, cr in zip(z2, c2l, c2r):
            if not (tiny < z < 1 - tiny):
                continue
            t = float(y.inverse(z))
            if t <= tiny or t >= 1 - tiny:
                continue
            cell = min(int(t * J), J - 1)
            s = (y.values[cell + 1] - y.values[cell]) / h
            jump = (float(c1(t - tiny)) - cl) ** 2 - (float(c1(t + tiny)) - cr) ** 2
            frac = t / h - cell
            dt_dY = -1.0 / max(s, 1e-12)
            gY[cell] += jump * dt_dY * (1 - frac)
            gY[cell + 1] += jump * dt_dY * frac
        # crossings z = y(jump of c1): same on the deformed side
        for x in x1:
            if not (tiny < x < 1 - tiny):
                continue
            z = float(y(x))
            jump = ((float(c1(x - tiny)) - float(c2(z - tiny))) ** 2
                    - (float(c1(x + tiny)) - float(c2(z + tiny))) ** 2)
            cell = min(int(x * J), J - 1)
            frac = x / h - cell
            gY[cell] += jump * (1 - frac)
            gY[cell + 1] += jump * frac
        # dY_k/du_j = 1 for j < k  =>  suffix sums over node gradients
        tail = np.cumsum(gY[::-1])[::-1]
        return eps * dPsi(u / h) + tail[1:]

    def equalize(u):
        """Uniform slopes between crossing-pinned nodes; keep if it helps."""
        y = make_map(u)
        pinned = {0, J}
        for z in z2:
            t = float(y.inverse(z))
            pinned.add(int(round(t * J)))
        for x in x1:
            pinned.add(int(round(x * J)))
        ks = sorted(k for k in pinned if 0 <= k <= J)
        cand = u.copy()
        for k0, k1 in zip(ks[:-1], ks[1:]):
            if k1 - k0 >= 2:
                cand[k0:k1] = (y.values[k1] - y.values[k0]) / (k1 - k0)
        cand = _project_simplex(cand, u_min)
        return cand if exact(cand) < exact(u) else u

    def bb_phase(u, iters, trajectory):
        f = exact(u)
        g = subgrad(u)
        step = 0.1 * h
        prev_u = prev_g = None
        for _ in range(iters):
            if prev_u is not None:
                s = u - prev_u
                yv = g - prev_g
                sy = float(s @ yv)
                if sy > 1e-300:
                    step = float(s @ s) / sy
            step = min(max(abs(step), 1e-10 * h), 10.0)
            alpha = step
            accepted = False
            for _ in range(50):
                cand = _project_simplex(u - alpha * g, u_min)
                fc = exact(cand)
                if fc < f - 1e-16:
                    prev_u, prev_g = u, g
                    u, f = cand, fc
                    g = subgrad(u)
                    trajectory.append(f)
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
        return u

    u = np.full(J, h)
    trajectory = [exact(u)]
    for _ in range(cycles):
        u = bb_phase(u, max_iter, trajectory)
        u = equalize(u)
        trajectory.append(exact(u))
    y = make_map(u)
    f = exact(u)
    info = {"trajectory": trajectory, "slopes": detect_two_slopes(y)}
    return y, f, info


def two_slope_oracle(eps: float = 1e-3, J: int = 512, Psi=_default_Psi,
                     c1: Signal1D | None = None, c2: Signal1D | None = None,
                     n_coarse: int = 101, n_fine: int = 2001):
    """Brute force over maps with a single kink.

    The kink position sweeps every interior grid node; its height sweeps a
    coarse range everywhere, then a fine range around the best coarse cell.
    Energies are exact.  Returns (best_map, best_energy,
    (slope_left, slope_right, kink)).
    """
    c1 = c1 or Signal1D.indicator(0.0, 0.5, J)
    c2 = c2 or Signal1D.indicator(0.0, 0.75, J)

    def energy_at(xk, v):
        y = Monotone1DMap(np.array([0.0, xk, 1.0]), np.array([0.0, v, 1.0]))
        stored = eps * (xk * Psi(v / xk) + (1 - xk) * Psi((1 - v) / (1 - xk)))
        return stored + fidelity_1d(y, c1, c2)

    best = (np.inf, None, None)
    vs = np.linspace(1e-6, 1.0 - 1e-6, n_coarse)
    for k in range(1, J):
        xk = k / J
        for v in vs:
            e = energy_at(xk, v)
            if e < best[0]:
                best = (e, xk, v)
    _, xk, v0 = best
    dv = (vs[1] - vs[0])
    for v in np.linspace(max(1e-6, v0 - dv), min(1 - 1e-6, v0 + dv), n_fine):
        e = energy_at(xk, v)
        if e < best[0]:
            best = (e, xk, v)
    e, xk, v = best
    y = Monotone1DMap(np.array([0.0, xk, 1.0]), np.array([0.0, v, 1.0]))
    return y, float(e), (float(v / xk), float((1 - v) / (1 - xk)), float(xk))


def detect_two_slopes(y: Monotone1DMap, rel_tol: float = 0.05):
    """(slope_left, slope_right, kink position, number of slope changes)."""
    s = y.slopes()
    ds = np.abs(np.diff(s))
    thr = rel_tol * max(1e-12, float(np.abs(s).max()))
    changes = np.flatnonzero(ds > thr)
    if len(changes) == 0:
        return float(s.mean()), float(s.mean()), float("nan"), 0
    k = int(changes[np.argmax(ds[changes])]) + 1
    # count clusters of consecutive change indices as one change each
    n_changes = 1 + int(np.sum(np.diff(changes) > 1))
    return (float(np.median(s[:k])), float(np.median(s[k:])),
            float(y.grid[k]), n_changes)
