"""Energy densities, functionals, gradients and algebraic-identity checkers.

The integrand splits as psi(c1, c2, A) = Psi(A) + f(c1, c2, det A) with an
isotropic stored part Psi (singular-value power family, or a convex function
of the determinant alone) and a fidelity part f (intensity-matching or
mass-conserving).  Every identity the model is built on - isotropy,
interchange symmetry, the reflection identities and the zero set - has an
explicit randomized checker here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundaryParam, MeshDeformation, validate_homeomorphism
from .imagery import GridImage, quadrature_points, _deformed_quadrature

__all__ = [
    "EnergyError",
    "HFunction",
    "StoredEnergySpec",
    "FidelitySpec",
    "EnergySpec",
    "SecondOrderSpec",
    "EnergyBreakdown",
    "eval_Psi",
    "eval_psi",
    "check_isotropy",
    "check_interchange",
    "check_fidelity_reflection",
    "check_psi_reflection",
    "check_zero_set",
    "verify_suite",
    "energy_first_order",
    "energy_inverse_form",
    "gradient",
    "jensen_bound_check",
    "random_rotation",
    "random_posdet_matrix",
    "singular_values_2x2",
    "svd_2x2",
]


class EnergyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar convex profiles h
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HFunction:
    """Convex profile h with the reflection identity h(d) = d h(1/d).

    Families:
      poly      d^2 + 1/d - (n+1)(d+1); h'(1) = -n, makes Psi(1)=0 in the
                singular-value family.
      balanced  d^2 + 1/d - d - 1; h(1) = 0, h >= 0, blows up at 0; used by
                the determinant-only and second-order models.
    """

    family: str = "poly"
    n: int = 2

    def __post_init__(self):
        if self.family not in ("poly", "balanced"):
            raise EnergyError(f"unknown h family {self.family!r}")

    def __call__(self, d):
        d = np.asarray(d, dtype=float)
        if self.family == "poly":
            return d ** 2 + 1.0 / d - (self.n + 1) * (d + 1.0)
        return d ** 2 + 1.0 / d - d - 1.0

    def deriv(self, d):
        d = np.asarray(d, dtype=float)
        if self.family == "poly":
            return 2.0 * d - d ** -2 - (self.n + 1)
        return 2.0 * d - d ** -2 - 1.0

    def big_H(self, d, alpha: float):
        """H(d) = n (d^(a/n) + d^(1-a/n)) + h(d), the radial envelope of Psi."""
        d = np.asarray(d, dtype=float)
        n = self.n
        return n * (d ** (alpha / n) + d ** (1.0 - alpha / n)) + self(d)

    def check_conditions(self) -> dict:
        """Max deviations of the required conditions on a log-spaced grid."""
        d = np.logspace(-3, 3, 601)
        h = self(d)
        refl = float(np.max(np.abs(h - d * self(1.0 / d))
                            / np.maximum(1.0, np.abs(h))))
        # convexity via exact second derivative of both families
        second = 2.0 + 2.0 * d ** -3
        convex_ok = bool(np.all(second > 0))
        eps = 1e-6
        hp1 = (self(1.0 + eps) - self(1.0 - eps)) / (2 * eps)
        out = {
            "reflection": refl,
            "convex": convex_ok,
            "h_prime_1": float(hp1),
            "bounded_below": bool(np.isfinite(h.min())),
        }
        if self.family == "poly":
            out["h_prime_1_error"] = abs(hp1 + self.n)
        return out

    def to_json(self) -> dict:
        return {"family": self.family, "n": self.n}

    @staticmethod
    def from_json(obj: dict) -> "HFunction":
        return HFunction(obj.get("family", "poly"), int(obj.get("n", 2)))


# ---------------------------------------------------------------------------
# closed-form 2x2 SVD (batch), for fast per-element evaluation and gradients
# ---------------------------------------------------------------------------

def svd_2x2(A: np.ndarray):
    """Rotation-based SVD of a batch of 2x2 matrices with det > 0.

    Returns (U, s, V) with A = U diag(s) V^T; U and V are proper rotations
    when det A > 0, and s[...,0] >= s[...,1] > 0.
    """
    A = np.asarray(A, dtype=float)
    a, b = A[..., 0, 0], A[..., 0, 1]
    c, d = A[..., 1, 0], A[..., 1, 1]
    E = 0.5 * (a + d)
    F = 0.5 * (a - d)
    G = 0.5 * (c + b)
    H = 0.5 * (c - b)
    Q = np.hypot(E, H)
    R = np.hypot(F, G)
    s1 = Q + R
    s2 = Q - R
    a1 = np.arctan2(G, F)
    a2 = np.arctan2(H, E)
    theta = 0.5 * (a2 - a1)
    phi = 0.5 * (a2 + a1)

    def rot(t):
        ct, st = np.cos(t), np.sin(t)
        out = np.empty(t.shape + (2, 2))
        out[..., 0, 0] = ct
        out[..., 0, 1] = -st
        out[..., 1, 0] = st
        out[..., 1, 1] = ct
        return out

    U = rot(phi)
    V = rot(-theta)
    s = np.stack([s1, s2], axis=-1)
    return U, s, V


def singular_values_2x2(A: np.ndarray) -> np.ndarray:
    _, s, _ = svd_2x2(A)
    return s


def _singular_values(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 2:
        return singular_values_2x2(A)
    return np.linalg.svd(A, compute_uv=False)


def _dets(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape[-1] == 2:
        return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    return np.linalg.det(A)


# ---------------------------------------------------------------------------
# stored energies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StoredEnergySpec:
    """Isotropic stored energy: singular-value power family or det-only."""

    family: str  # "iso-power" | "det-only"
    h: HFunction
    alpha: float = 2.0
    n: int = 2

    def __post_init__(self):
        if self.family not in ("iso-power", "det-only"):
            raise EnergyError(f"unknown stored family {self.family!r}")
        if self.family == "iso-power" and self.alpha < self.n:
            raise EnergyError("iso-power requires alpha >= n")

    @staticmethod
    def iso_power(alpha: float = 2.0, n: int = 2, h: HFunction | None = None):
        return StoredEnergySpec("iso-power", h or HFunction("poly", n), alpha, n)

    @staticmethod
    def det_only(n: int = 2, h: HFunction | None = None):
        return StoredEnergySpec("det-only", h or HFunction("balanced", n), 0.0, n)

    def eval(self, A: np.ndarray) -> np.ndarray:
        A = np.asarray(A, dtype=float)
        det = _dets(A)
        if np.any(det <= 0):
            raise EnergyError("stored energy needs det A > 0")
        if self.family == "det-only":
            return self.h(det)
        v = _singular_values(A)
        return (np.sum(v ** self.alpha, axis=-1)
                + det * np.sum(v ** -self.alpha, axis=-1)
                + self.h(det))

    def dA(self, A: np.ndarray) -> np.ndarray:
        """dPsi/dA for 2x2 batches."""
        A = np.asarray(A, dtype=float)
        det = _dets(A)
        invT = np.empty_like(A)  # det * A^{-T}, the cofactor matrix
        invT[..., 0, 0] = A[..., 1, 1]
        invT[..., 0, 1] = -A[..., 1, 0]
        invT[..., 1, 0] = -A[..., 0, 1]
        invT[..., 1, 1] = A[..., 0, 0]
        if self.family == "det-only":
            return self.h.deriv(det)[..., None, None] * invT
        U, s, V = svd_2x2(A)
        al = self.alpha
        sumsa = np.sum(s ** -al, axis=-1)
        g = np.empty_like(s)
        for i in (0, 1):
            other = s[..., 1 - i]
            g[..., i] = (al * s[..., i] ** (al - 1)
                         + other * sumsa
                         - al * det * s[..., i] ** (-al - 1)
                         + self.h.deriv(det) * other)
        return np.einsum("...ik,...k,...jk->...ij", U, g, V)

    def to_json(self) -> dict:
        out = {"family": self.family, "h": self.h.to_json(), "n": self.n}
        if self.family == "iso-power":
            out["alpha"] = self.alpha
        return out

    @staticmethod
    def from_json(obj: dict) -> "StoredEnergySpec":
        return StoredEnergySpec(obj["family"], HFunction.from_json(obj.get("h", {})),
                                float(obj.get("alpha", 2.0)), int(obj.get("n", 2)))


def eval_Psi(spec: StoredEnergySpec, A: np.ndarray):
    out = spec.eval(A)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# fidelity terms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FidelitySpec:
    """Intensity mismatch term f(c1, c2, det A).

    "g" form: (1 + d) |c1-c2|^2 / epsilon.  "mass" form:
    (1 + 1/d) |c1 - c2 d|^2, which vanishes when intensity is transported.
    """

    family: str  # "g" | "mass"
    epsilon: float = 1.0

    def __post_init__(self):
        if self.family not in ("g", "mass"):
            raise EnergyError(f"unknown fidelity family {self.family!r}")
        if self.epsilon <= 0:
            raise EnergyError("epsilon must be positive")

    @staticmethod
    def gform(epsilon: float = 1.0) -> "FidelitySpec":
        return FidelitySpec("g", epsilon)

    @staticmethod
    def mass() -> "FidelitySpec":
        return FidelitySpec("mass")

    def f(self, c1, c2, delta):
        c1 = np.atleast_1d(np.asarray(c1, dtype=float))
        c2 = np.atleast_1d(np.asarray(c2, dtype=float))
        delta = np.asarray(delta, dtype=float)
        if self.family == "g":
            return (1.0 + delta) * np.sum((c1 - c2) ** 2, axis=-1) / self.epsilon
        r = c1 - c2 * delta[..., None]
        return (1.0 + 1.0 / delta) * np.sum(r ** 2, axis=-1)

    def df_ddelta(self, c1, c2, delta):
        c1, c2 = np.atleast_1d(c1).astype(float), np.atleast_1d(c2).astype(float)
        delta = np.asarray(delta, dtype=float)
        if self.family == "g":
            return np.sum((c1 - c2) ** 2, axis=-1) / self.epsilon
        r = c1 - c2 * delta[..., None]
        return (-delta ** -2 * np.sum(r ** 2, axis=-1)
                - 2.0 * (1.0 + 1.0 / delta) * np.sum(r * c2, axis=-1))

    def df_dc2(self, c1, c2, delta):
        c1, c2 = np.atleast_1d(c1).astype(float), np.atleast_1d(c2).astype(float)
        delta = np.asarray(delta, dtype=float)
        if self.family == "g":
            return -2.0 * (1.0 + delta)[..., None] * (c1 - c2) / self.epsilon
        r = c1 - c2 * delta[..., None]
        return -2.0 * ((1.0 + 1.0 / delta) * delta)[..., None] * r

    def to_json(self) -> dict:
        out = {"family": self.family}
        if self.family == "g":
            out["epsilon"] = self.epsilon
        return out

    @staticmethod
    def from_json(obj: dict) -> "FidelitySpec":
        return FidelitySpec(obj["family"], float(obj.get("epsilon", 1.0)))


# ---------------------------------------------------------------------------
# the full integrand
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergySpec:
    stored: StoredEnergySpec
    fidelity: FidelitySpec
    n: int = 2

    @staticmethod
    def default(n: int = 2, epsilon: float = 1.0) -> "EnergySpec":
        return EnergySpec(StoredEnergySpec.iso_power(n=n), FidelitySpec.gform(epsilon), n)

    @staticmethod
    def default_mass(n: int = 2) -> "EnergySpec":
        return EnergySpec(StoredEnergySpec.iso_power(n=n), FidelitySpec.mass(), n)

    def psi(self, c1, c2, A):
        A = np.asarray(A, dtype=float)
        det = _dets(A)
        if np.any(det <= 0):
            raise EnergyError("psi needs det A > 0")
        return self.stored.eval(A) + self.fidelity.f(c1, c2, det)

    def to_json(self) -> dict:
        return {"stored": self.stored.to_json(),
                "fidelity": self.fidelity.to_json(), "n": self.n}

    @staticmethod
    def from_json(obj: dict) -> "EnergySpec":
        return EnergySpec(StoredEnergySpec.from_json(obj["stored"]),
                          FidelitySpec.from_json(obj["fidelity"]),
                          int(obj.get("n", 2)))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @staticmethod
    def loads(text: str) -> "EnergySpec":
        return EnergySpec.from_json(json.loads(text))


def eval_psi(spec: EnergySpec, c1, c2, A):
    out = spec.psi(c1, c2, A)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SecondOrderSpec:
    """Integrand of the second-order model: h(det) + (1+det)|c1-c2|^2 + |D^2 y|^m."""

    h: HFunction = field(default_factory=lambda: HFunction("balanced"))
    m: float = 2.0
    n: int = 2

    def __post_init__(self):
        if self.m < max(1.0, self.n / 2.0):
            raise EnergyError("exponent m must be >= max(1, n/2)")
        if not float(self.h(1e-6)) > float(self.h(1.0)) + 1e3:
            raise EnergyError("h must blow up as det -> 0")

    def to_json(self) -> dict:
        return {"h": self.h.to_json(), "m": self.m, "n": self.n}

    @staticmethod
    def from_json(obj: dict) -> "SecondOrderSpec":
        return SecondOrderSpec(HFunction.from_json(obj.get("h", {"family": "balanced"})),
                               float(obj.get("m", 2.0)), int(obj.get("n", 2)))


# ---------------------------------------------------------------------------
# random samples for the checkers
# ---------------------------------------------------------------------------

def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_posdet_matrix(rng: np.random.Generator, n: int,
                         sv_range=(0.4, 2.5)) -> np.ndarray:
    """Matrix with det > 0 and singular values inside sv_range."""
    u = random_rotation(rng, n)
    v = random_rotation(rng, n)
    s = rng.uniform(*sv_range, size=n)
    return u @ np.diag(s) @ v.T


def check_isotropy(spec: EnergySpec, trials: int = 1000, seed: int = 0) -> float:
    """Max |psi(c1,c2,QAR) - psi(c1,c2,A)| over random rotations Q, R."""
    rng = np.random.default_rng(seed)
    n = spec.n
    worst = 0.0
    for _ in range(trials):
        c1 = rng.uniform(0, 1, size=1)
        c2 = rng.uniform(0, 1, size=1)
        A = random_posdet_matrix(rng, n)
        Q = random_rotation(rng, n)
        R = random_rotation(rng, n)
        worst = max(worst, abs(float(spec.psi(c1, c2, Q @ A @ R))
                               - float(spec.psi(c1, c2, A))))
    return worst


def check_interchange(spec: EnergySpec, trials: int = 1000, seed: int = 0) -> float:
    """Max |psi(c1,c2,A) - psi(c2,c1,A^-1) det A| over random samples."""
    rng = np.random.default_rng(seed)
    n = spec.n
    worst = 0.0
    for _ in range(trials):
        c1 = rng.uniform(0, 1, size=1)
        c2 = rng.uniform(0, 1, size=1)
        A = random_posdet_matrix(rng, n)
        det = float(np.linalg.det(A))
        lhs = float(spec.psi(c1, c2, A))
        rhs = float(spec.psi(c2, c1, np.linalg.inv(A))) * det
        worst = max(worst, abs(lhs - rhs))
    return worst


def check_fidelity_reflection(fid: FidelitySpec, trials: int = 1000, seed: int = 0) -> float:
    """Max |f(c1,c2,d) - d f(c2,c1,1/d)|."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c1 = rng.uniform(0, 1, size=1)
        c2 = rng.uniform(0, 1, size=1)
        d = rng.uniform(0.2, 5.0)
        worst = max(worst, abs(float(fid.f(c1, c2, d))
                               - d * float(fid.f(c2, c1, 1.0 / d))))
    return worst


def check_psi_reflection(stored: StoredEnergySpec, trials: int = 1000, seed: int = 0) -> float:
    """Max |Psi(A) - det A * Psi(A^-1)|."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        A = random_posdet_matrix(rng, stored.n)
        det = float(np.linalg.det(A))
        worst = max(worst, abs(float(stored.eval(A))
                               - det * float(stored.eval(np.linalg.inv(A)))))
    return worst


def check_zero_set(spec: EnergySpec, trials: int = 1000, seed: int = 0):
    """(max psi on the zero set, min psi at distance >= 1e-2 from it).

    Zero set: c1 = c2 (g form) or c1 = c2 det A (mass form) together with
    A in SO(n).
    """
    rng = np.random.default_rng(seed)
    n = spec.n
    on_zero = 0.0
    off_zero = np.inf
    for _ in range(trials):
        R = random_rotation(rng, n)
        c = rng.uniform(0, 1, size=1)
        if spec.fidelity.family == "g":
            on_zero = max(on_zero, abs(float(spec.psi(c, c, R))))
        else:
            on_zero = max(on_zero, abs(float(spec.psi(c, c, R))))  # det R = 1
        # perturb either the matrix or the intensities by at least 1e-2
        c2 = np.clip(c + rng.choice([-1, 1]) * rng.uniform(1e-2, 0.3, size=1), 0, 1)
        if abs(float(c2[0] - c[0])) < 1e-2:
            c2 = np.clip(c - math.copysign(1.5e-2, float(c[0]) - 0.5), 0, 1)
        off_zero = min(off_zero, float(spec.psi(c, c2, R)))
        lam = 1.0 + rng.choice([-1, 1]) * rng.uniform(1e-2, 0.5)
        off_zero = min(off_zero, float(spec.psi(c, c, lam * R)))
    return on_zero, off_zero


def verify_suite(spec: EnergySpec, trials: int = 1000, seed: int = 0) -> dict:
    """All identity checkers at once; returns max deviations and thresholds."""
    on_zero, off_zero = check_zero_set(spec, trials, seed)
    hcond = spec.stored.h.check_conditions()
    report = {
        "isotropy": check_isotropy(spec, trials, seed),
        "interchange": check_interchange(spec, trials, seed),
        "fidelity_reflection": check_fidelity_reflection(spec.fidelity, trials, seed),
        "psi_reflection": check_psi_reflection(spec.stored, trials, seed),
        "zero_set_on": on_zero,
        "zero_set_off_min": off_zero,
        "h_conditions": hcond,
    }
    ok = (report["isotropy"] <= 1e-9 and report["interchange"] <= 1e-9
          and report["fidelity_reflection"] <= 1e-9
          and report["psi_reflection"] <= 1e-9
          and report["zero_set_on"] <= 1e-12 and report["zero_set_off_min"] >= 1e-6
          and hcond["reflection"] <= 1e-10 and hcond["convex"]
          and hcond.get("h_prime_1_error", 0.0) <= 1e-6)
    report["passed"] = bool(ok)
    return report


# ---------------------------------------------------------------------------
# discretized functionals
# ---------------------------------------------------------------------------

@dataclass
class EnergyBreakdown:
    stored: float
    fidelity: float
    second_order: float = 0.0

    @property
    def total(self) -> float:
        return self.stored + self.fidelity + self.second_order

    def to_json(self) -> dict:
        return {"stored": self.stored, "fidelity": self.fidelity,
                "second_order": self.second_order, "total": self.total}


def _require_valid(deformation: MeshDeformation, full: bool = False):
    dets = deformation.dets()
    if np.any(dets <= 0):
        report = validate_homeomorphism(deformation, check_overlap=False)
        raise EnergyError(f"invalid deformation: {report.summary()}")
    if full:
        report = validate_homeomorphism(deformation)
        if not report.passed:
            raise EnergyError(f"invalid deformation: {report.summary()}")


def energy_first_order(spec: EnergySpec, P1: GridImage, P2: GridImage,
                       deformation: MeshDeformation, order: int = 1,
                       clamp_tol: float = 1e-6, check: bool = True) -> EnergyBreakdown:
    """Quadrature of psi(c1(x), c2(y(x)), Dy(x)) over the source domain."""
    if check:
        _require_valid(deformation)
    mesh = deformation.mesh
    F = deformation.gradients()
    dets = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    stored = float(np.sum(mesh.ref_areas * spec.stored.eval(F)))
    pts, w, tri = quadrature_points(mesh, order)
    c1 = P1.sample(pts, clamp_tol=clamp_tol)
    p = deformation.positions[mesh.triangles]
    if order == 1:
        mapped = p.mean(axis=1)
    else:
        mapped = np.stack([(p[:, 0] + p[:, 1]) / 2, (p[:, 1] + p[:, 2]) / 2,
                           (p[:, 2] + p[:, 0]) / 2], axis=1).reshape(-1, 2)
    c2 = P2.sample(mapped, clamp_tol=clamp_tol)
    fid = float(np.sum(w * spec.fidelity.f(c1, c2, dets[tri])))
    return EnergyBreakdown(stored, fid)


def energy_inverse_form(spec: EnergySpec, P1: GridImage, P2: GridImage,
                        deformation: MeshDeformation, order: int = 1,
                        clamp_tol: float = 1e-6) -> float:
    """The same energy by quadrature over the deformed domain via xi = y^-1.

    With order=1 the quadrature points match the forward rule exactly, so this
    is an algebraic consistency oracle; order=2 uses independent points and
    differs from the forward value at quadrature order for rough images.
    """
    _require_valid(deformation)
    mesh = deformation.mesh
    F = deformation.gradients()
    dets = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    z, x, w, tri = _deformed_quadrature(deformation, order)
    c1 = P1.sample(x, clamp_tol=clamp_tol)
    c2 = P2.sample(z, clamp_tol=clamp_tol)
    dens = spec.stored.eval(F)[tri] + spec.fidelity.f(c1, c2, dets[tri])
    return float(np.sum(w * dens / dets[tri]))


DET_FLOOR = 1e-10


def gradient(spec: EnergySpec, P1: GridImage, P2: GridImage,
             deformation: MeshDeformation, clamp_tol: float = 1e-6,
             project_boundary: bool = True) -> np.ndarray:
    """Exact gradient of the discretized (midpoint-rule) energy per node.

    Rows of boundary nodes are projected onto the tangent of the target
    polygon so the result is the gradient within the sliding-boundary class.
    """
    mesh = deformation.mesh
    F = deformation.gradients()
    dets = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(dets < DET_FLOOR):
        raise EnergyError("near-degenerate element (det below floor); "
                          "increase the barrier weight")
    a = mesh.ref_areas
    pts, w, tri = quadrature_points(mesh, 1)
    c1 = P1.sample(pts, clamp_tol=clamp_tol)
    mapped = deformation.positions[mesh.triangles].mean(axis=1)
    c2, gradc2 = P2.sample_with_gradient(mapped, clamp_tol=clamp_tol)

    dPsi = spec.stored.dA(F)                       # (T,2,2)
    dfdd = spec.fidelity.df_ddelta(c1, c2, dets)   # (T,)
    dfdc2 = spec.fidelity.df_dc2(c1, c2, dets)     # (T,m)
    cof = np.empty_like(F)                          # det * F^{-T}
    cof[:, 0, 0] = F[:, 1, 1]
    cof[:, 0, 1] = -F[:, 1, 0]
    cof[:, 1, 0] = -F[:, 0, 1]
    cof[:, 1, 1] = F[:, 0, 0]

    dE_dF = dPsi + dfdd[:, None, None] * cof        # (T,2,2)
    per_vertex = np.einsum("t,tab,tvb->tva", a, dE_dF, mesh.shape_grads)
    # image term: d c2(y)/dP_v = gradc2 * (1/3) per vertex of the triangle
    img = np.einsum("t,tm,tma->ta", w, dfdc2, gradc2) / 3.0  # (T,2)
    per_vertex = per_vertex + img[:, None, :]

    out = np.zeros_like(deformation.positions)
    np.add.at(out, mesh.triangles.ravel(), per_vertex.reshape(-1, 2))

    if project_boundary:
        bp = BoundaryParam(deformation.target)
        idx = mesh.boundary_cycle
        t = bp.project(deformation.positions[idx])
        tan = bp.tangent(t)
        out[idx] = tan * np.einsum("ka,ka->k", out[idx], tan)[:, None]
    return out


def jensen_bound_check(spec: StoredEnergySpec, deformation: MeshDeformation,
                       M: np.ndarray) -> tuple[float, float]:
    """(area-weighted mean of h(det Dy), h(det M)) for a det-only energy.

    The deformation target must be the affine image M * (source domain).
    """
    if spec.family != "det-only":
        raise EnergyError("jensen bound applies to det-only stored energies")
    M = np.asarray(M, dtype=float)
    expected = deformation.mesh.domain.transformed(M)
    sym = expected.shapely().symmetric_difference(deformation.target.shapely()).area
    if sym > 1e-8 * max(1.0, expected.area):
        raise EnergyError("deformation target is not the affine image of the source")
    a = deformation.mesh.ref_areas
    dets = deformation.dets()
    if np.any(dets <= 0):
        raise EnergyError("deformation must be orientation-preserving")
    lhs = float(np.sum(a * spec.h(dets)) / np.sum(a))
    rhs = float(spec.h(float(np.linalg.det(M))))
    return lhs, rhs
