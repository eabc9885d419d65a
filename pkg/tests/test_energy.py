import numpy as np
import pytest

from elastireg import (
    Domain2,
    EnergyError,
    EnergySpec,
    FidelitySpec,
    GridImage,
    HFunction,
    MeshDeformation,
    StoredEnergySpec,
    build_mesh,
    energy_first_order,
    energy_inverse_form,
    eval_Psi,
    eval_psi,
    gradient,
    jensen_bound_check,
    make_related_pair,
    radial_map,
    verify_suite,
)
from elastireg.energy import (
    check_interchange,
    check_isotropy,
    random_posdet_matrix,
    random_rotation,
    svd_2x2,
)
from elastireg.geometry import AffineMap, Mesh
from elastireg.solve import random_deformation_onto

UNIT_SQUARE = Domain2.rectangle(1.0, 1.0)


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def asymmetric_image(domain=UNIT_SQUARE, n=64):
    fn = lambda p: 0.5 + 0.3 * np.sin(3.1 * p[:, 0] + 0.5) * np.cos(2.3 * p[:, 1]) \
        + 0.15 * p[:, 0]
    return GridImage.from_function(fn, domain, n, n, "bilinear")


# ---------------------------------------------------------------------------
# h function and stored energies
# ---------------------------------------------------------------------------

def test_h_conditions_default():
    rep = HFunction("poly", 2).check_conditions()
    assert rep["convex"] and rep["bounded_below"]
    assert rep["reflection"] <= 1e-10
    assert rep["h_prime_1_error"] <= 1e-6  # h'(1) = -n


def test_h_balanced_vanishes_at_one():
    h = HFunction("balanced", 2)
    assert abs(h(1.0)) <= 1e-15
    assert h.check_conditions()["reflection"] <= 1e-10


def test_svd_2x2_reconstructs():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((200, 2, 2))
    U, s, V = svd_2x2(A)
    rec = np.einsum("...ik,...k,...jk->...ij", U, s, V)
    assert np.abs(rec - A).max() <= 1e-12
    assert np.all(s[..., 0] >= s[..., 1])


def test_Psi_zero_on_rotations():
    spec = StoredEnergySpec.iso_power(n=2)
    for th in np.linspace(0, 2 * np.pi, 9):
        assert abs(eval_Psi(spec, rot(th))) <= 1e-10


def test_Psi_hand_value_diag():
    # alpha=2, A=diag(2, 0.5): sum v^2 + det*sum v^-2 + h(1) = 4.25+4.25-4
    spec = StoredEnergySpec.iso_power(n=2, alpha=2.0)
    assert abs(eval_Psi(spec, np.diag([2.0, 0.5])) - 4.5) <= 1e-12


def test_Psi_scaling_closed_form():
    # A = lam*1: 2 lam^2 + lam^2 * 2 lam^-2 + h(lam^2)
    spec = StoredEnergySpec.iso_power(n=2, alpha=2.0)
    h = HFunction("poly", 2)
    for lam in (0.7, 1.0, 1.8):
        expect = 2 * lam ** 2 + 2 * lam ** 2 * lam ** -2 + h(lam ** 2)
        assert abs(eval_Psi(spec, lam * np.eye(2)) - expect) <= 1e-12
    assert abs(eval_Psi(spec, np.eye(2))) <= 1e-12


def test_Psi_rejects_nonpositive_det():
    spec = StoredEnergySpec.iso_power(n=2)
    with pytest.raises(EnergyError):
        eval_Psi(spec, np.diag([1.0, -1.0]))


# ---------------------------------------------------------------------------
# the full integrand
# ---------------------------------------------------------------------------

def test_psi_zero_on_zero_set():
    spec = EnergySpec.default()
    assert abs(eval_psi(spec, 0.4, 0.4, rot(0.3))) <= 1e-12


def test_psi_mass_zero_when_transported():
    spec = EnergySpec.default_mass()
    A = np.sqrt(2.0) * rot(0.4)  # det 2
    assert abs(spec.fidelity.f(np.array([1.0]), np.array([0.5]),
                               np.array([2.0]))[0]) <= 1e-12
    # psi reduces to the purely elastic part when intensity is transported
    assert abs(eval_psi(spec, 1.0, 0.5, A) - eval_Psi(spec.stored, A)) <= 1e-12


def test_psi_gform_hand_value():
    spec = EnergySpec.default(epsilon=1.0)
    # c1=1, c2=0, A=1: Psi(1)=0, fidelity (1+1)*1 = 2
    assert abs(eval_psi(spec, 1.0, 0.0, np.eye(2)) - 2.0) <= 1e-12


def test_mass_interchange_hand_value():
    fid = FidelitySpec.mass()
    f = fid.f(np.array([1.0]), np.array([1.0]), np.array([2.0]))[0]
    assert abs(f - 1.5) <= 1e-12
    back = 2.0 * fid.f(np.array([1.0]), np.array([1.0]), np.array([0.5]))[0]
    assert abs(back - 1.5) <= 1e-12


def test_checkers_trivial_rotations():
    spec = EnergySpec.default()
    rng = np.random.default_rng(1)
    A = random_posdet_matrix(rng, 2)
    c = rng.uniform(0, 1, 2)
    # Q = R = identity leaves psi unchanged exactly
    assert eval_psi(spec, c[0], c[1], A) == eval_psi(spec, c[0], c[1],
                                                    np.eye(2) @ A @ np.eye(2))


@pytest.mark.parametrize("spec", [
    EnergySpec.default(),
    EnergySpec.default_mass(),
    EnergySpec(StoredEnergySpec.det_only(), FidelitySpec.gform(), 2),
    EnergySpec(StoredEnergySpec.det_only(), FidelitySpec.mass(), 2),
])
def test_verify_suite_passes(spec):
    rep = verify_suite(spec, trials=300, seed=0)
    assert rep["passed"], rep


def test_det_only_isotropy_exact():
    spec = EnergySpec(StoredEnergySpec.det_only(), FidelitySpec.mass(), 2)
    assert check_isotropy(spec, trials=300) <= 1e-12


def test_interchange_diag():
    spec = EnergySpec.default()
    dev = check_interchange(spec, trials=500)
    assert dev <= 1e-9


def test_random_rotation_is_orthogonal():
    rng = np.random.default_rng(2)
    Q = random_rotation(rng, 2)
    assert np.abs(Q @ Q.T - np.eye(2)).max() <= 1e-12
    assert abs(np.linalg.det(Q) - 1.0) <= 1e-12


# ---------------------------------------------------------------------------
# discretized functionals
# ---------------------------------------------------------------------------

def test_energy_identity_matched_pair():
    img = asymmetric_image()
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    bd = energy_first_order(EnergySpec.default(), img, img,
                            mesh.identity_deformation())
    assert bd.total <= 1e-12


def test_energy_magnified_pair_equals_area_times_Psi():
    lam = 1.5
    img = asymmetric_image()
    pair = make_related_pair(img, AffineMap(lam * np.eye(2), np.zeros(2)),
                             resolution=(128, 128))
    mesh = build_mesh(UNIT_SQUARE, 0.125)
    d = MeshDeformation(mesh, lam * mesh.nodes, pair.domain)
    spec = EnergySpec.default()
    bd = energy_first_order(spec, img, pair, d)
    expect = UNIT_SQUARE.area * eval_Psi(spec.stored, lam * np.eye(2))
    assert abs(bd.stored - expect) <= 1e-10
    assert bd.fidelity <= 5e-3  # resampling error only


def test_energy_constant_mismatch():
    P1 = GridImage.constant(1.0, UNIT_SQUARE)
    P2 = GridImage.constant(0.0, UNIT_SQUARE)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    bd = energy_first_order(EnergySpec.default(epsilon=1.0), P1, P2,
                            mesh.identity_deformation())
    assert abs(bd.fidelity - 2.0) <= 1e-12


def test_inverse_form_matches_forward():
    rng = np.random.default_rng(4)
    img1 = asymmetric_image()
    big = Domain2.rectangle(1.6, 1.3)
    img2 = asymmetric_image(big, 96)
    mesh = build_mesh(UNIT_SQUARE, 0.2)
    d = random_deformation_onto(mesh, np.array([[1.5, 0.1], [0.0, 1.2]]), rng,
                                amplitude=0.05)
    spec = EnergySpec.default()
    fwd = energy_first_order(spec, img1, img2, d).total
    inv = energy_inverse_form(spec, img1, img2, d)
    assert abs(fwd - inv) <= 1e-10  # matched order-1 quadrature is algebraic


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    img1 = asymmetric_image()
    img2 = asymmetric_image(Domain2.rectangle(1.2, 1.1), 96)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = random_deformation_onto(mesh, np.array([[1.2, 0.0], [0.0, 1.1]]), rng,
                                amplitude=0.05)
    spec = EnergySpec.default()
    g = gradient(spec, img1, img2, d, project_boundary=False)
    interior = np.flatnonzero(~mesh.is_boundary)
    step = 1e-6
    for k in rng.choice(interior, size=8, replace=False):
        for a in (0, 1):
            pp = d.positions.copy()
            pp[k, a] += step
            fp = energy_first_order(spec, img1, img2,
                                    MeshDeformation(mesh, pp, d.target),
                                    check=False).total
            pp[k, a] -= 2 * step
            fm = energy_first_order(spec, img1, img2,
                                    MeshDeformation(mesh, pp, d.target),
                                    check=False).total
            fd = (fp - fm) / (2 * step)
            assert abs(g[k, a] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_gradient_rejects_degenerate_element():
    mesh = build_mesh(UNIT_SQUARE, 0.5)
    pos = mesh.nodes.copy()
    interior = np.flatnonzero(~mesh.is_boundary)
    # collapse one interior node onto a neighbor
    tri = mesh.triangles[np.any(mesh.triangles == interior[0], axis=1)][0]
    other = tri[tri != interior[0]][0]
    pos[interior[0]] = pos[other]
    d = MeshDeformation(mesh, pos, UNIT_SQUARE)
    img = GridImage.constant(0.5, UNIT_SQUARE)
    with pytest.raises(EnergyError):
        gradient(EnergySpec.default(), img, img, d)


# ---------------------------------------------------------------------------
# averaged lower bound for determinant-only energies
# ---------------------------------------------------------------------------

def test_jensen_affine_equality():
    spec = StoredEnergySpec.det_only()
    M = np.array([[1.3, 0.2], [0.0, 0.8]])
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = MeshDeformation(mesh, mesh.nodes @ M.T, UNIT_SQUARE.transformed(M))
    lhs, rhs = jensen_bound_check(spec, d, M)
    assert abs(lhs - rhs) <= 1e-12


def test_jensen_radial_map_slack():
    # piecewise-det radial construction: slack = l*h(p)+(1-l)*h(q)-h(m) >= 0
    p, q, lam = 0.5, 1.5, 0.5
    h = HFunction("balanced", 2)
    slack = lam * h(p) + (1 - lam) * h(q) - h(lam * p + (1 - lam) * q)
    assert slack >= 0
    rm = radial_map(p, q, lam)
    R = np.linspace(0, 1, 100001)[1:]
    mean = float(np.sum(h(rm.jac_det(R)) * R) / np.sum(R))
    m = lam * p + (1 - lam) * q
    assert mean >= h(m) - 1e-9
    assert abs(mean - (lam * h(p) + (1 - lam) * h(q))) <= 1e-3


def test_jensen_random_deformations():
    spec = StoredEnergySpec.det_only()
    rng = np.random.default_rng(11)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    M = np.array([[1.1, 0.3], [0.0, 0.9]])
    for _ in range(50):
        d = random_deformation_onto(mesh, M, rng)
        lhs, rhs = jensen_bound_check(spec, d, M)
        assert lhs >= rhs - 1e-9


def test_jensen_rejects_wrong_target():
    spec = StoredEnergySpec.det_only()
    mesh = build_mesh(UNIT_SQUARE, 0.5)
    d = mesh.identity_deformation()
    with pytest.raises(EnergyError):
        jensen_bound_check(spec, d, 2.0 * np.eye(2))


# ---------------------------------------------------------------------------
# evaluation-level invariances of the discrete functional
# ---------------------------------------------------------------------------

def test_rigid_motion_equivariance():
    # energy of E2 . y . E1^-1 on rigidly moved copies equals the original
    rng = np.random.default_rng(13)
    img1 = asymmetric_image()
    big = Domain2.rectangle(1.5, 1.4)
    img2 = asymmetric_image(big, 96)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = random_deformation_onto(mesh, np.array([[1.4, 0.1], [0.0, 1.3]]), rng,
                                amplitude=0.05)
    spec = EnergySpec.default()
    base = energy_first_order(spec, img1, img2, d, check=False).total

    E1_R, E1_a = rot(0.0), np.array([0.2, -0.1])  # translation of the source
    E2_R, E2_a = rot(0.7), np.array([0.5, 0.3])   # rotation of the target

    dom1 = img1.domain.transformed(E1_R, E1_a)
    img1m = GridImage(dom1, img1.samples, img1.interpolation)
    # moved target image: sample c2(E2^-1 z) on the moved bounding box
    dom2 = img2.domain.transformed(E2_R, E2_a)
    xmin, ymin, xmax, ymax = dom2.bounding_box
    rect2 = Domain2.rectangle(xmax - xmin, ymax - ymin, (xmin, ymin))
    img2m = GridImage.from_function(
        lambda z: img2.sample((z - E2_a) @ E2_R, clamp_tol=np.inf)[:, 0],
        rect2, 256, 256, img2.interpolation)

    mesh_m = Mesh(mesh.nodes @ E1_R.T + E1_a, mesh.triangles,
                  mesh.boundary_cycle, dom1)
    pos_m = d.positions @ E2_R.T + E2_a
    d_m = MeshDeformation(mesh_m, pos_m, d.target.transformed(E2_R, E2_a))
    moved = energy_first_order(spec, img1m, img2m, d_m, check=False).total
    assert abs(moved - base) <= 5e-3  # limited only by image resampling


def test_interchange_at_evaluation_level():
    # energy(P1, P2, y) equals energy(P2, P1, y^-1) for the discrete map
    rng = np.random.default_rng(17)
    img1 = asymmetric_image()
    big = Domain2.rectangle(1.5, 1.2)
    img2 = asymmetric_image(big, 96)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = random_deformation_onto(mesh, np.array([[1.4, 0.0], [0.1, 1.1]]), rng,
                                amplitude=0.05)
    spec = EnergySpec.default_mass()
    fwd = energy_first_order(spec, img1, img2, d, check=False).total
    # inverse-form quadrature evaluates psi(c1(xi(z)), c2(z), (D xi)^-1) det D xi,
    # which by the interchange identity is the energy of the inverse map
    inv = energy_inverse_form(spec, img1, img2, d)
    assert abs(fwd - inv) <= 1e-10

