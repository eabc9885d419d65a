import numpy as np
import pytest

from elastireg import (
    AffineMap,
    Domain2,
    GridImage,
    ImageError,
    MeshDeformation,
    Signal1D,
    build_mesh,
    change_of_variables_check,
    make_related_pair,
    pullback,
    quadrature_points,
    read_pgm,
    write_pgm,
)
from elastireg.solve import random_deformation_onto

UNIT_SQUARE = Domain2.rectangle(1.0, 1.0)


def checkerboard(n=4):
    fn = lambda p: ((np.floor(p[:, 0] * n) + np.floor(p[:, 1] * n)) % 2)
    return GridImage.from_function(fn, UNIT_SQUARE, n, n, "nearest")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def test_sample_constant():
    img = GridImage.constant(0.5, UNIT_SQUARE)
    pts = np.array([[0.1, 0.9], [0.5, 0.5], [0.99, 0.01]])
    assert np.allclose(img.sample(pts), 0.5)


def test_sample_checkerboard_cell_centers():
    img = checkerboard(4)
    centers = img.cell_centers().reshape(-1, 2)
    vals = img.sample(centers)[:, 0]
    expect = (np.floor(centers[:, 0] * 4) + np.floor(centers[:, 1] * 4)) % 2
    assert np.array_equal(vals, expect)


def test_sample_bilinear_midpoint():
    samples = np.array([[0.0, 0.0], [1.0, 1.0]])[..., None]
    img = GridImage(UNIT_SQUARE, samples, "bilinear")
    # midpoint of the four cell centers blends corners 0,0,1,1 to 0.5
    assert abs(img.sample(np.array([[0.5, 0.5]]))[0, 0] - 0.5) <= 1e-12


def test_sample_clips_to_unit_interval():
    img = GridImage(UNIT_SQUARE, np.array([[0.0, 0.0], [1.0, 1.0]])[..., None],
                    "bilinear")
    pts = np.random.default_rng(0).uniform(0, 1, size=(50, 2))
    v = img.sample(pts)
    assert v.min() >= 0.0 and v.max() <= 1.0


def test_sample_rejects_far_outside():
    img = GridImage.constant(0.5, UNIT_SQUARE)
    with pytest.raises(ImageError):
        img.sample(np.array([[5.0, 5.0]]))


# ---------------------------------------------------------------------------
# related pairs
# ---------------------------------------------------------------------------

def test_related_pair_identity():
    img = checkerboard()
    out = make_related_pair(img, AffineMap(np.eye(2), np.zeros(2)))
    assert np.allclose(out.samples, img.samples)


def test_related_pair_magnified_intensity():
    img = checkerboard()
    out = make_related_pair(img, AffineMap(2.0 * np.eye(2), np.zeros(2)))
    x = np.array([[0.3, 0.6], [0.1, 0.1]])
    assert np.allclose(out.sample(2.0 * x), img.sample(x))


def test_related_pair_mass_mode_conserves_mass():
    fn = lambda p: 0.2 + 0.5 * p[:, 0]
    img = GridImage.from_function(fn, UNIT_SQUARE, 64, 64, "bilinear")
    out = make_related_pair(img, AffineMap(2.0 * np.eye(2), np.zeros(2)),
                            mode="mass", resolution=(128, 128))
    assert np.allclose(out.samples.max(), img.samples.max() / 4.0)
    assert abs(out.integral()[0] - img.integral()[0]) <= 5e-3


def test_related_pair_mass_overflow_rejected():
    img = GridImage.constant(0.9, UNIT_SQUARE)
    shrink = AffineMap(0.5 * np.eye(2), np.zeros(2))  # det 0.25 < intensities
    with pytest.raises(ImageError):
        make_related_pair(img, shrink, mode="mass")


# ---------------------------------------------------------------------------
# pullback and change of variables
# ---------------------------------------------------------------------------

def test_pullback_identity_equals_direct_samples():
    img = checkerboard()
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = mesh.identity_deformation()
    pts, _, _ = quadrature_points(mesh, 1)
    assert np.allclose(pullback(img, d), img.sample(pts))


def test_pullback_scaling_radial_ramp():
    big = Domain2.rectangle(2.0, 2.0)
    ramp = GridImage.from_function(lambda p: np.linalg.norm(p, axis=1) / 3.0,
                                   big, 256, 256, "bilinear")
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = MeshDeformation(mesh, 2.0 * mesh.nodes, big)
    pts, _, _ = quadrature_points(mesh, 1)
    got = pullback(ramp, d)[:, 0]
    expect = np.linalg.norm(2.0 * pts, axis=1) / 3.0
    assert np.abs(got - expect).max() <= 2e-2  # resampling error


def test_change_of_variables_identity():
    img = checkerboard()
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    assert change_of_variables_check(img, mesh.identity_deformation()) <= 1e-14


def test_change_of_variables_scaling_constant():
    big = Domain2.rectangle(2.0, 2.0)
    img = GridImage.constant(0.25, big)
    mesh = build_mesh(UNIT_SQUARE, 0.25)
    d = MeshDeformation(mesh, 2.0 * mesh.nodes, big)
    assert change_of_variables_check(img, d) <= 1e-10


def test_change_of_variables_refines():
    rng = np.random.default_rng(5)
    M = np.array([[1.2, 0.1], [0.0, 0.9]])
    big = Domain2.rectangle(2.0, 2.0, (-0.2, -0.2))
    smooth = GridImage.from_function(
        lambda p: 0.5 + 0.4 * np.sin(2 * p[:, 0]) * np.cos(3 * p[:, 1]),
        big, 128, 128, "bilinear")
    res = []
    for h in (0.25, 0.125):
        mesh = build_mesh(UNIT_SQUARE, h)
        d = random_deformation_onto(mesh, M, rng, amplitude=0.05)
        res.append(change_of_variables_check(smooth, d))
    assert res[1] <= max(res[0], 1e-4)


# ---------------------------------------------------------------------------
# I/O and 1D signals
# ---------------------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = checkerboard()
    path = tmp_path / "img.pgm"
    write_pgm(img, path)
    back = read_pgm(path)
    assert np.abs(back.samples - img.samples).max() <= 1.0 / 255.0


def test_grid_csv_roundtrip():
    img = checkerboard()
    back = GridImage.from_csv(img.to_csv(), interpolation="nearest")
    assert np.allclose(back.samples, img.samples)
    assert np.allclose(back.domain.vertices, img.domain.vertices)


def test_signal_indicator_values():
    sig = Signal1D.indicator(0.0, 0.5, 512)
    x = np.array([0.1, 0.3, 0.49, 0.51, 0.9])
    assert np.array_equal(sig(x), [1.0, 1.0, 1.0, 0.0, 0.0])


def test_signal_csv_roundtrip():
    sig = Signal1D.indicator(0.25, 0.75, 64)
    back = Signal1D.from_csv(sig.to_csv())
    assert np.array_equal(back.samples, sig.samples)
