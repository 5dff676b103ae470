import math

import numpy as np
import pytest

from adaptiga import GeometryError, LevelSequence, NurbsGeometry, identity_square, quarter_annulus
from adaptiga.geometry import get_geometry, rectangle


def test_identity_map():
    geom = identity_square()
    t = np.random.default_rng(0).random((20, 2))
    x, jac, hess = geom.evaluate(t, 2)
    np.testing.assert_allclose(x, t, atol=1e-15)
    np.testing.assert_allclose(jac, np.broadcast_to(np.eye(2), jac.shape), atol=1e-15)
    assert np.abs(hess).max() <= 1e-14


def test_annulus_is_exact():
    geom = quarter_annulus()
    t = np.random.default_rng(1).random((200, 2))
    x = geom.map(t)
    r = np.hypot(x[:, 0], x[:, 1])
    np.testing.assert_allclose(r, 1 + t[:, 0], atol=1e-14)
    assert np.all(x >= -1e-15)
    # orientation: t1 radial, t2 counterclockwise
    assert geom.map(np.array([[0.0, 0.0]]))[0] == pytest.approx([1.0, 0.0])
    assert geom.map(np.array([[1.0, 1.0]]))[0] == pytest.approx([0.0, 2.0])


def test_annulus_area():
    geom = quarter_annulus()
    lv = LevelSequence.uniform((2, 2), (4, 4))
    area = sum(geom.element_area(tuple(tuple(float(v) for v in lv.element_bounds(0, d, c[d]))
                                       for d in range(2)), 8)
               for c in np.ndindex(4, 4))
    assert area == pytest.approx(3 * math.pi / 4, rel=1e-12)


def test_derivatives_by_differences():
    geom = quarter_annulus()
    t = np.random.default_rng(2).uniform(0.1, 0.9, (30, 2))
    _, jac, hess = geom.evaluate(t, 2)
    eps = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = eps
        x_p, j_p, _ = geom.evaluate(t + e, 1)
        x_m, j_m, _ = geom.evaluate(t - e, 1)
        np.testing.assert_allclose((x_p - x_m) / (2 * eps), jac[:, :, a], atol=1e-8)
        np.testing.assert_allclose((j_p - j_m) / (2 * eps), hess[:, :, :, a], atol=1e-7)


def test_evaluate_grid_matches_pointwise():
    geom = quarter_annulus()
    rng = np.random.default_rng(3)
    t1 = np.sort(rng.random((5, 3)), axis=1)
    t2 = np.sort(rng.random((5, 4)), axis=1)
    x, dx, ddx = geom.evaluate_grid(t1, t2, 2)
    pts = np.stack([np.repeat(t1, 4, axis=1), np.tile(t2, (1, 3))], axis=-1).reshape(-1, 2)
    x2, dx2, ddx2 = geom.evaluate(pts, 2)
    np.testing.assert_allclose(x.reshape(-1, 2), x2, atol=1e-14)
    np.testing.assert_allclose(dx.reshape(dx2.shape), dx2, atol=1e-13)
    np.testing.assert_allclose(ddx.reshape(ddx2.shape), ddx2, atol=1e-12)


def test_inverse():
    geom = quarter_annulus()
    t = np.random.default_rng(4).random((50, 2))
    np.testing.assert_allclose(geom.inverse(geom.map(t)), t, atol=1e-12)


def test_size_ratio_and_child_reduction():
    # the physical/parametric size ratio stays bounded and children shrink
    geom = quarter_annulus()
    ratios, rho = [], 0.0
    for level in range(4):
        n = 2 ** level
        h = 1.0 / n
        for c in [(0, 0), (n - 1, n - 1), (n // 2, 0)]:
            box = ((c[0] * h, (c[0] + 1) * h), (c[1] * h, (c[1] + 1) * h))
            size = geom.element_size(box)
            ratios.append(size / h)
            child = ((box[0][0], box[0][0] + h / 2), (box[1][0], box[1][0] + h / 2))
            rho = max(rho, geom.element_area(child) / geom.element_area(box))
    assert 1.0 <= min(ratios) and max(ratios) <= 2.0
    assert rho < 1.0


def test_jacobian_sample():
    info = quarter_annulus().jacobian_sample()
    assert info["det_min"] > 0
    assert info["cond_max"] < 10


def test_text_round_trip(tmp_path):
    geom = quarter_annulus(0.5, 3.0)
    path = tmp_path / "annulus.txt"
    geom.save(path)
    back = NurbsGeometry.load(path)
    np.testing.assert_array_equal(back.control, geom.control)
    np.testing.assert_array_equal(back.weights, geom.weights)
    assert get_geometry(str(path)).degrees == (1, 2)


def test_bad_geometry_files(tmp_path):
    with pytest.raises(GeometryError):
        NurbsGeometry.from_text("dim 2\ndegrees 1 1\nknots1 0:2 1:2\npoints\n0 0 1\n")
    with pytest.raises(GeometryError):
        NurbsGeometry.from_text("size 3\n")
    with pytest.raises(GeometryError):
        NurbsGeometry.load(tmp_path / "missing.txt")
    with pytest.raises(GeometryError):
        NurbsGeometry(identity_square().kvs, identity_square().control, -np.ones((2, 2)))


def test_rectangle_preset():
    geom = rectangle(0.0, 2.0, 1.0, 2.0)
    assert geom.element_area(((0, 1), (0, 1))) == pytest.approx(2.0)
    assert isinstance(get_geometry("square"), NurbsGeometry)
