import numpy as np
import pytest

from adaptiga import HB, THB, HierBasis, HierMesh, LevelSequence
from adaptiga.basis import truncate_coefficients
from adaptiga.checks import random_refinement


@pytest.fixture
def refined_mesh():
    rng = np.random.default_rng(7)
    lv = LevelSequence.uniform((2, 2), (4, 4))
    return random_refinement(rng, lv, 2, "T", 3, fraction=0.2)[-1][0]


def test_unrefined_free_dofs():
    basis = HierBasis(HierMesh.initial(LevelSequence.uniform((2, 2), (4, 4))))
    assert len(basis) == 36
    assert len(basis.free_dofs()) == 16


def test_fully_refined_equals_level_one_tensor():
    lv = LevelSequence.uniform((2, 2), (4, 4))
    mesh = HierMesh.initial(lv).refine_uniform()
    for flavor in (HB, THB):
        basis = HierBasis(mesh, flavor)
        assert len(basis) == 100
        assert all(lev == 1 for lev, _ in basis.ids)
        assert len(basis.free_dofs()) == 64


@pytest.mark.parametrize("flavor", [HB, THB])
def test_boundary_functions_by_sampling(refined_mesh, flavor):
    basis = HierBasis(refined_mesh, flavor)
    s = np.linspace(0, 1, 50)
    zero, one = np.zeros_like(s), np.ones_like(s)
    pts = np.concatenate([np.stack(v, 1) for v in
                          [(s, zero), (s, one), (zero, s), (one, s)]])
    vals = np.abs(basis.evaluate_functions(pts)).max(axis=0)
    mask = basis.boundary_mask()
    assert np.all(vals[mask] > 0)
    assert vals[~mask].max() <= 1e-13


def test_thb_partition_of_unity(refined_mesh):
    basis = HierBasis(refined_mesh, THB)
    x = np.random.default_rng(0).random((300, 2))
    np.testing.assert_allclose(basis.evaluate_functions(x).sum(1), 1.0, atol=1e-13)


def test_hb_thb_same_span(refined_mesh):
    hb, thb = HierBasis(refined_mesh, HB), HierBasis(refined_mesh, THB)
    assert len(hb) == len(thb)
    assert [fid for fid in hb.ids] == [fid for fid in thb.ids]
    x = np.random.default_rng(1).random((400, 2))
    a, b = hb.evaluate_functions(x), thb.evaluate_functions(x)
    coef, *_ = np.linalg.lstsq(a, b, rcond=None)
    assert np.abs(a @ coef - b).max() <= 1e-10


def test_nestedness_under_refinement(refined_mesh):
    rng = np.random.default_rng(2)
    coarse = HierBasis(refined_mesh, THB)
    act = refined_mesh.active_elements()
    finer = refined_mesh.refine([act[0], act[-1]], 2, "T")
    fine = HierBasis(finer, THB)
    c = rng.standard_normal(len(coarse))
    c2 = fine.quasi_interpolant(lambda t: coarse.evaluate(c, t))
    x = rng.random((300, 2))
    assert np.abs(fine.evaluate(c2, x) - coarse.evaluate(c, x)).max() <= 1e-10


def test_level_span_bound():
    rng = np.random.default_rng(3)
    lv = LevelSequence.uniform((3, 3), (2, 2))
    for kind, flavor in (("H", HB), ("T", THB)):
        for mu in (2, 3):
            mesh = random_refinement(rng, lv, mu, kind, 4, fraction=0.2)[-1][0]
            basis = HierBasis(mesh, flavor)
            assert max(basis.level_span(*q) for q in mesh.active_elements()) <= mu


def test_evaluate_derivatives_by_differences(refined_mesh):
    basis = HierBasis(refined_mesh, THB)
    rng = np.random.default_rng(4)
    c = rng.standard_normal(len(basis))
    x = rng.uniform(0.05, 0.95, (50, 2))
    g = basis.evaluate(c, x, 1)
    eps = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = eps
        fd = (basis.evaluate(c, x + e) - basis.evaluate(c, x - e)) / (2 * eps)
        assert np.abs(fd - g[:, d]).max() <= 1e-5 * max(1.0, np.abs(g).max())


def test_truncation_zeroes_covered_functions():
    lv = LevelSequence.uniform((1, 1), (2, 2))
    mesh = HierMesh.initial(lv).bisect([(0, (0, 0)), (0, (1, 0)), (0, (0, 1)), (0, (1, 1))])
    out = truncate_coefficients(mesh, 1, np.ones(lv.shape(1)))
    assert np.all(out == 0)


def test_rejects_unknown_flavor(refined_mesh):
    with pytest.raises(ValueError):
        HierBasis(refined_mesh, "XB")
