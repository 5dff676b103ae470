import numpy as np
import pytest
import scipy.sparse as sp

from adaptiga import (HB, THB, EllipticProblem, HierBasis, HierMesh, LevelSequence, SolverError,
                      assemble, h1_error, identity_square, quarter_annulus, solve, solve_problem)
from adaptiga.checks import random_refinement
from adaptiga.fem import LinearSystem, assemble_full, galerkin_residual
from adaptiga.problems import mapped_spline_problem, polynomial_bubble, sine_problem


def basis_on(p=2, elements=(4, 4), refine=(), flavor=THB, m=1):
    lv = LevelSequence.uniform((p, p), elements, m)
    mesh = HierMesh.initial(lv)
    if refine:
        mesh = mesh.refine(refine, 2, "T")
    return HierBasis(mesh, flavor)


def test_bilinear_stiffness_entry():
    basis = basis_on(1, (2, 2))
    system = assemble(basis, identity_square(), EllipticProblem(f=lambda x: np.ones(len(x))))
    assert system.size == 1
    assert system.matrix[0, 0] == pytest.approx(8 / 3, abs=1e-14)
    # load of the central hat is its integral, 1/4
    assert system.rhs[0] == pytest.approx(0.25, abs=1e-15)


def test_symmetric_stiffness():
    basis = basis_on(3, (2, 2), refine=[(0, (0, 0))])
    mat, _ = assemble_full(basis, quarter_annulus(), sine_problem())
    assert abs(mat - mat.T).max() <= 1e-12 * abs(mat).max()


@pytest.mark.parametrize("flavor", [HB, THB])
def test_bubble_recovered(flavor):
    basis = basis_on(2, (2, 2), refine=[(0, (1, 0))], flavor=flavor)
    problem = polynomial_bubble(2, 2)
    sol = solve_problem(basis, identity_square(), problem)
    l2, h1 = h1_error(sol, identity_square(), problem)
    assert h1 <= 1e-9 and l2 <= 1e-10
    assert np.all(sol.coeffs[basis.boundary_mask()] == 0.0)


def test_galerkin_orthogonality_annulus():
    rng = np.random.default_rng(0)
    basis = basis_on(2, (4, 4), refine=[(0, (1, 1))])
    lv = basis.levels
    space = lv.level_space(0)
    c = np.zeros(space.shape)
    c[1:-1, 1:-1] = rng.standard_normal((4, 4))
    geom = quarter_annulus()
    problem = mapped_spline_problem(geom, space, c)
    sol = solve_problem(basis, geom, problem, tol=1e-13, quad_extra=4)
    res = galerkin_residual(sol, geom, problem, quad_extra=4)
    assert np.abs(res).max() <= 1e-10


def test_quadrature_limits_exactness_on_rational_map():
    # with the default rule the recovered error is quadrature-limited and
    # decreases once more points are used
    rng = np.random.default_rng(1)
    basis = basis_on(2, (2, 2), refine=[(0, (0, 0))])
    space = basis.levels.level_space(0)
    c = np.zeros(space.shape)
    c[1:-1, 1:-1] = rng.standard_normal((2, 2))
    geom = quarter_annulus()
    problem = mapped_spline_problem(geom, space, c)
    errs = [h1_error(solve_problem(basis, geom, problem, tol=1e-13, quad_extra=q), geom, problem,
                     quad_extra=q)[1] for q in (0, 2, 4)]
    assert errs[0] > 1e-9 > errs[1] > errs[2]
    assert errs[2] <= 1e-13


def test_uniform_rate_sine():
    errs, dofs = [], []
    geom, problem = identity_square(), sine_problem()
    for n in (4, 8, 16, 32):
        basis = basis_on(2, (n, n))
        sol = solve_problem(basis, geom, problem)
        errs.append(h1_error(sol, geom, problem)[1])
        dofs.append(int((~basis.boundary_mask()).sum()))
    slope = np.polyfit(np.log(dofs), np.log(errs), 1)[0]
    assert abs(slope + 1.0) <= 0.1


def test_break_lines_integrate_jumps_exactly():
    # the load vector over all functions sums to the integral of f
    # (partition of unity), which a Gauss rule misses when f jumps in an element
    f = lambda x: (x[:, 0] < 0.3).astype(float)  # noqa: E731
    basis = basis_on(2, (4, 4))
    plain = EllipticProblem(f=f)
    split = EllipticProblem(f=f, breaks={0: (0.3,)})
    _, r0 = assemble_full(basis, identity_square(), plain)
    _, r1 = assemble_full(basis, identity_square(), split)
    assert abs(r1.sum() - 0.3) <= 1e-14
    assert abs(r0.sum() - 0.3) > 1e-4


def test_convection_uses_direct_solver():
    problem = EllipticProblem(f=lambda x: np.ones(len(x)),
                              b=lambda x: np.tile([1.0, 0.5], (len(x), 1)),
                              c=lambda x: np.ones(len(x)))
    basis = basis_on(2, (4, 4))
    system = assemble(basis, identity_square(), problem)
    assert not system.symmetric
    with pytest.raises(ValueError):
        solve(system, basis, "cg")
    sol = solve_problem(basis, identity_square(), problem)
    assert sol.residual <= 1e-10


def variable_coefficient_problem() -> EllipticProblem:
    """u = x(1-x)y(1-y) with A = diag(1+x, 2+y); f = -div(A grad u)."""

    def u(x):
        return x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])

    def grad(x):
        a, b = x[:, 0], x[:, 1]
        return np.stack([(1 - 2 * a) * b * (1 - b), a * (1 - a) * (1 - 2 * b)], axis=1)

    def f(x):
        a, b = x[:, 0], x[:, 1]
        g = grad(x)
        return -(g[:, 0] - 2 * (1 + a) * b * (1 - b) + g[:, 1] - 2 * (2 + b) * a * (1 - a))

    def coef(x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = 1 + x[:, 0]
        out[:, 1, 1] = 2 + x[:, 1]
        return out

    def dcoef(x):
        out = np.zeros((len(x), 2, 2, 2))
        out[:, 0, 0, 0] = 1.0
        out[:, 1, 1, 1] = 1.0
        return out

    return EllipticProblem(f=f, A=coef, dA=dcoef, u=u, grad_u=grad, name="variable")


def test_variable_coefficient_exactness():
    problem = variable_coefficient_problem()
    basis = basis_on(2, (2, 2), refine=[(0, (0, 1))])
    sol = solve_problem(basis, identity_square(), problem, tol=1e-13)
    assert h1_error(sol, identity_square(), problem)[1] <= 1e-10


def test_indefinite_coefficient_warns():
    problem = EllipticProblem(f=lambda x: np.ones(len(x)),
                              A=lambda x: np.tile(-np.eye(2), (len(x), 1, 1)))
    with pytest.warns(UserWarning):
        assemble_full(basis_on(1, (2, 2)), identity_square(), problem)


def _system(mat, rhs):
    mat = sp.csr_matrix(mat)
    return LinearSystem(mat, np.asarray(rhs, float), np.arange(mat.shape[0]), mat.shape[0], True)


def test_solve_one_by_one():
    for method in ("cg", "direct"):
        sol = solve(_system([[4.0]], [2.0]), method=method)
        assert sol.coeffs[0] == 0.5


def test_solve_against_dense():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((50, 50))
    a = a @ a.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    ref = np.linalg.solve(a, b)
    for method in ("cg", "direct"):
        assert np.abs(solve(_system(a, b), method=method).coeffs - ref).max() <= 1e-8


def test_solver_error_carries_residual():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((40, 40))
    a = a @ a.T + 1e-3 * np.eye(40)
    with pytest.raises(SolverError) as info:
        solve(_system(a, rng.standard_normal(40)), method="cg", maxiter=2)
    assert info.value.residual > 1e-10


def test_hb_thb_solutions_coincide():
    rng = np.random.default_rng(4)
    lv = LevelSequence.uniform((3, 3), (2, 2))
    mesh = random_refinement(rng, lv, 2, "T", 3, fraction=0.3)[-1][0]
    x = rng.random((100, 2))
    vals = [HierBasis(mesh, fl).evaluate(
        solve_problem(HierBasis(mesh, fl), quarter_annulus(), sine_problem(), "direct").coeffs, x)
        for fl in (HB, THB)]
    assert np.abs(vals[0] - vals[1]).max() <= 1e-8


def test_per_element_errors_sum(tmp_path):
    basis = basis_on(2, (4, 4), refine=[(0, (0, 0))])
    geom, problem = identity_square(), sine_problem()
    sol = solve_problem(basis, geom, problem)
    l2, h1 = h1_error(sol, geom, problem, per_element=True)
    assert len(h1) == basis.mesh.num_elements
    assert np.sqrt(h1.sum()) == pytest.approx(h1_error(sol, geom, problem)[1], rel=1e-12)
    system = assemble(basis, geom, problem)
    system.dump(tmp_path / "k.txt")
    lines = (tmp_path / "k.txt").read_text().splitlines()
    assert len(lines) == system.matrix.nnz
