"""Galerkin discretization of second-order elliptic problems on hierarchical splines.

The model problem is ``-div(A grad u) + b . grad u + c u = f`` with homogeneous
Dirichlet data on a mapped 2D patch.  Element integrals use tensor Gauss rules
and are computed in batches of elements of the same level.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import HierBasis
from .geometry import GeometryError, NurbsGeometry
from .spline import gauss_rule

log = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    """Linear solver failed to reach the requested residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class EllipticProblem:
    """Coefficients of ``-div(A grad u) + b . grad u + c u = f``.

    Every callback takes physical points of shape ``(n, 2)``.  ``A`` returns
    ``(n, 2, 2)``, ``dA`` returns ``(n, 2, 2, 2)`` with ``dA[:, i, j, k] =
    d A_ij / d x_k``, ``b`` returns ``(n, 2)``, ``c`` and ``f`` return ``(n,)``.
    ``None`` stands for ``A = I`` and ``b = 0``, ``c = 0``.
    """

    f: Field
    A: Optional[Field] = None
    dA: Optional[Field] = None
    b: Optional[Field] = None
    c: Optional[Field] = None
    u: Optional[Field] = None
    grad_u: Optional[Field] = None
    name: str = "problem"
    # parametric lines t_d = c across which the data are not smooth, as
    # {d: (c, ...)}; element rules are split there so that integrals of
    # piecewise smooth data stay accurate
    breaks: dict = field(default_factory=dict)

    @property
    def symmetric(self) -> bool:
        return self.b is None

    @property
    def has_exact(self) -> bool:
        return self.u is not None and self.grad_u is not None

    def coefficient_A(self, x: np.ndarray) -> np.ndarray:
        if self.A is None:
            return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2))
        return np.asarray(self.A(x.reshape(-1, 2))).reshape(x.shape[:-1] + (2, 2))

    def divergence_A(self, x: np.ndarray) -> np.ndarray:
        """Vector ``sum_i dA_ij/dx_i`` (shape ``(..., 2)``)."""
        if self.A is None:
            return np.zeros(x.shape)
        if self.dA is None:
            raise ValueError("the estimator needs dA for a non-identity coefficient A")
        da = np.asarray(self.dA(x.reshape(-1, 2))).reshape(x.shape[:-1] + (2, 2, 2))
        return np.einsum("...iji->...j", da)

    def _eval(self, cb, x, shape, default=0.0):
        if cb is None:
            return np.full(x.shape[:-1] + shape, default)
        return np.asarray(cb(x.reshape(-1, 2)), dtype=float).reshape(x.shape[:-1] + shape)

    def load(self, x):
        return self._eval(self.f, x, ())

    def convection(self, x):
        return self._eval(self.b, x, (2,))

    def reaction(self, x):
        return self._eval(self.c, x, ())


# -- element quadrature ---------------------------------------------------------
@dataclass
class ElementTables:
    """Quadrature data for a batch of same-level elements."""

    level: int
    cells: np.ndarray          # (ne, 2)
    x: np.ndarray              # (ne, nq, 2) physical points
    weights: np.ndarray        # (ne, nq) physical weights |det DF| w
    values: np.ndarray         # (ne, nq, nloc)
    grads: np.ndarray          # (ne, nq, nloc, 2) physical gradients
    hessians: Optional[np.ndarray] = None  # (ne, nq, nloc, 2, 2)
    areas: np.ndarray = field(default=None)  # (ne,)
    t: np.ndarray = field(default=None)      # (ne, nq, 2) parametric points


def _element_geometry(basis: HierBasis, geom: NurbsGeometry, level: int, cells, nq: int,
                      r: int, rules=None):
    """Shared quadrature data: 1D basis tables, physical points and weights,
    inverse Jacobians and second derivatives of the map.

    ``rules`` optionally replaces the per-level Gauss tables by explicit
    per-direction ``(points, weights, basis table)`` triples."""
    lv = basis.levels
    if rules is None:
        rules = [tuple(arr[cells[:, d]] for arr in lv.gauss_table(level, d, nq, r))
                 for d in range(2)]
    (g1, w1, bx), (g2, w2, by) = rules
    ne = cells.shape[0]
    q1, q2 = g1.shape[1], g2.shape[1]
    wq = (w1[:, :, None] * w2[:, None, :]).reshape(ne, q1 * q2)
    t = np.stack([np.broadcast_to(g1[:, :, None], (ne, q1, q2)),
                  np.broadcast_to(g2[:, None, :], (ne, q1, q2))], axis=-1).reshape(ne, q1 * q2, 2)
    x, jac, hess = geom.evaluate_grid(g1, g2, r)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    if np.any(det <= 0.0):
        bad = np.argwhere(det <= 0.0)[0]
        raise GeometryError(f"non-positive Jacobian determinant on element "
                            f"{(level, tuple(cells[bad[0]]))}")
    ji = np.empty_like(jac)
    ji[..., 0, 0] = jac[..., 1, 1] / det
    ji[..., 1, 1] = jac[..., 0, 0] / det
    ji[..., 0, 1] = -jac[..., 0, 1] / det
    ji[..., 1, 0] = -jac[..., 1, 0] / det
    return bx, by, x, wq * det, ji, hess, t


def split_rules(basis: HierBasis, level: int, cells: np.ndarray, nq: int, r: int,
                breaks: dict):
    """Group cells by how many break lines cut them in each direction.

    Yields ``(index, rules)``: ``rules`` is ``None`` for uncut cells (plain
    Gauss tables), otherwise per-direction composite rules with ``nq`` Gauss
    points on every piece between consecutive cuts.
    """
    lv = basis.levels
    if not breaks:
        yield np.arange(len(cells)), None
        return
    cuts, counts = [], []
    for d in range(2):
        lo, hi = (np.asarray(v, dtype=float) for v in lv.element_bounds(level, d, cells[:, d]))
        br = np.array(sorted(float(c) for c in breaks.get(d, ())))
        inside = (br[None, :] > lo[:, None]) & (br[None, :] < hi[:, None])
        cuts.append((lo, hi, br, inside))
        counts.append(inside.sum(axis=1))
    keys = np.stack(counts, axis=1)
    for key in np.unique(keys, axis=0):
        idx = np.flatnonzero(np.all(keys == key, axis=1))
        if not key.any():
            yield idx, None
            continue
        rules = []
        for d in range(2):
            if key[d] == 0:
                rules.append(tuple(arr[cells[idx, d]] for arr in lv.gauss_table(level, d, nq, r)))
                continue
            lo, hi, br, inside = cuts[d]
            inner = np.array([br[inside[i]] for i in idx])                # (n, k)
            nodes = np.concatenate([lo[idx, None], inner, hi[idx, None]], axis=1)
            g, w = gauss_rule(nq, nodes[:, :-1], nodes[:, 1:])              # (n, k+1, nq)
            g = g.reshape(len(idx), -1)
            w = w.reshape(len(idx), -1)
            tab = lv.local_basis(level, d, np.repeat(cells[idx, d], g.shape[1]), g.ravel(), r)
            rules.append((g, w, tab.reshape(len(idx), g.shape[1], r + 1, -1)))
        yield idx, rules


def quadrature_batches(basis: HierBasis, nq: int, breaks: Optional[dict], r: int,
                       nloc_q: int, budget: int = 4_000_000):
    """Yield ``(level, elements, cells, rules)`` groups for element loops."""
    for lev, els in level_batches(basis, nloc_q, budget):
        cells = np.array([c for _, c in els], dtype=np.int64).reshape(-1, 2)
        for idx, rules in split_rules(basis, lev, cells, nq, r, breaks or {}):
            yield lev, [els[i] for i in idx], cells[idx], rules


def _push_forward(d10, d01, d20, d11, d02, ji, hess):
    """Physical gradient and Hessian from parametric derivatives.

    Derivative arrays have a common shape ``S``; ``ji`` and ``hess`` have
    shape ``S + (2, 2)`` and ``S + (2, 2, 2)`` (broadcast as needed)."""
    grad = np.stack([d10 * ji[..., 0, k] + d01 * ji[..., 1, k] for k in range(2)], axis=-1)
    if d20 is None:
        return grad, None
    corr = {}
    for ab, dd in (((0, 0), d20), ((0, 1), d11), ((1, 1), d02)):
        corr[ab] = dd - grad[..., 0] * hess[..., 0, ab[0], ab[1]] \
            - grad[..., 1] * hess[..., 1, ab[0], ab[1]]
    corr[1, 0] = corr[0, 1]
    out = np.zeros(grad.shape + (2,))
    for k in range(2):
        for l in range(k, 2):
            acc = out[..., k, l]
            for (ia, ib), c in corr.items():
                acc += ji[..., ia, k] * ji[..., ib, l] * c
            out[..., l, k] = acc
    return grad, out


def element_tables(basis: HierBasis, geom: NurbsGeometry, level: int, cells,
                   nq: int, second: bool = False, rules=None) -> ElementTables:
    """Tensor Gauss data (``nq`` points per direction) for level cells."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    ne = cells.shape[0]
    r = 2 if second else 1
    bx, by, x, weights, ji, hess, t = _element_geometry(basis, geom, level, cells, nq, r, rules)
    p1, p2 = bx.shape[-1], by.shape[-1]
    nqq = bx.shape[1] * by.shape[1]

    def tens(ox, oy):
        return (bx[:, :, None, ox, :, None] * by[:, None, :, oy, None, :]).reshape(ne, nqq, p1 * p2)

    vals = tens(0, 0)
    ji = ji[:, :, None]
    if second:
        grads, hessians = _push_forward(tens(1, 0), tens(0, 1), tens(2, 0), tens(1, 1),
                                        tens(0, 2), ji, hess[:, :, None])
    else:
        grads, hessians = _push_forward(tens(1, 0), tens(0, 1), None, None, None, ji, None)
    return ElementTables(level, cells, x, weights, vals, grads, hessians, weights.sum(axis=1), t)


@dataclass
class FieldTables:
    """Values and physical derivatives of one discrete function at element
    quadrature points."""

    x: np.ndarray              # (ne, nq, 2)
    weights: np.ndarray        # (ne, nq)
    values: np.ndarray         # (ne, nq)
    grads: np.ndarray          # (ne, nq, 2)
    hessians: Optional[np.ndarray]  # (ne, nq, 2, 2)
    areas: np.ndarray          # (ne,)
    t: np.ndarray              # (ne, nq, 2) parametric points


def field_tables(basis: HierBasis, geom: NurbsGeometry, level: int, cells, nq: int,
                 local: np.ndarray, second: bool = False, rules=None) -> FieldTables:
    """Quadrature data of the function with element-level tensor coefficients
    ``local`` (shape ``(ne, nloc)``); cheaper than :func:`element_tables`
    when only one function is needed."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    ne = cells.shape[0]
    r = 2 if second else 1
    bx, by, x, weights, ji, hess, t = _element_geometry(basis, geom, level, cells, nq, r, rules)
    p1, p2 = bx.shape[-1], by.shape[-1]
    c = np.asarray(local, dtype=float).reshape(ne, p1, p2)

    def deriv(ox, oy):
        tmp = bx[:, :, ox] @ c                               # (ne, q1, p2)
        return (tmp @ np.swapaxes(by[:, :, oy], 1, 2)).reshape(ne, -1)

    vals = deriv(0, 0)
    if second:
        grads, hessians = _push_forward(deriv(1, 0), deriv(0, 1), deriv(2, 0), deriv(1, 1),
                                        deriv(0, 2), ji, hess)
    else:
        grads, hessians = _push_forward(deriv(1, 0), deriv(0, 1), None, None, None, ji, None)
    return FieldTables(x, weights, vals, grads, hessians, weights.sum(axis=1), t)


def level_batches(basis: HierBasis, nloc_q: int, budget: int = 4_000_000):
    """Yield ``(level, elements)`` chunks of active elements of equal level."""
    by_level: dict = {}
    for q in basis.mesh.active_elements():
        by_level.setdefault(q[0], []).append(q)
    size = max(1, budget // max(nloc_q, 1))
    for lev in sorted(by_level):
        els = by_level[lev]
        for k in range(0, len(els), size):
            yield lev, els[k:k + size]


def quadrature_points(basis: HierBasis, extra: int = 0) -> int:
    return max(basis.levels.degrees) + 2 + int(extra)


# -- assembly ---------------------------------------------------------------------
@dataclass
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray          # basis indices of the free dofs (equation order)
    n_total: int
    symmetric: bool

    @property
    def size(self) -> int:
        return len(self.free)

    def dump(self, path) -> None:
        """Write the matrix as ``row col value`` lines."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(Path(path), "w") as fh:
            for k in order:
                fh.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}\n")


def assemble_full(basis: HierBasis, geom: NurbsGeometry, problem: EllipticProblem,
                  quad_extra: int = 0) -> tuple:
    """Stiffness matrix and load vector over all basis functions."""
    nq = quadrature_points(basis, quad_extra)
    n = len(basis)
    nloc = int(np.prod([p + 1 for p in basis.levels.degrees]))
    mat = sp.csr_matrix((n, n))
    rhs = np.zeros(n)
    warned = False
    for lev, els, cells, rules in quadrature_batches(basis, nq, problem.breaks, 1,
                                                     nq * nq * nloc * 4):
        tab = element_tables(basis, geom, lev, cells, nq, rules=rules)
        w = tab.weights
        ne, nqq, nl, _ = tab.grads.shape
        gt = tab.grads.transpose(0, 2, 1, 3).reshape(ne, nl, 2 * nqq)
        if problem.A is None:
            flux = tab.grads
        else:
            amat = problem.coefficient_A(tab.x)
            if not warned:
                lam = np.linalg.eigvalsh(0.5 * (amat + np.swapaxes(amat, -1, -2)))
                if np.any(lam[..., 0] <= 0.0):
                    warnings.warn("coefficient A is not positive definite at some quadrature points")
                    warned = True
            flux = tab.grads @ np.swapaxes(amat, -1, -2)
        fw = (flux * w[:, :, None, None]).transpose(0, 2, 1, 3).reshape(ne, nl, 2 * nqq)
        kloc = gt @ np.swapaxes(fw, 1, 2)
        vw = np.swapaxes(tab.values * w[:, :, None], 1, 2)          # (ne, nl, nq)
        if problem.b is not None:
            bvec = problem.convection(tab.x)
            kloc += vw @ (tab.grads @ bvec[..., None])[..., 0]
        if problem.c is not None:
            kloc += (vw * problem.reaction(tab.x)[:, None, :]) @ tab.values
        floc = (vw @ problem.load(tab.x)[..., None])[..., 0]
        ext, ecols = basis.padded_extraction(els)
        et = np.swapaxes(ext, 1, 2)
        kg = et @ kloc @ ext
        fg = (et @ floc[..., None])[..., 0]
        mask = ecols >= 0
        pair = mask[:, :, None] & mask[:, None, :]
        # summing batch by batch keeps the triplet storage bounded
        mat = mat + sp.coo_matrix((kg[pair], (np.broadcast_to(ecols[:, :, None], kg.shape)[pair],
                                              np.broadcast_to(ecols[:, None, :], kg.shape)[pair])),
                                  shape=(n, n)).tocsr()
        np.add.at(rhs, ecols[mask], fg[mask])
    mat.sum_duplicates()
    return mat, rhs


def assemble(basis: HierBasis, geom: NurbsGeometry, problem: EllipticProblem,
             quad_extra: int = 0) -> LinearSystem:
    """Galerkin system restricted to the free (interior) dofs."""
    mat, rhs = assemble_full(basis, geom, problem, quad_extra)
    free = np.flatnonzero(~basis.boundary_mask())
    kf = mat[free][:, free].tocsr()
    if problem.symmetric and kf.nnz:
        asym = abs(kf - kf.T).max()
        scale = abs(kf).max()
        if asym > 1e-12 * scale:
            raise ArithmeticError(f"stiffness matrix not symmetric (defect {asym:.3e})")
        kf = (0.5 * (kf + kf.T)).tocsr()
    return LinearSystem(kf, rhs[free], free, len(basis), problem.symmetric)


# -- solution ---------------------------------------------------------------------
@dataclass
class Solution:
    coeffs: np.ndarray
    basis: HierBasis
    residual: float = 0.0
    iterations: int = 0


def solve(system: LinearSystem, basis: Optional[HierBasis] = None, method: str = "cg",
          tol: float = 1e-10, maxiter: Optional[int] = None) -> Solution:
    """Solve the system; ``method`` is ``cg`` (Jacobi-preconditioned) or ``direct``."""
    a, b = system.matrix, system.rhs
    n = system.size
    x = np.zeros(n)
    iters = 0
    bnorm = np.linalg.norm(b)
    if n == 0 or bnorm == 0.0:
        res = 0.0
    elif method == "direct":
        x = spla.spsolve(a.tocsc(), b) if n > 1 else b / a.toarray()[0]
        x = np.atleast_1d(x)
        res = np.linalg.norm(a @ x - b) / bnorm
    elif method == "cg":
        if not system.symmetric:
            raise ValueError("conjugate gradients need a symmetric problem; use method='direct'")
        diag = a.diagonal()
        if np.any(diag <= 0.0):
            raise SolverError("non-positive diagonal entry; matrix is not SPD", np.inf)
        prec = spla.LinearOperator((n, n), matvec=lambda v: v / diag, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        maxiter = maxiter if maxiter is not None else max(10 * n, 1000)
        x, info = spla.cg(a, b, rtol=0.5 * tol, atol=0.0, maxiter=maxiter, M=prec, callback=cb)
        iters = count[0]
        res = np.linalg.norm(a @ x - b) / bnorm
        if res > tol:
            # the recursive residual can drift from the true one; polish once
            x2, info = spla.cg(a, b, x0=x, rtol=0.1 * tol, atol=0.0, maxiter=maxiter, M=prec,
                               callback=cb)
            iters = count[0]
            x = x2
            res = np.linalg.norm(a @ x - b) / bnorm
    else:
        raise ValueError(f"unknown solver method {method!r}")
    if not np.isfinite(res) or res > tol:
        raise SolverError(f"solver stopped at relative residual {res:.3e} > {tol:.1e}", res)
    log.debug("solve: n=%d method=%s iterations=%d residual=%.2e", n, method, iters, res)
    coeffs = np.zeros(system.n_total)
    coeffs[system.free] = x
    return Solution(coeffs, basis, float(res), iters)


def solve_problem(basis: HierBasis, geom: NurbsGeometry, problem: EllipticProblem,
                  method: str = "cg", tol: float = 1e-10, quad_extra: int = 0) -> Solution:
    system = assemble(basis, geom, problem, quad_extra)
    if not problem.symmetric and method == "cg":
        method = "direct"
    return solve(system, basis, method, tol)


# -- errors ---------------------------------------------------------------------
def local_coefficients(basis: HierBasis, els: list, coeffs: np.ndarray) -> np.ndarray:
    """Element-level tensor coefficients ``E_Q c`` for a batch (shape (ne, nloc))."""
    ext, ecols = basis.padded_extraction(els)
    cpad = np.where(ecols >= 0, coeffs[np.maximum(ecols, 0)], 0.0)
    return (ext @ cpad[..., None])[..., 0]


def h1_error(solution: Solution, geom: NurbsGeometry, problem: EllipticProblem,
             quad_extra: int = 0, per_element: bool = False):
    """``(L2 error, H1 seminorm error)`` against the exact solution."""
    if not problem.has_exact:
        raise ValueError("problem has no exact solution")
    basis = solution.basis
    nq = quadrature_points(basis, quad_extra)
    nloc = int(np.prod([p + 1 for p in basis.levels.degrees]))
    ids = {q: k for k, q in enumerate(basis.mesh.active_elements())}
    l2 = np.zeros(len(ids))
    h1 = np.zeros(len(ids))
    for lev, els, cells, rules in quadrature_batches(basis, nq, problem.breaks, 1,
                                                     nq * nq * nloc * 4):
        loc = local_coefficients(basis, els, solution.coeffs)
        tab = field_tables(basis, geom, lev, cells, nq, loc, rules=rules)
        uh, guh = tab.values, tab.grads
        pts = tab.x.reshape(-1, 2)
        u = np.asarray(problem.u(pts)).reshape(uh.shape)
        gu = np.asarray(problem.grad_u(pts)).reshape(guh.shape)
        k = [ids[q] for q in els]
        l2[k] = np.sum(tab.weights * (u - uh) ** 2, axis=1)
        h1[k] = np.sum(tab.weights * np.sum((gu - guh) ** 2, axis=-1), axis=1)
    if per_element:
        return l2, h1
    return float(np.sqrt(l2.sum())), float(np.sqrt(h1.sum()))


def galerkin_residual(solution: Solution, geom: NurbsGeometry, problem: EllipticProblem,
                      quad_extra: int = 0) -> np.ndarray:
    """Residual vector ``F - K U`` over the free dofs."""
    system = assemble(solution.basis, geom, problem, quad_extra)
    return system.rhs - system.matrix @ solution.coeffs[system.free]
