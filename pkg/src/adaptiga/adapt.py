"""Residual error estimation, Doerfler marking and the adaptive loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import THB, HierBasis
from .fem import (EllipticProblem, Solution, SolverError, field_tables, h1_error, level_batches,
                  local_coefficients, quadrature_batches, quadrature_points, solve_problem)
from .geometry import GeometryError, NurbsGeometry
from .hierarchy import HierMesh, LevelSequence
from .spline import gauss_rule

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A solve or estimate step of the adaptive loop failed."""


# -- element-local evaluation ------------------------------------------------------
def _param_gradients(levels: LevelSequence, level: int, cells: np.ndarray, t: np.ndarray,
                     loc: np.ndarray) -> np.ndarray:
    """Parametric gradients of element polynomials at points ``t`` (nf, nq, 2)."""
    nf, nq, _ = t.shape
    p1, p2 = levels.degrees
    tabs = []
    for d in range(2):
        tab = levels.local_basis(level, d, np.repeat(cells[:, d], nq), t[:, :, d].ravel(), 1)
        tabs.append(tab.reshape(nf, nq, 2, -1))
    c = loc.reshape(nf, p1 + 1, p2 + 1)
    gx = np.sum((tabs[0][:, :, 1] @ c) * tabs[1][:, :, 0], axis=-1)
    gy = np.sum((tabs[0][:, :, 0] @ c) * tabs[1][:, :, 1], axis=-1)
    return np.stack([gx, gy], axis=-1)


def _legendre_basis(s: np.ndarray, degree: int) -> np.ndarray:
    """Legendre polynomials of degree <= ``degree`` at reference points in [-1, 1]."""
    return np.polynomial.legendre.legvander(s, degree)


# -- estimator --------------------------------------------------------------------
@dataclass
class Fragment:
    """Interior edge piece shared by exactly one element on each side."""

    owner: int          # element id whose full side the fragment is
    other: int          # element id on the other side (same or coarser level)
    direction: int      # 0: edge normal to t1, 1: edge normal to t2
    length: float = 0.0


@dataclass
class EstimatorResult:
    volume: np.ndarray           # squared volume contributions per element
    jump: np.ndarray             # squared jump contributions per element
    h: np.ndarray                # element sizes used for weighting
    elements: list
    fragments: list = field(default_factory=list)

    @property
    def indicators(self) -> np.ndarray:
        """Squared indicators eta(Q)^2."""
        return self.volume + self.jump

    @property
    def eta(self) -> float:
        return math.sqrt(math.fsum(self.indicators))

    def eta_of(self, ids) -> float:
        ind = self.indicators
        return math.sqrt(math.fsum(ind[list(ids)]))


def _local_coefficient_table(basis: HierBasis, coeffs: np.ndarray) -> dict:
    out = {}
    for lev, batch in level_batches(basis, 1, budget=20000):
        loc = local_coefficients(basis, batch, coeffs)
        for q, row in zip(batch, loc):
            out[q] = row
    return out


def interior_fragments(mesh: HierMesh) -> list:
    """Edge fragments as ``(owner_id, other_id, direction, side)``.

    Each fragment is a full side of its owner; the other element is of equal
    or coarser level.  Equal-level pairs are listed once, from the lower cell.
    """
    els = mesh.active_elements()
    ids = {q: k for k, q in enumerate(els)}
    shape_cache = {}
    out = []
    for k, (lev, cell) in enumerate(els):
        shape = shape_cache.get(lev)
        if shape is None:
            shape = shape_cache[lev] = mesh.levels.element_shape(lev)
        for d in range(2):
            for side in (0, 1):
                nb = list(cell)
                nb[d] += 1 if side else -1
                if nb[d] < 0 or nb[d] >= shape[d]:
                    continue
                loc = mesh.locate(lev, nb)
                if loc is None:
                    continue
                if loc[0] == lev and side == 0:
                    continue
                out.append((k, ids[loc], d, side))
    return out


def _edge_data(basis: HierBasis, geom: NurbsGeometry, frags: list, els: list, nq: int):
    """Quadrature points, physical line weights and outward normals of fragments."""
    lv = basis.levels
    nf = len(frags)
    t = np.empty((nf, nq, 2))
    w = np.empty((nf, nq))
    own = np.array([f[0] for f in frags])
    dirs = np.array([f[2] for f in frags])
    sides = np.array([f[3] for f in frags])
    levs = np.array([els[k][0] for k in own])
    cells = np.array([els[k][1] for k in own])
    for lev in np.unique(levs):
        for d in range(2):
            sel = np.flatnonzero((levs == lev) & (dirs == d))
            if not len(sel):
                continue
            a, b = lv.element_bounds(int(lev), d, cells[sel, d])
            e = 1 - d
            lo, hi = lv.element_bounds(int(lev), e, cells[sel, e])
            g, wg = gauss_rule(nq, lo, hi)
            t[sel, :, d] = np.where(sides[sel] == 1, b, a)[:, None]
            t[sel, :, e] = g
            w[sel] = wg
    _, jac, _ = geom.evaluate(t.reshape(-1, 2), 1)
    jac = jac.reshape(nf, nq, 2, 2)
    # tangent along the edge: dF/dt2 for direction 0, dF/dt1 for direction 1
    tau = np.where((dirs == 0)[:, None, None], jac[:, :, :, 1], jac[:, :, :, 0])
    norm = np.linalg.norm(tau, axis=-1)
    nrm = np.stack([tau[..., 1], -tau[..., 0]], axis=-1) / norm[..., None]
    sign = np.where(dirs == 0, 1.0, -1.0) * np.where(sides == 1, 1.0, -1.0)
    nrm = nrm * sign[:, None, None]
    return t, w * norm, nrm, jac


def _jump_values(basis, geom, problem, frags, els, loc_table, nq):
    """Conormal jumps ``(A grad U_owner - A grad U_other) . n_owner`` at edge points."""
    lv = basis.levels
    t, lw, nrm, jac = _edge_data(basis, geom, frags, els, nq)
    jinv = np.linalg.inv(jac)
    nf = len(frags)
    grads = np.zeros((2, nf, nq, 2))
    for s in range(2):
        who = np.array([f[s] for f in frags])
        levs = np.array([els[k][0] for k in who])
        for lev in np.unique(levs):
            sel = np.flatnonzero(levs == lev)
            cells = np.array([els[who[j]][1] for j in sel])
            loc = np.array([loc_table[els[who[j]]] for j in sel])
            gt = _param_gradients(lv, int(lev), cells, t[sel], loc)
            grads[s, sel] = np.einsum("fqak,fqa->fqk", jinv[sel], gt)
    diff = grads[0] - grads[1]
    if problem.A is not None:
        x = geom.map(t.reshape(-1, 2)).reshape(nf, nq, 2)
        amat = problem.coefficient_A(x)
        diff = np.einsum("fqkl,fql->fqk", amat, diff)
    return np.einsum("fqk,fqk->fq", diff, nrm), lw, t


def estimate(basis: HierBasis, geom: NurbsGeometry, problem: EllipticProblem,
             solution: Solution, quad_extra: int = 0, h_mode: str = "physical",
             oscillation_degree: Optional[int] = None) -> EstimatorResult:
    """Weighted-residual indicators (or oscillations when ``oscillation_degree`` is set)."""
    if problem.A is not None and problem.dA is None:
        raise ValueError("estimator needs dA for a non-identity coefficient A")
    if h_mode not in ("physical", "parametric"):
        raise ValueError("h_mode must be 'physical' or 'parametric'")
    mesh = basis.mesh
    lv = basis.levels
    els = mesh.active_elements()
    ids = {q: k for k, q in enumerate(els)}
    nq = quadrature_points(basis, quad_extra)
    n = len(els)
    vol = np.zeros(n)
    h = np.zeros(n)
    pdeg = oscillation_degree
    for lev, batch, cells, rules in quadrature_batches(basis, nq, problem.breaks, 2,
                                                       nq * nq * 40):
        loc = local_coefficients(basis, batch, solution.coeffs)
        tab = field_tables(basis, geom, lev, cells, nq, loc, second=True, rules=rules)
        grad, hess = tab.grads, tab.hessians
        if problem.A is None:
            pu = -(hess[..., 0, 0] + hess[..., 1, 1])
        else:
            amat = problem.coefficient_A(tab.x)
            pu = -(np.einsum("eqk,eqk->eq", problem.divergence_A(tab.x), grad)
                   + np.einsum("eqkl,eqkl->eq", amat, hess))
        if problem.b is not None:
            pu += np.einsum("eqk,eqk->eq", problem.convection(tab.x), grad)
        if problem.c is not None:
            pu += problem.reaction(tab.x) * tab.values
        res = problem.load(tab.x) - pu
        if pdeg is not None:
            lo = np.stack([lv.element_bounds(lev, d, cells[:, d])[0] for d in range(2)], axis=1)
            hi = np.stack([lv.element_bounds(lev, d, cells[:, d])[1] for d in range(2)], axis=1)
            sref = (2.0 * tab.t - (lo + hi)[:, None, :]) / (hi - lo)[:, None, :]
            res = _project_out(res, tab.weights, sref, pdeg)
        k = np.array([ids[q] for q in batch])
        if h_mode == "physical":
            hk = np.sqrt(tab.areas)
        else:
            sizes = [np.subtract(*lv.element_bounds(lev, d, cells[:, d])[::-1]) for d in range(2)]
            hk = np.sqrt(sizes[0] * sizes[1])
        h[k] = hk
        vol[k] = hk ** 2 * np.sum(tab.weights * res ** 2, axis=1)
    jump = np.zeros(n)
    frags = interior_fragments(mesh)
    out_frags = []
    if frags:
        loc_table = _local_coefficient_table(basis, solution.coeffs)
        chunk = 20000
        for s in range(0, len(frags), chunk):
            part = frags[s:s + chunk]
            jv, lw, _ = _jump_values(basis, geom, problem, part, els, loc_table, nq)
            if pdeg is not None:
                sref = np.broadcast_to(np.polynomial.legendre.leggauss(nq)[0][None, :, None],
                                       jv.shape + (1,))
                jv = _project_out(jv, lw, sref, pdeg)
            integ = np.sum(lw * jv ** 2, axis=1)
            owner = np.array([f[0] for f in part])
            other = np.array([f[1] for f in part])
            np.add.at(jump, owner, h[owner] * integ)
            np.add.at(jump, other, h[other] * integ)
            lengths = lw.sum(axis=1)
            out_frags += [Fragment(f[0], f[1], f[2], float(L)) for f, L in zip(part, lengths)]
    return EstimatorResult(vol, jump, h, els, out_frags)


def _project_out(vals: np.ndarray, weights: np.ndarray, sref: np.ndarray,
                 degree: int) -> np.ndarray:
    """Remainder of the weighted L2 projection onto tensor polynomials of the
    given degree; ``sref`` holds reference coordinates in [-1, 1] of shape
    ``vals.shape + (dims,)``."""
    phi = _legendre_basis(sref[..., 0], degree)                   # (ne, nq, degree+1)
    for k in range(1, sref.shape[-1]):
        v = _legendre_basis(sref[..., k], degree)
        phi = (phi[..., :, None] * v[..., None, :]).reshape(phi.shape[:-1] + (-1,))
    pw = phi * weights[..., None]
    g = np.swapaxes(pw, 1, 2) @ phi
    rhs = (np.swapaxes(pw, 1, 2) @ vals[..., None])[..., 0]
    coef = np.linalg.solve(g, rhs[..., None])[..., 0]
    return vals - (phi @ coef[..., None])[..., 0]


def oscillations(basis: HierBasis, geom: NurbsGeometry, problem: EllipticProblem,
                 solution: Solution, degree: Optional[int] = None, quad_extra: int = 0,
                 h_mode: str = "physical") -> np.ndarray:
    """Squared data oscillations per element (projection onto mapped polynomials
    of the given degree, default the spline degree)."""
    if degree is None:
        degree = max(basis.levels.degrees)
    if degree < 0:
        raise ValueError("oscillation degree must be non-negative")
    nq = quadrature_points(basis, quad_extra)
    if degree + 1 > nq:
        raise ValueError("oscillation degree too high for the quadrature rule")
    res = estimate(basis, geom, problem, solution, quad_extra, h_mode, oscillation_degree=degree)
    return res.indicators


# -- marking -----------------------------------------------------------------------
@dataclass(frozen=True)
class MarkParams:
    theta: float = 0.5
    c_min: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if not self.c_min >= 1.0:
            raise ValueError("C_min must be at least 1")


def dorfler_mark(indicators, params: MarkParams) -> list:
    """Indices of a minimal set M with ``theta * sum(eta^2) <= sum_M eta^2``.

    ``indicators`` are the squared element indicators.  Ties are broken by
    ascending index; ``c_min = inf`` marks every element.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.size == 0:
        raise ValueError("no indicators to mark")
    if np.any(~np.isfinite(ind)) or np.any(ind < 0):
        raise ValueError("indicators must be finite and non-negative")
    if math.isinf(params.c_min):
        return list(range(ind.size))
    order = np.lexsort((np.arange(ind.size), -ind))
    target = params.theta * math.fsum(ind)
    if target == 0.0:
        return []
    # cumulative sums are only a guide; the inequality is confirmed with fsum
    csum = np.cumsum(ind[order])
    k = int(np.searchsorted(csum, target * (1 - 1e-12)))
    k = min(max(k, 0), ind.size - 1)
    while k > 0 and math.fsum(ind[order[:k]]) >= target:
        k -= 1
    while math.fsum(ind[order[:k + 1]]) < target:
        k += 1
    return sorted(int(j) for j in order[:k + 1])


# -- rate fitting ------------------------------------------------------------------
def rate_fit(records: list, x: str = "dofs", y: str = "eta", tail_points: int = 4,
             decades: Optional[float] = None) -> float:
    """Least-squares slope of log(y) against log(x) over the last records.

    With ``decades`` set, the fit uses every record whose ``x`` lies within
    that many decades of the last one (at least ``tail_points`` records).
    Adaptive histories oscillate locally when new levels appear, so a fit
    over a fixed range of ``x`` is steadier than one over a fixed count.
    """
    if tail_points < 2 or len(records) < tail_points:
        raise ValueError(f"need at least {max(tail_points, 2)} records for a rate fit")
    xs = np.array([_field(r, x) for r in records], dtype=float)
    ys = np.array([_field(r, y) for r in records], dtype=float)
    count = tail_points
    if decades is not None:
        if not decades > 0:
            raise ValueError("decades must be positive")
        low = xs[-1] * 10.0 ** (-decades)
        run = 0
        for v in xs[::-1]:
            if v < low:
                break
            run += 1
        count = max(tail_points, run)
    xs, ys = xs[-count:], ys[-count:]
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("rate fit needs positive values")
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


_ALIASES = {"dofs": "n_dofs", "elements": "n_elements", "error": "err_h1", "h1": "err_h1",
            "l2": "err_l2"}


def _field(rec, name):
    name = _ALIASES.get(name, name)
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


# -- adaptive loop -------------------------------------------------------------------
@dataclass
class AdaptRecord:
    iter: int
    n_elements: int
    n_dofs: int
    eta: float
    err_h1: float
    err_l2: float
    n_marked: int
    max_level: int
    wall_ms: float
    levels: list = field(default_factory=list)

    CSV_FIELDS = ("iter", "n_elements", "n_dofs", "eta", "err_h1", "err_l2",
                  "n_marked", "max_level", "wall_ms")

    def csv_row(self) -> list:
        return [self.iter, self.n_elements, self.n_dofs, repr(float(self.eta)),
                repr(float(self.err_h1)), repr(float(self.err_l2)), self.n_marked,
                self.max_level, f"{self.wall_ms:.1f}"]


@dataclass
class AdaptConfig:
    geometry: NurbsGeometry
    problem: EllipticProblem
    degree: int = 2
    multiplicity: int = 1
    elements: tuple = (4, 4)
    mu: int = 2
    kind: str = "T"
    flavor: str = THB
    theta: float = 0.5
    c_min: float = 1.0
    max_iter: int = 30
    max_dofs: int = 100_000
    eta_tol: float = 0.0
    solver: str = "cg"
    quad_extra: int = 0
    h_mode: str = "physical"
    timing: bool = True

    def levels(self) -> LevelSequence:
        return LevelSequence.uniform((self.degree, self.degree), tuple(self.elements),
                                     self.multiplicity)


@dataclass
class AdaptResult:
    records: list
    mesh: HierMesh
    basis: HierBasis
    solution: Solution
    estimator: EstimatorResult


def adaptive_loop(config: AdaptConfig, callback: Optional[Callable] = None) -> AdaptResult:
    """Solve, estimate, mark, refine until a stop rule fires.

    Stops after ``max_iter`` solves, when ``eta <= eta_tol``, or before solving
    a system with more than ``max_dofs`` unknowns.  ``callback(record, mesh)``
    runs after every iteration.
    """
    params = MarkParams(config.theta, config.c_min)
    mesh = HierMesh.initial(config.levels())
    records: list = []
    last = None
    for k in range(config.max_iter):
        t0 = time.perf_counter()
        basis = HierBasis(mesh, config.flavor)
        n_free = int(np.count_nonzero(~basis.boundary_mask()))
        if k > 0 and n_free > config.max_dofs:
            break
        try:
            sol = solve_problem(basis, config.geometry, config.problem, config.solver,
                                quad_extra=config.quad_extra)
            est = estimate(basis, config.geometry, config.problem, sol, config.quad_extra,
                           config.h_mode)
            if config.problem.has_exact:
                l2, h1 = h1_error(sol, config.geometry, config.problem, config.quad_extra)
            else:
                l2 = h1 = float("nan")
        except (SolverError, GeometryError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise NumericalFailure(f"iteration {k}: {exc}") from exc
        eta = est.eta
        stop = (k + 1 == config.max_iter) or eta <= config.eta_tol
        marked = []
        if not stop:
            marked = dorfler_mark(est.indicators, params)
        wall = (time.perf_counter() - t0) * 1e3 if config.timing else 0.0
        rec = AdaptRecord(k, mesh.num_elements, n_free, eta, h1, l2, len(marked),
                          mesh.max_level, wall, mesh.level_histogram())
        records.append(rec)
        last = (mesh, basis, sol, est)
        log.info("iter %d: elements=%d dofs=%d eta=%.4e err=%.4e marked=%d", k,
                 rec.n_elements, n_free, eta, h1, len(marked))
        if callback is not None:
            callback(rec, mesh)
        if stop:
            break
        els = est.elements
        mesh = mesh.refine([els[j] for j in marked], config.mu, config.kind)
    mesh, basis, sol, est = last
    return AdaptResult(records, mesh, basis, sol, est)
