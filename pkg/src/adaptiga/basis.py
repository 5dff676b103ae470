"""Hierarchical (HB) and truncated hierarchical (THB) spline bases.

Functions are identified by ``(level, multi_index)``.  For every active
element the basis stores an extraction matrix ``E`` mapping the global
coefficient vector (restricted to the columns ``cols``) onto the coefficients
of the (p+1)^d tensor B-splines of the element's level that are nonzero on it.
"""
from __future__ import annotations

from itertools import product
from typing import Callable

import numpy as np

from .hierarchy import HierMesh, MeshError, _box_cells
from .spline import gauss_rule

HB = "HB"
THB = "THB"


def _check_flavor(flavor: str) -> str:
    f = str(flavor).upper()
    if f not in (HB, THB):
        raise ValueError(f"basis flavor must be 'HB' or 'THB', got {flavor!r}")
    return f


class HierBasis:
    """Active hierarchical functions of a mesh plus element extraction."""

    def __init__(self, mesh: HierMesh, flavor: str = THB):
        self.mesh = mesh
        self.levels = mesh.levels
        self.flavor = _check_flavor(flavor)
        self._inside: dict = {}
        self.ids = self._select()
        self.index = {fid: k for k, fid in enumerate(self.ids)}
        self._extraction = None

    def __len__(self) -> int:
        return len(self.ids)

    # -- selection ---------------------------------------------------------------
    def support_inside(self, level: int, i: tuple) -> bool:
        """True if the support of ``B^level_i`` lies in Omega^level."""
        key = (level, i)
        res = self._inside.get(key)
        if res is None:
            res = self.mesh.box_in_omega(level, self.levels.support_box(level, i))
            self._inside[key] = res
        return res

    def is_active_function(self, level: int, i: tuple) -> bool:
        box = self.levels.support_box(level, i)
        inside = self._inside.get((level, i))
        if inside is None:
            inside = self._inside[(level, i)] = self.mesh.box_in_omega(level, box)
        return inside and not self.mesh.box_refined(level, box)

    def _select(self) -> list:
        mesh, lv = self.mesh, self.levels
        ids = []
        for lev in range(mesh.num_levels):
            if lev == 0:
                cand = product(*(range(n) for n in lv.shape(0)))
            else:
                cset = set()
                for par in mesh.refined[lev - 1]:
                    for off in product((0, 1), repeat=mesh.dim):
                        cell = tuple(2 * v + o for v, o in zip(par, off))
                        cset.update(lv.element_functions(lev, cell))
                cand = sorted(cset)
            ids += [(lev, i) for i in cand if self.is_active_function(lev, i)]
        return ids

    # -- extraction --------------------------------------------------------------
    @property
    def extraction(self) -> dict:
        """Mapping ``(level, cell) -> (E, cols)`` for every active element."""
        if self._extraction is None:
            self._extraction = self._build_extraction()
        return self._extraction

    def element_extraction(self, level: int, cell) -> tuple:
        cell = tuple(cell)
        if not self.mesh.is_active(level, cell):
            raise MeshError(f"element {(level, cell)} is not active")
        return self.extraction[(level, cell)]

    def _local_active(self, level: int, cell) -> tuple:
        """Local positions and global indices of active functions on a cell."""
        pos, glob = [], []
        for k, i in enumerate(self.levels.element_functions(level, cell)):
            g = self.index.get((level, i))
            if g is not None:
                pos.append(k)
                glob.append(g)
        return pos, glob

    def _build_extraction(self) -> dict:
        mesh, lv = self.mesh, self.levels
        nloc = int(np.prod([p + 1 for p in lv.degrees]))
        truncate = self.flavor == THB
        out = {}
        stack = []
        for cell in product(*(range(n) for n in lv.element_shape(0))):
            pos, glob = self._local_active(0, cell)
            w = np.zeros((nloc, len(glob)))
            w[pos, np.arange(len(glob))] = 1.0
            stack.append((0, cell, w, np.array(glob, dtype=np.int64)))
        while stack:
            lev, cell, w, cols = stack.pop()
            if not mesh.is_refined(lev, cell):
                out[(lev, cell)] = (w, cols)
                continue
            for off in product((0, 1), repeat=mesh.dim):
                child = tuple(2 * v + o for v, o in zip(cell, off))
                wc = lv.two_scale_matrix(lev, child) @ w
                ccols = cols
                if truncate:
                    funcs = lv.element_functions(lev + 1, child)
                    zero = [k for k, i in enumerate(funcs) if self.support_inside(lev + 1, i)]
                    if zero:
                        wc[zero] = 0.0
                    keep = np.any(wc != 0.0, axis=0)
                    if not keep.all():
                        wc = wc[:, keep]
                        ccols = cols[keep]
                pos, glob = self._local_active(lev + 1, child)
                if glob:
                    add = np.zeros((nloc, len(glob)))
                    add[pos, np.arange(len(glob))] = 1.0
                    wc = np.hstack([wc, add])
                    ccols = np.concatenate([ccols, np.array(glob, dtype=np.int64)])
                stack.append((lev + 1, child, wc, ccols))
        return out

    def padded_extraction(self, elements: list) -> tuple:
        """Stack extraction matrices of elements with zero padding.

        Returns ``E`` of shape ``(n, nloc, maxcols)`` and ``cols`` of shape
        ``(n, maxcols)`` with ``-1`` marking padding."""
        ex = self.extraction
        mats = [ex[q] for q in elements]
        nloc = mats[0][0].shape[0] if mats else 0
        width = max((m[0].shape[1] for m in mats), default=0)
        e = np.zeros((len(mats), nloc, width))
        cols = np.full((len(mats), width), -1, dtype=np.int64)
        for k, (w, c) in enumerate(mats):
            e[k, :, :w.shape[1]] = w
            cols[k, :len(c)] = c
        return e, cols

    # -- evaluation ----------------------------------------------------------------
    def evaluate(self, coeffs, x, deriv: int = 0) -> np.ndarray:
        """Evaluate the hierarchical spline (``deriv=1`` returns the gradient)."""
        coeffs = np.asarray(coeffs, dtype=float)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lv = self.levels
        d = self.mesh.dim
        out = np.zeros((x.shape[0],) if deriv == 0 else (x.shape[0], d))
        for k, pt in enumerate(x):
            lev, cell = self.mesh.locate_point(pt)
            w, cols = self.extraction[(lev, cell)]
            local = w @ coeffs[cols]
            vals = [lv.local_basis(lev, j, [cell[j]], [pt[j]], 1)[0] for j in range(d)]
            if deriv == 0:
                out[k] = _tensor_eval(vals, [0] * d, local)
            else:
                for j in range(d):
                    order = [0] * d
                    order[j] = 1
                    out[k, j] = _tensor_eval(vals, order, local)
        return out

    def evaluate_functions(self, x) -> np.ndarray:
        """Dense matrix of all basis functions at the points (for tests)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], len(self.ids)))
        lv = self.levels
        for k, pt in enumerate(x):
            lev, cell = self.mesh.locate_point(pt)
            w, cols = self.extraction[(lev, cell)]
            vals = [lv.local_basis(lev, j, [cell[j]], [pt[j]], 0)[0, 0] for j in range(self.mesh.dim)]
            tens = vals[0]
            for v in vals[1:]:
                tens = np.kron(tens, v)
            out[k, cols] += tens @ w
        return out

    def level_span(self, level: int, cell) -> int:
        """Number of distinct levels among functions nonzero on an active element."""
        w, cols = self.extraction[(level, tuple(cell))]
        nz = np.any(w != 0.0, axis=0)
        return len({self.ids[c][0] for c in cols[nz]})

    # -- boundary handling -----------------------------------------------------------
    def boundary_mask(self) -> np.ndarray:
        """True for functions whose mother index is first or last in some direction."""
        mask = np.zeros(len(self.ids), dtype=bool)
        for k, (lev, i) in enumerate(self.ids):
            shape = self.levels.shape(lev)
            mask[k] = any(v == 0 or v == n - 1 for v, n in zip(i, shape))
        return mask

    def free_dofs(self) -> list:
        mask = self.boundary_mask()
        return [fid for fid, b in zip(self.ids, mask) if not b]

    # -- quasi-interpolation ---------------------------------------------------------
    def choose_element(self, level: int, i: tuple) -> tuple:
        """Active level element in the support of ``B^level_i`` whose center is
        nearest the support midpoint (lowest index on ties)."""
        lv = self.levels
        box = lv.support_box(level, i)
        mid = [0.5 * (lv.breakpoints(level, d)[lo] + lv.breakpoints(level, d)[hi + 1])
               for d, (lo, hi) in enumerate(box)]
        best, best_dist = None, np.inf
        for c in _box_cells(box):
            if not self.mesh.is_active(level, c):
                continue
            dist = 0.0
            for d in range(len(c)):
                a, b = lv.element_bounds(level, d, c[d])
                dist += (0.5 * (a + b) - mid[d]) ** 2
            if dist < best_dist:
                best, best_dist = c, dist
        if best is None:
            raise MeshError(f"no active element of level {level} in the support of {i}")
        return best

    def quasi_interpolant(self, f: Callable) -> np.ndarray:
        """Coefficients of the hierarchical quasi-interpolant of ``f``.

        ``f`` maps an ``(n, d)`` array of parametric points to ``n`` values."""
        lv = self.levels
        choice = {}
        for k, (lev, i) in enumerate(self.ids):
            choice.setdefault((lev, self.choose_element(lev, i)), []).append(k)
        coeffs = np.zeros(len(self.ids))
        for (lev, cell), members in choice.items():
            local = local_projection(lv, lev, cell, f)
            for k in members:
                i = self.ids[k][1]
                idx = tuple(v - lv.m * c for v, c in zip(i, cell))
                coeffs[k] = local[idx]
        return coeffs


def _tensor_eval(vals, order, local) -> float:
    tens = vals[0][order[0]]
    for v, o in zip(vals[1:], order[1:]):
        tens = np.kron(tens, v[o])
    return float(tens @ local)


def local_projection(levels, level: int, cell, f: Callable) -> np.ndarray:
    """Coefficients of the L2 projection of ``f`` onto the polynomials on a
    level cell, in the local B-spline basis (array of shape (p+1,)*d)."""
    grids, mats = [], []
    for d, c in enumerate(cell):
        p = levels.degrees[d]
        a, b = levels.element_bounds(level, d, c)
        g, _ = gauss_rule(p + 1, float(a), float(b))
        mats.append(levels.local_basis(level, d, np.full(p + 1, c), g)[:, 0, :])
        grids.append(g)
    pts = np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=1)
    fv = np.asarray(f(pts), dtype=float).reshape([len(g) for g in grids])
    for d, m in enumerate(mats):
        fv = np.moveaxis(np.tensordot(np.linalg.inv(m), fv, axes=([1], [d])), 0, d)
    return fv


def truncate_coefficients(mesh: HierMesh, level: int, coeffs) -> np.ndarray:
    """Zero the level coefficients of functions whose support lies in Omega^level.

    ``coeffs`` is a full level coefficient array (flattened or shaped)."""
    lv = mesh.levels
    shape = lv.shape(level)
    c = np.array(coeffs, dtype=float).reshape(shape)
    if level < 1:
        raise MeshError("truncation stages start at level 1")
    if level > len(mesh.refined):
        return c.reshape(np.shape(coeffs))
    for i in product(*(range(n) for n in shape)):
        if mesh.box_in_omega(level, lv.support_box(level, i)):
            c[i] = 0.0
    return c.reshape(np.shape(coeffs))
