"""Hierarchical meshes built from dyadically refined tensor grids.

A mesh stores, per level, the set of deactivated (refined) cells.  Cells are
integer index tuples into the level's element grid, so containment and
adjacency are exact integer computations.  The nested domains are implicit:
a level-l cell lies in Omega^l iff its parent is refined (or l == 0).
"""
from __future__ import annotations

import heapq
from fractions import Fraction
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .dyadic import DyadicRational
from .spline import KnotVector, TensorSpace, gauss_rule, local_basis_ders

H_ADMISSIBLE = "H"
T_ADMISSIBLE = "T"


class MeshError(ValueError):
    """Invalid mesh operation (bad element, incompatible meshes, ...)."""


def _check_kind(kind: str) -> str:
    k = str(kind).upper()
    if k not in (H_ADMISSIBLE, T_ADMISSIBLE):
        raise MeshError(f"admissibility kind must be 'H' or 'T', got {kind!r}")
    return k


def _check_mu(mu: int) -> int:
    mu = int(mu)
    if mu < 2:
        raise MeshError("admissibility class mu must be at least 2")
    return mu


class LevelSequence:
    """Nested tensor spaces obtained by bisecting every element of a base space.

    All interior knots carry the same multiplicity ``m`` on every level, so the
    splines are ``C^{p-m}``.  Index arithmetic is closed form: on element ``e``
    the nonzero functions are ``m*e, ..., m*e + p``.
    """

    def __init__(self, base: TensorSpace, multiplicity: int = 1):
        m = int(multiplicity)
        if m < 1 or m > min(base.degrees):
            raise MeshError("interior multiplicity must lie in [1, min(p)]")
        for kv in base.kvs:
            if any(k != m for k in kv.multiplicities[1:-1]):
                raise MeshError("base interior multiplicities must all equal m")
        self.base = base
        self.m = m
        self.dim = base.dim
        self.degrees = base.degrees
        self.base_elements = base.element_shape
        self._zb = [np.array([float(b) for b in kv.breakpoints]) for kv in base.kvs]
        self._knots: dict = {}
        self._blocks: dict = {}
        self._gauss: dict = {}
        # on equally spaced base breakpoints a two-scale block depends only on
        # the child parity and its distance to the boundary (scale invariance)
        self._uniform = [bool(np.allclose(np.diff(z), z[1] - z[0], rtol=0, atol=1e-15))
                         for z in self._zb]

    @classmethod
    def uniform(cls, degrees, elements, multiplicity: int = 1) -> "LevelSequence":
        if np.isscalar(degrees):
            degrees = (int(degrees),) * (len(elements) if not np.isscalar(elements) else 2)
        if np.isscalar(elements):
            elements = (int(elements),) * len(degrees)
        kvs = [KnotVector.uniform(p, n, multiplicity) for p, n in zip(degrees, elements)]
        return cls(TensorSpace(kvs), multiplicity)

    def __eq__(self, other) -> bool:
        return isinstance(other, LevelSequence) and self.base == other.base and self.m == other.m

    def __hash__(self) -> int:
        return hash((self.base, self.m))

    # -- sizes -----------------------------------------------------------
    def num_elements(self, level: int, d: int) -> int:
        return self.base_elements[d] << level

    def element_shape(self, level: int) -> tuple:
        return tuple(n << level for n in self.base_elements)

    def num_functions(self, level: int, d: int) -> int:
        return self.degrees[d] + 1 + self.m * (self.num_elements(level, d) - 1)

    def shape(self, level: int) -> tuple:
        return tuple(self.num_functions(level, d) for d in range(self.dim))

    # -- index arithmetic --------------------------------------------------
    def _knot_breakpoint(self, level: int, d: int, j):
        """Breakpoint index of knot number ``j`` (vectorized)."""
        p = self.degrees[d]
        j = np.asarray(j)
        bp = 1 + (j - p - 1) // self.m
        return np.clip(np.where(j <= p, 0, bp), 0, self.num_elements(level, d))

    def function_support(self, level: int, d: int, i):
        """Inclusive element range of function ``i`` in direction ``d``."""
        p = self.degrees[d]
        lo = self._knot_breakpoint(level, d, i)
        hi = self._knot_breakpoint(level, d, np.asarray(i) + p + 1) - 1
        return lo, hi

    def support_box(self, level: int, i: Sequence[int]) -> tuple:
        """Inclusive level cell box of the support of ``B^level_i`` (pure int arithmetic)."""
        m = self.m
        out = []
        for d, k in enumerate(i):
            p = self.degrees[d]
            n = self.base_elements[d] << level
            lo = 0 if k <= p else min(n, 1 + (k - p - 1) // m)
            j = k + p + 1
            hi = min(n, 1 + (j - p - 1) // m) - 1
            out.append((lo, hi))
        return tuple(out)

    def element_functions(self, level: int, cell: Sequence[int]) -> list:
        """Multi-indices of the (p+1)^d functions nonzero on a cell (lexicographic)."""
        ranges = [range(self.m * c, self.m * c + p + 1) for c, p in zip(cell, self.degrees)]
        return list(product(*ranges))

    def support_extension(self, level: int, cell: Sequence[int]) -> tuple:
        """Inclusive level-``level`` cell box covered by the support extension."""
        m = self.m
        out = []
        for d, c in enumerate(cell):
            p = self.degrees[d]
            n = self.base_elements[d] << level
            k = m * c
            lo = 0 if k <= p else min(n, 1 + (k - p - 1) // m)
            j = k + 2 * p + 1
            hi = min(n, 1 + (j - p - 1) // m) - 1
            out.append((lo, hi))
        return tuple(out)

    def level_space(self, level: int) -> TensorSpace:
        """Explicit tensor space of a level (intended for small levels)."""
        kvs = []
        for kv in self.base.kvs:
            for _ in range(level):
                kv = kv.bisect(self.m)
            kvs.append(kv)
        return TensorSpace(kvs)

    # -- geometry of the parametric grid -------------------------------------
    def breakpoints(self, level: int, d: int) -> np.ndarray:
        """Float breakpoints of a level in direction ``d`` (exact for dyadic data)."""
        key = ("z", level, d)
        if key not in self._knots:
            zb = self._zb[d]
            s = 1 << level
            frac = np.arange(s) / s
            z = (zb[:-1, None] + (zb[1:] - zb[:-1])[:, None] * frac[None, :]).ravel()
            self._knots[key] = np.append(z, zb[-1])
        return self._knots[key]

    def knots(self, level: int, d: int) -> np.ndarray:
        key = ("t", level, d)
        if key not in self._knots:
            z = self.breakpoints(level, d)
            p = self.degrees[d]
            mult = np.full(len(z), self.m)
            mult[0] = mult[-1] = p + 1
            self._knots[key] = np.repeat(z, mult)
        return self._knots[key]

    def element_bounds(self, level: int, d: int, e):
        z = self.breakpoints(level, d)
        e = np.asarray(e)
        return z[e], z[e + 1]

    def exact_bounds(self, level: int, d: int, e: int) -> tuple:
        """Exact dyadic bounds of element ``e`` (for serialization and tests)."""
        zb = self.base.kvs[d].breakpoints
        b, o = divmod(int(e), 1 << level)
        a, c = zb[b].to_fraction(), zb[b + 1].to_fraction()
        lo = a + (c - a) * Fraction(o, 1 << level)
        hi = a + (c - a) * Fraction(o + 1, 1 << level)
        return DyadicRational.from_value(lo), DyadicRational.from_value(hi)

    def find_elements(self, level: int, d: int, x) -> np.ndarray:
        z = self.breakpoints(level, d)
        e = np.searchsorted(z, np.asarray(x, dtype=float), side="right") - 1
        return np.clip(e, 0, len(z) - 2)

    def local_basis(self, level: int, d: int, elements, x, r: int = 0) -> np.ndarray:
        """Local values/derivatives of the p+1 functions of each element at ``x``.

        Shape ``(n, r+1, p+1)``; the element's own polynomial piece is used."""
        p = self.degrees[d]
        spans = p + self.m * np.asarray(elements, dtype=np.int64)
        t = self.knots(level, d)
        win = t[spans[:, None] + np.arange(-p, p + 2)]
        return local_basis_ders(win, np.asarray(x, dtype=float), p, r)

    def gauss_table(self, level: int, d: int, nq: int, r: int = 1):
        """Gauss points, weights and local basis derivatives on every element of
        a level: shapes ``(n_el, nq)``, ``(n_el, nq)`` and ``(n_el, nq, r+1, p+1)``."""
        key = (level, d, nq, r)
        tab = self._gauss.get(key)
        if tab is None:
            n = self.num_elements(level, d)
            z = self.breakpoints(level, d)
            g, w = gauss_rule(nq, z[:-1], z[1:])
            vals = self.local_basis(level, d, np.repeat(np.arange(n), nq), g.ravel(), r)
            tab = (g, w, vals.reshape(n, nq, r + 1, -1))
            for arr in tab:
                arr.flags.writeable = False
            self._gauss[key] = tab
        return tab

    def two_scale_block(self, level: int, d: int, child: int) -> np.ndarray:
        """Matrix ``S`` with ``B^level_a|child = sum_b S[b, a] B^{level+1}_b|child``
        over the local functions of ``child`` (rows) and of its parent (columns)."""
        if self._uniform[d]:
            reach = self.degrees[d] + 2
            par = child // 2
            key = ("u", d, child % 2, min(par, reach),
                   min(self.num_elements(level, d) - 1 - par, reach))
        else:
            key = (level, d, child)
        blk = self._blocks.get(key)
        if blk is None:
            p = self.degrees[d]
            a, b = (float(v) for v in self.element_bounds(level + 1, d, child))
            x, _ = gauss_rule(p + 1, a, b)
            fine = self.local_basis(level + 1, d, np.full(p + 1, child), x)[:, 0, :]
            coarse = self.local_basis(level, d, np.full(p + 1, child // 2), x)[:, 0, :]
            blk = np.linalg.solve(fine, coarse)
            # two-scale coefficients are non-negative; clear round-off so that
            # structural zeros stay exact
            blk[np.abs(blk) < 1e-13] = 0.0
            # share one array among identical blocks so products can be cached
            blk = self._blocks.setdefault(("canon", blk.tobytes()), blk)
            blk.flags.writeable = False
            self._blocks[key] = blk
        return blk

    def two_scale_matrix(self, level: int, child: Sequence[int]) -> np.ndarray:
        """Tensor (Kronecker) two-scale block of a child cell."""
        blocks = [self.two_scale_block(level, d, c) for d, c in enumerate(child)]
        key = ("kron",) + tuple(id(b) for b in blocks)
        mat = self._blocks.get(key)
        if mat is None:
            mat = blocks[0]
            for b in blocks[1:]:
                mat = np.kron(mat, b)
            mat.flags.writeable = False
            self._blocks[key] = (mat, blocks)  # keep blocks alive so ids stay unique
            return mat
        return mat[0]


def _box_cells(box) -> Iterable[tuple]:
    return product(*(range(lo, hi + 1) for lo, hi in box))


def _parent_box(box) -> tuple:
    return tuple((lo // 2, hi // 2) for lo, hi in box)


class HierMesh:
    """Hierarchical mesh: per-level sets of deactivated cells.

    Instances are treated as immutable; all modifying operations return a
    new mesh.
    """

    def __init__(self, levels: LevelSequence, refined: Sequence[Iterable] = (),
                 *, validate: bool = True):
        self.levels = levels
        sets = [frozenset(tuple(int(v) for v in c) for c in s) for s in refined]
        while sets and not sets[-1]:
            sets.pop()
        self.refined: tuple = tuple(sets)
        self.dim = levels.dim
        self.initial_elements = int(np.prod(levels.base_elements))
        self.marked_total = 0
        self._active = None
        if validate:
            self._validate()

    def _validate(self):
        for lev, cells in enumerate(self.refined):
            shape = self.levels.element_shape(lev)
            for c in cells:
                if len(c) != self.dim or any(v < 0 or v >= n for v, n in zip(c, shape)):
                    raise MeshError(f"cell {c} out of range at level {lev}")
                if lev > 0 and tuple(v // 2 for v in c) not in self.refined[lev - 1]:
                    raise MeshError(f"refined cell {c} at level {lev} has an active parent")

    @classmethod
    def initial(cls, levels: LevelSequence) -> "HierMesh":
        return cls(levels)

    # -- basic queries -------------------------------------------------------
    @property
    def num_levels(self) -> int:
        """Number of levels carrying active elements (N)."""
        return len(self.refined) + 1

    @property
    def max_level(self) -> int:
        return len(self.refined)

    def is_refined(self, level: int, cell) -> bool:
        return level < len(self.refined) and tuple(cell) in self.refined[level]

    def in_omega(self, level: int, cell) -> bool:
        """True if the level cell lies in the nested domain Omega^level."""
        if level == 0:
            return True
        if level > len(self.refined):
            return False
        return tuple(v // 2 for v in cell) in self.refined[level - 1]

    def is_active(self, level: int, cell) -> bool:
        return self.in_omega(level, cell) and not self.is_refined(level, cell)

    def box_in_omega(self, level: int, box) -> bool:
        """True if every level cell of the box lies in Omega^level."""
        if level == 0:
            return True
        if level > len(self.refined):
            return False
        ref = self.refined[level - 1]
        return all(c in ref for c in _box_cells(_parent_box(box)))

    def box_refined(self, level: int, box) -> bool:
        """True if every level cell of the box is refined (box inside Omega^{level+1})."""
        if level >= len(self.refined):
            return False
        ref = self.refined[level]
        return all(c in ref for c in _box_cells(box))

    def active_elements(self) -> list:
        """Active elements as ``(level, cell)`` sorted by level, then lexicographically."""
        if self._active is None:
            out = []
            shape0 = self.levels.element_shape(0)
            ref0 = self.refined[0] if self.refined else frozenset()
            out += [(0, c) for c in product(*(range(n) for n in shape0)) if c not in ref0]
            for lev in range(1, self.num_levels):
                ref = self.refined[lev] if lev < len(self.refined) else frozenset()
                kids = []
                for par in self.refined[lev - 1]:
                    for off in product((0, 1), repeat=self.dim):
                        c = tuple(2 * v + o for v, o in zip(par, off))
                        if c not in ref:
                            kids.append(c)
                kids.sort()
                out += [(lev, c) for c in kids]
            self._active = out
        return self._active

    @property
    def num_elements(self) -> int:
        return len(self.active_elements())

    def level_histogram(self) -> list:
        hist = [0] * self.num_levels
        for lev, _ in self.active_elements():
            hist[lev] += 1
        return hist

    def locate(self, level: int, cell) -> tuple:
        """Active element covering the level cell, or ``None`` if the cell is refined.

        Returns ``(level', cell')`` with ``level' <= level``.
        """
        cell = tuple(cell)
        if self.in_omega(level, cell):
            if self.is_refined(level, cell):
                return None
            return level, cell
        lev = level
        while lev > 0:
            lev -= 1
            cell = tuple(v // 2 for v in cell)
            if self.in_omega(lev, cell):
                return lev, cell
        raise MeshError("cell not covered by the mesh")

    def locate_point(self, x) -> tuple:
        """Active element containing a parametric point (right/top faces belong
        to the lower-index element at the domain boundary only)."""
        x = np.asarray(x, dtype=float)
        lev = 0
        cell = tuple(int(self.levels.find_elements(0, d, x[d])) for d in range(self.dim))
        while self.is_refined(lev, cell):
            lev += 1
            cell = tuple(int(self.levels.find_elements(lev, d, x[d])) for d in range(self.dim))
        return lev, cell

    def ancestor(self, level: int, cell, k: int) -> tuple:
        if k > level:
            raise MeshError("ancestor level exceeds element level")
        s = level - k
        return tuple(v >> s for v in cell)

    # -- support extensions and neighborhoods ----------------------------------
    def multilevel_support_extension(self, level: int, cell, k: int) -> tuple:
        """Support extension at level ``k`` of the level-``k`` ancestor of a cell."""
        if k < 0 or k > level:
            raise MeshError("support extension level must lie in [0, level]")
        return self.levels.support_extension(k, self.ancestor(level, cell, k))

    def neighborhood(self, level: int, cell, mu: int, kind: str) -> list:
        """H- or T-neighborhood of an active element (sorted list of elements)."""
        mu = _check_mu(mu)
        kind = _check_kind(kind)
        k = level - mu + 1
        if k < 0:
            return []
        out = set()
        if kind == H_ADMISSIBLE:
            box = self.multilevel_support_extension(level, cell, k)
            for c in _box_cells(box):
                if self.is_active(k, c):
                    out.add((k, c))
        else:
            box = self.multilevel_support_extension(level, cell, k + 1)
            for c in _box_cells(_parent_box(box)):
                if self.is_active(k, c):
                    out.add((k, c))
        return sorted(out)

    # -- refinement --------------------------------------------------------------
    def bisect(self, elements: Iterable) -> "HierMesh":
        """Replace the given active elements by their children (no closure)."""
        refined = [set(s) for s in self.refined]
        count = 0
        for lev, cell in elements:
            cell = tuple(int(v) for v in cell)
            if not self.is_active(lev, cell):
                raise MeshError(f"element {(lev, cell)} is not active")
            while len(refined) <= lev:
                refined.append(set())
            refined[lev].add(cell)
            count += 1
        out = HierMesh(self.levels, refined, validate=False)
        out.initial_elements = self.initial_elements
        out.marked_total = self.marked_total
        return out

    def refine(self, marked: Iterable, mu: int, kind: str) -> "HierMesh":
        """Admissible refinement: close the marked set under neighborhoods, then bisect."""
        mu = _check_mu(mu)
        kind = _check_kind(kind)
        marked = [(int(lev), tuple(int(v) for v in c)) for lev, c in marked]
        for lev, c in marked:
            if not self.is_active(lev, c):
                raise MeshError(f"marked element {(lev, c)} is not active")
        closed = set(marked)
        heap = [(-lev, c) for lev, c in closed]
        heapq.heapify(heap)
        while heap:
            neg, c = heapq.heappop(heap)
            for q in self.neighborhood(-neg, c, mu, kind):
                if q not in closed:
                    closed.add(q)
                    heapq.heappush(heap, (-q[0], q[1]))
        out = self.bisect(sorted(closed))
        out.marked_total = self.marked_total + len(set(marked))
        return out

    def refine_uniform(self) -> "HierMesh":
        return self.bisect(self.active_elements())

    # -- admissibility -------------------------------------------------------------
    def _in_small_omega(self, k: int, cell, kind: str, cache: dict) -> bool:
        key = (k, cell)
        res = cache.get(key)
        if res is None:
            if k == 0:
                res = True
            elif kind == H_ADMISSIBLE:
                box = self.multilevel_support_extension(k, cell, k - 1)
                res = self.box_refined(k - 1, box)
            else:
                box = self.levels.support_extension(k, cell)
                res = self.box_in_omega(k, box)
            cache[key] = res
        return res

    def check_admissible(self, mu: int, kind: str) -> tuple:
        """Return ``(True, None)`` or ``(False, (level, cell))`` with the first
        level cell in Omega^level lying outside omega^{level-mu+1}."""
        mu = _check_mu(mu)
        kind = _check_kind(kind)
        cache: dict = {}
        for lev in range(mu, self.num_levels):
            k = lev - mu + 1
            for par in sorted(self.refined[lev - 1]):
                anc = tuple(v >> (lev - 1 - k) for v in par)
                if not self._in_small_omega(k, anc, kind, cache):
                    return False, (lev, tuple(2 * v for v in par))
        return True, None

    def is_admissible(self, mu: int, kind: str) -> bool:
        return self.check_admissible(mu, kind)[0]

    # -- combination, comparison and I/O ------------------------------------------------
    def overlay(self, other: "HierMesh") -> "HierMesh":
        """Coarsest common refinement (per-level union of refined sets)."""
        if self.levels != other.levels:
            raise MeshError("meshes are built on different level sequences")
        n = max(len(self.refined), len(other.refined))
        refined = []
        for lev in range(n):
            a = self.refined[lev] if lev < len(self.refined) else frozenset()
            b = other.refined[lev] if lev < len(other.refined) else frozenset()
            refined.append(a | b)
        return HierMesh(self.levels, refined, validate=False)

    def is_refinement_of(self, other: "HierMesh") -> bool:
        if self.levels != other.levels or len(other.refined) > len(self.refined):
            return False
        return all(b <= a for a, b in zip(self.refined, other.refined))

    def __eq__(self, other) -> bool:
        return (isinstance(other, HierMesh) and self.levels == other.levels
                and self.refined == other.refined)

    def __hash__(self) -> int:
        return hash((self.levels, self.refined))

    def __repr__(self) -> str:
        return (f"HierMesh(levels={self.num_levels}, elements={self.num_elements}, "
                f"p={self.levels.degrees}, m={self.levels.m})")

    def to_text(self) -> str:
        lv = self.levels
        lines = ["hiermesh",
                 f"d {self.dim}",
                 "p " + " ".join(str(p) for p in lv.degrees),
                 f"m {lv.m}",
                 f"N {self.num_levels}"]
        for d, kv in enumerate(lv.base.kvs):
            lines.append(f"breakpoints {d} " + " ".join(str(b) for b in kv.breakpoints))
        for lev, cells in enumerate(self.refined):
            for c in sorted(cells):
                lines.append(f"{lev} " + " ".join(str(v) for v in c))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HierMesh":
        header: dict = {}
        breaks: dict = {}
        cells: list = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line or line == "hiermesh":
                continue
            tok = line.split()
            if tok[0] == "breakpoints":
                breaks[int(tok[1])] = [DyadicRational.from_value(t) for t in tok[2:]]
            elif tok[0] in ("d", "p", "m", "N"):
                header[tok[0]] = [int(t) for t in tok[1:]]
            else:
                cells.append(tuple(int(t) for t in tok))
        try:
            d = header["d"][0]
            degrees = header["p"]
            m = header["m"][0]
        except KeyError as exc:
            raise MeshError(f"mesh file lacks header field {exc}") from None
        if len(degrees) != d or sorted(breaks) != list(range(d)):
            raise MeshError("mesh header is inconsistent with its dimension")
        kvs = []
        for k in range(d):
            z = breaks[k]
            mult = [degrees[k] + 1] + [m] * (len(z) - 2) + [degrees[k] + 1]
            kvs.append(KnotVector(degrees[k], z, mult))
        levels = LevelSequence(TensorSpace(kvs), m)
        refined: list = []
        for c in cells:
            if len(c) != d + 1:
                raise MeshError(f"bad element line {c}")
            while len(refined) <= c[0]:
                refined.append(set())
            refined[c[0]].add(c[1:])
        mesh = cls(levels, refined)
        if "N" in header and header["N"][0] != mesh.num_levels:
            raise MeshError("level count in header does not match the element lines")
        return mesh
