"""Univariate and tensor-product B-splines.

Evaluation follows the Cox-de Boor triangle (vectorized over points),
knot insertion is expressed as a sparse refinement matrix, and the
Bezier-projection functionals give local dual coefficients.
"""
from __future__ import annotations

import math
from functools import lru_cache
from itertools import product
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .dyadic import DyadicRational

MAX_DEGREE = 8


class SplineError(ValueError):
    """Invalid spline data or an out-of-domain query."""


class KnotVector:
    """Open knot vector given by dyadic breakpoints and their multiplicities.

    Elements are the intervals between consecutive breakpoints, numbered
    from 0.  Basis functions are numbered from 0 to ``n - 1``.
    """

    def __init__(self, degree: int, breakpoints: Sequence, multiplicities: Sequence[int]):
        p = int(degree)
        if p < 0 or p > MAX_DEGREE:
            raise SplineError(f"degree must be in [0, {MAX_DEGREE}], got {p}")
        z = tuple(DyadicRational.from_value(b) for b in breakpoints)
        mult = tuple(int(k) for k in multiplicities)
        if len(z) != len(mult) or len(z) < 2:
            raise SplineError("need at least two breakpoints with one multiplicity each")
        if z[0] != 0 or z[-1] != 1:
            raise SplineError("breakpoints must start at 0 and end at 1")
        if any(a >= b for a, b in zip(z[:-1], z[1:])):
            raise SplineError("breakpoints must be strictly increasing")
        if mult[0] != p + 1 or mult[-1] != p + 1:
            raise SplineError("end breakpoints need multiplicity p+1 (open knot vector)")
        if any(k < 1 or k > max(p, 1) for k in mult[1:-1]):
            raise SplineError("interior multiplicities must lie in [1, p]")
        self.degree = p
        self.breakpoints = z
        self.multiplicities = mult
        self.n = sum(mult) - p - 1
        if self.n < 1:
            raise SplineError("knot vector has no basis functions")
        knots = np.repeat([float(b) for b in z], mult)
        knots.flags.writeable = False
        self.knots = knots
        # knot index of the last copy of each breakpoint
        last = np.cumsum(mult) - 1
        self._spans = np.asarray(last[:-1], dtype=np.int64)
        self._zf = np.array([float(b) for b in z])
        # breakpoint index of every knot
        self._knot_bp = np.repeat(np.arange(len(z)), mult)

    @classmethod
    def uniform(cls, degree: int, num_elements: int, multiplicity: int = 1) -> "KnotVector":
        """Knot vector on ``num_elements`` equal elements (a power of two, so
        that the breakpoints are dyadic)."""
        num_elements = int(num_elements)
        if num_elements < 1:
            raise SplineError("need at least one element")
        if num_elements & (num_elements - 1):
            raise SplineError("uniform knot vectors need a power-of-two element count")
        e = num_elements.bit_length() - 1
        z = [DyadicRational(j, e) for j in range(num_elements + 1)]
        mult = [degree + 1] + [multiplicity] * (num_elements - 1) + [degree + 1]
        return cls(degree, z, mult)

    @classmethod
    def from_knots(cls, degree: int, knots: Sequence) -> "KnotVector":
        """Build from a full (repeated) knot sequence."""
        z: list[DyadicRational] = []
        mult: list[int] = []
        for t in knots:
            t = DyadicRational.from_value(t)
            if z and t == z[-1]:
                mult[-1] += 1
            else:
                if z and t < z[-1]:
                    raise SplineError("knots must be non-decreasing")
                z.append(t)
                mult.append(1)
        return cls(degree, z, mult)

    # -- structure -------------------------------------------------------
    @property
    def num_elements(self) -> int:
        return len(self.breakpoints) - 1

    def __eq__(self, other) -> bool:
        return (isinstance(other, KnotVector) and self.degree == other.degree
                and self.breakpoints == other.breakpoints
                and self.multiplicities == other.multiplicities)

    def __hash__(self) -> int:
        return hash((self.degree, self.breakpoints, self.multiplicities))

    def __repr__(self) -> str:
        zs = ", ".join(f"{b}^{k}" for b, k in zip(self.breakpoints, self.multiplicities))
        return f"KnotVector(p={self.degree}, [{zs}])"

    def element_bounds(self, e) -> tuple:
        e = np.asarray(e)
        return self._zf[e], self._zf[e + 1]

    def element_span(self, e):
        """Knot index ``s`` with ``t_s < t_{s+1}`` spanning element ``e``."""
        return self._spans[np.asarray(e)]

    def element_first_function(self, e):
        """First of the p+1 basis functions that are nonzero on element ``e``."""
        return self.element_span(e) - self.degree

    def find_element(self, x):
        """Element containing ``x``; the right end point belongs to the last element."""
        x = np.asarray(x, dtype=float)
        if np.any((x < 0.0) | (x > 1.0)) or np.any(np.isnan(x)):
            raise SplineError("evaluation point outside [0, 1]")
        e = np.searchsorted(self._zf, x, side="right") - 1
        return np.minimum(e, self.num_elements - 1)

    def function_support(self, i):
        """Inclusive element range ``(first, last)`` of the support of function ``i``."""
        i = np.asarray(i)
        return self._knot_bp[i], self._knot_bp[i + self.degree + 1] - 1

    def support_extension(self, e) -> tuple:
        """Inclusive element range covered by all functions nonzero on element ``e``."""
        f = self.element_first_function(e)
        return self.function_support(f)[0], self.function_support(f + self.degree)[1]

    def greville(self) -> np.ndarray:
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        t = self.knots
        return np.array([t[i + 1:i + p + 1].mean() for i in range(self.n)])

    def contains(self, other: "KnotVector") -> bool:
        """True if ``other``'s knot multiset is contained in this one (same degree)."""
        if other.degree != self.degree:
            return False
        mine = dict(zip(self.breakpoints, self.multiplicities))
        return all(mine.get(b, 0) >= k for b, k in zip(other.breakpoints, other.multiplicities))

    def bisect(self, multiplicity: int = 1) -> "KnotVector":
        """Insert the midpoint of every element with the given multiplicity."""
        z: list[DyadicRational] = []
        mult: list[int] = []
        for j in range(self.num_elements):
            a, b = self.breakpoints[j], self.breakpoints[j + 1]
            z += [a, a.midpoint(b)]
            mult += [self.multiplicities[j], multiplicity]
        z.append(self.breakpoints[-1])
        mult.append(self.multiplicities[-1])
        return KnotVector(self.degree, z, mult)

    def windows(self, spans) -> np.ndarray:
        """Local knots ``t[s-p .. s+p+1]`` for each span ``s`` (shape ``(n, 2p+2)``)."""
        p = self.degree
        return self.knots[np.asarray(spans)[:, None] + np.arange(-p, p + 2)]


# -- evaluation kernel ------------------------------------------------------
def local_basis_ders(win: np.ndarray, x: np.ndarray, p: int, r: int = 0) -> np.ndarray:
    """Values and derivatives of the p+1 local B-splines on one knot span.

    ``win[k]`` holds the knots ``t[s-p], ..., t[s+p+1]`` of the span ``s`` used
    for point ``x[k]``.  Returns an array of shape ``(len(x), r+1, p+1)``.
    The polynomial piece of the span is used even when ``x`` lies on its
    boundary, which gives one-sided values at breakpoints.
    """
    x = np.asarray(x, dtype=float)
    npts = x.shape[0]
    if r < 0:
        raise SplineError("derivative order must be non-negative")
    if r > 2:
        raise SplineError("derivative orders above 2 are not supported")
    # left[j] = x - t[s+1-j], right[j] = t[s+j] - x, j = 1..p
    left = [None] + [x - win[:, p + 1 - j] for j in range(1, p + 1)]
    right = [None] + [win[:, p + j] - x for j in range(1, p + 1)]
    ndu = np.empty((p + 1, p + 1, npts))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        saved = np.zeros(npts)
        for k in range(j):
            ndu[j, k] = right[k + 1] + left[j - k]
            temp = ndu[k, j - 1] / ndu[j, k]
            ndu[k, j] = saved + right[k + 1] * temp
            saved = left[j - k] * temp
        ndu[j, j] = saved
    ders = np.zeros((npts, r + 1, p + 1))
    ders[:, 0, :] = ndu[:, p, :].T
    if r == 0:
        return ders
    a = np.zeros((2, p + 1, npts))
    for k0 in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, r + 1):
            d = np.zeros(npts)
            rk, pk = k0 - k, p - k
            if k0 >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if k0 - 1 <= pk else p - k0
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d = d + a[s2, j] * ndu[rk + j, pk]
            if k0 <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, k0]
                d = d + a[s2, k] * ndu[k0, pk]
            ders[:, k, k0] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, r + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return ders


def basis_ders(kv: KnotVector, x, r: int = 0, elements=None):
    """Vectorized local basis values/derivatives.

    Returns ``(first, vals)`` where ``first[k]`` is the index of the first of
    the p+1 functions that may be nonzero at ``x[k]`` and ``vals`` has shape
    ``(n, r+1, p+1)``.  ``elements`` forces the polynomial piece used.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if elements is None:
        elements = kv.find_element(x)
    else:
        elements = np.broadcast_to(np.asarray(elements), x.shape)
    spans = kv.element_span(elements)
    vals = local_basis_ders(kv.windows(spans), x, kv.degree, r)
    return spans - kv.degree, vals


def eval_nonzero_basis(kv: KnotVector, x: float):
    """Index of the first nonzero function at ``x`` and the p+1 values there."""
    first, vals = basis_ders(kv, [x], 0)
    return int(first[0]), vals[0, 0]


def eval_basis_derivatives(kv: KnotVector, x: float, r: int):
    """Values and derivatives up to order ``r`` of the local functions at ``x``."""
    if r > 2:
        raise SplineError("derivative orders above 2 are not supported")
    first, vals = basis_ders(kv, [x], r)
    return int(first[0]), vals[0]


def collocation_matrix(kv: KnotVector, x, r: int = 0) -> sp.csr_matrix:
    """Sparse matrix of the ``r``-th derivatives of all functions at the points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    first, vals = basis_ders(kv, x, r)
    p = kv.degree
    rows = np.repeat(np.arange(len(x)), p + 1)
    cols = (first[:, None] + np.arange(p + 1)).ravel()
    return sp.csr_matrix((vals[:, r, :].ravel(), (rows, cols)), shape=(len(x), kv.n))


def evaluate_spline(kv: KnotVector, coeffs, x, r: int = 0) -> np.ndarray:
    """Evaluate the ``r``-th derivative of the spline with the given coefficients."""
    coeffs = np.asarray(coeffs, dtype=float)
    first, vals = basis_ders(kv, np.atleast_1d(x), r)
    idx = first[:, None] + np.arange(kv.degree + 1)
    return np.einsum("ij,ij->i", vals[:, r, :], coeffs[idx])


# -- knot insertion ---------------------------------------------------------
def insert_knot(kv: KnotVector, x) -> tuple[KnotVector, sp.csr_matrix]:
    """Insert one knot ``x``.  Returns the new knot vector and the matrix ``A``
    with ``c_new = A @ c_old``."""
    x = DyadicRational.from_value(x)
    if not (0 < x < 1):
        raise SplineError("inserted knot must be interior")
    p = kv.degree
    knots = list(kv.knots)
    xf = float(x)
    k = int(np.searchsorted(kv.knots, xf, side="right") - 1)
    n = kv.n
    rows, cols, vals = [], [], []
    for i in range(n + 1):
        if i <= k - p:
            alpha = 1.0
        elif i >= k + 1:
            alpha = 0.0
        else:
            alpha = (xf - knots[i]) / (knots[i + p] - knots[i])
        if i < n and alpha != 0.0:
            rows.append(i)
            cols.append(i)
            vals.append(alpha)
        if i >= 1 and alpha != 1.0:
            rows.append(i)
            cols.append(i - 1)
            vals.append(1.0 - alpha)
    new_z = list(kv.breakpoints)
    new_m = list(kv.multiplicities)
    if x in new_z:
        new_m[new_z.index(x)] += 1
    else:
        pos = int(np.searchsorted(kv._zf, xf))
        new_z.insert(pos, x)
        new_m.insert(pos, 1)
    new = KnotVector(p, new_z, new_m)
    return new, sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))


def knot_difference(coarse: KnotVector, fine: KnotVector) -> list[DyadicRational]:
    """Knots of ``fine`` missing from ``coarse`` (with repetition)."""
    if coarse.degree != fine.degree or not fine.contains(coarse):
        raise SplineError("knot vectors are not nested")
    mine = dict(zip(coarse.breakpoints, coarse.multiplicities))
    out = []
    for b, k in zip(fine.breakpoints, fine.multiplicities):
        out += [b] * (k - mine.get(b, 0))
    return out


def boehm_insertion_matrix(coarse: KnotVector, fine: KnotVector) -> sp.csr_matrix:
    """Refinement matrix by composing single-knot insertions (quadratic cost)."""
    mat = sp.identity(coarse.n, format="csr")
    kv = coarse
    for x in knot_difference(coarse, fine):
        kv, a = insert_knot(kv, x)
        mat = (a @ mat).tocsr()
    return mat


@lru_cache(maxsize=256)
def knot_insertion_matrix(coarse: KnotVector, fine: KnotVector) -> sp.csr_matrix:
    """Sparse ``M`` (n_fine x n_coarse) with ``fine spline(M c) == coarse spline(c)``.

    Each row is computed directly from the discrete B-spline recursion, which
    yields the same matrix as inserting the missing knots one by one.
    """
    knot_difference(coarse, fine)  # nesting check
    p = coarse.degree
    t = coarse.knots
    tau = fine.knots
    rows_j = np.arange(fine.n)
    # coarse span containing tau_j, restricted to non-degenerate spans
    mu = np.searchsorted(t, tau[rows_j], side="right") - 1
    mu = np.clip(mu, p, coarse.n - 1)
    alpha = np.ones((fine.n, 1))
    for k in range(1, p + 1):
        xk = tau[rows_j + k]
        new = np.zeros((fine.n, k + 1))
        for r in range(k):
            hi = t[mu + 1 + r]
            lo = t[mu + 1 + r - k]
            w = alpha[:, r] / (hi - lo)
            new[:, r] += w * (hi - xk)
            new[:, r + 1] += w * (xk - lo)
        alpha = new
    cols = mu[:, None] - p + np.arange(p + 1)
    mat = sp.csr_matrix((alpha.ravel(), (np.repeat(rows_j, p + 1), cols.ravel())),
                        shape=(fine.n, coarse.n))
    mat.eliminate_zeros()
    return mat


# -- tensor product ---------------------------------------------------------
class TensorSpace:
    """Tensor product of univariate spline spaces on ``[0,1]^d``."""

    def __init__(self, kvs: Sequence[KnotVector]):
        self.kvs = tuple(kvs)
        if not 1 <= len(self.kvs) <= 3:
            raise SplineError("tensor spaces support 1 to 3 directions")

    @property
    def dim(self) -> int:
        return len(self.kvs)

    @property
    def degrees(self) -> tuple:
        return tuple(kv.degree for kv in self.kvs)

    @property
    def shape(self) -> tuple:
        return tuple(kv.n for kv in self.kvs)

    @property
    def element_shape(self) -> tuple:
        return tuple(kv.num_elements for kv in self.kvs)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def __eq__(self, other) -> bool:
        return isinstance(other, TensorSpace) and self.kvs == other.kvs

    def __hash__(self) -> int:
        return hash(self.kvs)

    def support_extension(self, element) -> tuple:
        """Inclusive element ranges ``((lo_1, hi_1), ...)`` of the support extension."""
        return tuple(tuple(int(v) for v in kv.support_extension(e))
                     for kv, e in zip(self.kvs, element))

    def function_support(self, i) -> tuple:
        return tuple(tuple(int(v) for v in kv.function_support(k))
                     for kv, k in zip(self.kvs, i))

    def element_bounds(self, element) -> tuple:
        return tuple(tuple(float(v) for v in kv.element_bounds(e))
                     for kv, e in zip(self.kvs, element))

    def collocation(self, x) -> sp.csr_matrix:
        """Values of all tensor functions (lexicographic, last index fastest) at points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        npts = x.shape[0]
        vals = np.ones((npts, 1))
        cols = np.zeros((npts, 1), dtype=np.int64)
        for d, kv in enumerate(self.kvs):
            first, v = basis_ders(kv, x[:, d], 0)
            idx = first[:, None] + np.arange(kv.degree + 1)
            vals = (vals[:, :, None] * v[:, 0, None, :]).reshape(npts, -1)
            cols = (cols[:, :, None] * kv.n + idx[:, None, :]).reshape(npts, -1)
        rows = np.repeat(np.arange(npts), vals.shape[1])
        return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(npts, self.size))

    def evaluate(self, coeffs, x) -> np.ndarray:
        return self.collocation(x) @ np.asarray(coeffs, dtype=float).ravel()

    def choose_element(self, i) -> tuple:
        """Element of supp(B_i) whose center is nearest the support midpoint
        (lowest index on ties)."""
        out = []
        for kv, k in zip(self.kvs, i):
            lo, hi = (int(v) for v in kv.function_support(k))
            mid = 0.5 * (kv._zf[lo] + kv._zf[hi + 1])
            es = np.arange(lo, hi + 1)
            centers = 0.5 * (kv._zf[es] + kv._zf[es + 1])
            out.append(int(es[np.argmin(np.abs(centers - mid))]))
        return tuple(out)

    def local_projection(self, element, f: Callable) -> np.ndarray:
        """Coefficients of the local L2 projection of ``f`` onto the polynomials
        on ``element``, in the basis of the (p+1)^d functions nonzero there."""
        grids, mats = [], []
        for kv, e in zip(self.kvs, element):
            a, b = (float(v) for v in kv.element_bounds(e))
            g, _ = gauss_rule(kv.degree + 1, a, b)
            _, vals = basis_ders(kv, g, 0, elements=np.full(g.shape, e))
            grids.append(g)
            mats.append(vals[:, 0, :])
        pts = np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=1)
        fv = np.asarray(f(pts), dtype=float).reshape([len(g) for g in grids])
        # the (p+1)-point rule is exact for the projection, which then
        # coincides with interpolation at the Gauss nodes
        for d, m in enumerate(mats):
            fv = np.moveaxis(np.tensordot(np.linalg.inv(m), fv, axes=([1], [d])), 0, d)
        return fv

    def bezier_projection_coefficient(self, i, f: Callable, element=None) -> float:
        """Dual coefficient of ``B_i`` via local projection on a chosen element."""
        i = tuple(int(k) for k in i)
        if element is None:
            element = self.choose_element(i)
        local = self.local_projection(element, f)
        idx = tuple(k - int(kv.element_first_function(e))
                    for k, kv, e in zip(i, self.kvs, element))
        if any(j < 0 or j > kv.degree for j, kv in zip(idx, self.kvs)):
            raise SplineError("element is not in the support of the function")
        val = float(local[idx])
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite projection coefficient for {i} on {element}")
        return val

    def bezier_projection(self, f: Callable) -> np.ndarray:
        """All dual coefficients (flattened lexicographically)."""
        out = np.empty(self.shape)
        for i in product(*(range(n) for n in self.shape)):
            out[i] = self.bezier_projection_coefficient(i, f)
        return out.ravel()


@lru_cache(maxsize=64)
def _leggauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def gauss_rule(n: int, a=0.0, b=1.0):
    """``n``-point Gauss-Legendre rule on ``[a, b]`` (broadcasts over arrays)."""
    x, w = _leggauss(int(n))
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    h = 0.5 * (b - a)
    return a + h * (x + 1.0), h * w
