"""Single-patch NURBS parametrizations of 2D domains."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .spline import KnotVector, basis_ders, gauss_rule


class GeometryError(ValueError):
    """Invalid geometry data or a degenerate map."""


class NurbsGeometry:
    """Tensor NURBS map ``F: [0,1]^2 -> R^dim``.

    ``control`` has shape ``(n1, n2, dim)`` and ``weights`` shape ``(n1, n2)``.
    """

    def __init__(self, kvs: Sequence[KnotVector], control, weights=None):
        self.kvs = tuple(kvs)
        if len(self.kvs) != 2:
            raise GeometryError("only bivariate parametrizations are supported")
        control = np.asarray(control, dtype=float)
        shape = tuple(kv.n for kv in self.kvs)
        if control.shape[:2] != shape:
            raise GeometryError(f"expected control net of shape {shape}, got {control.shape[:2]}")
        if weights is None:
            weights = np.ones(shape)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != shape:
            raise GeometryError("weights must match the control net")
        if np.any(weights <= 0):
            raise GeometryError("weights must be strictly positive")
        self.control = control
        self.weights = weights
        self.dim = control.shape[2]
        # homogeneous control points (w*C, w)
        self._hom = np.concatenate([control * weights[..., None], weights[..., None]], axis=2)

    @property
    def degrees(self) -> tuple:
        return tuple(kv.degree for kv in self.kvs)

    def breakpoints(self) -> tuple:
        return tuple(kv.breakpoints for kv in self.kvs)

    def evaluate(self, t, order: int = 1):
        """Map points and return ``(x, DF, D2F)`` up to the requested order.

        ``x`` has shape ``(n, dim)``, ``DF`` ``(n, dim, 2)`` with
        ``DF[:, k, a] = dF_k/dt_a`` and ``D2F`` ``(n, dim, 2, 2)``.
        """
        t = np.atleast_2d(np.asarray(t, dtype=float))
        r = min(order, 2)
        (f1, b1), (f2, b2) = (basis_ders(kv, t[:, d], r) for d, kv in enumerate(self.kvs))
        p1, p2 = self.degrees
        i1 = f1[:, None] + np.arange(p1 + 1)
        i2 = f2[:, None] + np.arange(p2 + 1)
        loc = self._hom[i1[:, :, None], i2[:, None, :]]  # (n, p1+1, p2+1, dim+1)

        def comb(a, b):
            return np.einsum("ni,nj,nijk->nk", b1[:, a], b2[:, b], loc)

        h = {(0, 0): comb(0, 0)}
        if order >= 1:
            h[1, 0], h[0, 1] = comb(1, 0), comb(0, 1)
        if order >= 2:
            h[2, 0], h[1, 1], h[0, 2] = comb(2, 0), comb(1, 1), comb(0, 2)
        return self._quotient(h, order)

    def evaluate_grid(self, t1, t2, order: int = 1):
        """Like :meth:`evaluate` on per-element tensor grids.

        ``t1`` has shape ``(ne, q1)`` and ``t2`` shape ``(ne, q2)``; row ``e``
        must lie in a single element of the parametrization.  Results are
        flattened per element with the second coordinate fastest, i.e. ``x``
        has shape ``(ne, q1*q2, dim)``.
        """
        t1 = np.asarray(t1, dtype=float)
        t2 = np.asarray(t2, dtype=float)
        ne, q1 = t1.shape
        q2 = t2.shape[1]
        r = min(order, 2)
        tabs, firsts = [], []
        for kv, t in zip(self.kvs, (t1, t2)):
            el = kv.find_element(0.5 * (t.min(axis=1) + t.max(axis=1)))
            f, b = basis_ders(kv, t.ravel(), r, np.repeat(el, t.shape[1]))
            tabs.append(b.reshape(ne, t.shape[1], r + 1, -1))
            firsts.append(f.reshape(ne, -1)[:, 0])
        p1, p2 = self.degrees
        i1 = firsts[0][:, None] + np.arange(p1 + 1)
        i2 = firsts[1][:, None] + np.arange(p2 + 1)
        loc = self._hom[i1[:, :, None], i2[:, None, :]]       # (ne, p1+1, p2+1, K)
        k = loc.shape[-1]
        b1, b2 = tabs

        def comb(a, b):
            tmp = b1[:, :, a] @ loc.reshape(ne, p1 + 1, -1)     # (ne, q1, (p2+1) K)
            tmp = tmp.reshape(ne, q1, p2 + 1, k).transpose(0, 1, 3, 2)
            out = tmp @ b2[:, None, :, b].transpose(0, 1, 3, 2)  # (ne, q1, K, q2)
            return out.transpose(0, 1, 3, 2).reshape(ne * q1 * q2, k)

        h = {(0, 0): comb(0, 0)}
        if order >= 1:
            h[1, 0], h[0, 1] = comb(1, 0), comb(0, 1)
        if order >= 2:
            h[2, 0], h[1, 1], h[0, 2] = comb(2, 0), comb(1, 1), comb(0, 2)
        x, dx, ddx = self._quotient(h, order)
        shape = (ne, q1 * q2)
        return (x.reshape(shape + x.shape[1:]),
                None if dx is None else dx.reshape(shape + dx.shape[1:]),
                None if ddx is None else ddx.reshape(shape + ddx.shape[1:]))

    def _quotient(self, h: dict, order: int):
        """Derivatives of the rational map from those of the homogeneous map."""
        w = h[0, 0][:, -1:]
        x = h[0, 0][:, :-1] / w
        if order == 0:
            return x, None, None
        h1 = [h[1, 0], h[0, 1]]
        dx = np.stack([(g[:, :-1] - g[:, -1:] * x) / w for g in h1], axis=2)
        if order == 1:
            return x, dx, None
        h2 = [[h[2, 0], h[1, 1]], [h[1, 1], h[0, 2]]]
        ddx = np.empty((x.shape[0], self.dim, 2, 2))
        for a in range(2):
            for b in range(2):
                g = h2[a][b]
                ddx[:, :, a, b] = (g[:, :-1] - g[:, -1:] * x
                                   - h1[a][:, -1:] * dx[:, :, b]
                                   - h1[b][:, -1:] * dx[:, :, a]) / w
        return x, dx, ddx

    def map(self, t) -> np.ndarray:
        return self.evaluate(t, 0)[0]

    def jacobian(self, t) -> np.ndarray:
        return self.evaluate(t, 1)[1]

    def inverse(self, x, tol: float = 1e-13, maxiter: int = 50) -> np.ndarray:
        """Parametric preimages of physical points by damped Newton iteration."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.full((x.shape[0], 2), 0.5)
        for _ in range(maxiter):
            fx, jac, _ = self.evaluate(t, 1)
            res = fx - x
            if np.max(np.abs(res)) < tol:
                break
            step = np.linalg.solve(jac, res[..., None])[..., 0]
            t = np.clip(t - step, 0.0, 1.0)
        else:
            fx = self.map(t)
            if np.max(np.abs(fx - x)) > 1e3 * tol:
                raise GeometryError("inverse map did not converge")
        return t

    # -- element measures -------------------------------------------------------
    def element_area(self, box, n_gauss: int | None = None) -> float:
        """Physical area of the image of a parametric box ``((a1,b1),(a2,b2))``."""
        if n_gauss is None:
            n_gauss = max(self.degrees) + 1
        (a1, b1), (a2, b2) = box
        g1, w1 = gauss_rule(n_gauss, a1, b1)
        g2, w2 = gauss_rule(n_gauss, a2, b2)
        pts = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
        jac = self.jacobian(pts)
        det = np.abs(np.linalg.det(jac)).reshape(len(g1), len(g2))
        area = float(w1 @ det @ w2)
        if not area > 0.0:
            raise GeometryError(f"non-positive measured area on element {box}")
        return area

    def element_size(self, box, n_gauss: int | None = None) -> float:
        """Element size ``h = |Q|^(1/2)``."""
        return math.sqrt(self.element_area(box, n_gauss))

    def jacobian_sample(self, n: int = 11) -> dict:
        """Determinant range and worst condition number of DF on a sample grid."""
        s = np.linspace(0.0, 1.0, n)
        pts = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
        jac = self.jacobian(pts)
        det = np.linalg.det(jac)
        return {"det_min": float(det.min()), "det_max": float(det.max()),
                "cond_max": float(np.max(np.linalg.cond(jac)))}

    # -- I/O ----------------------------------------------------------------------
    def to_text(self) -> str:
        lines = ["# NURBS patch; control points with the first index varying fastest",
                 f"dim {self.dim}",
                 "degrees " + " ".join(str(p) for p in self.degrees)]
        for d, kv in enumerate(self.kvs):
            pairs = " ".join(f"{b}:{k}" for b, k in zip(kv.breakpoints, kv.multiplicities))
            lines.append(f"knots{d + 1} {pairs}")
        lines.append("points")
        n1, n2 = self.weights.shape
        for j in range(n2):
            for i in range(n1):
                vals = list(self.control[i, j]) + [self.weights[i, j]]
                lines.append(" ".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "NurbsGeometry":
        dim = None
        degrees = None
        knots: dict = {}
        rows: list = []
        in_points = False
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if in_points:
                rows.append([float(v) for v in tok])
            elif tok[0] == "dim":
                dim = int(tok[1])
            elif tok[0] == "degrees":
                degrees = [int(v) for v in tok[1:]]
            elif tok[0].startswith("knots"):
                pairs = [t.split(":") for t in tok[1:]]
                knots[int(tok[0][5:]) - 1] = ([b for b, _ in pairs], [int(k) for _, k in pairs])
            elif tok[0] == "points":
                in_points = True
            else:
                raise GeometryError(f"unknown geometry header line: {line!r}")
        if dim is None or degrees is None or sorted(knots) != [0, 1] or len(degrees) != 2:
            raise GeometryError("geometry file needs dim, two degrees and knots1/knots2")
        kvs = [KnotVector(degrees[d], *knots[d]) for d in range(2)]
        n1, n2 = kvs[0].n, kvs[1].n
        arr = np.asarray(rows, dtype=float)
        if arr.shape != (n1 * n2, dim + 1):
            raise GeometryError(f"expected {n1 * n2} rows of {dim + 1} numbers, got {arr.shape}")
        arr = arr.reshape(n2, n1, dim + 1).transpose(1, 0, 2)
        return cls(kvs, arr[..., :dim], arr[..., dim])

    @classmethod
    def load(cls, path) -> "NurbsGeometry":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise GeometryError(f"cannot read geometry file {path}: {exc}") from None
        return cls.from_text(text)


def identity_square() -> NurbsGeometry:
    """Bilinear map of the unit square onto itself."""
    kv = KnotVector.uniform(1, 1)
    ctrl = np.array([[[0.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 1.0]]])
    return NurbsGeometry([kv, kv], ctrl)


def rectangle(x0: float, x1: float, y0: float, y1: float) -> NurbsGeometry:
    """Bilinear map onto an axis-aligned rectangle."""
    kv = KnotVector.uniform(1, 1)
    ctrl = np.array([[[x0, y0], [x0, y1]], [[x1, y0], [x1, y1]]], dtype=float)
    return NurbsGeometry([kv, kv], ctrl)


def quarter_annulus(r_inner: float = 1.0, r_outer: float = 2.0) -> NurbsGeometry:
    """Quarter annulus in the first quadrant.

    The first parameter is radial (``t1 = 0`` is the inner arc), the second
    runs counterclockwise from the x-axis to the y-axis along exact circles.
    """
    radial = KnotVector.uniform(1, 1)
    circ = KnotVector.uniform(2, 1)
    s = math.sqrt(0.5)
    ctrl = np.empty((2, 3, 2))
    for i, r in enumerate((r_inner, r_outer)):
        ctrl[i] = [[r, 0.0], [r, r], [0.0, r]]
    weights = np.array([[1.0, s, 1.0], [1.0, s, 1.0]])
    return NurbsGeometry([radial, circ], ctrl, weights)


PRESETS = {"square": identity_square, "annulus": quarter_annulus}


def get_geometry(name_or_path: str) -> NurbsGeometry:
    """Preset name (``square`` or ``annulus``) or a geometry file path."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]()
    return NurbsGeometry.load(name_or_path)
