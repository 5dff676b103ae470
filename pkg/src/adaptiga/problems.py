"""Manufactured model problems with known solutions (all with A = I, b = 0, c = 0)."""
from __future__ import annotations

import numpy as np

from .fem import EllipticProblem
from .geometry import NurbsGeometry
from .spline import TensorSpace, basis_ders


def sine_problem() -> EllipticProblem:
    """``u = sin(pi x) sin(pi y)`` on the unit square."""
    pi = np.pi

    def u(x):
        return np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1])

    def grad(x):
        sx, sy = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        cx, cy = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        return np.stack([pi * cx * sy, pi * sx * cy], axis=1)

    return EllipticProblem(f=lambda x: 2 * pi ** 2 * u(x), u=u, grad_u=grad, name="sine")


def edge_singularity_problem(a: float = 2.3, b: float = 2.9) -> EllipticProblem:
    """``u = x^a (1-x) y^b (1-y)``, whose derivatives are singular at x=0 and y=0."""

    def parts(s, e):
        # exponents above 2 keep all three expressions finite at s = 0
        s = np.maximum(s, 0.0)
        g = s ** e * (1 - s)
        dg = e * s ** (e - 1) * (1 - s) - s ** e
        d2g = e * (e - 1) * s ** (e - 2) - (e + 1) * e * s ** (e - 1)
        return g, dg, d2g

    def u(x):
        return parts(x[:, 0], a)[0] * parts(x[:, 1], b)[0]

    def grad(x):
        gx, dgx, _ = parts(x[:, 0], a)
        gy, dgy, _ = parts(x[:, 1], b)
        return np.stack([dgx * gy, gx * dgy], axis=1)

    def f(x):
        gx, _, d2x = parts(x[:, 0], a)
        gy, _, d2y = parts(x[:, 1], b)
        return -(d2x * gy + gx * d2y)

    return EllipticProblem(f=f, u=u, grad_u=grad, name="edge-singularity")


def bump_problem(lo: float = 0.25, hi: float = 0.75) -> EllipticProblem:
    """``u = sin^2(pi (x-lo)/(hi-lo)) sin(pi y)`` on the strip lo <= x <= hi, zero outside.

    ``u`` is C^1 across the lines x = lo and x = hi while the load jumps there.
    The break lines are declared in parametric coordinates, which matches the
    physical ones on the identity square.
    """
    k = np.pi / (hi - lo)
    pi = np.pi

    def inside(x):
        return (x[:, 0] >= lo) & (x[:, 0] <= hi)

    def u(x):
        s = np.sin(k * (x[:, 0] - lo))
        return np.where(inside(x), s * s * np.sin(pi * x[:, 1]), 0.0)

    def grad(x):
        arg = k * (x[:, 0] - lo)
        sy = np.sin(pi * x[:, 1])
        gx = k * np.sin(2 * arg) * sy
        gy = pi * np.sin(arg) ** 2 * np.cos(pi * x[:, 1])
        g = np.stack([gx, gy], axis=1)
        return np.where(inside(x)[:, None], g, 0.0)

    def f(x):
        arg = k * (x[:, 0] - lo)
        sy = np.sin(pi * x[:, 1])
        uxx = 2 * k * k * np.cos(2 * arg) * sy
        uyy = -pi * pi * np.sin(arg) ** 2 * sy
        return np.where(inside(x), -(uxx + uyy), 0.0)

    return EllipticProblem(f=f, u=u, grad_u=grad, name=f"bump[{lo},{hi}]",
                           breaks={0: (lo, hi)})


def polynomial_bubble(degree_x: int = 2, degree_y: int = 2) -> EllipticProblem:
    """``u = x(1-x) y(1-y)`` raised to powers so that it has the given degrees."""
    if degree_x < 2 or degree_y < 2:
        raise ValueError("bubble needs degree at least 2 in each direction")
    ex, ey = degree_x - 1, degree_y - 1

    def g(s, e):
        return s ** e * (1 - s)

    def dg(s, e):
        return e * s ** (e - 1) * (1 - s) - s ** e

    def d2g(s, e):
        return (e * (e - 1) * s ** (e - 2) if e > 1 else 0.0) * (1 - s) - 2 * e * s ** (e - 1)

    def u(x):
        return g(x[:, 0], ex) * g(x[:, 1], ey)

    def grad(x):
        return np.stack([dg(x[:, 0], ex) * g(x[:, 1], ey), g(x[:, 0], ex) * dg(x[:, 1], ey)], axis=1)

    def f(x):
        return -(d2g(x[:, 0], ex) * g(x[:, 1], ey) + g(x[:, 0], ex) * d2g(x[:, 1], ey))

    return EllipticProblem(f=f, u=u, grad_u=grad, name="bubble")


def mapped_spline_problem(geom: NurbsGeometry, space: TensorSpace, coeffs) -> EllipticProblem:
    """Problem whose exact solution is the push-forward ``S o F^{-1}`` of a
    tensor spline ``S`` (so it lies in every space containing ``S``)."""
    coeffs = np.asarray(coeffs, dtype=float).reshape(space.shape)

    def param_derivs(t):
        (f1, b1), (f2, b2) = (basis_ders(kv, t[:, d], 2) for d, kv in enumerate(space.kvs))
        p1, p2 = space.degrees
        i1 = f1[:, None] + np.arange(p1 + 1)
        i2 = f2[:, None] + np.arange(p2 + 1)
        loc = coeffs[i1[:, :, None], i2[:, None, :]]

        def comb(a, b):
            return np.einsum("ni,nj,nij->n", b1[:, a], b2[:, b], loc)

        val = comb(0, 0)
        grad = np.stack([comb(1, 0), comb(0, 1)], axis=1)
        hess = np.stack([np.stack([comb(2, 0), comb(1, 1)], 1),
                         np.stack([comb(1, 1), comb(0, 2)], 1)], 1)
        return val, grad, hess

    def physical(x):
        t = geom.inverse(x)
        _, jac, hf = geom.evaluate(t, 2)
        val, gt, ht = param_derivs(t)
        jinv = np.linalg.inv(jac)
        gx = np.einsum("nak,na->nk", jinv, gt)
        hx = np.einsum("nak,nab,nbl->nkl", jinv, ht - np.einsum("nk,nkab->nab", gx, hf), jinv)
        return val, gx, hx

    return EllipticProblem(f=lambda x: -np.trace(physical(x)[2], axis1=1, axis2=2),
                           u=lambda x: physical(x)[0],
                           grad_u=lambda x: physical(x)[1], name="mapped-spline")
