"""Deterministic self-checks run by ``adaptiga check``.

Each check returns ``(ok, detail)``; they are quick versions of the
invariants exercised by the test suite and take a seeded generator.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .adapt import MarkParams, dorfler_mark
from .basis import HB, THB, HierBasis
from .fem import h1_error, solve_problem
from .geometry import identity_square, quarter_annulus
from .hierarchy import HierMesh, LevelSequence
from .problems import mapped_spline_problem
from .spline import (KnotVector, basis_ders, boehm_insertion_matrix, evaluate_spline,
                     knot_insertion_matrix)


def random_knot_vector(rng, p: int, max_elements: int = 6) -> KnotVector:
    """Open knot vector with random dyadic interior breakpoints and multiplicities."""
    n = int(rng.integers(1, max_elements + 1))
    cells = rng.choice(np.arange(1, 64), size=n - 1, replace=False) if n > 1 else []
    z = ["0"] + [f"{c}/64" for c in sorted(cells)] + ["1"]
    mult = [p + 1] + [int(rng.integers(1, max(p, 1) + 1)) for _ in cells] + [p + 1]
    return KnotVector(p, z, mult)


def check_spline_kernel(rng, n_points: int = 2000) -> tuple:
    worst = {"pu": 0.0, "fd": 0.0, "insert": 0.0, "oslo": 0.0}
    for p in range(1, 6):
        kv = random_knot_vector(rng, p)
        x = rng.random(n_points)
        _, vals = basis_ders(kv, x, 1)
        worst["pu"] = max(worst["pu"], float(np.abs(vals[:, 0].sum(axis=1) - 1).max()))
        c = rng.standard_normal(kv.n)
        xi = np.clip(x, 1e-3, 1 - 1e-3)
        eps = 1e-6
        fd = (evaluate_spline(kv, c, xi + eps) - evaluate_spline(kv, c, xi - eps)) / (2 * eps)
        # skip points whose difference stencil straddles a breakpoint
        bp = np.array([float(b) for b in kv.breakpoints])
        ok = np.min(np.abs(xi[:, None] - bp[None, :]), axis=1) > 2 * eps
        d1 = evaluate_spline(kv, c, xi, 1)
        scale = max(1.0, float(np.abs(d1).max()))
        worst["fd"] = max(worst["fd"], float(np.abs(fd - d1)[ok].max(initial=0.0)) / scale)
        fine = kv.bisect(min(p, 1) if p else 1)
        t = knot_insertion_matrix(kv, fine)
        worst["insert"] = max(worst["insert"], float(np.abs(
            evaluate_spline(fine, t @ c, x) - evaluate_spline(kv, c, x)).max()))
        worst["oslo"] = max(worst["oslo"], float(abs(t - boehm_insertion_matrix(kv, fine)).max()))
    ok = (worst["pu"] <= 1e-13 and worst["fd"] <= 1e-6 and worst["insert"] <= 1e-12
          and worst["oslo"] <= 1e-12)
    return ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items())


def random_refinement(rng, levels: LevelSequence, mu: int, kind: str, steps: int,
                      fraction: float = 0.1) -> list:
    """Sequence of meshes produced by refining random marked sets."""
    mesh = HierMesh.initial(levels)
    out = [(mesh, 0)]
    for _ in range(steps):
        act = mesh.active_elements()
        k = max(1, int(fraction * len(act)))
        pick = rng.choice(len(act), size=k, replace=False)
        mesh = mesh.refine([act[j] for j in pick], mu, kind)
        out.append((mesh, k))
    return out


def check_hierarchy(rng, sequences: int = 6) -> tuple:
    worst_pu = 0.0
    for s in range(sequences):
        p = (2, 3, 4)[s % 3]
        mu = (2, 3, 4)[s % 3]
        kind = "HT"[s % 2]
        lv = LevelSequence.uniform((p, p), (2, 2), int(rng.integers(1, p + 1)))
        seq = random_refinement(rng, lv, mu, kind, 3)
        mesh = seq[-1][0]
        ok, witness = mesh.check_admissible(mu, kind)
        if not ok:
            return False, f"non-admissible mesh (p={p}, mu={mu}, {kind}) at {witness}"
        basis = HierBasis(mesh, THB)
        spans = [basis.level_span(*q) for q in mesh.active_elements()]
        if max(spans) > mu:
            return False, f"level span {max(spans)} exceeds mu={mu}"
        v = basis.evaluate_functions(rng.random((100, 2)))
        worst_pu = max(worst_pu, float(np.abs(v.sum(axis=1) - 1).max()))
    return worst_pu <= 1e-12, f"THB partition of unity defect {worst_pu:.1e}"


def check_dorfler(rng, instances: int = 100) -> tuple:
    for _ in range(instances):
        n = int(rng.integers(1, 9))
        ind = rng.random(n) ** 2
        theta = float(rng.uniform(0.05, 1.0))
        got = dorfler_mark(ind, MarkParams(theta))
        target = theta * math.fsum(ind)
        best = next(k for k in range(1, n + 1)
                    if any(math.fsum(ind[list(c)]) >= target
                           for c in itertools.combinations(range(n), k)))
        if len(got) != best or math.fsum(ind[got]) < target:
            return False, f"marked {len(got)} elements, minimum is {best}"
    return True, f"{instances} instances minimal"


def check_galerkin(rng) -> tuple:
    worst = 0.0
    for geom in (identity_square(), quarter_annulus()):
        lv = LevelSequence.uniform((2, 2), (4, 4))
        mesh = HierMesh.initial(lv).refine([(0, (0, 0))], 2, "T")
        space = lv.level_space(0)
        c = np.zeros(space.shape)
        c[1:-1, 1:-1] = rng.standard_normal((space.shape[0] - 2, space.shape[1] - 2))
        problem = mapped_spline_problem(geom, space, c)
        for flavor in (HB, THB):
            sol = solve_problem(HierBasis(mesh, flavor), geom, problem, quad_extra=2)
            worst = max(worst, h1_error(sol, geom, problem, quad_extra=2)[1])
    return worst <= 1e-8, f"H1 error of representable solutions {worst:.1e}"


CHECKS = {
    "spline-kernel": check_spline_kernel,
    "hierarchy": check_hierarchy,
    "dorfler": check_dorfler,
    "galerkin": check_galerkin,
}


def run_checks(seed: int = 0) -> list:
    """Run every check with its own generator; returns ``(name, ok, detail)``."""
    out = []
    for k, (name, fn) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, k])
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, reported by name
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
