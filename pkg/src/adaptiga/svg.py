"""SVG snapshots of hierarchical meshes, one gray level per refinement level."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import NurbsGeometry
from .hierarchy import HierMesh


def level_gray(level: int, num_levels: int) -> str:
    """Fill color: white for level 0, darker for finer levels."""
    if num_levels <= 1:
        return "#ffffff"
    v = int(round(255 - 200 * level / (num_levels - 1)))
    return f"#{v:02x}{v:02x}{v:02x}"


def mesh_svg(mesh: HierMesh, geom: Optional[NurbsGeometry] = None, size: int = 480,
             samples: int = 4, marked=(), title: str = "") -> str:
    """SVG text of the active elements, drawn in physical coordinates when a
    geometry is given (edges sampled at ``samples`` points) and in the unit
    square otherwise.  Elements in ``marked`` get a red outline."""
    lv = mesh.levels
    els = mesh.active_elements()
    s = np.linspace(0.0, 1.0, samples + 1)
    polys = []
    for lev, cell in els:
        (a1, b1), (a2, b2) = [tuple(float(v) for v in lv.element_bounds(lev, d, cell[d]))
                              for d in range(2)]
        u = a1 + (b1 - a1) * s
        v = a2 + (b2 - a2) * s
        ring = np.concatenate([
            np.stack([u, np.full_like(u, a2)], 1),
            np.stack([np.full_like(v, b1), v], 1)[1:],
            np.stack([u[::-1], np.full_like(u, b2)], 1)[1:],
            np.stack([np.full_like(v, a1), v[::-1]], 1)[1:-1],
        ])
        polys.append(ring)
    pts = np.concatenate(polys) if polys else np.zeros((0, 2))
    if geom is not None and len(pts):
        pts = geom.map(pts)
    lo = pts.min(axis=0) if len(pts) else np.zeros(2)
    hi = pts.max(axis=0) if len(pts) else np.ones(2)
    span = float(max(hi - lo)) or 1.0
    pad = 8
    scale = (size - 2 * pad) / span
    width = int(np.ceil((hi[0] - lo[0]) * scale)) + 2 * pad
    height = int(np.ceil((hi[1] - lo[1]) * scale)) + 2 * pad
    marked = set(marked)
    nlev = mesh.num_levels
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">']
    if title:
        out.append(f"<title>{title}</title>")
    k = 0
    for (lev, cell), ring in zip(els, polys):
        xy = pts[k:k + len(ring)]
        k += len(ring)
        # flip y so that the domain is drawn with the usual orientation
        coords = " ".join(f"{pad + (x - lo[0]) * scale:.2f},{height - pad - (y - lo[1]) * scale:.2f}"
                          for x, y in xy)
        stroke = "#d00000" if (lev, cell) in marked else "#000000"
        out.append(f'<polygon points="{coords}" fill="{level_gray(lev, nlev)}" '
                   f'stroke="{stroke}" stroke-width="0.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_mesh_svg(path, mesh: HierMesh, geom: Optional[NurbsGeometry] = None, **kw) -> Path:
    path = Path(path)
    path.write_text(mesh_svg(mesh, geom, **kw))
    return path
