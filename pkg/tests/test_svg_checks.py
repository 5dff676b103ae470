import xml.etree.ElementTree as ET

import numpy as np

from adaptiga import HierMesh, LevelSequence, quarter_annulus
from adaptiga.checks import CHECKS, run_checks
from adaptiga.svg import level_gray, mesh_svg, write_mesh_svg

SVG = "{http://www.w3.org/2000/svg}"


def small_mesh():
    lv = LevelSequence.uniform((2, 2), (2, 2))
    return HierMesh.initial(lv).refine([(0, (0, 0))], 2, "T")


def test_level_gray_gets_darker():
    shades = [int(level_gray(k, 4)[1:3], 16) for k in range(4)]
    assert shades[0] == 255 and shades == sorted(shades, reverse=True)
    assert level_gray(0, 1) == "#ffffff"


def test_svg_has_one_polygon_per_element(tmp_path):
    mesh = small_mesh()
    marked = [mesh.active_elements()[0]]
    root = ET.fromstring(mesh_svg(mesh, marked=marked, title="t"))
    polys = root.findall(f"{SVG}polygon")
    assert len(polys) == mesh.num_elements
    assert sum(p.get("stroke") == "#d00000" for p in polys) == 1
    path = write_mesh_svg(tmp_path / "m.svg", mesh, quarter_annulus())
    assert ET.parse(path).getroot().tag == f"{SVG}svg"


def test_svg_physical_coordinates_inside_canvas():
    root = ET.fromstring(mesh_svg(small_mesh(), quarter_annulus(), size=200))
    w, h = float(root.get("width")), float(root.get("height"))
    for poly in root.findall(f"{SVG}polygon"):
        xy = np.array([[float(v) for v in pt.split(",")] for pt in poly.get("points").split()])
        assert xy.min() >= 0 and xy[:, 0].max() <= w and xy[:, 1].max() <= h


def test_self_checks_pass():
    results = run_checks(0)
    assert [name for name, _, _ in results] == list(CHECKS)
    assert all(ok for _, ok, _ in results), results


def test_self_check_failure_is_reported():
    def broken(rng):
        raise RuntimeError("boom")

    CHECKS["broken"] = broken
    try:
        results = dict((n, (ok, d)) for n, ok, d in run_checks(0))
    finally:
        del CHECKS["broken"]
    assert results["broken"] == (False, "RuntimeError: boom")
