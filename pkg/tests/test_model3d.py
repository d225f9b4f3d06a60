import re
import struct

import numpy as np
import pytest
import shapely
from shapely.geometry import LineString, Polygon, box

from oracles import clip_below, shoelace
from keyforge.bitting import BitMask, BittingCode, DepthChart, KeySpec, extract_boundary
from keyforge.errors import ClipNotSimple, DegenerateBlade, EmptyMesh, IoFailure, NoOverlap, ProfileExceedsKeyway
from keyforge.model3d import (
    BowSpec,
    HeightProfile,
    TriMesh,
    attach_bow,
    bitting_height_profile,
    bow_mesh,
    box_mesh,
    build_blade_mesh,
    csg_script,
    emit_csg_script,
    mesh_diagnostics,
    profile_from_code,
    read_stl,
    shells,
    write_stl,
)
from keyforge.synth import render_key_mask, sample_code


def _rect_spec(w=2.0, h=8.4, bh=8.4):
    return KeySpec(((0, 0), (w, 0), (w, h), (0, h)), 27.0, bh, (4, 9, 14, 19, 24), DepthChart(10, 8.0, 0.6), 7)


def _sound(mesh):
    for s in shells(mesh):
        d = mesh_diagnostics(s)
        assert d.watertight and d.euler == 2 and d.volume_mm3 > 0 and d.degenerate_triangles == 0


# ---------------------------------------------------------------- diagnostics


def test_cube_diagnostics():
    d = mesh_diagnostics(box_mesh())
    assert d.watertight and d.euler == 2 and d.degenerate_triangles == 0
    assert d.volume_mm3 == pytest.approx(1.0, abs=1e-15)


def test_open_cube_not_watertight():
    cube = box_mesh()
    assert not mesh_diagnostics(TriMesh(cube.vertices, cube.triangles[2:])).watertight


def test_inverted_cube_has_negative_volume():
    assert mesh_diagnostics(box_mesh().flipped()).volume_mm3 == pytest.approx(-1.0)


def test_degenerate_triangle_counted():
    cube = box_mesh()
    tris = np.vstack([cube.triangles, [[0, 1, 1]]])
    assert mesh_diagnostics(TriMesh(cube.vertices, tris)).degenerate_triangles == 1


# ---------------------------------------------------------------- profiles


def test_rectangle_mask_gives_constant_full_height():
    spec = _rect_spec()
    bits = np.zeros((400, 700), bool)
    bits[50:350, 20:680] = True
    mask = BitMask(bits, ((20, 349), (679, 349)))
    prof = bitting_height_profile(extract_boundary(mask), mask.keypoints, spec)
    assert np.allclose(prof.hs, spec.blade_height_mm)


def test_zero_code_profile_at_pins(spec):
    ppm = 27
    mask = render_key_mask(BittingCode((0,) * 5), spec, ppm)
    prof = bitting_height_profile(extract_boundary(mask), mask.keypoints, spec)
    at_pins = prof(np.array(spec.pin_positions_mm))
    assert np.all(np.abs(at_pins - spec.depth_chart.shallowest_mm) <= 1 / ppm)


def test_profile_resolution_invariance(spec, code):
    profs = []
    for ppm in (20, 40):
        mask = render_key_mask(code, spec, ppm)
        profs.append(bitting_height_profile(extract_boundary(mask), mask.keypoints, spec))
    assert np.max(np.abs(np.array(profs[0].hs) - np.array(profs[1].hs))) <= 2 / 20


def test_profile_tracks_nominal_code(spec, code):
    mask = render_key_mask(code, spec, 27)
    prof = bitting_height_profile(extract_boundary(mask), mask.keypoints, spec)
    exact = profile_from_code(code, spec)
    xs = np.linspace(0, spec.blade_length_mm, 256)
    assert np.max(np.abs(prof(xs) - exact(xs))) <= 1.5 / 27


def test_profile_degenerate_keypoints(spec):
    with pytest.raises(DegenerateBlade):
        bitting_height_profile([(3, 4), (3, 5)], ((3, 5), (3, 5)), spec)


def test_height_profile_invariants():
    with pytest.raises(ValueError):
        HeightProfile((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        HeightProfile((0.0, 1.0), (1.0, 0.0))


# ---------------------------------------------------------------- blade meshes


@pytest.mark.parametrize("h0", [2.2, 4.0, 5.3, 7.5, 8.4])
def test_constant_profile_volume_matches_shoelace(spec, h0):
    mesh = build_blade_mesh(spec, HeightProfile.constant(spec.blade_length_mm, h0), stations=8, ring=256)
    oracle = shoelace(clip_below(list(spec.keyway), h0)) * spec.blade_length_mm
    assert mesh_diagnostics(mesh).volume_mm3 == pytest.approx(oracle, rel=5e-3)
    _sound(mesh)


def test_rectangular_keyway_is_exact_box():
    spec = _rect_spec(w=2.0, h=8.4)
    mesh = build_blade_mesh(spec, HeightProfile.constant(27.0, 8.4), stations=2, ring=8)
    d = mesh_diagnostics(mesh)
    assert abs(d.volume_mm3 - 2.0 * 8.4 * 27.0) < 1e-9
    assert d.watertight and d.euler == 2


def test_generated_keys_are_sound(spec, rng):
    for _ in range(5):
        code = sample_code(rng, spec)
        mask = render_key_mask(code, spec, 27)
        prof = bitting_height_profile(extract_boundary(mask), mask.keypoints, spec)
        _sound(build_blade_mesh(spec, prof))
        _sound(build_blade_mesh(spec, profile_from_code(code, spec)))


def test_volume_monotone_in_code(spec, rng):
    for _ in range(10):
        code = sample_code(rng, spec)
        base = mesh_diagnostics(build_blade_mesh(spec, profile_from_code(code, spec))).volume_mm3
        for i in range(5):
            deeper = list(code.depths)
            deeper[i] += 1
            if deeper[i] >= spec.depth_chart.num_depths:
                continue
            vol = mesh_diagnostics(build_blade_mesh(spec, profile_from_code(BittingCode(deeper), spec))).volume_mm3
            assert vol < base


def test_discretisation_convergence(spec, code):
    prof = profile_from_code(code, spec)
    coarse = mesh_diagnostics(build_blade_mesh(spec, prof, 256, 128)).volume_mm3
    fine = mesh_diagnostics(build_blade_mesh(spec, prof, 512, 256)).volume_mm3
    assert abs(fine / coarse - 1) < 2e-3


def test_clip_not_simple():
    # an arch: below the crossbar the section falls apart into two legs
    arch = ((0, 0), (1, 0), (1, 3), (2, 3), (2, 0), (3, 0), (3, 5), (0, 5))
    spec = KeySpec(arch, 27.0, 5.0, (4, 9, 14, 19, 24), DepthChart(10, 4.5, 0.3), 7)
    with pytest.raises(ClipNotSimple):
        build_blade_mesh(spec, HeightProfile.constant(27.0, 2.0), 4, 16)


def test_profile_above_keyway_warns_and_clamps():
    spec = _rect_spec(w=2.0, h=6.0, bh=8.4)
    with pytest.warns(ProfileExceedsKeyway):
        mesh = build_blade_mesh(spec, HeightProfile.constant(27.0, 8.0), 4, 16)
    assert mesh_diagnostics(mesh).volume_mm3 == pytest.approx(2.0 * 6.0 * 27.0)


def test_mesh_parameter_validation(spec):
    prof = HeightProfile.constant(27.0, 5.0)
    with pytest.raises(ValueError):
        build_blade_mesh(spec, prof, stations=1)
    with pytest.raises(ValueError):
        build_blade_mesh(spec, prof, ring=7)


# ---------------------------------------------------------------- bow


def test_bow_attachment(spec, code):
    blade = build_blade_mesh(spec, profile_from_code(code, spec))
    bow = BowSpec.default(spec)
    full = attach_bow(blade, bow, spec)
    parts = shells(full)
    assert len(parts) == 2
    _sound(full)
    blade_vol = mesh_diagnostics(blade).volume_mm3
    total = sum(mesh_diagnostics(s).volume_mm3 for s in parts)
    assert total >= blade_vol + 0.5 * bow.prism_volume
    assert mesh_diagnostics(bow_mesh(bow)).volume_mm3 == pytest.approx(bow.prism_volume)
    x0, x1 = bow.x_range
    assert x0 == pytest.approx(-bow.thickness_mm + bow.overlap_mm) and x1 == pytest.approx(bow.overlap_mm)


def test_zero_overlap_rejected(spec, code):
    blade = build_blade_mesh(spec, profile_from_code(code, spec), 16, 32)
    bow = BowSpec(BowSpec.default(spec).outline, 2.5, 0.0)
    with pytest.raises(NoOverlap):
        attach_bow(blade, bow, spec)


def test_bow_outside_keyway_rejected(spec, code):
    blade = build_blade_mesh(spec, profile_from_code(code, spec), 16, 32)
    far = BowSpec(((50, 50), (60, 50), (60, 60), (50, 60)))
    with pytest.raises(NoOverlap):
        attach_bow(blade, far, spec)


# ---------------------------------------------------------------- STL


def test_cube_stl_size(tmp_path):
    path = tmp_path / "cube.stl"
    write_stl(box_mesh(), path)
    data = path.read_bytes()
    assert len(data) == 84 + 12 * 50 == 684
    assert data[:8] == b"keyforge" and data[8:80] == bytes(72)
    assert struct.unpack("<I", data[80:84])[0] == 12


def test_stl_records_parse_independently(tmp_path):
    cube = box_mesh()
    path = tmp_path / "cube.stl"
    write_stl(cube, path)
    data = path.read_bytes()
    for k, tri in enumerate(cube.triangles):
        rec = struct.unpack("<12fH", data[84 + 50 * k : 84 + 50 * (k + 1)])
        v = np.array(rec[3:12]).reshape(3, 3)
        assert np.array_equal(v, cube.vertices[tri].astype(np.float32))
        n = np.cross(v[1] - v[0], v[2] - v[0])
        assert np.allclose(rec[:3], n / np.linalg.norm(n))
        assert rec[12] == 0


def test_stl_roundtrip_float_exact(tmp_path, spec, code):
    mesh = attach_bow(build_blade_mesh(spec, profile_from_code(code, spec), 32, 32), BowSpec.default(spec), spec)
    path = tmp_path / "key.stl"
    write_stl(mesh, path)
    back = read_stl(path)
    assert np.array_equal(back.corners(), mesh.corners().astype(np.float32).astype(np.float64))
    write_stl(back, tmp_path / "again.stl")
    assert (tmp_path / "again.stl").read_bytes() == path.read_bytes()
    _sound(back)


def test_stl_errors(tmp_path):
    with pytest.raises(EmptyMesh):
        write_stl(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), tmp_path / "e.stl")
    with pytest.raises(IoFailure):
        write_stl(box_mesh(), tmp_path / "missing" / "dir" / "x.stl")
    short = tmp_path / "short.stl"
    short.write_bytes(b"keyforge".ljust(80, b"\0") + struct.pack("<I", 3))
    with pytest.raises(IoFailure):
        read_stl(short)


# ---------------------------------------------------------------- CSG script

_NUM = r"-?\d+\.\d+"


def _parse_extrusions(script):
    """(matrix, height, polygon) for every linear_extrude in script order."""
    pattern = re.compile(
        r"multmatrix\((\[.*?\]\])\)\s*linear_extrude\(height = (" + _NUM + r")\)\s*polygon\(points = (\[.*?\]\])\);",
        re.S,
    )
    out = []
    for m, h, pts in pattern.findall(script):
        mat = np.array([float(v) for v in re.findall(_NUM, m)]).reshape(4, 4)
        poly = np.array([float(v) for v in re.findall(_NUM, pts)]).reshape(-1, 2)
        out.append((mat, float(h), poly))
    return out


def _section(extrusion, x):
    """Cross-section at plane X = x of one placed extrusion, in (u, v)."""
    mat, height, poly = extrusion
    axis = mat[:3, 2]
    if np.allclose(axis, [1, 0, 0]):
        if not (mat[0, 3] <= x <= mat[0, 3] + height):
            return Polygon()
        a, b = mat[:3, 0], mat[:3, 1]
        # local (p, q) -> (u, v) through the in-plane axes
        return Polygon([(p * a[1] + q * b[1] + mat[1, 3], p * a[2] + q * b[2] + mat[2, 3]) for p, q in poly])
    # the polygon plane contains X: slice it, then sweep the interval along the extrusion axis
    a, b = mat[:3, 0], mat[:3, 1]
    assert np.allclose(a, [1, 0, 0]) and np.allclose(b, [0, 0, 1])
    cut = Polygon(poly).intersection(LineString([(x, -1e3), (x, 1e3)]))
    if cut.is_empty:
        return Polygon()
    lo, hi = cut.bounds[1], cut.bounds[3]
    u0 = mat[1, 3]
    u1 = u0 + axis[1] * height
    return box(min(u0, u1), lo, max(u0, u1), hi)


def _csg_volumes(script, x_lo, x_hi, n=3000):
    keyway, cutter, bow = _parse_extrusions(script)
    xs = x_lo + (np.arange(n) + 0.5) * (x_hi - x_lo) / n
    dx = (x_hi - x_lo) / n
    blade_v = union_v = 0.0
    for x in xs:
        blade = _section(keyway, x).difference(_section(cutter, x))
        blade_v += blade.area * dx
        union_v += shapely.union(blade, _section(bow, x)).area * dx
    return blade_v, union_v


def test_csg_structure_and_determinism(tmp_path, spec, code):
    prof = profile_from_code(code, spec)
    bow = BowSpec.default(spec)
    a, b = tmp_path / "a.scad", tmp_path / "b.scad"
    emit_csg_script(spec, prof, bow, a)
    emit_csg_script(spec, prof, bow, b)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.count("union()") == 1 and text.count("difference()") == 1
    prims = set(re.findall(r"([a-z_]+)\(", text))
    assert prims <= {"union", "difference", "multmatrix", "linear_extrude", "polygon"}


def test_csg_matches_mesh_volume(spec, code):
    prof = profile_from_code(code, spec)
    bow = BowSpec.default(spec)
    script = csg_script(spec, prof, bow)
    x0, _ = bow.x_range
    blade_v, union_v = _csg_volumes(script, x0, spec.blade_length_mm)
    blade = build_blade_mesh(spec, prof)
    mesh_blade = mesh_diagnostics(blade).volume_mm3
    assert blade_v == pytest.approx(mesh_blade, rel=0.01)
    # the union counts the blade/bow overlap once; the two-shell mesh counts it twice
    overlap = sum(
        Polygon(bow.outline).intersection(Polygon(spec.keyway)).intersection(box(-1e3, -1e3, 1e3, h)).area
        for h in [prof(x) for x in np.linspace(0, bow.overlap_mm, 50)]
    ) * bow.overlap_mm / 50
    mesh_union = mesh_blade + mesh_diagnostics(bow_mesh(bow)).volume_mm3 - overlap
    assert union_v == pytest.approx(mesh_union, rel=0.01)
