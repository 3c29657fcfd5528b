import math

import numpy as np
import pytest

from ionsource.geometry import (ElectrodeMesh, LensSpec, SceneSpec, TrapSpec, build_lens_mesh,
                                build_plate_pair_mesh, build_sphere_mesh, build_trap_mesh,
                                read_mesh_csv, validate_mesh, write_mesh_csv)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_sphere_panel_count_and_area(k):
    m = build_sphere_mesh(2.0, k)
    assert len(m) == 20 * 4 ** k
    assert validate_mesh(m) == []
    # inscribed polyhedron: area below the sphere, approaching it
    total = m.area.sum()
    assert total < 4 * math.pi * 4.0
    if k == 3:
        assert total > 0.99 * 4 * math.pi * 4.0
    # outward normals
    assert np.all(np.einsum("ij,ij->i", m.normal, m.centroid) > 0)


def test_csv_round_trip_exact(tmp_path):
    m = build_sphere_mesh(1e-3, 1)
    p = tmp_path / "m.csv"
    write_mesh_csv(m, p)
    back = read_mesh_csv(p)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.nvert, m.nvert)
    assert back.content_bytes() == m.content_bytes()


def test_csv_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(ValueError, match="header"):
        read_mesh_csv(p)


def test_trap_mesh_groups_and_validity():
    spec = TrapSpec()
    m = build_trap_mesh(spec, 0.2e-3, coarse_panel_size=2e-3)
    assert validate_mesh(m) == []
    for g in ["rf", "rf_ground", "ground", "defl1", "defl2"] + [f"dc{k}" for k in range(1, 9)]:
        assert m.group_mask(g).any(), g
    # every DC segment has the same metallised area on all four blades
    band = 2 * spec.segment_width * spec.dc_band_depth
    for k in range(1, 9):
        for j in range(4):
            assert m.electrode_area(f"dc{k}.b{j}") == pytest.approx(band, rel=1e-9)
    # flat front faces at distance r0 from the axis along the blade diagonal
    rf = m.group_mask("rf")
    along = np.abs(m.centroid[rf, 0] + m.centroid[rf, 1]) / math.sqrt(2)
    assert np.allclose(along, spec.r0)


def test_trap_without_deflection():
    m = build_trap_mesh(TrapSpec(deflection=None), 0.2e-3, coarse_panel_size=2e-3)
    assert "defl1" not in m.groups


def test_trap_rejects_coarse_panel_target():
    with pytest.raises(ValueError):
        build_trap_mesh(TrapSpec(), 1e-3)


def test_lens_mesh():
    spec = LensSpec()
    m = build_lens_mesh(spec, 0.1e-3)
    assert set(m.groups) == {"lens_center", "lens_ground"}
    assert validate_mesh(m) == []
    r = np.hypot(m.vertices[..., 0], m.vertices[..., 1])
    assert np.allclose(r, spec.bore_diameter / 2)
    # normals face the axis
    radial = m.centroid[:, :2] / np.linalg.norm(m.centroid[:, :2], axis=1)[:, None]
    assert np.all(np.einsum("ij,ij->i", m.normal[:, :2], radial) < -0.9)


def test_plate_pair():
    m = build_plate_pair_mesh(1.0, 0.1, 0.1)
    assert len(m) == 200
    assert m.electrode_area("plate_top") == pytest.approx(1.0)


def test_validate_reports_defects():
    m = build_sphere_mesh(1.0, 1)
    v = m.vertices.copy()
    v[0, 1] = v[0, 0]
    v[0, 2] = v[0, 0]
    v[0, 3] = v[0, 0]
    v[5] = v[5][[0, 2, 1, 1]]  # reverse the traversal of a triangle
    bad = ElectrodeMesh(np.concatenate([v, v[7:8]]), np.r_[m.nvert, 3],
                        np.r_[m.electrode, 0], m.electrode_ids)
    text = "\n".join(validate_mesh(bad))
    assert "zero-area panel 0" in text
    assert "inconsistent orientation" in text
    assert "overlapping panels 7" in text


@pytest.mark.parametrize("kwargs", [dict(blade_thickness=0), dict(center_segment=9),
                                    dict(blade_thickness=2.5e-3, rf_face_width=0.4e-3),
                                    dict(rf_face_width=0.5e-3)])
def test_trap_spec_validation(kwargs):
    with pytest.raises(ValueError):
        TrapSpec(**kwargs)


def test_scene_plane_order():
    with pytest.raises(ValueError):
        SceneSpec(measurement_plane_distance=0.3)
    with pytest.raises(ValueError):
        SceneSpec(lens=LensSpec(position=0.25))


def test_group_validation():
    m = build_sphere_mesh(1.0, 0)
    with pytest.raises(ValueError):
        ElectrodeMesh(m.vertices, m.nvert, m.electrode, m.electrode_ids, {"g": ("nope",)})
    with pytest.raises(ValueError):
        ElectrodeMesh.concatenate([m, m])


def _panel_keys(verts, nvert):
    keys = []
    for v, k in zip(verts, nvert):
        pts = sorted(tuple(np.round(p / 1e-12).astype(np.int64)) for p in v[:k])
        keys.append(tuple(pts))
    return sorted(keys)


@pytest.mark.parametrize("axis", [0, 1])
def test_trap_mesh_mirror_symmetry(axis):
    m = build_trap_mesh(TrapSpec(deflection=None), 0.2e-3, coarse_panel_size=2e-3)
    flip = m.vertices.copy()
    flip[..., axis] *= -1
    assert _panel_keys(flip, m.nvert) == _panel_keys(m.vertices, m.nvert)


def test_trap_mesh_refinement_scaling():
    spec = TrapSpec(deflection=None, blade_length=20e-3)
    a = build_trap_mesh(spec, 0.1e-3)
    b = build_trap_mesh(spec, 0.05e-3)
    assert len(b) / len(a) == pytest.approx(4.0, rel=0.25)
    assert b.area.sum() == pytest.approx(a.area.sum(), rel=1e-12)
    assert np.max(b.diameter) < 2 * 0.05e-3 * math.sqrt(2)
