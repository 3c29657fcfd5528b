import numpy as np
import pytest

from ionsource.electrostatics.basis import BasisFieldSet, content_hash
from ionsource.electrostatics.bem import MeshCharges, solve_basis
from ionsource.electrostatics.fmm import FmmConfig
from ionsource.electrostatics.grid import FieldGrid, box_coords, sample_nodes
from ionsource.geometry import build_sphere_mesh


def _cubic(p):
    x, y, z = p.T
    phi = x ** 3 - 2 * x * y * z + y ** 2 * z + 0.5 * z ** 3
    grad = np.stack([3 * x ** 2 - 2 * y * z, -2 * x * z + 2 * y * z,
                     -2 * x * y + y ** 2 + 1.5 * z ** 2], axis=1)
    return phi, grad


def _poly_grid(valid=None):
    coords = box_coords([-1, -0.5, 0], [1, 1, 2], [0.25, 0.5, 0.4])

    def ev(p):
        phi, grad = _cubic(p)
        return phi[None], -grad[None]

    pts, data = sample_nodes(coords, ev)
    shape = tuple(len(c) for c in coords)
    if valid is None:
        valid = np.ones(shape, bool)
    return FieldGrid(np.array([c[0] for c in coords]),
                     np.array([c[1] - c[0] for c in coords]), shape, ["g"], data, valid)


def test_tricubic_reproduces_cubic():
    grid = _poly_grid()
    rng = np.random.default_rng(0)
    pts = rng.uniform([-1, -0.5, 0], [1, 1, 2], size=(500, 3))
    phi, E, ok = grid.evaluate(pts, {"g": 2.0})
    ref_phi, ref_grad = _cubic(pts)
    assert ok.all()
    assert np.allclose(phi, 2 * ref_phi, atol=1e-12)
    assert np.allclose(E, -2 * ref_grad, atol=1e-11)


def test_grid_outside_and_masked():
    valid = np.ones((9, 4, 6), bool)
    valid[0, 0, 0] = False
    grid = _poly_grid(valid)
    _, _, ok = grid.evaluate(np.array([[1.5, 0, 1], [-0.9, -0.45, 0.1], [0.5, 0.5, 1.0]]),
                             {"g": 1.0})
    assert ok.tolist() == [False, False, True]


def test_box_coords():
    c = box_coords([0, 0, 0], [1, 1, 1], [0.3, 1.0, 2.0])
    assert len(c[0]) == 5 and c[0][-1] == 1.0
    assert len(c[1]) == 2 and len(c[2]) == 2
    with pytest.raises(ValueError):
        box_coords([0, 0, 0], [0, 1, 1], [1, 1, 1])
    with pytest.raises(ValueError):
        box_coords([0, 0, 0], [1, 1, 1], [0, 1, 1])


@pytest.fixture(scope="module")
def sphere_basis():
    mesh = build_sphere_mesh(1e-3, 2)
    sol = solve_basis(mesh, "sphere", tol=1e-9)
    b = BasisFieldSet([MeshCharges(mesh, {"sphere": sol})])
    b.build_field_grid([1.5e-3, -0.5e-3, -0.5e-3], [3e-3, 0.5e-3, 0.5e-3], 0.1e-3)
    return b


def test_basis_grid_matches_direct(sphere_basis):
    pts = np.array([[2.1e-3, 0.1e-3, -0.2e-3], [2.9e-3, 0.4e-3, 0.3e-3]])
    phi_g, _ = sphere_basis.potential_at(pts, {"sphere": 3.0})
    E_g, _ = sphere_basis.field_at(pts, {"sphere": 3.0})
    phi_d, E_d, guard = sphere_basis.evaluate_direct(pts, {"sphere": 3.0})
    assert not guard.any()
    assert np.allclose(phi_g, phi_d, rtol=1e-5)
    assert np.allclose(E_g, E_d, rtol=1e-3, atol=1e-3 * np.abs(E_d).max())
    # off-grid points fall back to direct summation
    far = np.array([[0, 0, 5e-3]])
    assert sphere_basis.potential_at(far, {"sphere": 1.0})[0] == pytest.approx(
        sphere_basis.evaluate_direct(far, {"sphere": 1.0})[0])


def test_unknown_voltage_group(sphere_basis):
    with pytest.raises(KeyError):
        sphere_basis.potential_at([[0, 0, 5e-3]], {"rf": 1.0})


def test_save_load_bit_identical(tmp_path, sphere_basis):
    p = tmp_path / "b.npz"
    sphere_basis.save(p)
    back = BasisFieldSet.load(p)
    a, b = sphere_basis.components[0], back.components[0]
    assert np.array_equal(a.solutions["sphere"].sigma, b.solutions["sphere"].sigma)
    assert a.mesh.content_bytes() == b.mesh.content_bytes()
    assert np.array_equal(sphere_basis.grids[0].data, back.grids[0].data)
    pts = np.array([[2.2e-3, 0.0, 0.1e-3], [0.0, 4e-3, 0.0]])
    assert np.array_equal(sphere_basis.potential_at(pts, {"sphere": 1.0})[0],
                          back.potential_at(pts, {"sphere": 1.0})[0])


def test_content_hash_stable():
    m = build_sphere_mesh(1.0, 1)
    h = content_hash(m, FmmConfig(), 1e-8, {"a": [1, 2]})
    assert h == content_hash(build_sphere_mesh(1.0, 1), FmmConfig(), 1e-8, {"a": [1, 2]})
    assert h != content_hash(m, FmmConfig(order=10), 1e-8, {"a": [1, 2]})
    assert h != content_hash(build_sphere_mesh(1.0 + 1e-15, 1), FmmConfig(), 1e-8,
                             {"a": [1, 2]})


def test_nodes_return_stored_samples():
    grid = _poly_grid()
    cx, cy, cz = grid.node_coords()
    idx = [(0, 0, 0), (6, 2, 3), (8, 3, 5), (3, 1, 4)]
    nodes = np.array([[cx[i], cy[j], cz[k]] for i, j, k in idx])
    phi, E, ok = grid.evaluate(nodes, {"g": 1.0})
    assert ok.all()
    assert np.array_equal(phi, [grid.data[i, j, k, 0, 0] for i, j, k in idx])


def test_field_is_gradient_of_interpolant(sphere_basis):
    grid = sphere_basis.grids[0]
    x = np.array([2.13e-3, 0.07e-3, -0.11e-3])
    h = 1e-7
    fd = [(grid.evaluate(x + h * e, {"sphere": 1.0})[0][0]
           - grid.evaluate(x - h * e, {"sphere": 1.0})[0][0]) / (2 * h) for e in np.eye(3)]
    E = grid.evaluate(x, {"sphere": 1.0})[1][0]
    assert np.allclose(-np.array(fd), E, rtol=1e-6, atol=1e-6 * np.abs(E).max())


def test_superposition_and_zero_voltages(sphere_basis):
    pts = np.array([[2.2e-3, 0.1e-3, 0.0], [0.0, 0.0, 6e-3]])
    p1 = sphere_basis.potential_at(pts, {"sphere": 1.5})[0]
    p2 = sphere_basis.potential_at(pts, {"sphere": 3.0})[0]
    assert np.array_equal(2 * p1, p2)
    phi, E, _ = sphere_basis.evaluate_direct(pts, {"sphere": 0.0})
    assert not phi.any() and not E.any()
