"""Tricubic Hermite field grids.

Each node stores the potential, its three first derivatives and the mixed
derivatives ``fxy, fxz, fyz, fxyz``.  The interpolant is the tensor product
of cubic Hermite polynomials (C1 across cells), so the interpolated field
is the exact negative gradient of the interpolated potential.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

# node slots: (d/dx, d/dy, d/dz) order -> slot
_SLOT = np.array([[[0, 3], [2, 6]], [[1, 5], [4, 7]]], dtype=np.int64)


@dataclass
class FieldGrid:
    """Node samples of several unit-voltage groups on a uniform box grid.

    Attributes
    ----------
    origin, spacing : (3,) arrays
        Lower corner and per-axis step (m).
    shape : tuple of int
        Nodes per axis.
    groups : list of str
        Group names matching the second-to-last axis of ``data``.
    data : (nx, ny, nz, n_groups, 8) array
        ``[phi, dphi/dx, dphi/dy, dphi/dz, fxy, fxz, fyz, fxyz]`` per node.
    valid : (nx, ny, nz) bool array
        False for nodes inside a conductor guard zone.
    """

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple
    groups: list
    data: np.ndarray
    valid: np.ndarray
    order: int = 3

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.array(self.shape) - 1)

    def node_coords(self):
        return [self.origin[a] + self.spacing[a] * np.arange(self.shape[a]) for a in range(3)]

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.origin) & (p <= self.upper), axis=1)

    def evaluate(self, points, weights: dict[str, float]):
        """Interpolated potential, field and an ``ok`` mask (inside, valid cell)."""
        w = np.array([weights.get(g, 0.0) for g in self.groups], dtype=np.float64)
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.zeros((len(pts), 4))
        ok = np.zeros(len(pts), np.bool_)
        _eval_many(pts, self.origin, self.spacing, self.data, self.valid, w, out, ok)
        return out[:, 0], out[:, 1:], ok


def sample_nodes(coords, evaluate_per_group):
    """Node data from a per-group evaluator.

    ``evaluate_per_group(points) -> (phi[g, n], E[g, n, 3])``.  Mixed
    derivatives come from central differences of the sampled gradient
    (one-sided at the box faces).
    """
    X, Y, Z = np.meshgrid(*coords, indexing="ij")
    shape = X.shape
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    phi, E = evaluate_per_group(pts)
    ng = phi.shape[0]
    data = np.zeros(shape + (ng, 8))
    data[..., 0] = np.moveaxis(phi.reshape((ng,) + shape), 0, -1)
    grad = -np.moveaxis(E.reshape((ng,) + shape + (3,)), 0, -2)
    data[..., 1:4] = grad
    h = [c[1] - c[0] if len(c) > 1 else 1.0 for c in coords]

    def d(f, axis):
        if shape[axis] < 2:
            return np.zeros_like(f)
        return np.gradient(f, h[axis], axis=axis, edge_order=2 if shape[axis] > 2 else 1)

    fx, fy, fz = grad[..., 0], grad[..., 1], grad[..., 2]
    data[..., 4] = 0.5 * (d(fx, 1) + d(fy, 0))
    data[..., 5] = 0.5 * (d(fx, 2) + d(fz, 0))
    data[..., 6] = 0.5 * (d(fy, 2) + d(fz, 1))
    data[..., 7] = (d(data[..., 4], 2) + d(data[..., 5], 1) + d(data[..., 6], 0)) / 3
    return pts, data


@nb.njit(cache=True, inline="always")
def _basis(t, h):
    t2 = t * t
    t3 = t2 * t
    v0 = 2 * t3 - 3 * t2 + 1
    v1 = -2 * t3 + 3 * t2
    d0 = (t3 - 2 * t2 + t) * h
    d1 = (t3 - t2) * h
    dv0 = (6 * t2 - 6 * t) / h
    dv1 = (-6 * t2 + 6 * t) / h
    dd0 = 3 * t2 - 4 * t + 1
    dd1 = 3 * t2 - 2 * t
    return v0, v1, d0, d1, dv0, dv1, dd0, dd1


@nb.njit(cache=True)
def _snap(f):
    r = np.floor(f + 0.5)
    return r if abs(f - r) <= 8.0 * 2.220446049250313e-16 * max(1.0, r) else f


@nb.njit(cache=True)
def locate(x, y, z, ox, oy, oz, hx, hy, hz, nx, ny, nz):
    """Cell indices and local coordinates; ``i < 0`` when outside the box."""
    fx = (x - ox) / hx
    fy = (y - oy) / hy
    fz = (z - oz) / hz
    if not (fx >= 0.0 and fy >= 0.0 and fz >= 0.0
            and fx <= nx - 1 and fy <= ny - 1 and fz <= nz - 1):
        return -1, 0, 0, 0.0, 0.0, 0.0
    # points within a few ulps of a node land on it, so nodes return stored data
    fx = _snap(fx)
    fy = _snap(fy)
    fz = _snap(fz)
    i = min(int(fx), nx - 2)
    j = min(int(fy), ny - 2)
    k = min(int(fz), nz - 2)
    return i, j, k, fx - i, fy - j, fz - k


@nb.njit(cache=True)
def hermite_cell(C, tx, ty, tz, hx, hy, hz):
    """Evaluate the Hermite interpolant of corner data ``C[2,2,2,8]``.

    Returns ``(phi, dphi/dx, dphi/dy, dphi/dz)``.
    """
    bx = _basis(tx, hx)
    by = _basis(ty, hy)
    bz = _basis(tz, hz)
    p = gx = gy = gz = 0.0
    for a in range(2):
        for b in range(2):
            for c in range(2):
                for al in range(2):
                    wx = bx[2 * al + a]
                    dwx = bx[4 + 2 * al + a]
                    for be in range(2):
                        wy = by[2 * be + b]
                        dwy = by[4 + 2 * be + b]
                        for ga in range(2):
                            wz = bz[2 * ga + c]
                            dwz = bz[4 + 2 * ga + c]
                            f = C[a, b, c, _SLOT[al, be, ga]]
                            p += f * wx * wy * wz
                            gx += f * dwx * wy * wz
                            gy += f * wx * dwy * wz
                            gz += f * wx * wy * dwz
    return p, gx, gy, gz


@nb.njit(cache=True)
def _eval_many(pts, origin, spacing, data, valid, w, out, ok):
    nx, ny, nz, ng = data.shape[0], data.shape[1], data.shape[2], data.shape[3]
    C = np.zeros((2, 2, 2, 8))
    for n in range(pts.shape[0]):
        i, j, k, tx, ty, tz = locate(pts[n, 0], pts[n, 1], pts[n, 2], origin[0], origin[1],
                                     origin[2], spacing[0], spacing[1], spacing[2], nx, ny, nz)
        if i < 0:
            continue
        good = True
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    if not valid[i + a, j + b, k + c]:
                        good = False
                    for s in range(8):
                        acc = 0.0
                        for g in range(ng):
                            acc += w[g] * data[i + a, j + b, k + c, g, s]
                        C[a, b, c, s] = acc
        if not good:
            continue
        p, gx, gy, gz = hermite_cell(C, tx, ty, tz, spacing[0], spacing[1], spacing[2])
        out[n, 0] = p
        out[n, 1] = -gx
        out[n, 2] = -gy
        out[n, 3] = -gz
        ok[n] = True


def box_coords(lower, upper, spacing):
    """Node coordinates covering ``[lower, upper]`` with step at most ``spacing``."""
    coords = []
    for a in range(3):
        lo, hi, h = float(lower[a]), float(upper[a]), float(spacing[a])
        if not h > 0:
            raise ValueError("grid spacing must be > 0")
        if not hi > lo:
            raise ValueError("degenerate grid box")
        n = max(2, math.ceil((hi - lo) / h - 1e-9) + 1)
        coords.append(np.linspace(lo, hi, n))
    return coords
