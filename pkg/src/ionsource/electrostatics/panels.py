"""Closed-form single-layer integrals over flat polygons and panel quadrature.

``polygon_integral`` returns ``I(x) = \\int_S dS / |x - y|`` for a uniformly
weighted flat polygon and its gradient with respect to ``x``:

    I    = sum_i P_i f_i - |d| sum_i beta_i
    grad = -sum_i m_i f_i - sign(d) n sum_i beta_i

with ``d`` the signed height of ``x`` above the plane, ``m_i`` the outward
in-plane normal of edge ``i``, ``P_i`` the signed distance from the
projected point to the edge line, ``f_i = ln((R+ + l+)/(R- + l-))`` and
``beta_i`` the solid-angle increment of the edge.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

_G = 1.0 / math.sqrt(3.0)


@nb.njit(cache=True, inline="always")
def _edge_log(lp, lm, rp, rm, r02):
    # ln((R+ + l+)/(R- + l-)) in a cancellation-free form for each case
    if lm >= 0.0:
        return math.log((rp + lp) / (rm + lm))
    if lp <= 0.0:
        return math.log((rm - lm) / (rp - lp))
    if r02 <= 0.0:
        return math.inf
    return math.log((rp + lp) * (rm - lm) / r02)


@nb.njit(cache=True)
def polygon_integral(x, y, z, V, nv, want_grad):
    """Return ``(I, dIdx, dIdy, dIdz)`` for polygon ``V[:nv]`` seen from ``(x,y,z)``."""
    ax, ay, az = V[1, 0] - V[0, 0], V[1, 1] - V[0, 1], V[1, 2] - V[0, 2]
    if nv == 3:
        bx, by, bz = V[2, 0] - V[0, 0], V[2, 1] - V[0, 1], V[2, 2] - V[0, 2]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
    else:
        ax, ay, az = V[2, 0] - V[0, 0], V[2, 1] - V[0, 1], V[2, 2] - V[0, 2]
        bx, by, bz = V[3, 0] - V[1, 0], V[3, 1] - V[1, 1], V[3, 2] - V[1, 2]
        nx = ay * bz - az * by
        ny = az * bx - ax * bz
        nz = ax * by - ay * bx
    nn = math.sqrt(nx * nx + ny * ny + nz * nz)
    nx /= nn
    ny /= nn
    nz /= nn
    d = (x - V[0, 0]) * nx + (y - V[0, 1]) * ny + (z - V[0, 2]) * nz
    ad = abs(d)
    px, py, pz = x - d * nx, y - d * ny, z - d * nz
    pot = 0.0
    gx = gy = gz = 0.0
    omega = 0.0
    for i in range(nv):
        j = i + 1 if i + 1 < nv else 0
        ex = V[j, 0] - V[i, 0]
        ey = V[j, 1] - V[i, 1]
        ez = V[j, 2] - V[i, 2]
        el = math.sqrt(ex * ex + ey * ey + ez * ez)
        if el == 0.0:
            continue
        ex /= el
        ey /= el
        ez /= el
        # outward edge normal m = e x n
        mx = ey * nz - ez * ny
        my = ez * nx - ex * nz
        mz = ex * ny - ey * nx
        ax = V[i, 0] - px
        ay = V[i, 1] - py
        az = V[i, 2] - pz
        p0 = ax * mx + ay * my + az * mz
        lm = ax * ex + ay * ey + az * ez
        lp = lm + el
        r02 = p0 * p0 + d * d
        rm = math.sqrt(lm * lm + r02)
        rp = math.sqrt(lp * lp + r02)
        f = _edge_log(lp, lm, rp, rm, r02)
        if p0 != 0.0:
            beta = (math.atan(p0 * lp / (r02 + ad * rp))
                    - math.atan(p0 * lm / (r02 + ad * rm)))
            pot += p0 * f
            omega += beta
        if want_grad:
            gx -= mx * f
            gy -= my * f
            gz -= mz * f
    pot -= ad * omega
    if want_grad and d != 0.0:
        s = omega if d > 0 else -omega
        gx -= s * nx
        gy -= s * ny
        gz -= s * nz
    return pot, gx, gy, gz


@nb.njit(cache=True)
def _gauss_rules(verts, nvert, pts, w, owner, start):
    n = verts.shape[0]
    k = 0
    for i in range(n):
        start[i] = k
        V = verts[i]
        if nvert[i] == 3:
            a1 = 0.0
            cx = (V[1, 1] - V[0, 1]) * (V[2, 2] - V[0, 2]) - (V[1, 2] - V[0, 2]) * (V[2, 1] - V[0, 1])
            cy = (V[1, 2] - V[0, 2]) * (V[2, 0] - V[0, 0]) - (V[1, 0] - V[0, 0]) * (V[2, 2] - V[0, 2])
            cz = (V[1, 0] - V[0, 0]) * (V[2, 1] - V[0, 1]) - (V[1, 1] - V[0, 1]) * (V[2, 0] - V[0, 0])
            a1 = 0.5 * math.sqrt(cx * cx + cy * cy + cz * cz)
            for r in range(3):
                b0 = 2.0 / 3.0 if r == 0 else 1.0 / 6.0
                b1 = 2.0 / 3.0 if r == 1 else 1.0 / 6.0
                b2 = 2.0 / 3.0 if r == 2 else 1.0 / 6.0
                for c in range(3):
                    pts[k, c] = b0 * V[0, c] + b1 * V[1, c] + b2 * V[2, c]
                w[k] = a1 / 3.0
                owner[k] = i
                k += 1
        else:
            for a in range(2):
                xi = -_G if a == 0 else _G
                for b in range(2):
                    eta = -_G if b == 0 else _G
                    n0 = 0.25 * (1 - xi) * (1 - eta)
                    n1 = 0.25 * (1 + xi) * (1 - eta)
                    n2 = 0.25 * (1 + xi) * (1 + eta)
                    n3 = 0.25 * (1 - xi) * (1 + eta)
                    jx = np.zeros(3)
                    jy = np.zeros(3)
                    for c in range(3):
                        pts[k, c] = n0 * V[0, c] + n1 * V[1, c] + n2 * V[2, c] + n3 * V[3, c]
                        jx[c] = 0.25 * (-(1 - eta) * V[0, c] + (1 - eta) * V[1, c]
                                        + (1 + eta) * V[2, c] - (1 + eta) * V[3, c])
                        jy[c] = 0.25 * (-(1 - xi) * V[0, c] - (1 + xi) * V[1, c]
                                        + (1 + xi) * V[2, c] + (1 - xi) * V[3, c])
                    cx = jx[1] * jy[2] - jx[2] * jy[1]
                    cy = jx[2] * jy[0] - jx[0] * jy[2]
                    cz = jx[0] * jy[1] - jx[1] * jy[0]
                    w[k] = math.sqrt(cx * cx + cy * cy + cz * cz)
                    owner[k] = i
                    k += 1
    start[n] = k


def gauss_points(verts, nvert):
    """Quadrature nodes of all panels.

    Triangles use the symmetric 3-point rule, quads a 2x2 Gauss rule on the
    bilinear map.  Returns ``(points, weights, owner, start)``; the weights
    of a panel sum to its area.
    """
    nvert = np.asarray(nvert, np.int64)
    total = int(np.where(nvert == 3, 3, 4).sum())
    pts = np.empty((total, 3))
    w = np.empty(total)
    owner = np.empty(total, np.int64)
    start = np.empty(len(verts) + 1, np.int64)
    _gauss_rules(np.ascontiguousarray(verts), nvert, pts, w, owner, start)
    return pts, w, owner, start


@nb.njit(cache=True)
def near_correction(tpts, ti, pj, verts, nvert, gpts, gw, gstart, want_grad):
    """Exact minus quadrature single-layer values for listed (target, panel) pairs.

    Returns ``(K, 4)``: potential then gradient of ``\\int dS/|x-y|`` per pair.
    """
    K = ti.shape[0]
    out = np.zeros((K, 4))
    for k in range(K):
        i = ti[k]
        j = pj[k]
        x = tpts[i, 0]
        y = tpts[i, 1]
        z = tpts[i, 2]
        p, gx, gy, gz = polygon_integral(x, y, z, verts[j], nvert[j], want_grad)
        for q in range(gstart[j], gstart[j + 1]):
            dx = x - gpts[q, 0]
            dy = y - gpts[q, 1]
            dz = z - gpts[q, 2]
            r2 = dx * dx + dy * dy + dz * dz
            inv = 1.0 / math.sqrt(r2)
            p -= gw[q] * inv
            if want_grad:
                c = gw[q] * inv * inv * inv
                gx += c * dx
                gy += c * dy
                gz += c * dz
        out[k, 0] = p
        out[k, 1] = gx
        out[k, 2] = gy
        out[k, 3] = gz
    return out


@nb.njit(cache=True)
def exact_integrals(tpts, ti, pj, verts, nvert, want_grad):
    K = ti.shape[0]
    out = np.zeros((K, 4))
    for k in range(K):
        i = ti[k]
        p, gx, gy, gz = polygon_integral(tpts[i, 0], tpts[i, 1], tpts[i, 2],
                                         verts[pj[k]], nvert[pj[k]], want_grad)
        out[k, 0] = p
        out[k, 1] = gx
        out[k, 2] = gy
        out[k, 3] = gz
    return out


def near_pairs(points, centroids, diameters, factor):
    """All (point, panel) pairs with ``|x - c_j| < factor * diam_j``.

    Panels are bucketed by diameter (factor-2 classes) so that graded meshes
    do not inflate the search radius.  Pairs are returned sorted by point.
    """
    points = np.asarray(points, float)
    if len(centroids) == 0 or len(points) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    cls = np.floor(np.log2(diameters / diameters.min())).astype(np.int64)
    ptree = cKDTree(points)
    ti, pj = [], []
    for c in np.unique(cls):
        sel = np.flatnonzero(cls == c)
        rad = factor * float(diameters[sel].max())
        stree = cKDTree(centroids[sel])
        pairs = ptree.sparse_distance_matrix(stree, rad, output_type="ndarray")
        if len(pairs) == 0:
            continue
        i = pairs["i"].astype(np.int64)
        j = sel[pairs["j"]]
        keep = pairs["v"] < factor * diameters[j]
        ti.append(i[keep])
        pj.append(j[keep])
    if not ti:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    ti = np.concatenate(ti)
    pj = np.concatenate(pj)
    order = np.lexsort((pj, ti))
    return ti[order], pj[order]
