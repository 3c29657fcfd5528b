"""Unit-voltage basis of a scene and its superposition.

A :class:`BasisFieldSet` holds solved charge densities for one or more
independently solved meshes (e.g. trap and lens) plus optional field grids.
Potentials for arbitrary electrode voltages are voltage-weighted sums of the
unit solutions.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numba as nb
import numpy as np

from ..geometry import ElectrodeMesh
from .bem import ChargeSolution, MeshCharges
from .fmm import FmmConfig
from .grid import FieldGrid, box_coords, hermite_cell, locate, sample_nodes

CACHE_VERSION = 1
# expansion used to sample grid nodes (gradient error ~1e-8 of the field scale)
GRID_FMM = FmmConfig(order=20, theta=0.45)

# status codes of the packed field evaluator
FIELD_OK = 0
FIELD_GUARD = 1
FIELD_OUTSIDE = 2


class BasisFieldSet:
    """Solved components and interpolation grids.

    Parameters
    ----------
    components : list of MeshCharges
        Group names must be unique across components.
    grids : list of FieldGrid, optional
        Searched in order; put finer grids first.
    """

    def __init__(self, components, grids=()):
        self.components = list(components)
        self.grids: list[FieldGrid] = list(grids)
        self.groups: list[str] = []
        for c in self.components:
            for g in c.groups:
                if g in self.groups:
                    raise ValueError(f"group {g!r} solved twice")
                self.groups.append(g)
        self._packed = None

    # ---------------------------------------------------------------- direct
    def guard_flags(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, float))
        flags = np.zeros(len(pts), bool)
        for c in self.components:
            flags |= c.guard_flags(pts)
        return flags

    def evaluate_direct(self, points, voltages: dict[str, float]):
        """``(phi, E, guard)`` by summation over all panels."""
        self._check_voltages(voltages)
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        phi = np.zeros(len(pts))
        E = np.zeros((len(pts), 3))
        for c in self.components:
            w = {g: voltages.get(g, 0.0) for g in c.groups}
            if any(w.values()):
                p, e = c.evaluate(pts, w)
                phi += p
                E += e
        return phi, E, self.guard_flags(pts)

    def evaluate_unit(self, points, groups=None, fmm: FmmConfig | None = None):
        """Per-group unit-voltage ``(phi[g, n], E[g, n, 3])`` for ``groups``.

        ``fmm`` overrides the expansion settings of the components.
        """
        groups = list(groups or self.groups)
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        phi = np.zeros((len(groups), len(pts)))
        E = np.zeros((len(groups), len(pts), 3))
        for c in self.components:
            mine = [g for g in c.groups if g in groups]
            if not mine:
                continue
            sub = MeshCharges(c.mesh, {g: c.solutions[g] for g in mine}, fmm or c.fmm)
            p, e = sub.evaluate(pts, per_group=True)
            for k, g in enumerate(mine):
                phi[groups.index(g)] = p[k]
                E[groups.index(g)] = e[k]
        return phi, E

    def _check_voltages(self, voltages):
        unknown = set(voltages) - set(self.groups)
        if unknown:
            raise KeyError(f"voltages for unknown groups: {sorted(unknown)}")

    # ---------------------------------------------------------------- grids
    def build_field_grid(self, lower, upper, spacing, groups=None, order: int = 3,
                         append: bool = True, fmm: FmmConfig | None = GRID_FMM) -> FieldGrid:
        """Sample a tricubic grid over the box; guard-zone nodes are masked.

        Node values use a tighter expansion (``fmm``) than the solve: the
        interpolant differentiates them, so sampling noise shows up in the
        cross derivatives.
        """
        if order != 3:
            raise ValueError("only tricubic (order 3) grids are implemented")
        spacing = np.broadcast_to(np.asarray(spacing, float), (3,))
        coords = box_coords(lower, upper, spacing)
        groups = list(groups or self.groups)
        pts, data = sample_nodes(coords, lambda p: self.evaluate_unit(p, groups, fmm))
        shape = tuple(len(c) for c in coords)
        valid = ~self.guard_flags(pts).reshape(shape)
        # nodes on a surface are singular and poison their neighbours' differences
        valid &= np.isfinite(data).all(axis=(-2, -1))
        grid = FieldGrid(np.array([c[0] for c in coords]),
                         np.array([c[1] - c[0] for c in coords]), shape, groups,
                         data, valid)
        if append:
            self.grids.append(grid)
            self._packed = None
        return grid

    def _evaluate(self, points, voltages, use_grids=True):
        self._check_voltages(voltages)
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        n = len(pts)
        need = [g for g in self.groups if voltages.get(g, 0.0) != 0.0]
        phi = np.zeros(n)
        E = np.zeros((n, 3))
        done = np.zeros((n, len(need)), bool)
        if use_grids:
            for grid in self.grids:
                for k, g in enumerate(need):
                    if g not in grid.groups:
                        continue
                    todo = ~done[:, k]
                    if not todo.any():
                        continue
                    p, e, ok = grid.evaluate(pts[todo], {g: voltages[g]})
                    idx = np.flatnonzero(todo)[ok]
                    phi[idx] += p[ok]
                    E[idx] += e[ok]
                    done[idx, k] = True
        rest = np.flatnonzero(~done.all(axis=1))
        guard = np.zeros(n, bool)
        if len(rest):
            uphi, uE = self.evaluate_unit(pts[rest], need)
            for k, g in enumerate(need):
                m = ~done[rest, k]
                phi[rest[m]] += voltages[g] * uphi[k, m]
                E[rest[m]] += voltages[g] * uE[k, m]
            guard[rest] = self.guard_flags(pts[rest])
        return phi, E, guard

    def potential_at(self, points, voltages, use_grids=True):
        """Potential (V) and guard-zone flags at ``points``."""
        phi, _, guard = self._evaluate(points, voltages, use_grids)
        return phi, guard

    def field_at(self, points, voltages, use_grids=True):
        """Electric field (V/m) and guard-zone flags at ``points``."""
        _, E, guard = self._evaluate(points, voltages, use_grids)
        return E, guard

    # ---------------------------------------------------------------- numba
    def packed(self):
        """Flat arrays of all grids for :func:`packed_field`."""
        if self._packed is None:
            self._packed = pack_grids(self.grids, self.groups)
        return self._packed

    # ---------------------------------------------------------------- cache
    def save(self, path) -> None:
        """Write an ``.npz`` archive atomically."""
        arrays: dict[str, np.ndarray] = {}
        meta = {"version": CACHE_VERSION, "components": [], "grids": []}
        for ci, c in enumerate(self.components):
            m = c.mesh
            p = f"c{ci}_"
            arrays[p + "vertices"] = m.vertices
            arrays[p + "nvert"] = m.nvert
            arrays[p + "electrode"] = m.electrode
            sols = []
            for gi, (g, s) in enumerate(c.solutions.items()):
                arrays[p + f"sigma{gi}"] = s.sigma
                arrays[p + f"hist{gi}"] = np.asarray(s.residual_history, float)
                sols.append({"group": g, "residual": s.residual, "iterations": s.iterations})
            meta["components"].append({
                "electrode_ids": list(m.electrode_ids),
                "groups": {k: list(v) for k, v in m.groups.items()},
                "fmm": _fmm_dict(c.fmm), "solutions": sols})
        for gi, grid in enumerate(self.grids):
            p = f"g{gi}_"
            arrays[p + "origin"] = grid.origin
            arrays[p + "spacing"] = grid.spacing
            arrays[p + "data"] = grid.data
            arrays[p + "valid"] = grid.valid
            meta["grids"].append({"shape": list(grid.shape), "groups": list(grid.groups)})
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                buf = io.BytesIO()
                np.savez(buf, **arrays)
                fh.write(buf.getvalue())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "BasisFieldSet":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            if meta.get("version") != CACHE_VERSION:
                raise ValueError(f"{path}: cache version {meta.get('version')} "
                                 f"!= {CACHE_VERSION}")
            comps = []
            for ci, cm in enumerate(meta["components"]):
                p = f"c{ci}_"
                mesh = ElectrodeMesh(z[p + "vertices"], z[p + "nvert"], z[p + "electrode"],
                                     cm["electrode_ids"], cm["groups"])
                sols = {}
                for gi, s in enumerate(cm["solutions"]):
                    sols[s["group"]] = ChargeSolution(s["group"], z[p + f"sigma{gi}"],
                                                      s["residual"], s["iterations"],
                                                      z[p + f"hist{gi}"].tolist())
                comps.append(MeshCharges(mesh, sols, FmmConfig(**cm["fmm"])))
            grids = []
            for gi, gm in enumerate(meta["grids"]):
                p = f"g{gi}_"
                grids.append(FieldGrid(z[p + "origin"], z[p + "spacing"], tuple(gm["shape"]),
                                       gm["groups"], z[p + "data"], z[p + "valid"]))
        return cls(comps, grids)


def _fmm_dict(cfg: FmmConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def content_hash(*parts) -> str:
    """SHA-256 over meshes, configs and scalars; stable across runs."""
    h = hashlib.sha256()
    h.update(f"v{CACHE_VERSION}".encode())
    for p in parts:
        if isinstance(p, ElectrodeMesh):
            h.update(p.content_bytes())
        elif isinstance(p, FmmConfig):
            h.update(json.dumps(_fmm_dict(p), sort_keys=True).encode())
        elif isinstance(p, np.ndarray):
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


# --------------------------------------------------------------------------
# packed evaluation for the integrator
# --------------------------------------------------------------------------

def pack_grids(grids, group_names):
    """Concatenate grids into flat arrays indexed by global group number."""
    G = len(grids)
    meta = np.zeros((max(G, 1), 6))
    dims = np.zeros((max(G, 1), 3), np.int64)
    doff = np.zeros(max(G, 1), np.int64)
    voff = np.zeros(max(G, 1), np.int64)
    maxg = max([len(g.groups) for g in grids] + [1])
    gmap = np.full((max(G, 1), maxg), -1, np.int64)
    gcount = np.zeros(max(G, 1), np.int64)
    datas, valids = [], []
    dpos = vpos = 0
    for i, g in enumerate(grids):
        meta[i, :3] = g.origin
        meta[i, 3:] = g.spacing
        dims[i] = g.shape
        doff[i] = dpos
        voff[i] = vpos
        gcount[i] = len(g.groups)
        for s, name in enumerate(g.groups):
            gmap[i, s] = group_names.index(name)
        datas.append(np.ascontiguousarray(g.data).ravel())
        valids.append(np.ascontiguousarray(g.valid).ravel())
        dpos += datas[-1].size
        vpos += valids[-1].size
    data = np.concatenate(datas) if datas else np.zeros(1)
    valid = np.concatenate(valids) if valids else np.zeros(1, np.bool_)
    return (G, meta, dims, doff, voff, gmap, gcount, data, valid)


@nb.njit(cache=True)
def packed_field(x, y, z, volts, packed):
    """Potential and field at one point from packed grids.

    Each group with nonzero voltage is taken from the first grid that holds
    it and has a valid cell around the point.  Returns
    ``(phi, Ex, Ey, Ez, status)``.
    """
    G, meta, dims, doff, voff, gmap, gcount, data, valid = packed
    nglob = volts.shape[0]
    done = np.zeros(nglob, np.bool_)
    for g in range(nglob):
        if volts[g] == 0.0:
            done[g] = True
    C = np.zeros((2, 2, 2, 8))
    phi = ex = ey = ez = 0.0
    hit_guard = False
    for gi in range(G):
        nx, ny, nz = dims[gi, 0], dims[gi, 1], dims[gi, 2]
        i, j, k, tx, ty, tz = locate(x, y, z, meta[gi, 0], meta[gi, 1], meta[gi, 2],
                                     meta[gi, 3], meta[gi, 4], meta[gi, 5], nx, ny, nz)
        if i < 0:
            continue
        ng = gcount[gi]
        useful = False
        for s in range(ng):
            if not done[gmap[gi, s]]:
                useful = True
        if not useful:
            continue
        vb = voff[gi]
        good = True
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    if not valid[vb + ((i + a) * ny + (j + b)) * nz + (k + c)]:
                        good = False
        if not good:
            hit_guard = True
            continue
        db = doff[gi]
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    node = ((i + a) * ny + (j + b)) * nz + (k + c)
                    base = db + node * ng * 8
                    for sl in range(8):
                        acc = 0.0
                        for s in range(ng):
                            gg = gmap[gi, s]
                            if not done[gg]:
                                acc += volts[gg] * data[base + s * 8 + sl]
                        C[a, b, c, sl] = acc
        p, gx, gy, gz = hermite_cell(C, tx, ty, tz, meta[gi, 3], meta[gi, 4], meta[gi, 5])
        phi += p
        ex -= gx
        ey -= gy
        ez -= gz
        for s in range(ng):
            done[gmap[gi, s]] = True
    status = FIELD_OK
    for g in range(nglob):
        if not done[g]:
            status = FIELD_GUARD if hit_guard else FIELD_OUTSIDE
    return phi, ex, ey, ez, status
