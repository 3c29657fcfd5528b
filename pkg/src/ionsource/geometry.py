"""Parametric panel meshes of the trap, the downstream optics and test bodies.

Coordinates: the beam axis is ``z`` and ions leave the trap towards ``+z``.
The origin sits on the trap axis at the centre of the segment the ion is held
over.  The four blades point along the diagonals ``(±1, ±1, 0)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


# --------------------------------------------------------------------------
# specifications
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DeflectionSpec:
    """Two flat plates at ``x = ±gap/2`` downstream of the blade ends."""

    gap: float = 4e-3
    height: float = 4e-3
    length: float = 5e-3
    offset: float = 1e-3  # from the blade exit end to the plate entrance


@dataclass(frozen=True)
class TrapSpec:
    """Segmented four-blade trap.  All lengths in metres."""

    blade_thickness: float = 410e-6
    blade_length: float = 65e-3
    face_separation: float = 2e-3
    segment_width: float = 0.7e-3
    n_segments: int = 8
    rf_face_width: float = 410e-6
    # metallised depth of the segment band on the top and bottom blade faces
    dc_band_depth: float = 1.0e-3
    # unmetallised strip between the front-face edge and the segment band
    dc_band_offset: float = 0.2e-3
    # blade length left between the last segment and the exit end
    exit_margin: float = 1.0e-3
    # segment (1-based) the origin is centred on
    center_segment: int = 5
    deflection: DeflectionSpec | None = field(default_factory=DeflectionSpec)

    def __post_init__(self):
        check_trap_spec(self)

    @property
    def r0(self) -> float:
        return self.face_separation / 2

    def segment_bounds(self, k: int) -> tuple[float, float]:
        """Axial extent of segment ``k`` (1-based)."""
        lo = (k - self.center_segment - 0.5) * self.segment_width
        return lo, lo + self.segment_width

    @property
    def exit_end(self) -> float:
        return self.segment_bounds(self.n_segments)[1] + self.exit_margin

    @property
    def entry_end(self) -> float:
        return self.exit_end - self.blade_length


def check_trap_spec(spec: TrapSpec) -> None:
    """Raise ``ValueError`` naming the first violated constraint."""
    for name in ("blade_thickness", "blade_length", "face_separation",
                 "segment_width", "rf_face_width", "dc_band_depth"):
        if not getattr(spec, name) > 0:
            raise ValueError(f"TrapSpec.{name} must be > 0")
    if spec.dc_band_offset < 0:
        raise ValueError("TrapSpec.dc_band_offset must be >= 0")
    if spec.exit_margin < 0:
        raise ValueError("TrapSpec.exit_margin must be >= 0")
    if spec.n_segments < 1:
        raise ValueError("TrapSpec.n_segments must be >= 1")
    if not 1 <= spec.center_segment <= spec.n_segments:
        raise ValueError("TrapSpec.center_segment outside 1..n_segments")
    if spec.segment_width * spec.n_segments + spec.exit_margin > spec.blade_length:
        raise ValueError("TrapSpec: segment block plus exit_margin longer than blade_length")
    if spec.rf_face_width > spec.blade_thickness:
        raise ValueError("TrapSpec.rf_face_width exceeds blade_thickness")
    # neighbouring blades, 90 degrees apart, touch once t/2 reaches r0
    if spec.blade_thickness / 2 >= spec.face_separation / 2:
        raise ValueError("TrapSpec: blades overlap (blade_thickness >= face_separation)")
    d = spec.deflection
    if d is not None:
        for name in ("gap", "height", "length"):
            if not getattr(d, name) > 0:
                raise ValueError(f"DeflectionSpec.{name} must be > 0")
        if d.offset < 0:
            raise ValueError("DeflectionSpec.offset must be >= 0")


@dataclass(frozen=True)
class LensSpec:
    """Three coaxial cylinders; the outer two are grounded."""

    bore_diameter: float = 1e-3
    focal_length_target: float = 9e-3
    electrode_length: float = 1.0e-3
    center_length: float = 1.0e-3
    gap: float = 0.5e-3
    position: float = 287e-3  # axial position of the centre electrode midpoint
    centre_electrode_voltage: float | None = None  # None: tuned to the target

    def __post_init__(self):
        for name in ("bore_diameter", "focal_length_target", "electrode_length",
                     "center_length", "gap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"LensSpec.{name} must be > 0")

    def electrode_spans(self) -> list[tuple[str, float, float]]:
        c, h = self.position, self.center_length / 2
        return [
            ("lens_entry", c - h - self.gap - self.electrode_length, c - h - self.gap),
            ("lens_center", c - h, c + h),
            ("lens_exit", c + h + self.gap, c + h + self.gap + self.electrode_length),
        ]


@dataclass(frozen=True)
class SceneSpec:
    trap: TrapSpec = field(default_factory=TrapSpec)
    lens: LensSpec | None = None
    aperture_radius: float | None = None
    aperture_distance: float | None = None
    tof_plane_distance: float = 247e-3
    measurement_plane_distance: float = 257e-3
    detector_distance: float = 287e-3

    def __post_init__(self):
        chain = [("aperture_distance", self.aperture_distance),
                 ("measurement_plane_distance", self.measurement_plane_distance),
                 ("detector_distance", self.detector_distance)]
        chain = [(k, v) for k, v in chain if v is not None]
        for (ka, a), (kb, b) in zip(chain, chain[1:]):
            if not a < b:
                raise ValueError(f"SceneSpec: {ka} must be < {kb}")
        if self.tof_plane_distance <= self.trap.exit_end:
            raise ValueError("SceneSpec: tof_plane_distance inside the trap")
        if self.aperture_radius is not None and self.aperture_radius <= 0:
            raise ValueError("SceneSpec.aperture_radius must be > 0")
        if self.lens is not None:
            entry = self.lens.electrode_spans()[0][1]
            if entry <= self.measurement_plane_distance:
                raise ValueError("SceneSpec: lens must lie beyond the measurement plane")


# --------------------------------------------------------------------------
# mesh container
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Panel:
    """One flat panel.  Triangles carry three vertices, quads four."""

    vertices: np.ndarray
    centroid: np.ndarray
    area: float
    normal: np.ndarray
    electrode_id: str


def _panel_props(verts: np.ndarray, nvert: np.ndarray):
    """Areal centroid, area, unit normal and diameter of each panel."""
    p0, p1, p2, p3 = (verts[:, i] for i in range(4))
    tri = nvert == 3
    # quads split along p0-p2; for triangles p3 == p2 so the second half is empty
    c1 = np.cross(p1 - p0, p2 - p0)
    c2 = np.cross(p2 - p0, p3 - p0)
    a1 = 0.5 * np.linalg.norm(c1, axis=1)
    a2 = np.where(tri, 0.0, 0.5 * np.linalg.norm(c2, axis=1))
    area = a1 + a2
    g1 = (p0 + p1 + p2) / 3
    g2 = (p0 + p2 + p3) / 3
    with np.errstate(invalid="ignore", divide="ignore"):
        centroid = (a1[:, None] * g1 + a2[:, None] * g2) / area[:, None]
        nvec = np.where(tri[:, None], c1, np.cross(p2 - p0, p3 - p1))
        normal = nvec / np.linalg.norm(nvec, axis=1)[:, None]
    diam = np.zeros(len(verts))
    for i in range(4):
        for j in range(i + 1, 4):
            diam = np.maximum(diam, np.linalg.norm(verts[:, i] - verts[:, j], axis=1))
    return centroid, area, normal, diam


class ElectrodeMesh:
    """Panels stored as flat arrays and grouped by electrode.

    Parameters
    ----------
    vertices : (N, 4, 3) array
        Panel corners in metres.  Triangles repeat their last vertex.
    nvert : (N,) int array
        3 or 4.
    electrode : (N,) int array
        Index into ``electrode_ids``.
    electrode_ids : sequence of str
    groups : dict, optional
        Electrically connected sets ``{group: (electrode_id, ...)}``.  Each
        electrode may appear in at most one group; by default every
        electrode is its own group.
    """

    def __init__(self, vertices, nvert, electrode, electrode_ids, groups=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.nvert = np.ascontiguousarray(nvert, dtype=np.int64)
        self.electrode = np.ascontiguousarray(electrode, dtype=np.int64)
        self.electrode_ids = tuple(electrode_ids)
        if groups is None:
            groups = {e: (e,) for e in self.electrode_ids}
        self.groups = {g: tuple(v) for g, v in groups.items()}
        seen = set()
        for g, members in self.groups.items():
            for e in members:
                if e not in self.electrode_ids:
                    raise ValueError(f"group {g!r} references unknown electrode {e!r}")
                if e in seen:
                    raise ValueError(f"electrode {e!r} is in more than one group")
                seen.add(e)
        (self.centroid, self.area, self.normal,
         self.diameter) = _panel_props(self.vertices, self.nvert)

    def __len__(self):
        return len(self.vertices)

    def panel(self, i: int) -> Panel:
        k = int(self.nvert[i])
        return Panel(self.vertices[i, :k].copy(), self.centroid[i].copy(),
                     float(self.area[i]), self.normal[i].copy(),
                     self.electrode_ids[self.electrode[i]])

    def electrode_mask(self, electrode_id: str) -> np.ndarray:
        return self.electrode == self.electrode_ids.index(electrode_id)

    def group_mask(self, group: str) -> np.ndarray:
        idx = [self.electrode_ids.index(e) for e in self.groups[group]]
        return np.isin(self.electrode, idx)

    def electrode_area(self, electrode_id: str) -> float:
        return float(self.area[self.electrode_mask(electrode_id)].sum())

    @staticmethod
    def concatenate(meshes) -> "ElectrodeMesh":
        ids: list[str] = []
        groups: dict[str, tuple] = {}
        verts, nv, el = [], [], []
        for m in meshes:
            offset = len(ids)
            for e in m.electrode_ids:
                if e in ids:
                    raise ValueError(f"duplicate electrode id {e!r}")
            ids.extend(m.electrode_ids)
            for g, v in m.groups.items():
                if g in groups:
                    raise ValueError(f"duplicate group {g!r}")
                groups[g] = v
            verts.append(m.vertices)
            nv.append(m.nvert)
            el.append(m.electrode + offset)
        return ElectrodeMesh(np.concatenate(verts), np.concatenate(nv),
                             np.concatenate(el), ids, groups)

    def content_bytes(self) -> bytes:
        """Canonical byte representation used for cache keys."""
        parts = [self.vertices.tobytes(), self.nvert.tobytes(), self.electrode.tobytes(),
                 "\x1f".join(self.electrode_ids).encode()]
        for g in sorted(self.groups):
            parts.append((g + "=" + ",".join(self.groups[g])).encode())
        return b"\x1e".join(parts)


class _MeshBuilder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.nvert: list[np.ndarray] = []
        self.el: list[np.ndarray] = []
        self.ids: list[str] = []

    def _eid(self, name):
        if name not in self.ids:
            self.ids.append(name)
        return self.ids.index(name)

    def add(self, verts, nvert, name):
        verts = np.asarray(verts, dtype=np.float64).reshape(-1, 4, 3)
        if len(verts) == 0:
            return
        self.verts.append(verts)
        self.nvert.append(np.broadcast_to(np.asarray(nvert, np.int64), len(verts)).copy())
        self.el.append(np.full(len(verts), self._eid(name), np.int64))

    def build(self, groups=None) -> ElectrodeMesh:
        return ElectrodeMesh(np.concatenate(self.verts), np.concatenate(self.nvert),
                             np.concatenate(self.el), self.ids, groups)


def _quad_grid(origin, eu, ev, u_nodes, v_nodes) -> np.ndarray:
    """Quads of the tensor grid ``origin + u*eu + v*ev``; normal is ``eu x ev``."""
    u = np.asarray(u_nodes)
    v = np.asarray(v_nodes)
    P = (np.asarray(origin)[None, None, :] + u[:, None, None] * np.asarray(eu)
         + v[None, :, None] * np.asarray(ev))
    q = np.stack([P[:-1, :-1], P[1:, :-1], P[1:, 1:], P[:-1, 1:]], axis=2)
    return q.reshape(-1, 4, 3)


def uniform_nodes(a: float, b: float, h: float) -> np.ndarray:
    n = max(1, math.ceil((b - a) / h - 1e-9))
    return np.linspace(a, b, n + 1)


def graded_nodes(a: float, b: float, h0: float, ratio: float, hmax: float,
                 fine_at: str = "a") -> np.ndarray:
    """Nodes on ``[a, b]`` growing geometrically from ``h0`` at the fine end.

    Step lengths are rescaled so the last node lands on ``b``.
    """
    length = b - a
    if ratio <= 1.0 or hmax <= h0:
        return uniform_nodes(a, b, h0)
    steps = []
    pos, h = 0.0, h0
    while pos < length - 1e-12 * length:
        steps.append(h)
        pos += h
        h = min(h * ratio, hmax)
    steps = np.array(steps) * (length / pos)
    if fine_at == "b":
        steps = steps[::-1]
    return a + np.concatenate([[0.0], np.cumsum(steps)])


# --------------------------------------------------------------------------
# trap
# --------------------------------------------------------------------------

def blade_axes(k: int):
    """Radial unit vector ``u`` and transverse unit vector ``v`` of blade ``k``."""
    a = math.pi / 4 + k * math.pi / 2
    u = np.array([math.cos(a), math.sin(a), 0.0])
    v = np.array([-math.sin(a), math.cos(a), 0.0])
    return u, v


def trap_groups(spec: TrapSpec) -> dict[str, tuple[str, ...]]:
    g = {
        "rf": ("rf.b0", "rf.b2"),
        "rf_ground": ("rfgnd.b1", "rfgnd.b3"),
        "ground": tuple(f"gnd.b{j}" for j in range(4)),
    }
    for k in range(1, spec.n_segments + 1):
        g[f"dc{k}"] = tuple(f"dc{k}.b{j}" for j in range(4))
    if spec.deflection is not None:
        g["defl1"] = ("defl1",)
        g["defl2"] = ("defl2",)
    return g


def _trap_z_nodes(spec: TrapSpec, h: float, coarse: float | None, ratio: float):
    seg_edges = [spec.segment_bounds(k)[0] for k in range(1, spec.n_segments + 1)]
    seg_edges.append(spec.segment_bounds(spec.n_segments)[1])
    parts = [uniform_nodes(a, b, h) for a, b in zip(seg_edges, seg_edges[1:])]
    lo, hi = seg_edges[0], seg_edges[-1]
    z0, z1 = spec.entry_end, spec.exit_end
    if coarse is None:
        before = uniform_nodes(z0, lo, h)
        after = uniform_nodes(hi, z1, h) if z1 > hi else np.array([hi])
    else:
        before = graded_nodes(z0, lo, h, ratio, coarse, fine_at="b")
        after = (graded_nodes(hi, z1, h, ratio, coarse, fine_at="a")
                 if z1 > hi else np.array([hi]))
    nodes = np.concatenate([before] + [p[1:] for p in parts] + [after[1:]])
    return nodes


def build_trap_mesh(spec: TrapSpec, target_panel_size: float,
                    coarse_panel_size: float | None = None,
                    grading: float = 1.2) -> ElectrodeMesh:
    """Panel mesh of the blades and deflection plates.

    Each blade carries a front face (RF on blades 0 and 2, RF ground on 1
    and 3) and, on its top and bottom faces, a metallised band of depth
    ``dc_band_depth`` cut axially into ``n_segments`` segments with grounded
    stretches beyond the segment block.  Segment ``k`` of all four blades
    forms group ``dck``.

    With ``coarse_panel_size`` set, axial and band-depth panel lengths grow
    geometrically (factor ``grading``) away from the segment block and the
    front edge up to that size; otherwise the mesh is uniform.
    """
    h = float(target_panel_size)
    if not h > 0:
        raise ValueError("target_panel_size must be > 0")
    smallest = min(spec.segment_width, spec.rf_face_width, spec.dc_band_depth)
    if h >= smallest:
        raise ValueError(f"target_panel_size {h:g} m is not below the smallest "
                         f"electrode dimension {smallest:g} m")
    r0, t = spec.r0, spec.blade_thickness
    zn = _trap_z_nodes(spec, h, coarse_panel_size, grading)
    zc = 0.5 * (zn[:-1] + zn[1:])
    wn = uniform_nodes(-spec.rf_face_width / 2, spec.rf_face_width / 2, h)
    s0 = r0 + spec.dc_band_offset
    if coarse_panel_size is None:
        sn = uniform_nodes(s0, s0 + spec.dc_band_depth, h)
    else:
        sn = graded_nodes(s0, s0 + spec.dc_band_depth, h, grading,
                          min(coarse_panel_size, spec.dc_band_depth / 3))
    # axial label of every z-interval: segment index or 0 for ground
    seg_of = np.zeros(len(zc), np.int64)
    for k in range(1, spec.n_segments + 1):
        a, b = spec.segment_bounds(k)
        seg_of[(zc > a) & (zc < b)] = k
    ez = np.array([0.0, 0.0, 1.0])
    mb = _MeshBuilder()
    for j in range(4):
        u, v = blade_axes(j)
        front = _quad_grid(r0 * u, ez, v, zn, wn).reshape(len(zc), len(wn) - 1, 4, 3)
        mb.add(front.reshape(-1, 4, 3), 4, ("rf" if j % 2 == 0 else "rfgnd") + f".b{j}")
        top = _quad_grid(t / 2 * v, ez, u, zn, sn).reshape(len(zc), len(sn) - 1, 4, 3)
        bot = _quad_grid(-t / 2 * v, u, ez, sn, zn).reshape(len(sn) - 1, len(zc), 4, 3)
        bot = bot.transpose(1, 0, 2, 3)
        mb.add(np.concatenate([top[seg_of == 0], bot[seg_of == 0]]).reshape(-1, 4, 3),
               4, f"gnd.b{j}")
        for k in range(1, spec.n_segments + 1):
            sel = seg_of == k
            mb.add(np.concatenate([top[sel], bot[sel]]).reshape(-1, 4, 3), 4, f"dc{k}.b{j}")
    d = spec.deflection
    if d is not None:
        # keep the guard zone of the plates (one panel diameter) off the axis
        hp = min(coarse_panel_size or h, d.height / 4, d.length / 4, d.gap / 8)
        hp = max(hp, h)
        z0 = spec.exit_end + d.offset
        yn = uniform_nodes(-d.height / 2, d.height / 2, hp)
        zp = uniform_nodes(z0, z0 + d.length, hp)
        ey = np.array([0.0, 1.0, 0.0])
        # normals face the beam
        mb.add(_quad_grid([d.gap / 2, 0, 0], ez, ey, zp, yn), 4, "defl1")
        mb.add(_quad_grid([-d.gap / 2, 0, 0], ey, ez, yn, zp), 4, "defl2")
    return mb.build(trap_groups(spec))


# --------------------------------------------------------------------------
# lens and test bodies
# --------------------------------------------------------------------------

def _cylinder(radius, z0, z1, h, inward=True):
    nphi = max(8, math.ceil(2 * math.pi * radius / h))
    phi = np.linspace(0.0, 2 * math.pi, nphi + 1)
    phi[-1] = 0.0
    zs = uniform_nodes(z0, z1, h)
    ring = np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=1)
    Z, I = np.meshgrid(zs, np.arange(nphi + 1), indexing="ij")
    P = np.concatenate([ring[I], Z[..., None]], axis=-1)
    if inward:  # (dz) x (dphi) points to the axis
        q = np.stack([P[:-1, :-1], P[1:, :-1], P[1:, 1:], P[:-1, 1:]], axis=2)
    else:
        q = np.stack([P[:-1, :-1], P[:-1, 1:], P[1:, 1:], P[1:, :-1]], axis=2)
    return q.reshape(-1, 4, 3)


def build_lens_mesh(spec: LensSpec, target_panel_size: float) -> ElectrodeMesh:
    """Three thin coaxial tubes of radius ``bore_diameter/2``.

    Groups: ``lens_center`` alone; the grounded outer tubes form ``lens_ground``.
    """
    h = float(target_panel_size)
    if not h > 0:
        raise ValueError("target_panel_size must be > 0")
    smallest = min(spec.electrode_length, spec.center_length, spec.bore_diameter)
    if h >= smallest:
        raise ValueError(f"target_panel_size {h:g} m is not below the smallest "
                         f"electrode dimension {smallest:g} m")
    mb = _MeshBuilder()
    for name, z0, z1 in spec.electrode_spans():
        mb.add(_cylinder(spec.bore_diameter / 2, z0, z1, h), 4, name)
    return mb.build({"lens_center": ("lens_center",),
                     "lens_ground": ("lens_entry", "lens_exit")})


def build_sphere_mesh(radius: float, subdivisions: int,
                      electrode_id: str = "sphere") -> ElectrodeMesh:
    """Icosphere with ``20 * 4**subdivisions`` flat triangles, vertices on the sphere."""
    t = (1 + 5 ** 0.5) / 2
    V = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    F = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
         (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
         (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in V]
    faces = F
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    P = np.array(verts) * radius
    f = np.array(faces)
    quads = np.stack([P[f[:, 0]], P[f[:, 1]], P[f[:, 2]], P[f[:, 2]]], axis=1)
    mb = _MeshBuilder()
    mb.add(quads, 3, electrode_id)
    return mb.build()


def build_plate_pair_mesh(side: float, separation: float,
                          target_panel_size: float) -> ElectrodeMesh:
    """Two parallel square sheets at ``z = ±separation/2`` (``plate_top``, ``plate_bottom``)."""
    n = uniform_nodes(-side / 2, side / 2, target_panel_size)
    ex, ey = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    mb = _MeshBuilder()
    mb.add(_quad_grid([0, 0, separation / 2], ex, ey, n, n), 4, "plate_top")
    mb.add(_quad_grid([0, 0, -separation / 2], ex, ey, n, n), 4, "plate_bottom")
    return mb.build()


# --------------------------------------------------------------------------
# diagnostics and export
# --------------------------------------------------------------------------

def validate_mesh(mesh: ElectrodeMesh, area_tol: float = 1e-12) -> list[str]:
    """List zero-area panels, orientation flips and overlapping panels.

    Orientation is checked through shared edges: two neighbouring panels of
    one electrode must traverse their common edge in opposite directions.
    Overlap is detected as coincident centroids with parallel normals.
    """
    report: list[str] = []
    tiny = area_tol * np.maximum(mesh.diameter, 1e-300) ** 2
    for i in np.flatnonzero(~(mesh.area > tiny)):
        report.append(f"zero-area panel {i} ({mesh.electrode_ids[mesh.electrode[i]]})")
    scale = max(float(np.abs(mesh.vertices).max()), 1e-300)
    key = np.round(mesh.vertices / (scale * 1e-11)).astype(np.int64)
    for e_idx, eid in enumerate(mesh.electrode_ids):
        owner: dict = {}
        flagged = set()
        for i in np.flatnonzero(mesh.electrode == e_idx):
            k = int(mesh.nvert[i])
            for a in range(k):
                e = (tuple(key[i, a]), tuple(key[i, (a + 1) % k]))
                if e[0] == e[1]:
                    continue
                if e in owner and owner[e] != i:
                    pair = (min(owner[e], i), max(owner[e], i))
                    if pair not in flagged:
                        flagged.add(pair)
                        report.append(f"inconsistent orientation between panels "
                                      f"{pair[0]} and {pair[1]} ({eid})")
                owner[e] = i
    ok = mesh.area > tiny
    idx = np.flatnonzero(ok)
    if len(idx) > 1:
        tree = cKDTree(mesh.centroid[idx])
        tol = 1e-6 * float(np.median(mesh.diameter[idx]))
        for a, b in sorted(tree.query_pairs(tol)):
            i, j = idx[a], idx[b]
            if abs(abs(mesh.normal[i] @ mesh.normal[j]) - 1) < 1e-9:
                report.append(f"overlapping panels {i} ({mesh.electrode_ids[mesh.electrode[i]]}) "
                              f"and {j} ({mesh.electrode_ids[mesh.electrode[j]]})")
    return report


MESH_CSV_HEADER = (["electrode_id"]
                   + [f"v{i}{c}_m" for i in range(4) for c in "xyz"]
                   + ["cx_m", "cy_m", "cz_m", "area_m2", "nx", "ny", "nz"])


def write_mesh_csv(mesh: ElectrodeMesh, path) -> None:
    """One panel per row; triangles repeat their third vertex."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MESH_CSV_HEADER)
        for i in range(len(mesh)):
            row = [mesh.electrode_ids[mesh.electrode[i]]]
            row += [repr(float(x)) for x in mesh.vertices[i].ravel()]
            row += [repr(float(x)) for x in mesh.centroid[i]]
            row.append(repr(float(mesh.area[i])))
            row += [repr(float(x)) for x in mesh.normal[i]]
            w.writerow(row)


def read_mesh_csv(path, groups=None) -> ElectrodeMesh:
    ids: list[str] = []
    verts, nvert, el = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != MESH_CSV_HEADER:
            raise ValueError(f"{path}: unexpected mesh CSV header")
        for row in r:
            if row[0] not in ids:
                ids.append(row[0])
            v = np.array([float(x) for x in row[1:13]]).reshape(4, 3)
            verts.append(v)
            nvert.append(3 if np.array_equal(v[3], v[2]) else 4)
            el.append(ids.index(row[0]))
    return ElectrodeMesh(np.array(verts), np.array(nvert), np.array(el), ids, groups)
