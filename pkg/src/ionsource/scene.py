"""Scene assembly: meshes, basis solves, field grids along the beam and caching."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .electrostatics.basis import GRID_FMM, BasisFieldSet, content_hash
from .electrostatics.bem import BemOperator, MeshCharges, solve_basis
from .electrostatics.fmm import FmmConfig
from .geometry import SceneSpec, build_lens_mesh, build_trap_mesh

log = logging.getLogger(__name__)

# groups that are tied to ground and never need a solve
GROUNDED = ("ground", "rf_ground", "lens_ground")


@dataclass(frozen=True)
class SolverSettings:
    """Discretisation and solver knobs (SI)."""

    tol: float = 1e-8
    fmm_order: int = 12
    panel_size: float = 2e-4
    coarse_panel_size: float = 2e-3
    grading: float = 1.2
    lens_panel_size: float = 5e-5
    # trap-region grid: half width, transverse and axial spacing
    trap_grid_halfwidth: float = 1e-4
    trap_grid_spacing: tuple = (2e-5, 2e-5, 2.5e-5)
    exit_grid_halfwidth: float = 4e-4
    exit_grid_spacing: tuple = (5e-5, 5e-5, 2e-4)
    far_grid_halfwidth: float = 3.5e-4
    far_grid_spacing: tuple = (5e-5, 5e-5, 2e-3)
    lens_grid_halfwidth: float = 1.6e-4
    lens_grid_spacing: tuple = (2e-5, 2e-5, 4e-5)
    # axial end points (m) of the trap-region and exit grids
    trap_grid_z: tuple = (-6e-4, 1.0e-2)
    exit_grid_z: tuple = (1.0e-2, 4.0e-2)
    far_grid_end: float = 0.30

    def fmm(self) -> FmmConfig:
        return FmmConfig(order=self.fmm_order)


def trap_mesh(scene: SceneSpec, s: SolverSettings):
    return build_trap_mesh(scene.trap, s.panel_size, s.coarse_panel_size, s.grading)


def lens_mesh(scene: SceneSpec, s: SolverSettings):
    return build_lens_mesh(scene.lens, s.lens_panel_size) if scene.lens is not None else None


def grid_boxes(scene: SceneSpec, s: SolverSettings):
    """``(lower, upper, spacing)`` of each grid, finest first."""
    boxes = []
    if scene.lens is not None:
        spans = scene.lens.electrode_spans()
        z0 = spans[0][1] - 3e-3
        z1 = spans[-1][2] + 3e-3
        w = s.lens_grid_halfwidth
        boxes.append(((-w, -w, z0), (w, w, z1), s.lens_grid_spacing))
    w = s.trap_grid_halfwidth
    boxes.append(((-w, -w, s.trap_grid_z[0]), (w, w, s.trap_grid_z[1]), s.trap_grid_spacing))
    w = s.exit_grid_halfwidth
    boxes.append(((-w, -w, s.exit_grid_z[0]), (w, w, s.exit_grid_z[1]), s.exit_grid_spacing))
    w = s.far_grid_halfwidth
    far_end = max(s.far_grid_end, scene.detector_distance + 5e-3)
    if scene.lens is not None:
        far_end = max(far_end, scene.lens.electrode_spans()[-1][2] + 0.03)
    boxes.append(((-w, -w, s.exit_grid_z[1]), (w, w, far_end), s.far_grid_spacing))
    return boxes


def scene_key(scene: SceneSpec, s: SolverSettings, with_grids: bool) -> str:
    parts = [trap_mesh(scene, s), s.fmm(), s.tol]
    lm = lens_mesh(scene, s)
    if lm is not None:
        parts.append(lm)
    if with_grids:
        parts.append([list(map(list, b[:2])) + [list(b[2])] for b in grid_boxes(scene, s)])
        parts.append(GRID_FMM)
    return content_hash(*parts)


def solve_mesh(mesh, s: SolverSettings, report: dict | None = None) -> MeshCharges:
    groups = [g for g in mesh.groups if g not in GROUNDED]
    t0 = time.perf_counter()
    op = BemOperator(mesh, s.fmm())
    sols = {}
    for g in groups:
        sols[g] = solve_basis(mesh, g, tol=s.tol, operator=op)
    if report is not None:
        report.setdefault("timing", {}).setdefault("solve_seconds", []).append(
            time.perf_counter() - t0)
        report.setdefault("meshes", []).append({
            "panels": len(mesh), "near_pairs": op.n_near,
            "solutions": {g: {"iterations": v.iterations, "residual": v.residual}
                          for g, v in sols.items()}})
    return MeshCharges(mesh, sols, s.fmm())


def build_scene_basis(scene: SceneSpec, s: SolverSettings | None = None, cache_dir=None,
                      with_grids: bool = True, report: dict | None = None) -> BasisFieldSet:
    """Solve (or load from ``cache_dir``) the unit basis of the scene.

    The cache file name is the content hash of meshes, solver settings and
    grid layout; a hit reloads bit-identical arrays.  ``report`` receives
    panel counts, iterations and residuals (stored beside the cache and
    restored on a hit) plus wall-clock times under ``"timing"``.
    """
    s = s or SolverSettings()
    path = None
    if report is not None:
        report["key"] = scene_key(scene, s, with_grids)
    if cache_dir is not None:
        path = Path(cache_dir) / f"basis-{scene_key(scene, s, with_grids)}.npz"
        if path.exists():
            log.info("basis cache hit %s", path)
            if report is not None:
                side = path.with_suffix(".json")
                if side.exists():
                    report.update(json.loads(side.read_text()))
                report["timing"] = {"cache_hit": True}
            return BasisFieldSet.load(path)
    comps = [solve_mesh(trap_mesh(scene, s), s, report)]
    lm = lens_mesh(scene, s)
    if lm is not None:
        comps.append(solve_mesh(lm, s, report))
    basis = BasisFieldSet(comps)
    if with_grids:
        t0 = time.perf_counter()
        for lo, hi, h in grid_boxes(scene, s):
            basis.build_field_grid(lo, hi, h)
        if report is not None:
            report.setdefault("timing", {})["grid_seconds"] = time.perf_counter() - t0
            report["grids"] = [{"shape": list(g.shape), "origin_m": g.origin.tolist(),
                                "spacing_m": g.spacing.tolist()} for g in basis.grids]
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        basis.save(path)
        if report is not None:
            side = {k: v for k, v in report.items() if k != "timing"}
            path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))
            report.setdefault("timing", {})["cache_hit"] = False
    return basis


def settings_dict(s: SolverSettings) -> dict:
    return asdict(s)
