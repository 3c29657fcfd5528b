"""Command-line front end.

Every command writes into ``<out>/<command>-<hash>/`` where ``hash`` is
derived from the effective configuration (and input data where relevant),
together with ``effective_config.json``.  Reports are JSON with sorted keys,
so identical inputs give byte-identical files.  The one exception is
``timing.json`` from ``solve``, which holds wall-clock times.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ProjectConfig, config_hash, dump_config, load_config
from .electrostatics.bem import SolverError
from .ensemble import (EmptyEnsembleError, EnsembleStats, FocusError, fit_gaussian_tof,
                       focus_ensemble, shot_trajectory, simulate_shots)
from .geometry import validate_mesh, write_mesh_csv
from .scene import build_scene_basis, lens_mesh, scene_key, settings_dict, trap_mesh
from .trap import (MinimumError, equilibrium_positions, infer_dark_mass, normal_modes,
                   secular_frequencies, species_from)

log = logging.getLogger("ionsource")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_EMPTY = 4
EXIT_FOCUS = 5


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


class Context:
    """Resolved configuration plus runtime-only options."""

    def __init__(self, args, command: str, extra: bytes = b""):
        self.config: ProjectConfig = load_config(args.config, args.set, args.seed, args.out)
        self.threads = args.threads
        if self.threads < 1:
            raise ConfigError("--threads must be >= 1")
        self.hash = config_hash(self.config, command.encode(), extra)
        self.dir = Path(self.config.output) / f"{command}-{self.hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cache = Path(args.cache) if args.cache else Path(self.config.output) / "cache"
        (self.dir / "effective_config.json").write_text(dump_config(self.config))

    def basis(self, with_grids=True, report=None):
        cfg = self.config
        if not with_grids:
            # a cache that already carries grids serves grid-free requests too
            full = self.cache / f"basis-{scene_key(cfg.scene, cfg.solver, True)}.npz"
            if full.exists():
                with_grids = True
        return build_scene_basis(cfg.scene, cfg.solver, self.cache, with_grids, report)

    def secular(self, basis, species=None):
        cfg = self.config
        return secular_frequencies(species or species_from(cfg.run.species), cfg.drive, basis)


def _temperature_tag(T: float) -> str:
    return f"T{T:.6g}K"


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_mesh(ctx: Context) -> dict:
    cfg = ctx.config
    meshes = {"trap": trap_mesh(cfg.scene, cfg.solver)}
    lm = lens_mesh(cfg.scene, cfg.solver)
    if lm is not None:
        meshes["lens"] = lm
    report = {}
    for name, m in meshes.items():
        write_mesh_csv(m, ctx.dir / f"{name}_mesh.csv")
        counts = {g: int(m.group_mask(g).sum()) for g in m.groups}
        report[name] = {"panels": len(m), "electrodes": len(m.electrode_ids),
                        "panels_per_group": counts,
                        "min_panel_diameter_m": float(m.diameter.min()),
                        "max_panel_diameter_m": float(m.diameter.max()),
                        "issues": validate_mesh(m)}
    write_json(ctx.dir / "mesh_report.json", report)
    return report


def cmd_solve(ctx: Context) -> dict:
    report = {}
    ctx.basis(True, report)
    timing = report.pop("timing", {})
    report["settings"] = settings_dict(ctx.config.solver)
    write_json(ctx.dir / "solve_report.json", report)
    write_json(ctx.dir / "timing.json", timing)
    return report


def cmd_freqs(ctx: Context) -> dict:
    sec = ctx.secular(ctx.basis(with_grids=False))
    rep = sec.report()
    rep["species"] = sec.species.label
    rep["rf_frequency_Hz"] = ctx.config.drive.rf_frequency
    rep["rf_amplitude_V"] = ctx.config.drive.rf_amplitude
    write_json(ctx.dir / "freqs.json", rep)
    return rep


def cmd_extract(ctx: Context) -> dict:
    cfg = ctx.config
    basis = ctx.basis()
    sec = ctx.secular(basis)
    rows = {}
    sweep = cfg.run.temperature_sweep is not None
    for T in cfg.run.temperatures():
        rc = cfg.run_config(T, ctx.threads)
        stats = EnsembleStats(simulate_shots(rc, basis, sec), cfg.scene.aperture_radius)
        tag = f"_{_temperature_tag(T)}" if sweep else ""
        rep = stats.report()
        rep["temperature_K"] = T
        write_json(ctx.dir / f"stats{tag}.json", rep)
        stats.write_spot_csv(ctx.dir / f"spot{tag}.csv")
        stats.write_tof_csv(ctx.dir / f"tof{tag}.csv")
        for shot in cfg.run.trajectory_shots:
            tr = shot_trajectory(rc, basis, int(shot), sec, cfg.run.trajectory_stride)
            tr.write_csv(ctx.dir / f"trajectory{tag}_shot{int(shot)}.csv",
                         stats.records.plane_z.tolist())
        rows[_temperature_tag(T)] = rep
    out = {"secular": sec.report(), "runs": rows}
    write_json(ctx.dir / "extract.json", out)
    return out


def cmd_focus(ctx: Context) -> dict:
    cfg = ctx.config
    if cfg.scene.lens is None:
        raise ConfigError("focus needs scene.lens")
    basis = ctx.basis()
    sec = ctx.secular(basis)
    fs = cfg.focus
    voltage = cfg.scene.lens.centre_electrode_voltage
    sweep = cfg.run.temperature_sweep is not None
    rows = {}
    for T in cfg.run.temperatures():
        rc = cfg.run_config(T, ctx.threads)
        res = focus_ensemble(rc, basis, voltage, fs.scan_length, fs.scan_points, fs.tune_shots,
                             sec, fs.mode)
        voltage = res.lens_voltage  # later temperatures share the tuned lens
        tag = f"_{_temperature_tag(T)}" if sweep else ""
        with open(ctx.dir / f"focus_scan{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z_m", "spot_radius_m"])
            for z, r in zip(res.scan_z, res.scan_radius):
                w.writerow([repr(float(z)), repr(float(r))])
        with open(ctx.dir / f"focus_spot{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_m", "y_m"])
            for x, y in res.spot_xy:
                w.writerow([repr(float(x)), repr(float(y))])
        rep = {"temperature_K": T, "lens_voltage_V": res.lens_voltage,
               "focus_z_m": res.focus_z, "focal_length_m": res.focal_length,
               "spot_radius_m": res.spot_radius, "accepted": res.n_accepted,
               "mode": fs.mode}
        write_json(ctx.dir / f"focus{tag}.json", rep)
        rows[_temperature_tag(T)] = rep
    write_json(ctx.dir / "focus_summary.json", rows)
    return rows


def read_arrival_times(path: Path, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    if column not in rows[0]:
        raise ConfigError(f"{path}: no column {column!r} (have {list(rows[0])})")
    keep = [r for r in rows if r.get("status", "arrived") == "arrived"]
    try:
        t = np.array([float(r[column]) for r in keep])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return t[np.isfinite(t)]


def cmd_tof_fit(ctx: Context, path: Path) -> dict:
    tf = ctx.config.tof_fit
    t = read_arrival_times(path, tf.column)
    if len(t) == 0:
        raise EmptyEnsembleError(f"{path}: no arrival times", {})
    try:
        fit = fit_gaussian_tof(t, tf.bin_width)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    rep = {"input": path.name, "count": int(len(t)), "bin_width_s": tf.bin_width,
           "mle": vars(fit.mle), "binned": vars(fit.binned),
           "mu_difference_bins": abs(fit.mle.mu - fit.binned.mu) / tf.bin_width}
    write_json(ctx.dir / "tof_fit.json", rep)
    return rep


def cmd_modes(ctx: Context) -> dict:
    m = ctx.config.modes
    known, dark = species_from(m.known), species_from(m.dark)
    if m.axial_frequency is None:
        omega_ax = 2 * math.pi * ctx.secular(ctx.basis(with_grids=False), known).axial
    else:
        omega_ax = 2 * math.pi * m.axial_frequency
    crystal = equilibrium_positions([known, dark], omega_ax, reference=known)
    spec = normal_modes(crystal)
    if not 0 <= m.mode_index < len(spec.omegas):
        raise ConfigError(f"modes.mode_index must be 0 or 1, got {m.mode_index}")
    predicted = float(spec.frequencies[m.mode_index])
    measured = predicted if m.measured_frequency is None else m.measured_frequency
    est = infer_dark_mass(measured, m.frequency_sigma, known, omega_ax, m.mode_index,
                          dark.charge)
    rep = {"known": known.label, "dark": dark.label or f"{dark.mass_amu} amu",
           "axial_frequency_Hz": omega_ax / (2 * math.pi),
           "positions_m": crystal.positions,
           "mode_frequencies_Hz": spec.frequencies,
           "mode_vectors": spec.vectors.T,
           "mode_index": m.mode_index,
           "used_frequency_Hz": measured,
           "frequency_source": "predicted" if m.measured_frequency is None else "measured",
           "inferred": est.report(),
           "true_dark_mass_amu": dark.mass_amu,
           "charge_assumed": dark.charge}
    write_json(ctx.dir / "modes.json", rep)
    return rep


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

COMMANDS = {"mesh": cmd_mesh, "solve": cmd_solve, "freqs": cmd_freqs, "extract": cmd_extract,
            "focus": cmd_focus, "modes": cmd_modes}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="JSON config file or preset name (lengths in mm)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a value by dotted path, e.g. run.shots=1000")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--cache", metavar="DIR", help="basis cache (default <out>/cache)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ionsource",
                                description="Trapped-ion point source simulator.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"mesh": "export and validate the electrode meshes",
             "solve": "solve the electrode basis and build field grids",
             "freqs": "secular frequencies at the trap minimum",
             "extract": "thermal extraction ensemble",
             "focus": "lens focus scan",
             "modes": "two-ion modes and dark-ion mass"}
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    tf = sub.add_parser("tof-fit", parents=[common], help="Gaussian fit of arrival times")
    tf.add_argument("input", type=Path, help="CSV with an arrival-time column")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "tof-fit":
            if not args.input.is_file():
                raise ConfigError(f"input {args.input} not found")
            ctx = Context(args, args.command, args.input.read_bytes())
            cmd_tof_fit(ctx, args.input)
        else:
            ctx = Context(args, args.command)
            COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, MinimumError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except EmptyEnsembleError as exc:
        print(f"empty ensemble: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except FocusError as exc:
        print(f"focus failure: {exc}", file=sys.stderr)
        return EXIT_FOCUS
    print(ctx.dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
