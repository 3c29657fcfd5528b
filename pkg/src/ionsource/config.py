"""Project configuration documents.

A document is a JSON tree.  Lengths are written in millimetres and held in
metres in memory; every other quantity is SI in both places (V, Hz, s, K).
Unknown keys are rejected with their dotted location.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .ensemble import ExtractionConfig, RunConfig
from .geometry import DeflectionSpec, LensSpec, SceneSpec, TrapSpec
from .scene import SolverSettings
from .trap import DriveConfig, IonSpecies, species_from


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class RunSettings:
    species: IonSpecies | str = "40Ca+"
    temperature: float = 2e-3
    # several temperatures run back to back with shared seeds (None: just one)
    temperature_sweep: tuple | None = None
    shots: int = 500
    detection_efficiency: float = 1.0
    trajectory_shots: tuple = ()
    trajectory_stride: int = 10
    sampling: str = "harmonic"

    def __post_init__(self):
        if self.sampling not in ("harmonic", "boltzmann"):
            raise ValueError("sampling must be 'harmonic' or 'boltzmann'")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")

    def temperatures(self) -> tuple:
        return tuple(self.temperature_sweep) if self.temperature_sweep else (self.temperature,)


@dataclass(frozen=True)
class FocusSettings:
    scan_length: float = 0.05
    scan_points: int = 201
    tune_shots: int = 64
    mode: str = "accelerating"

    def __post_init__(self):
        if self.mode not in ("accelerating", "decelerating"):
            raise ValueError("mode must be 'accelerating' or 'decelerating'")


@dataclass(frozen=True)
class ModesSettings:
    known: IonSpecies | str = "40Ca+"
    dark: IonSpecies | str = "CaO+"
    # single-ion axial frequency of ``known`` (Hz); None: computed from the trap
    axial_frequency: float | None = None
    mode_index: int = 0
    # observed two-ion mode frequency (Hz); None: use the predicted one
    measured_frequency: float | None = None
    frequency_sigma: float = 0.0


@dataclass(frozen=True)
class TofFitSettings:
    bin_width: float = 2e-9
    column: str = "arrival_time_s"


@dataclass(frozen=True)
class ProjectConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    drive: DriveConfig = field(default_factory=DriveConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    run: RunSettings = field(default_factory=RunSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    focus: FocusSettings = field(default_factory=FocusSettings)
    modes: ModesSettings = field(default_factory=ModesSettings)
    tof_fit: TofFitSettings = field(default_factory=TofFitSettings)
    seed: int = 0
    output: str = "out"

    def run_config(self, temperature: float | None = None, threads: int = 1) -> RunConfig:
        r = self.run
        lens_v = 0.0
        if self.scene.lens is not None and self.scene.lens.centre_electrode_voltage is not None:
            lens_v = self.scene.lens.centre_electrode_voltage
        return RunConfig(species=species_from(r.species),
                         temperature=r.temperature if temperature is None else temperature,
                         shots=r.shots, seed=self.seed, drive=self.drive,
                         extraction=self.extraction, scene=self.scene,
                         detection_efficiency=r.detection_efficiency,
                         lens_voltage=lens_v, threads=threads, sampling=r.sampling)


# field name sets holding lengths, per dataclass
_LENGTHS = {
    TrapSpec: {"blade_thickness", "blade_length", "face_separation", "segment_width",
               "rf_face_width", "dc_band_depth", "dc_band_offset", "exit_margin"},
    DeflectionSpec: {"gap", "height", "length", "offset"},
    LensSpec: {"bore_diameter", "focal_length_target", "electrode_length", "center_length",
               "gap", "position"},
    SceneSpec: {"aperture_radius", "aperture_distance", "tof_plane_distance",
                "measurement_plane_distance", "detector_distance"},
    ExtractionConfig: {"start_offset"},
    SolverSettings: {"panel_size", "coarse_panel_size", "lens_panel_size",
                     "trap_grid_halfwidth", "trap_grid_spacing", "exit_grid_halfwidth",
                     "exit_grid_spacing", "far_grid_halfwidth", "far_grid_spacing",
                     "lens_grid_halfwidth", "lens_grid_spacing", "trap_grid_z",
                     "exit_grid_z", "far_grid_end"},
    FocusSettings: {"scan_length"},
}

_NESTED = {
    ProjectConfig: {"scene": SceneSpec, "drive": DriveConfig, "extraction": ExtractionConfig,
                    "run": RunSettings, "solver": SolverSettings, "focus": FocusSettings,
                    "modes": ModesSettings, "tof_fit": TofFitSettings},
    SceneSpec: {"trap": TrapSpec, "lens": LensSpec},
    TrapSpec: {"deflection": DeflectionSpec},
}

_SPECIES_FIELDS = {(RunSettings, "species"), (ModesSettings, "known"), (ModesSettings, "dark")}


# --------------------------------------------------------------------------
# millimetre <-> metre
# --------------------------------------------------------------------------

def _to_si(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return tuple(_to_si(x) for x in v)
    return float(v) / 1e3


def _mm_scalar(m: float) -> float:
    """Millimetre value that converts back to exactly ``m``."""
    mm = m * 1e3
    if mm / 1e3 == m:
        return mm
    lo = hi = mm
    for _ in range(64):
        lo, hi = np.nextafter(lo, -math.inf), np.nextafter(hi, math.inf)
        for c in (lo, hi):
            if float(c) / 1e3 == m:
                return float(c)
    return mm


def _to_mm(v):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return [_to_mm(x) for x in v]
    return _mm_scalar(float(v))


# --------------------------------------------------------------------------
# document -> objects
# --------------------------------------------------------------------------

def _species_doc(s):
    if isinstance(s, str):
        return s
    return {"mass_amu": s.mass_amu, "charge": s.charge, "label": s.label}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or '<root>'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        loc = ", ".join(f"{where}.{k}" if where else k for k in unknown)
        raise ConfigError(f"unknown key(s): {loc}")
    kw = {}
    lengths = _LENGTHS.get(cls, ())
    nested = _NESTED.get(cls, {})
    for k, v in data.items():
        path = f"{where}.{k}" if where else k
        try:
            if k in nested:
                kw[k] = None if v is None else _build(nested[k], v, path)
            elif (cls, k) in _SPECIES_FIELDS:
                species_from(v)  # validate early
                kw[k] = v if isinstance(v, str) else species_from(v)
            elif k in lengths:
                kw[k] = _to_si(v)
            elif isinstance(v, list):
                kw[k] = tuple(v)
            else:
                kw[k] = v
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
    try:
        return cls(**kw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where or '<root>'}: {exc}") from None


def _doc(obj):
    cls = type(obj)
    out = {}
    lengths = _LENGTHS.get(cls, ())
    nested = _NESTED.get(cls, {})
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if f.name in nested:
            out[f.name] = None if v is None else _doc(v)
        elif (cls, f.name) in _SPECIES_FIELDS:
            out[f.name] = _species_doc(v)
        elif f.name in lengths:
            out[f.name] = _to_mm(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, dict):
            out[f.name] = dict(v)
        else:
            out[f.name] = v
    return out


def to_document(config: ProjectConfig) -> dict:
    """JSON-ready tree in file units (mm)."""
    return _doc(config)


def from_document(doc: dict) -> ProjectConfig:
    """Build a configuration from a (possibly partial) document over defaults."""
    merged = _merge(to_document(ProjectConfig()), doc, "")
    return _build(ProjectConfig, merged, "")


def _merge(base, over, where):
    if not isinstance(over, dict):
        raise ConfigError(f"{where or '<root>'}: expected an object")
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{where}.{k}" if where else k
        # mappings that are values rather than sections replace wholesale
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _VALUE_MAPS \
                and not _is_species_key(path):
            out[k] = _merge(out[k], v, path)
        else:
            out[k] = copy.deepcopy(v)
    return out


_VALUE_MAPS = ("dc_voltages", "deflection_voltages")


def _is_species_key(path: str) -> bool:
    return path in ("run.species", "modes.known", "modes.dark")


# --------------------------------------------------------------------------
# files, presets and overrides
# --------------------------------------------------------------------------

PRESETS = ("paper_trap", "fig3_extraction", "fig4_focus_2mK", "fig4_focus_100uK", "table1")


def preset_document(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    text = resources.files("ionsource.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def read_document(source: str | Path | None) -> dict:
    """Load a file path or, failing that, a preset name (``None``: defaults)."""
    if source is None:
        return {}
    p = Path(source)
    if p.is_file():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    name = p.stem if p.suffix == ".json" else str(source)
    if name in PRESETS:
        return preset_document(name)
    raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply ``dotted.key=value`` strings; values parse as JSON when they can."""
    doc = copy.deepcopy(doc)
    for a in assignments or ():
        key, sep, value = a.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {a!r}")
        parts = key.split(".")
        node = doc
        for i, p in enumerate(parts[:-1]):
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"--set {key}: {'.'.join(parts[:i + 1])} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(source=None, overrides=(), seed: int | None = None,
                output: str | None = None) -> ProjectConfig:
    doc = apply_overrides(read_document(source), overrides)
    if seed is not None:
        doc["seed"] = seed
    if output is not None:
        doc["output"] = str(output)
    return from_document(doc)


def dump_config(config: ProjectConfig) -> str:
    return json.dumps(to_document(config), indent=2, sort_keys=True) + "\n"


def config_hash(config: ProjectConfig, *extra: bytes) -> str:
    """Hash of everything that affects results (the output directory does not)."""
    doc = to_document(config)
    doc.pop("output")
    h = hashlib.sha256(json.dumps(doc, sort_keys=True).encode())
    for e in extra:
        h.update(e)
    return h.hexdigest()

