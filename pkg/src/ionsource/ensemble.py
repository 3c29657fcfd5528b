"""Thermal shot ensembles and beam observables.

Each shot draws its initial state from a counter-based generator keyed by
``(seed, shot)``, so records do not depend on how shots are scheduled over
worker threads.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, curve_fit, minimize_scalar

from .constants import E_CHARGE, H_PLANCK, K_B
from .dynamics import (EV_PLANE, EVENT_NAMES, Channel, DtPolicy, FieldSource, Terminators,
                       Trajectory, TrajectoryState, WaveformSchedule, _ramp_array, integrate,
                       integrate_core, phase_sync_trigger)
from .geometry import SceneSpec
from .trap import (CA40, DriveConfig, IonSpecies, SecularResult, pseudopotential,
                   secular_frequencies)

STATUS_ARRIVED = -1  # reached the stop plane; other values are dynamics event codes

PLANE_TOF = "tof"
PLANE_MEASUREMENT = "measurement"
PLANE_DETECTOR = "detector"


class EmptyEnsembleError(RuntimeError):
    """No shot reached the stop plane."""

    def __init__(self, message, losses):
        super().__init__(message)
        self.losses = losses


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class ExtractionConfig:
    """Switching of the extraction segments and integration settings.

    A shot starts at the first rising RF zero crossing at or after
    ``request_time``.  ``delay`` is the time from that crossing to the
    switch trigger; it sets the RF phase seen during extraction.
    ``rf_off`` cuts the RF at the trigger.  ``deflection_voltages`` are
    static levels (V) on the deflection electrodes.
    """

    groups: tuple = ("dc4", "dc5")
    voltage: float = 500.0
    ramp_duration: float = 30e-9
    ramp_shape: str = "smoothstep"
    request_time: float = 0.0
    delay: float = 0.0
    rf_off: bool = False
    voltage_jitter: float = 0.0
    steps_per_period: int = 400
    dt_max: float = 2e-9
    t_max: float = 1e-4
    start_offset: tuple = (0.0, 0.0, 0.0)
    deflection_voltages: dict = field(default_factory=dict)

    def __post_init__(self):
        if abs(self.voltage) > 1e3:
            raise ValueError("extraction voltage beyond the 1 kV supply bound")
        if not 0.0 <= self.ramp_duration <= 1e-6:
            raise ValueError("ramp_duration must lie in [0, 1 us]")
        if self.delay < 0:
            raise ValueError("extraction delay must be >= 0")
        if self.voltage_jitter < 0:
            raise ValueError("voltage_jitter must be >= 0")


@dataclass
class RunConfig:
    """One ensemble: who, how hot, how many, and under which fields."""

    species: IonSpecies = CA40
    temperature: float = 2e-3
    shots: int = 500
    seed: int = 0
    drive: DriveConfig = field(default_factory=DriveConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    detection_efficiency: float = 1.0
    lens_voltage: float = 0.0
    threads: int = 1
    # "harmonic": Gaussian in the local harmonic well; "boltzmann": rejection
    # sampling of the full pseudopotential (validation)
    sampling: str = "harmonic"

    def __post_init__(self):
        if self.sampling not in ("harmonic", "boltzmann"):
            raise ValueError("sampling must be 'harmonic' or 'boltzmann'")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if not 0.0 <= self.detection_efficiency <= 1.0:
            raise ValueError("detection_efficiency must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


# --------------------------------------------------------------------------
# thermal sampling
# --------------------------------------------------------------------------

def shot_rng(seed: int, shot: int) -> np.random.Generator:
    """Generator for one shot: Philox keyed by ``seed`` at counter block ``shot``."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(shot), 0]))


# draws per shot: 3 position, 3 velocity, 1 voltage jitter, 1 detection
_DRAWS = 8


def _shot_draws(seed, shots):
    out = np.empty((len(shots), _DRAWS))
    for k, s in enumerate(shots):
        g = shot_rng(seed, s)
        out[k, :7] = g.standard_normal(7)
        out[k, 7] = g.random()
    return out


@dataclass
class ThermalSamples:
    positions: np.ndarray
    velocities: np.ndarray
    shots: np.ndarray


def sample_thermal(temperature: float, secular: SecularResult, species: IonSpecies,
                   count: int, seed: int, first_shot: int = 0) -> ThermalSamples:
    """Gaussian phase-space samples in the harmonic approximation of the well.

    Along principal axis ``i``: ``sigma_x = sqrt(kT/m) / omega_i``,
    ``sigma_v = sqrt(kT/m)``.  Shot ``k`` uses ``shot_rng(seed, first_shot + k)``.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    shots = np.arange(first_shot, first_shot + count)
    d = _shot_draws(seed, shots)
    return _thermal_from_draws(temperature, secular, species, d, shots)


def _thermal_from_draws(temperature, secular, species, d, shots):
    sv = math.sqrt(K_B * temperature / species.mass)
    sx = sv / secular.omegas
    axes = secular.axes  # columns are principal axes
    pos = secular.position + (d[:, 0:3] * sx) @ axes.T
    vel = (d[:, 3:6] * sv) @ axes.T
    return ThermalSamples(pos, vel, shots)


_WIDEN = 1.25  # proposal width over the harmonic width
_BATCH = 16


def _boltzmann_positions(config: RunConfig, secular: SecularResult, basis, shots):
    """Rejection samples of ``exp(-U_ps / kT)`` with a widened Gaussian proposal.

    Each shot owns a second Philox stream (last counter word 1), so the
    result does not depend on the other shots.
    """
    sp, T = config.species, config.temperature
    sx = math.sqrt(K_B * T / sp.mass) / secular.omegas
    axes, x_min = secular.axes, secular.position
    u0 = pseudopotential(x_min, sp, config.drive, basis, use_grids=True)
    rngs = [np.random.Generator(np.random.Philox(key=int(config.seed),
                                                 counter=[0, 0, int(s), 1])) for s in shots]
    out = np.full((len(shots), 3), np.nan)
    todo = np.arange(len(shots))
    for _ in range(64):
        if len(todo) == 0:
            return out
        d = np.stack([rngs[i].standard_normal((_BATCH, 3)) for i in todo])
        u = np.stack([rngs[i].random(_BATCH) for i in todo])
        pts = x_min + (d * (_WIDEN * sx)) @ axes.T
        U = pseudopotential(pts.reshape(-1, 3), sp, config.drive, basis, use_grids=True,
                            strict=False).reshape(len(todo), _BATCH)
        # log p/q up to a constant; <= 0 when the well is harmonic
        logr = -(U - u0) / (K_B * T) + 0.5 * np.sum(d * d, axis=2)
        ok = np.log(u) < logr
        left = []
        for row, i in enumerate(todo):
            hit = np.flatnonzero(ok[row])
            if len(hit):
                out[i] = pts[row, hit[0]]
            else:
                left.append(i)
        todo = np.array(left, int)
    raise RuntimeError("rejection sampling did not converge")


# --------------------------------------------------------------------------
# shots
# --------------------------------------------------------------------------

def build_schedule(groups, drive: DriveConfig, extraction: ExtractionConfig, trigger: float,
                   lens_voltage: float = 0.0, voltage_scale: float = 1.0) -> WaveformSchedule:
    """Electrode waveforms for one shot with the switch at ``trigger``."""
    ch = {}
    for g, v in drive.dc_voltages.items():
        if g not in groups:
            raise KeyError(f"DC voltage for unknown group {g!r}")
        ch[g] = Channel(static=v)
    for g, v in extraction.deflection_voltages.items():
        if g not in groups:
            raise KeyError(f"deflection voltage for unknown group {g!r}")
        ch[g] = Channel(static=v)
    for g in extraction.groups:
        if g not in groups:
            raise KeyError(f"extraction group {g!r} not in basis")
        base = ch.get(g, Channel())
        ch[g] = replace(base, switch_target=extraction.voltage * voltage_scale,
                        switch_time=trigger, ramp_duration=extraction.ramp_duration,
                        ramp_shape=extraction.ramp_shape)
    if drive.rf_group not in groups:
        raise KeyError(f"RF group {drive.rf_group!r} not in basis")
    rf = ch.get(drive.rf_group, Channel())
    ch[drive.rf_group] = replace(rf, rf_amplitude=drive.rf_amplitude, rf_omega=drive.omega,
                                 rf_phase=drive.rf_phase,
                                 rf_stop_time=trigger if extraction.rf_off else math.inf)
    if lens_voltage:
        if "lens_center" not in groups:
            raise KeyError("lens voltage set but the basis has no lens")
        ch["lens_center"] = Channel(static=lens_voltage)
    return WaveformSchedule(list(groups), ch)


@dataclass
class ShotRecords:
    """Per-shot arrays; plane quantities are NaN where a plane was not reached."""

    shots: np.ndarray
    status: np.ndarray
    t_start: float
    trigger: float
    x0: np.ndarray
    v0: np.ndarray
    plane_names: list
    plane_z: np.ndarray
    t: np.ndarray          # (n, P)
    x: np.ndarray          # (n, P, 3)
    v: np.ndarray          # (n, P, 3)
    end: np.ndarray        # (n, 7) final t, x, v
    steps: np.ndarray
    detected: np.ndarray

    def plane(self, name: str) -> int:
        return self.plane_names.index(name)

    @property
    def arrived(self) -> np.ndarray:
        return self.status == STATUS_ARRIVED

    def losses(self) -> dict:
        out = {}
        for s in self.status[~self.arrived]:
            k = EVENT_NAMES.get(int(s), str(int(s)))
            out[k] = out.get(k, 0) + 1
        return out


def _run_range(idx, x0, v0, scheds, t0, qm, src, pol, ramps, planes, stop, t_max, max_steps,
               res_ev, res_ne, res_final):
    for i in idx:
        _, _, ev, ne, final = integrate_core(
            t0, x0[i], v0[i], qm, scheds[i], src.kind, src.packed, src.A, src.b,
            pol.dt, pol.dt_max, pol.growth, pol.free_field, pol.ramp_steps, ramps,
            planes, stop, t_max, max_steps, 1, 0)
        res_ev[i, :ne] = ev[:ne]
        res_ne[i] = ne
        res_final[i] = final


def run_shots(x0, v0, scheds, t0, qm, source: FieldSource, policy: DtPolicy, ramps, planes,
              stop_plane: int, t_max: float, threads: int = 1, max_steps: int = 50_000_000):
    """Integrate independent shots on ``threads`` workers.

    Returns ``(events, n_events, final)``; row ``i`` belongs to shot ``i``
    whatever the worker count.
    """
    n = len(x0)
    planes = np.asarray(planes, float)
    res_ev = np.zeros((n, len(planes) + 2, 9))
    res_ne = np.zeros(n, np.int64)
    res_final = np.zeros((n, 8))
    ramps = _ramp_array(ramps)
    args = (x0, v0, scheds, float(t0), float(qm), source, policy, ramps, planes,
            int(stop_plane), float(t_max), int(max_steps), res_ev, res_ne, res_final)
    if threads <= 1 or n == 1:
        _run_range(range(n), *args)
    else:
        chunks = [range(k, n, threads) for k in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for f in [pool.submit(_run_range, c, *args) for c in chunks]:
                f.result()
    return res_ev, res_ne, res_final


def scene_planes(scene: SceneSpec) -> dict:
    planes = {PLANE_TOF: scene.tof_plane_distance,
              PLANE_MEASUREMENT: scene.measurement_plane_distance,
              PLANE_DETECTOR: scene.detector_distance}
    if scene.aperture_distance is not None:
        planes["aperture"] = scene.aperture_distance
    return dict(sorted(planes.items(), key=lambda kv: kv[1]))


@dataclass
class PreparedShots:
    """Initial conditions and waveforms of a block of shots."""

    shots: np.ndarray
    draws: np.ndarray
    x0: np.ndarray
    v0: np.ndarray
    t0: float
    trigger: float
    schedules: list
    ramps: list
    policy: DtPolicy


def prepare_shots(config: RunConfig, basis, secular: SecularResult,
                  first_shot: int = 0) -> PreparedShots:
    """Thermal draws, micromotion kick and per-shot schedules."""
    sp, drive, ex = config.species, config.drive, config.extraction
    shots = np.arange(first_shot, first_shot + config.shots)
    d = _shot_draws(config.seed, shots)
    th = _thermal_from_draws(config.temperature, secular, sp, d, shots)
    pos = th.positions
    if config.sampling == "boltzmann" and config.temperature > 0:
        pos = _boltzmann_positions(config, secular, basis, shots)
    x0 = np.ascontiguousarray(pos + np.asarray(ex.start_offset, float))
    t0 = phase_sync_trigger(ex.request_time, drive.omega, drive.rf_phase)
    trigger = t0 + ex.delay
    # micromotion velocity at a rising zero crossing, cos(Omega t + phi) = 1
    E1, guard = basis.field_at(x0, {drive.rf_group: drive.rf_amplitude})
    if np.any(guard):
        raise ValueError("initial positions inside an electrode guard zone")
    v0 = np.ascontiguousarray(th.velocities - (sp.q / (sp.mass * drive.omega)) * E1)
    groups = basis.groups
    if ex.voltage_jitter > 0:
        scale = 1.0 + ex.voltage_jitter * d[:, 6]
        scheds = [build_schedule(groups, drive, ex, trigger, config.lens_voltage, s)
                  for s in scale]
    else:
        scheds = [build_schedule(groups, drive, ex, trigger, config.lens_voltage)] * len(shots)
    ramps = [(trigger, trigger + ex.ramp_duration)] if ex.ramp_duration > 0 else []
    policy = DtPolicy.for_drive(drive.rf_frequency, ex.steps_per_period, dt_max=ex.dt_max)
    return PreparedShots(shots, d, x0, v0, t0, trigger, scheds, ramps, policy)


def _sorted_planes(planes: dict):
    names = list(planes)
    zs = np.array([planes[k] for k in names], float)
    order = np.argsort(zs, kind="stable")
    return [names[i] for i in order], zs[order]


def simulate_shots(config: RunConfig, basis, secular: SecularResult | None = None,
                   planes: dict | None = None, first_shot: int = 0) -> ShotRecords:
    """Sample, phase-sync and integrate ``config.shots`` shots.

    Integration stops at the farthest plane.  Shots start at the first rising
    RF zero crossing at ``t >= 0``; the switch fires ``extraction.delay``
    later.
    """
    sp = config.species
    if secular is None:
        secular = secular_frequencies(sp, config.drive, basis)
    names, zs = _sorted_planes(planes or scene_planes(config.scene))
    ps = prepare_shots(config, basis, secular, first_shot)
    shots, d, t0, trigger = ps.shots, ps.draws, ps.t0, ps.trigger
    scheds = np.stack([s.packed() for s in ps.schedules])
    ev, ne, final = run_shots(ps.x0, ps.v0, scheds, t0, sp.q / sp.mass,
                              FieldSource.from_basis(basis), ps.policy, ps.ramps, zs,
                              len(zs) - 1, trigger + config.extraction.t_max, config.threads)

    n, P = len(shots), len(zs)
    t = np.full((n, P), np.nan)
    xs = np.full((n, P, 3), np.nan)
    vs = np.full((n, P, 3), np.nan)
    status = np.full(n, STATUS_ARRIVED, np.int64)
    for i in range(n):
        reached_stop = False
        for r in ev[i, :ne[i]]:
            if int(r[0]) == EV_PLANE:
                k = int(r[1])
                t[i, k] = r[2]
                xs[i, k] = r[3:6]
                vs[i, k] = r[6:9]
                reached_stop |= k == P - 1
            else:
                status[i] = int(r[0])
        if not reached_stop and status[i] == STATUS_ARRIVED:
            status[i] = int(ev[i, ne[i] - 1, 0]) if ne[i] else -2
    detected = d[:, 7] < config.detection_efficiency
    return ShotRecords(shots, status, t0, trigger, ps.x0, ps.v0, names, zs, t, xs, vs,
                       final[:, :7].copy(), final[:, 7].astype(np.int64), detected)


def shot_trajectory(config: RunConfig, basis, shot: int, secular: SecularResult | None = None,
                    store_stride: int = 10, max_samples: int = 2_000_000) -> Trajectory:
    """Full path of one shot, identical in initial state to its ensemble record."""
    sp = config.species
    if secular is None:
        secular = secular_frequencies(sp, config.drive, basis)
    names, zs = _sorted_planes(scene_planes(config.scene))
    ps = prepare_shots(replace(config, shots=1), basis, secular, first_shot=shot)
    term = Terminators(tuple(zs), len(zs) - 1, ps.trigger + config.extraction.t_max)
    return integrate(TrajectoryState(ps.t0, ps.x0[0], ps.v0[0]), sp.q / sp.mass,
                     ps.schedules[0], FieldSource.from_basis(basis), ps.policy, term,
                     store_stride, max_samples)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

def spot_radius(x, y) -> float:
    """1-sigma radius of a round Gaussian fitted to transverse positions."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return float(math.sqrt(0.5 * (np.var(x) + np.var(y))))


@dataclass
class EnsembleStats:
    """Beam observables recomputed from ``records``.

    ``divergence`` is the full angle ``2 sigma_r / L`` at the measurement
    plane; spreads are maximum-likelihood Gaussian widths (``ddof = 0``).
    """

    records: ShotRecords
    aperture_radius: float | None = None
    velocity_plane: str = PLANE_TOF
    spot_plane: str = PLANE_MEASUREMENT

    def __post_init__(self):
        r = self.records
        ok = r.arrived & r.detected
        self.accepted = ok
        self.n_shots = len(r.shots)
        self.n_accepted = int(ok.sum())
        if self.n_accepted == 0:
            raise EmptyEnsembleError(f"no shot reached the last plane: {r.losses()}", r.losses())
        kv = r.plane(self.velocity_plane)
        vz = r.v[ok, kv, 2]
        self.mean_velocity = float(vz.mean())
        self.velocity_spread = float(vz.std())
        ks = r.plane(self.spot_plane)
        xy = r.x[ok, ks, :2]
        self.beam_center = xy.mean(axis=0)
        self.spot_radius = spot_radius(xy[:, 0], xy[:, 1])
        self.divergence = 2.0 * self.spot_radius / float(r.plane_z[ks])
        self.tof = r.t[ok, kv] - r.trigger
        if self.aperture_radius is not None and "aperture" in r.plane_names:
            ka = r.plane("aperture")
            rad = np.hypot(r.x[:, ka, 0], r.x[:, ka, 1])
            passed = ok & (rad < self.aperture_radius)
            self.transmission = float(passed.sum() / self.n_shots)
        else:
            self.transmission = float(self.n_accepted / self.n_shots)

    def report(self) -> dict:
        r = self.records
        return {
            "shots": self.n_shots,
            "accepted": self.n_accepted,
            "losses": r.losses(),
            "mean_velocity_m_s": self.mean_velocity,
            "velocity_spread_m_s": self.velocity_spread,
            "divergence_full_angle_rad": self.divergence,
            "divergence_half_angle_rad": 0.5 * self.divergence,
            "divergence_convention": "full angle 2*sigma_r/L",
            "spot_radius_m": self.spot_radius,
            "spot_plane": self.spot_plane,
            "spot_plane_z_m": float(r.plane_z[r.plane(self.spot_plane)]),
            "beam_center_m": self.beam_center.tolist(),
            "velocity_plane": self.velocity_plane,
            "transmission": self.transmission,
            "tof_mean_s": float(self.tof.mean()),
            "tof_std_s": float(self.tof.std()),
            "trigger_s": r.trigger,
            "planes_m": dict(zip(r.plane_names, r.plane_z.tolist())),
        }

    def write_spot_csv(self, path, plane: str | None = None) -> None:
        r = self.records
        k = r.plane(plane or self.spot_plane)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shot", "x_m", "y_m", "vz_m_s", "status"])
            for i in range(self.n_shots):
                w.writerow([int(r.shots[i]), repr(float(r.x[i, k, 0])), repr(float(r.x[i, k, 1])),
                            repr(float(r.v[i, k, 2])), _status_name(r, i)])

    def write_tof_csv(self, path) -> None:
        r = self.records
        k = r.plane(self.velocity_plane)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shot", "arrival_time_s", "status"])
            for i in range(self.n_shots):
                w.writerow([int(r.shots[i]), repr(float(r.t[i, k] - r.trigger)),
                            _status_name(r, i)])


def _status_name(r: ShotRecords, i: int) -> str:
    if r.status[i] == STATUS_ARRIVED:
        return "arrived" if r.detected[i] else "undetected"
    return EVENT_NAMES.get(int(r.status[i]), "lost")


def run_extraction_ensemble(config: RunConfig, basis, secular: SecularResult | None = None
                            ) -> EnsembleStats:
    """Simulate the ensemble and reduce it to beam statistics."""
    rec = simulate_shots(config, basis, secular)
    return EnsembleStats(rec, config.scene.aperture_radius)


# --------------------------------------------------------------------------
# time of flight
# --------------------------------------------------------------------------

@dataclass
class TofHistogram:
    edges: np.ndarray
    counts: np.ndarray


@dataclass
class GaussianFit:
    mu: float
    sigma: float
    mu_err: float
    sigma_err: float
    method: str


@dataclass
class TofFit:
    histogram: TofHistogram
    mle: GaussianFit
    binned: GaussianFit


def _gauss_counts(t, amp, mu, sigma):
    return amp * np.exp(-0.5 * ((t - mu) / sigma) ** 2)


def fit_gaussian_tof(times, bin_width: float = 2e-9) -> TofFit:
    """Gaussian fits of arrival times: MLE on samples and least squares on bins."""
    t = np.asarray(times, float)
    if t.size < 10:
        raise ValueError("need at least 10 arrival times")
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    mu = float(t.mean())
    sig = float(t.std())
    if not sig > 0 or t.min() == t.max():
        raise ValueError("degenerate arrival times (zero spread)")
    n = t.size
    mle = GaussianFit(mu, sig, sig / math.sqrt(n), sig / math.sqrt(2 * n), "mle")
    lo = math.floor(t.min() / bin_width) - 1
    hi = math.ceil(t.max() / bin_width) + 1
    edges = np.arange(lo, hi + 1) * bin_width
    counts, _ = np.histogram(t, edges)
    centers = 0.5 * (edges[1:] + edges[:-1])
    amp0 = n * bin_width / (sig * math.sqrt(2 * math.pi))
    # relative parameterisation keeps the problem well scaled
    f = lambda c, a, m, s: _gauss_counts(c, a * amp0, mu + m * sig, s * sig)
    p, cov = curve_fit(f, centers, counts, p0=(1.0, 0.0, 1.0),
                       sigma=np.sqrt(np.maximum(counts, 1.0)), absolute_sigma=True)
    err = np.sqrt(np.diag(cov)) if np.all(np.isfinite(cov)) else np.full(3, np.nan)
    binned = GaussianFit(mu + p[1] * sig, abs(p[2]) * sig, err[1] * sig, err[2] * sig,
                         "least_squares")
    return TofFit(TofHistogram(edges, counts), mle, binned)


def velocity_from_tof(mean_time: float, distance: float, ref_time: float = 0.0,
                      ref_distance: float = 0.0) -> float:
    """Drift velocity from a mean arrival time.

    ``(ref_distance, ref_time)`` is a point past the acceleration region on
    the mean trajectory; the ion drifts uniformly from there to ``distance``.
    """
    if not mean_time > ref_time:
        raise ValueError("mean_time must exceed ref_time")
    return (distance - ref_distance) / (mean_time - ref_time)


@dataclass
class TofRatio:
    time_a: float
    time_b: float
    ratio: float


def tof_species_ratio(config: RunConfig, basis, species_a: IonSpecies, species_b: IonSpecies,
                      plane: str = PLANE_TOF) -> TofRatio:
    """Mean arrival times (from the trigger) of two species under one config."""
    times = []
    for sp in (species_a, species_b):
        st = run_extraction_ensemble(replace(config, species=sp), basis)
        k = st.records.plane(plane)
        times.append(float(np.mean(st.records.t[st.accepted, k] - st.records.trigger)))
    return TofRatio(times[0], times[1], times[1] / times[0])


# --------------------------------------------------------------------------
# apertures
# --------------------------------------------------------------------------

def gaussian_transmission(radius, s):
    """Fraction of a round Gaussian beam (1-sigma radius ``s``) inside ``radius``."""
    r = np.asarray(radius, float)
    return -np.expm1(-0.5 * (r / s) ** 2)


@dataclass
class ApertureFit:
    radii: np.ndarray
    transmission: np.ndarray
    spot_radius: float
    spot_radius_err: float


def fit_aperture_transmission(radii, passed, total) -> ApertureFit:
    """Binomial maximum-likelihood fit of ``1 - exp(-r^2 / 2 s^2)``.

    The error on ``s`` is the inverse square root of the observed Fisher
    information.
    """
    r = np.atleast_1d(np.asarray(radii, float))
    k = np.atleast_1d(np.asarray(passed, float))
    n = np.broadcast_to(np.asarray(total, float), r.shape)
    if np.all(k == 0):
        raise ValueError("zero transmission at all radii")

    def nll(logs):
        p = np.clip(gaussian_transmission(r, math.exp(logs)), 1e-300, 1 - 1e-16)
        return -float(np.sum(k * np.log(p) + (n - k) * np.log1p(-p)))

    rs = float(np.median(r))
    res = minimize_scalar(nll, bounds=(math.log(rs) - 12, math.log(rs) + 12), method="bounded",
                          options={"xatol": 1e-10})
    ls = res.x
    h = 1e-4
    curv = (nll(ls + h) - 2 * nll(ls) + nll(ls - h)) / h ** 2
    s = math.exp(ls)
    err = s / math.sqrt(curv) if curv > 0 else math.inf
    return ApertureFit(r, k / n, s, err)


def aperture_scan(stats: EnsembleStats, radii, plane: str = PLANE_MEASUREMENT) -> ApertureFit:
    """Transmission through centred apertures at ``plane`` and the implied spot radius."""
    r = stats.records
    kp = r.plane(plane)
    ok = stats.accepted
    rad = np.hypot(r.x[ok, kp, 0], r.x[ok, kp, 1])
    radii = np.asarray(radii, float)
    passed = np.array([(rad < a).sum() for a in radii])
    return fit_aperture_transmission(radii, passed, stats.n_shots)


# --------------------------------------------------------------------------
# focusing
# --------------------------------------------------------------------------

class FocusError(RuntimeError):
    pass


@dataclass
class FocusResult:
    lens_voltage: float
    focus_z: float
    focal_length: float
    spot_radius: float
    scan_z: np.ndarray
    scan_radius: np.ndarray
    spot_xy: np.ndarray
    n_accepted: int


def _ballistic_focus(x, v, z_ref, z_lo, z_hi):
    """Minimum of the round-beam radius along straight lines past ``z_ref``."""
    sx = v[:, 0] / v[:, 2]
    sy = v[:, 1] / v[:, 2]
    # var(x + s (z - z_ref)) is quadratic in z
    a = np.var(sx) + np.var(sy)
    b = 2 * (np.cov(x[:, 0], sx, bias=True)[0, 1] + np.cov(x[:, 1], sy, bias=True)[0, 1])
    if not a > 0:
        raise FocusError("beam has no angular spread")
    zs = z_ref - 0.5 * b / a
    return zs, sx, sy


def _spot_at(x, sx, sy, z_ref, z):
    px = x[:, 0] + sx * (z - z_ref)
    py = x[:, 1] + sy * (z - z_ref)
    return spot_radius(px, py), np.c_[px, py]


def focus_ensemble(config: RunConfig, basis, lens_voltage: float | None = None,
                   scan_length: float = 0.05, scan_points: int = 201,
                   tune_shots: int = 64, secular: SecularResult | None = None,
                   mode: str = "accelerating") -> FocusResult:
    """Focal spot behind the lens.

    Shots are integrated to a plane 3 mm past the lens, where the lens
    field has decayed, then continued along straight lines.  With
    ``lens_voltage=None`` the voltage is tuned so the focus lies
    ``focal_length_target`` past the lens centre.
    """
    lens = config.scene.lens
    if lens is None:
        raise ValueError("focus_ensemble needs a scene with a lens")
    spans = lens.electrode_spans()
    z_ref = spans[-1][2] + 3e-3
    secular = secular or secular_frequencies(config.species, config.drive, basis)
    planes = {PLANE_TOF: config.scene.tof_plane_distance, "post_lens": z_ref}

    def trace(cfg, V):
        rec = simulate_shots(replace(cfg, lens_voltage=V), basis, secular, planes)
        ok = rec.arrived & rec.detected
        k = rec.plane("post_lens")
        return rec.x[ok, k], rec.v[ok, k], ok

    if lens_voltage is None:
        lens_voltage = tune_lens_voltage(config, trace, z_ref, tune_shots, mode)
    x, v, ok = trace(config, lens_voltage)
    if len(x) == 0:
        raise EmptyEnsembleError("no shot passed the lens", {})
    z_hi = z_ref + scan_length
    zs, sx, sy = _ballistic_focus(x, v, z_ref, z_ref, z_hi)
    if not z_ref < zs < z_hi:
        raise FocusError(f"no focus within {scan_length * 1e3:.0f} mm past the lens "
                         f"(waist extrapolates to z = {zs:.4g} m)")
    scan_z = np.linspace(z_ref, z_hi, scan_points)
    scan_r = np.array([_spot_at(x, sx, sy, z_ref, z)[0] for z in scan_z])
    r, xy = _spot_at(x, sx, sy, z_ref, zs)
    return FocusResult(float(lens_voltage), float(zs), float(zs - lens.position), r,
                       scan_z, scan_r, xy, int(ok.sum()))


def tune_lens_voltage(config: RunConfig, trace, z_ref: float, shots: int,
                      mode: str = "accelerating") -> float:
    """Centre-electrode voltage placing the waist ``focal_length_target`` past the lens.

    ``mode="accelerating"`` searches voltages of opposite sign to the ion
    charge (lower spherical aberration at a given focal length);
    ``"decelerating"`` searches below the beam energy.
    """
    lens = config.scene.lens
    target = lens.position + lens.focal_length_target
    cfg = replace(config, shots=min(shots, config.shots))

    def waist(V):
        x, v, _ = trace(cfg, V)
        if len(x) < 2:
            raise EmptyEnsembleError("too few shots passed the lens while tuning", {})
        return _ballistic_focus(x, v, z_ref, z_ref, math.inf)[0]

    x, v, _ = trace(cfg, 0.0)
    vz = float(np.mean(v[:, 2]))
    energy = 0.5 * config.species.mass * vz ** 2 / config.species.q  # volts
    if mode == "accelerating":
        ratios = -np.array([0.1, 0.2, 0.4, 0.6, 0.8, 1.0, 1.25, 1.5, 2.0, 3.0])
    elif mode == "decelerating":
        ratios = np.array([0.1, 0.2, 0.4, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95])
    else:
        raise ValueError("mode must be 'accelerating' or 'decelerating'")
    # As the lens strengthens the real waist comes in from infinity.  Before
    # one exists, an upstream (virtual) waist means "not yet focusing"; after,
    # it means the crossover has moved inside the lens.
    seen_real = False

    def focus_z(V):
        nonlocal seen_real
        z = waist(V)
        if z > z_ref:
            seen_real = True
            return z
        return -math.inf if seen_real else math.inf

    prev_v, prev_z = 0.0, math.inf
    for V in ratios * energy * np.sign(config.species.charge):
        z = focus_z(V)
        if z < target <= prev_z:
            def g(u):
                zu = waist(u)
                if zu <= z_ref:
                    zu = -math.inf if abs(u) > abs(prev_v) else math.inf
                return float(np.clip(zu - target, -1.0, 1.0))
            return float(brentq(g, prev_v, V, xtol=1e-6 * energy))
        prev_v, prev_z = V, z
    raise FocusError("could not bracket the lens voltage for the requested focal length")


# --------------------------------------------------------------------------
# deflection and diffraction
# --------------------------------------------------------------------------

@dataclass
class DeflectionResult:
    voltages: tuple
    objective: float
    grid: list


def optimize_deflection(config: RunConfig, basis, grid1, grid2,
                        groups=("defl1", "defl2"), secular: SecularResult | None = None
                        ) -> DeflectionResult:
    """Grid scan of the deflection voltages.

    The objective is the mean transverse offset at the measurement plane;
    ties go to the lexicographically smallest voltage pair.
    """
    secular = secular or secular_frequencies(config.species, config.drive, basis)
    rows = []
    best = None
    for v1 in sorted(float(a) for a in grid1):
        for v2 in sorted(float(a) for a in grid2):
            dv = dict(config.extraction.deflection_voltages)
            dv[groups[0]] = v1
            dv[groups[1]] = v2
            cfg = replace(config, extraction=replace(config.extraction, deflection_voltages=dv))
            try:
                st = run_extraction_ensemble(cfg, basis, secular)
                obj = float(np.hypot(*st.beam_center))
            except EmptyEnsembleError:
                obj = math.inf
            rows.append((v1, v2, obj))
            if best is None or obj < best[2]:
                best = (v1, v2, obj)
    return DeflectionResult((best[0], best[1]), best[2], rows)


@dataclass
class DiffractionLimit:
    wavelength: float
    spot: float


def diffraction_limit(species: IonSpecies, energy_ev: float, numerical_aperture: float
                      ) -> DiffractionLimit:
    """Matter-wave spot scale ``lambda / (2 NA)`` with ``lambda = h / sqrt(2 m E)``."""
    if not energy_ev > 0:
        raise ValueError("energy must be > 0")
    if not 0 < numerical_aperture < 1:
        raise ValueError("numerical aperture must lie in (0, 1)")
    lam = H_PLANCK / math.sqrt(2 * species.mass * energy_ev * E_CHARGE)
    return DiffractionLimit(lam, lam / (2 * numerical_aperture))
