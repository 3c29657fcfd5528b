"""Electrode waveforms and velocity-Verlet trajectories with plane events.

The force is ``q E(x, t)`` with ``E = sum_g V_g(t) E_g(x)``; the time
dependence enters only through the electrode voltages.  Fields come either
from packed tricubic grids or from an analytic linear model
``E_g(x) = A_g x + b_g`` used for verification.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .electrostatics.basis import FIELD_GUARD, FIELD_OK, packed_field

SHAPE_SMOOTHSTEP = 0
SHAPE_LINEAR = 1
RAMP_SHAPES = {"smoothstep": SHAPE_SMOOTHSTEP, "linear": SHAPE_LINEAR}

# event codes
EV_PLANE = 0
EV_SURFACE = 1
EV_ESCAPED = 2
EV_NAN = 3
EV_MAX_TIME = 4
EV_MAX_STEPS = 5
EVENT_NAMES = {EV_PLANE: "plane", EV_SURFACE: "surface", EV_ESCAPED: "escaped",
               EV_NAN: "nan_force", EV_MAX_TIME: "max_time", EV_MAX_STEPS: "max_steps"}


# --------------------------------------------------------------------------
# waveforms
# --------------------------------------------------------------------------

@dataclass
class Channel:
    """Voltage of one electrode group.

    ``V(t) = level(t) + rf_amplitude * sin(rf_omega * t + rf_phase)`` where
    ``level`` moves from ``static`` to ``switch_target`` over
    ``[switch_time, switch_time + ramp_duration]``.  The RF term is cut at
    ``rf_stop_time``.
    """

    static: float = 0.0
    rf_amplitude: float = 0.0
    rf_omega: float = 0.0
    rf_phase: float = 0.0
    switch_target: float | None = None
    switch_time: float = 0.0
    ramp_duration: float = 0.0
    ramp_shape: str = "smoothstep"
    rf_stop_time: float = math.inf

    def __post_init__(self):
        if self.ramp_duration < 0:
            raise ValueError("ramp_duration must be >= 0")
        if self.ramp_shape not in RAMP_SHAPES:
            raise ValueError(f"ramp_shape must be one of {sorted(RAMP_SHAPES)}")


@dataclass
class WaveformSchedule:
    """Per-group channels; groups absent from ``channels`` stay at 0 V."""

    groups: list
    channels: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.channels) - set(self.groups)
        if unknown:
            raise KeyError(f"channels for unknown groups {sorted(unknown)}")

    def packed(self) -> np.ndarray:
        """``(n_groups, 10)`` array consumed by the integrator."""
        P = np.zeros((len(self.groups), 10))
        P[:, 9] = math.inf
        for i, g in enumerate(self.groups):
            c = self.channels.get(g)
            if c is None:
                continue
            has_sw = c.switch_target is not None
            P[i] = [c.static, c.rf_amplitude, c.rf_omega, c.rf_phase,
                    1.0 if has_sw else 0.0, c.switch_target if has_sw else 0.0,
                    c.switch_time, c.ramp_duration, RAMP_SHAPES[c.ramp_shape],
                    c.rf_stop_time]
        return P

    def shifted(self, dt: float) -> "WaveformSchedule":
        """Same waveforms delayed by ``dt``."""
        out = {}
        for g, c in self.channels.items():
            out[g] = Channel(c.static, c.rf_amplitude, c.rf_omega,
                             c.rf_phase - c.rf_omega * dt, c.switch_target,
                             c.switch_time + dt, c.ramp_duration, c.ramp_shape,
                             c.rf_stop_time + dt)
        return WaveformSchedule(list(self.groups), out)

    def ramp_intervals(self):
        return [(c.switch_time, c.switch_time + c.ramp_duration)
                for c in self.channels.values() if c.switch_target is not None]


@nb.njit(cache=True, inline="always")
def _ramp(tau, shape):
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    if shape == SHAPE_LINEAR:
        return tau
    return tau * tau * (3.0 - 2.0 * tau)


@nb.njit(cache=True)
def _voltages(P, t, out):
    for i in range(P.shape[0]):
        v = P[i, 0]
        if P[i, 4] != 0.0 and t >= P[i, 6]:
            if P[i, 7] > 0.0:
                s = _ramp((t - P[i, 6]) / P[i, 7], int(P[i, 8]))
            else:
                s = 1.0
            v = P[i, 0] * (1.0 - s) + P[i, 5] * s
        if P[i, 1] != 0.0 and t < P[i, 9]:
            v += P[i, 1] * math.sin(P[i, 2] * t + P[i, 3])
        out[i] = v


def voltages_at(schedule: WaveformSchedule, t: float) -> dict:
    """Group voltages (V) at time ``t``."""
    out = np.zeros(len(schedule.groups))
    _voltages(schedule.packed(), float(t), out)
    return dict(zip(schedule.groups, out.tolist()))


def phase_sync_trigger(request_time: float, omega: float, phase: float,
                       delay: float = 0.0) -> float:
    """First rising zero crossing of ``sin(omega t + phase)`` at or after
    ``request_time``, plus ``delay``."""
    if not omega > 0:
        raise ValueError("omega must be > 0")
    n = math.ceil((omega * request_time + phase) / (2 * math.pi))
    t = (2 * math.pi * n - phase) / omega
    if t < request_time:  # rounding
        t += 2 * math.pi / omega
    return t + delay


# --------------------------------------------------------------------------
# field models
# --------------------------------------------------------------------------

@dataclass
class LinearFieldModel:
    """``E_g(x) = A[g] @ x + b[g]`` (V/m per volt), one entry per schedule group."""

    A: np.ndarray
    b: np.ndarray

    @classmethod
    def zero(cls, n_groups: int = 1):
        return cls(np.zeros((n_groups, 3, 3)), np.zeros((n_groups, 3)))

    def field(self, x, volts):
        return np.einsum("g,gij,j->i", volts, self.A, x) + volts @ self.b


MODEL_GRID = 0
MODEL_LINEAR = 1


@dataclass
class FieldSource:
    """What the integrator samples: packed grids or a linear model."""

    kind: int
    packed: tuple
    A: np.ndarray
    b: np.ndarray

    @classmethod
    def from_basis(cls, basis):
        """Grids of a ``BasisFieldSet``, or whatever ``basis.field_source()`` offers."""
        if hasattr(basis, "field_source"):
            return basis.field_source()
        n = len(basis.groups)
        return cls(MODEL_GRID, basis.packed(), np.zeros((n, 3, 3)), np.zeros((n, 3)))

    @classmethod
    def from_linear(cls, model: LinearFieldModel):
        from .electrostatics.basis import pack_grids
        return cls(MODEL_LINEAR, pack_grids([], []), np.ascontiguousarray(model.A, float),
                   np.ascontiguousarray(model.b, float))


@nb.njit(cache=True)
def _field(kind, packed, A, b, volts, x, y, z):
    if kind == MODEL_GRID:
        _, ex, ey, ez, st = packed_field(x, y, z, volts, packed)
        return ex, ey, ez, st
    ex = ey = ez = 0.0
    for g in range(volts.shape[0]):
        v = volts[g]
        if v == 0.0:
            continue
        ex += v * (A[g, 0, 0] * x + A[g, 0, 1] * y + A[g, 0, 2] * z + b[g, 0])
        ey += v * (A[g, 1, 0] * x + A[g, 1, 1] * y + A[g, 1, 2] * z + b[g, 1])
        ez += v * (A[g, 2, 0] * x + A[g, 2, 1] * y + A[g, 2, 2] * z + b[g, 2])
    return ex, ey, ez, FIELD_OK


# --------------------------------------------------------------------------
# step-size policy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DtPolicy:
    """Fixed ``dt`` where the field is strong, bounded growth in free flight.

    ``dt`` applies while ``|E| >= free_field``; below it the step grows by
    ``growth`` per step up to ``dt_max``.  Steps inside a voltage ramp are
    capped at ``ramp_duration / ramp_steps``.
    """

    dt: float
    dt_max: float = 2e-9
    growth: float = 1.2
    free_field: float = 200.0
    ramp_steps: int = 20

    def __post_init__(self):
        if not self.dt > 0 or self.dt_max < self.dt:
            raise ValueError("need 0 < dt <= dt_max")
        if not 1.0 <= self.growth <= 1.2:
            raise ValueError("growth must lie in [1, 1.2]")

    @classmethod
    def for_drive(cls, rf_frequency: float, steps_per_period: int = 400, **kw):
        return cls(dt=1.0 / (rf_frequency * steps_per_period), **kw)


def dt_policy(policy: DtPolicy, field_magnitude: float, t: float, previous_dt: float,
              ramps=()) -> float:
    """Step size for the next step (mirrors the integrator's rule)."""
    return _next_dt(policy.dt, policy.dt_max, policy.growth, policy.free_field,
                    policy.ramp_steps, _ramp_array(ramps), field_magnitude, t, previous_dt)


def _ramp_array(ramps):
    r = np.array(list(ramps), float).reshape(-1, 2)
    return r if len(r) else np.zeros((0, 2))


@nb.njit(cache=True)
def _next_dt(dt0, dt_max, growth, free_field, ramp_steps, ramps, emag, t, prev):
    if emag >= free_field:
        dt = dt0
    else:
        dt = min(prev * growth, dt_max)
        if dt < dt0:
            dt = dt0
    for r in range(ramps.shape[0]):
        t0, t1 = ramps[r, 0], ramps[r, 1]
        if t1 > t0 and t + dt > t0 and t < t1:
            cap = (t1 - t0) / ramp_steps
            if dt > cap:
                dt = cap
    return dt


# --------------------------------------------------------------------------
# integrator
# --------------------------------------------------------------------------

@nb.njit(cache=True)
def _hermite_z_root(z0, v0, z1, v1, h, target):
    """Root ``s`` in [0, 1] of the cubic Hermite ``z(s) = target``."""
    lo, hi = 0.0, 1.0
    s = (target - z0) / (z1 - z0) if z1 != z0 else 0.5
    for _ in range(60):
        s2 = s * s
        s3 = s2 * s
        zs = ((2 * s3 - 3 * s2 + 1) * z0 + (s3 - 2 * s2 + s) * h * v0
              + (-2 * s3 + 3 * s2) * z1 + (s3 - s2) * h * v1)
        dz = ((6 * s2 - 6 * s) * z0 + (3 * s2 - 4 * s + 1) * h * v0
              + (-6 * s2 + 6 * s) * z1 + (3 * s2 - 2 * s) * h * v1)
        f = zs - target
        if f < 0:
            lo = s
        else:
            hi = s
        if dz > 0:
            sn = s - f / dz
        else:
            sn = 0.5 * (lo + hi)
        if sn <= lo or sn >= hi:
            sn = 0.5 * (lo + hi)
        if abs(sn - s) < 1e-15:
            s = sn
            break
        s = sn
    return s


@nb.njit(cache=True)
def _hermite_state(p0, v0, a0, p1, v1, a1, h, s):
    """Position and velocity on the cubic Hermite between two steps."""
    s2 = s * s
    s3 = s2 * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    d00 = (6 * s2 - 6 * s) / h
    d10 = 3 * s2 - 4 * s + 1
    d01 = (-6 * s2 + 6 * s) / h
    d11 = 3 * s2 - 2 * s
    p = np.empty(3)
    v = np.empty(3)
    for k in range(3):
        p[k] = h00 * p0[k] + h10 * h * v0[k] + h01 * p1[k] + h11 * h * v1[k]
        v[k] = d00 * p0[k] + d10 * v0[k] + d01 * p1[k] + d11 * v1[k]
    return p, v


@nb.njit(cache=True, nogil=True)
def integrate_core(t0, x0, v0, qm, sched, kind, packed, A, b,
                   dt0, dt_max, growth, free_field, ramp_steps, ramps,
                   planes, stop_plane, t_max, max_steps,
                   store_stride, max_samples):
    """Velocity-Verlet loop.

    ``planes`` are ``z`` values recorded on their first upward crossing;
    integration stops after crossing ``planes[stop_plane]`` (if >= 0).
    Returns ``(samples, n_samples, events, n_events, final)`` with
    samples rows ``(t, x, y, z, vx, vy, vz)``, events rows
    ``(code, plane, t, x, y, z, vx, vy, vz)`` and final ``(t, x, v, steps)``.
    """
    ng = sched.shape[0]
    volts = np.zeros(ng)
    x = x0.copy()
    v = v0.copy()
    t = t0
    _voltages(sched, t, volts)
    ex, ey, ez, st = _field(kind, packed, A, b, volts, x[0], x[1], x[2])
    a = np.array([qm * ex, qm * ey, qm * ez])
    samples = np.zeros((max_samples, 7))
    ns = 0
    stride = max(store_stride, 1)
    events = np.zeros((planes.shape[0] + 2, 9))
    ne = 0
    crossed = np.zeros(planes.shape[0], np.bool_)
    for k in range(planes.shape[0]):
        if x[2] >= planes[k]:
            crossed[k] = True
    if st != FIELD_OK:
        events[ne, 0] = EV_SURFACE if st == FIELD_GUARD else EV_ESCAPED
        events[ne, 1] = -1
        events[ne, 2] = t
        events[ne, 3:6] = x
        events[ne, 6:9] = v
        ne += 1
        final = np.array([t, x[0], x[1], x[2], v[0], v[1], v[2], 0.0])
        return samples, ns, events, ne, final
    if max_samples > 0:
        samples[0, 0] = t
        samples[0, 1:4] = x
        samples[0, 4:7] = v
        ns = 1
    dt = dt0
    emag = math.sqrt(ex * ex + ey * ey + ez * ez)
    step = 0
    done = False
    xn = np.empty(3)
    vn = np.empty(3)
    an = np.empty(3)
    while not done:
        if step >= max_steps:
            events[ne, 0] = EV_MAX_STEPS
            events[ne, 1] = -1
            events[ne, 2] = t
            events[ne, 3:6] = x
            events[ne, 6:9] = v
            ne += 1
            break
        if t >= t_max:
            events[ne, 0] = EV_MAX_TIME
            events[ne, 1] = -1
            events[ne, 2] = t
            events[ne, 3:6] = x
            events[ne, 6:9] = v
            ne += 1
            break
        dt = _next_dt(dt0, dt_max, growth, free_field, ramp_steps, ramps, emag, t, dt)
        for c in range(3):
            xn[c] = x[c] + v[c] * dt + 0.5 * a[c] * dt * dt
        tn = t + dt
        _voltages(sched, tn, volts)
        ex, ey, ez, st = _field(kind, packed, A, b, volts, xn[0], xn[1], xn[2])
        if st != FIELD_OK:
            events[ne, 0] = EV_SURFACE if st == FIELD_GUARD else EV_ESCAPED
            events[ne, 1] = -1
            events[ne, 2] = t
            events[ne, 3:6] = x
            events[ne, 6:9] = v
            ne += 1
            break
        if not (math.isfinite(ex) and math.isfinite(ey) and math.isfinite(ez)):
            events[ne, 0] = EV_NAN
            events[ne, 1] = -1
            events[ne, 2] = t
            events[ne, 3:6] = x
            events[ne, 6:9] = v
            ne += 1
            break
        an[0] = qm * ex
        an[1] = qm * ey
        an[2] = qm * ez
        for c in range(3):
            vn[c] = v[c] + 0.5 * (a[c] + an[c]) * dt
        emag = math.sqrt(ex * ex + ey * ey + ez * ez)
        for k in range(planes.shape[0]):
            if not crossed[k] and x[2] < planes[k] <= xn[2]:
                crossed[k] = True
                s = _hermite_z_root(x[2], v[2], xn[2], vn[2], dt, planes[k])
                p, vv = _hermite_state(x, v, a, xn, vn, an, dt, s)
                p[2] = planes[k]
                if ne < events.shape[0] - 1:
                    events[ne, 0] = EV_PLANE
                    events[ne, 1] = k
                    events[ne, 2] = t + s * dt
                    events[ne, 3:6] = p
                    events[ne, 6:9] = vv
                    ne += 1
                if k == stop_plane:
                    done = True
        for c in range(3):
            x[c] = xn[c]
            v[c] = vn[c]
            a[c] = an[c]
        t = tn
        step += 1
        if max_samples > 0 and (step % stride == 0 or done):
            if ns == max_samples:
                # thin: keep every other sample and double the stride
                half = (ns + 1) // 2
                for i in range(half):
                    samples[i] = samples[2 * i]
                ns = half
                stride *= 2
            samples[ns, 0] = t
            samples[ns, 1:4] = x
            samples[ns, 4:7] = v
            ns += 1
    final = np.array([t, x[0], x[1], x[2], v[0], v[1], v[2], float(step)])
    return samples, ns, events, ne, final


@dataclass
class TrajectoryState:
    t: float
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class Event:
    kind: str
    plane: int
    t: float
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class Trajectory:
    """Thinned path ``(t, x, y, z, vx, vy, vz)`` rows plus events."""

    samples: np.ndarray
    events: list
    final: TrajectoryState
    steps: int

    def crossing(self, plane: int) -> Event | None:
        for e in self.events:
            if e.kind == "plane" and e.plane == plane:
                return e
        return None

    @property
    def termination(self) -> str:
        for e in self.events:
            if e.kind != "plane":
                return e.kind
        return "plane"

    def write_csv(self, path, planes=()) -> None:
        """Rows ``t,x,y,z,vx,vy,vz`` (SI) followed by typed event rows."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "t_s", "x_m", "y_m", "z_m", "vx_m_s", "vy_m_s", "vz_m_s",
                        "event", "plane_z_m"])
            for r in self.samples:
                w.writerow(["sample"] + [repr(float(c)) for c in r] + ["", ""])
            for e in self.events:
                pz = repr(float(planes[e.plane])) if e.kind == "plane" and planes else ""
                w.writerow(["event", repr(e.t)] + [repr(float(c)) for c in e.position]
                           + [repr(float(c)) for c in e.velocity] + [e.kind, pz])


@dataclass
class Terminators:
    """Stop conditions: crossing ``planes[stop_plane]``, ``t_max`` or ``max_steps``.

    Surface guard-zone entry and leaving all field grids always stop.
    """

    planes: tuple = ()
    stop_plane: int = -1
    t_max: float = 1e-3
    max_steps: int = 50_000_000


def _unpack_events(ev, ne):
    out = []
    for r in ev[:ne]:
        out.append(Event(EVENT_NAMES[int(r[0])], int(r[1]), float(r[2]), r[3:6].copy(),
                         r[6:9].copy()))
    return out


def integrate(initial: TrajectoryState, qm: float, schedule: WaveformSchedule,
              source: FieldSource, policy: DtPolicy, terminators: Terminators,
              store_stride: int = 1, max_samples: int = 100_000) -> Trajectory:
    """Propagate one ion; ``qm`` is the charge-to-mass ratio (C/kg)."""
    planes = np.asarray(terminators.planes, float).reshape(-1)
    samples, ns, ev, ne, final = integrate_core(
        float(initial.t), np.asarray(initial.position, float),
        np.asarray(initial.velocity, float), float(qm), schedule.packed(),
        source.kind, source.packed, source.A, source.b,
        policy.dt, policy.dt_max, policy.growth, policy.free_field, policy.ramp_steps,
        _ramp_array(schedule.ramp_intervals()), planes, int(terminators.stop_plane),
        float(terminators.t_max), int(terminators.max_steps),
        int(store_stride), int(max_samples))
    return Trajectory(samples[:ns].copy(), _unpack_events(ev, ne),
                      TrajectoryState(final[0], final[1:4].copy(), final[4:7].copy()),
                      int(final[7]))
