"""Acceptance criteria, one summary line each (printed after the run).

Criteria 5-8 and 10 use the full scene basis; its first build takes a few
minutes and is cached under ``.cache/test-basis`` (``IONSOURCE_TEST_CACHE``).
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, CACHE
from ionsource.constants import EPS0
from ionsource.dynamics import (Channel, DtPolicy, FieldSource, LinearFieldModel, Terminators,
                                TrajectoryState, WaveformSchedule, integrate)
from ionsource.electrostatics.bem import solve_basis
from ionsource.electrostatics.fmm import FmmConfig, FmmPlan, direct_sum
from ionsource.ensemble import (EnsembleStats, RunConfig, diffraction_limit, focus_ensemble,
                                simulate_shots, tof_species_ratio)
from ionsource.geometry import build_sphere_mesh
from ionsource.trap import (CA40, CAO, DriveConfig, equilibrium_positions,
                            infer_dark_mass, mode_frequency, normal_modes, secular_frequencies)


def check(crit, desc, ok, detail):
    ACCEPTANCE_LINES.append((crit, desc, bool(ok), detail))
    return bool(ok)


def require(results):
    failed = [r for r in results if not r]
    assert not failed, f"{len(failed)} of {len(results)} checks failed (see summary)"


# --------------------------------------------------------------------- 1

def _fmm_time_ratio(rounds=4, small_per_round=3):
    """Best-of wall times at 1e5 and 1e4 charges, interleaved so host load hits both."""
    data = {}
    for n, seed in ((10_000, 3), (100_000, 2)):
        rng = np.random.default_rng(seed)
        data[n] = rng.random((n, 3)), rng.random(n)

    def once(n):
        x, q = data[n]
        t = time.perf_counter()
        FmmPlan(x, x, FmmConfig(direct_threshold=10)).evaluate(q)
        return time.perf_counter() - t

    once(10_000)
    small, large = [], []
    for _ in range(rounds):
        small += [once(10_000) for _ in range(small_per_round)]
        large.append(once(100_000))
    return min(large) / min(small)


def test_c1_fmm_accuracy_and_scaling():
    rng = np.random.default_rng(1)
    n = 10_000
    x, q = rng.random((n, 3)), rng.random(n)
    pot, _, _ = FmmPlan(x, x, FmmConfig(direct_threshold=10)).evaluate(q)
    ref, _ = direct_sum(x, q, x, False)
    err = float(np.max(np.abs(pot - ref[:, 0]) / np.abs(ref[:, 0])))
    ratio = _fmm_time_ratio()
    require([
        check(1, "FMM max relative error at 1e4 charges", err <= 1e-6, f"{err:.2e} <= 1e-6"),
        check(1, "FMM time ratio t(1e5)/t(1e4)", ratio < 15, f"{ratio:.2f} < 15"),
    ])


# --------------------------------------------------------------------- 2

def test_c2_sphere_capacitance():
    errs, sizes = [], []
    for k in (2, 3, 4):
        m = build_sphere_mesh(1.0, k)
        sol = solve_basis(m, "sphere")
        errs.append(abs(float(sol.sigma @ m.area) / (4 * math.pi * EPS0) - 1))
        sizes.append(len(m))
    require([
        check(2, "sphere capacitance at >= 2000 panels", sizes[-1] >= 2000 and errs[-1] <= 0.01,
              f"{sizes[-1]} panels, error {errs[-1]:.2e} <= 1e-2"),
        check(2, "sphere error monotone over 3 refinements", errs[0] > errs[1] > errs[2],
              " > ".join(f"{e:.2e}" for e in errs)),
    ])


# --------------------------------------------------------------------- 3

def _harmonic_energy_drift():
    w = 2 * np.pi * np.array([1e6, 1.3e6, 0.7e6])
    model = LinearFieldModel(np.diag(-w ** 2)[None], np.zeros((1, 3)))
    sch = WaveformSchedule(["g"], {"g": Channel(1.0)})
    T = 2 * np.pi / w.max()
    dt = T / 1000
    x0, v0 = np.array([1e-6, 2e-6, -1e-6]), np.array([0.3, -1.0, 0.5])
    per = 50
    tr = integrate(TrajectoryState(0.0, x0, v0), 1.0, sch, FieldSource.from_linear(model),
                   DtPolicy(dt, dt), Terminators((), -1, 1e4 * T * (1 + 1e-9), 10 ** 9),
                   store_stride=per, max_samples=10 ** 6)
    S = tr.samples
    E = 0.5 * (S[:, 4:7] ** 2).sum(1) + 0.5 * (w ** 2 * S[:, 1:4] ** 2).sum(1)
    E0 = E[0]
    win = 1000 // per * 5  # five periods
    drift = abs(E[-win:].mean() - E[:win].mean()) / E0
    return drift, float(np.abs(E - E0).max() / E0)


def _rf_quadrupole(q, dt_frac, cycles, stride):
    r0, Om = 1e-3, 2 * np.pi * 12.155e6
    qm = CA40.q / CA40.mass
    V = q * Om ** 2 * r0 ** 2 / (2 * qm)
    model = LinearFieldModel(np.diag([-1.0, 1.0, 0.0])[None] / r0 ** 2, np.zeros((1, 3)))
    sch = WaveformSchedule(["rf"], {"rf": Channel(0.0, V, Om, 0.0)})
    T = 2 * np.pi / Om
    tr = integrate(TrajectoryState(0.0, np.array([1e-6, 0, 0]), np.zeros(3)), qm, sch,
                   FieldSource.from_linear(model), DtPolicy(T / dt_frac, T / dt_frac),
                   Terminators((), -1, cycles * T * (1 - 1e-12), 10 ** 9),
                   store_stride=stride, max_samples=10 ** 7 if stride < 10 ** 8 else 1)
    return tr, Om, T


def _secular_from_spectrum(q):
    tr, Om, T = _rf_quadrupole(q, 100, 2000, 1)
    x = tr.samples[:, 1]
    F = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    f = np.fft.rfftfreq(len(x), T / 100)
    k = int(np.argmax(F * (f < Om / (4 * np.pi))))
    a, b, c = np.log(F[k - 1:k + 2])
    return (k + 0.5 * (a - c) / (a - 2 * b + c)) * f[1], Om


def test_c3_verlet():
    drift, maxdev = _harmonic_energy_drift()
    q = 0.16
    fs, Om = _secular_from_spectrum(q)
    expect = Om / 2 * math.sqrt(q * q / 2) / (2 * math.pi)
    ref = _rf_quadrupole(q, 3200, 50, 10 ** 9)[0].final.position[0]
    e = [abs(_rf_quadrupole(q, h, 50, 10 ** 9)[0].final.position[0] - ref) for h in (50, 100, 200)]
    factors = [e[0] / e[1], e[1] / e[2]]
    require([
        check(3, "Verlet harmonic energy drift over 1e4 periods", drift <= 1e-6,
              f"{drift:.2e} <= 1e-6 (max excursion {maxdev:.1e})"),
        check(3, "secular frequency at q=0.16", abs(fs / expect - 1) <= 0.01,
              f"{fs / 1e3:.3f} kHz vs {expect / 1e3:.3f} kHz ({fs / expect - 1:+.2%})"),
        check(3, "Verlet convergence factor", all(3 <= r <= 5 for r in factors),
              ", ".join(f"{r:.2f}" for r in factors) + " in 4+-1"),
    ])


# --------------------------------------------------------------------- 4

def test_c4_crystal_modes():
    w_ax = 2 * math.pi * 280e3
    cr = equilibrium_positions([CA40, CA40], w_ax)
    ratios = normal_modes(cr).omegas / w_ax
    dev = float(np.max(np.abs(ratios - [1.0, math.sqrt(3)])))
    rt = []
    for k in (0, 1):
        f = mode_frequency(CA40, CAO.mass_amu, w_ax, k)
        rt.append(abs(infer_dark_mass(f, 0.0, CA40, w_ax, k).mass_amu / CAO.mass_amu - 1))
    # 0.1 % frequency noise on the lower mode, the one more sensitive to the dark mass
    f0 = mode_frequency(CA40, CAO.mass_amu, w_ax, 0)
    noisy = max(abs(infer_dark_mass(f0 * (1 + s), 0.0, CA40, w_ax, 0).mass_amu
                    / CAO.mass_amu - 1) for s in (-1e-3, 1e-3))
    require([
        check(4, "two equal ions give {1, sqrt3} w_ax", dev <= 1e-9, f"max deviation {dev:.1e}"),
        check(4, "Ca+/CaO+ dark-mass round trip", max(rt) <= 1e-6, f"{max(rt):.1e} <= 1e-6"),
        check(4, "0.1% frequency noise -> mass error", noisy <= 4e-3, f"{noisy:.2%} <= 0.4%"),
    ])


# --------------------------------------------------------------------- 5

@pytest.mark.slow
def test_c5_secular_frequencies(scene_basis, scene_secular):
    sec = scene_secular
    f_ax = sec.axial
    f_rad = float(np.mean(sec.radial))
    drive = DriveConfig()
    scaled = drive.with_dc(**{g: 2 * v for g, v in drive.dc_voltages.items()})
    f2 = secular_frequencies(CA40, scaled, scene_basis).axial
    ratio = f2 / f_ax
    require([
        check(5, "axial secular frequency", abs(f_ax / 280e3 - 1) <= 0.15,
              f"{f_ax / 1e3:.1f} kHz vs 280 kHz ({f_ax / 280e3 - 1:+.1%})"),
        check(5, "radial secular frequency", abs(f_rad / 430e3 - 1) <= 0.20,
              f"{f_rad / 1e3:.1f} kHz vs 430 kHz ({f_rad / 430e3 - 1:+.1%})"),
        check(5, "sqrt(V) scaling of w_ax", abs(ratio / math.sqrt(2) - 1) <= 0.01,
              f"ratio {ratio:.5f} vs sqrt2 ({ratio / math.sqrt(2) - 1:+.3%})"),
    ])


# --------------------------------------------------------------------- 6-8

@pytest.fixture(scope="module")
def ensembles(scene, scene_basis, scene_secular):
    out = {}
    for T in (2e-3, 1e-4):
        cfg = RunConfig(temperature=T, shots=500, seed=0, scene=scene)
        out[T] = EnsembleStats(simulate_shots(cfg, scene_basis, scene_secular))
    return out


@pytest.mark.slow
def test_c6_extraction_ensembles(ensembles):
    hot, cold = ensembles[2e-3], ensembles[1e-4]
    v = hot.mean_velocity
    require([
        check(6, "2 mK mean velocity", abs(v / 19.47e3 - 1) <= 0.15,
              f"{v:.0f} m/s vs 19470 ({v / 19.47e3 - 1:+.1%})"),
        check(6, "2 mK velocity spread", 4 <= hot.velocity_spread <= 36,
              f"{hot.velocity_spread:.2f} m/s in [4, 36]"),
        check(6, "2 mK divergence", 45e-6 <= hot.divergence <= 390e-6,
              f"{hot.divergence * 1e6:.1f} urad in [45, 390]"),
        check(6, "100 uK velocity spread", 1 / 3 <= cold.velocity_spread <= 3,
              f"{cold.velocity_spread:.3f} m/s within x3 of 1"),
        check(6, "100 uK divergence", 10e-6 <= cold.divergence <= 90e-6,
              f"{cold.divergence * 1e6:.1f} urad within x3 of 30"),
        check(6, "100 uK below 2 mK", cold.velocity_spread < hot.velocity_spread
              and cold.divergence < hot.divergence,
              f"dv {cold.velocity_spread:.3f} < {hot.velocity_spread:.3f}, "
              f"alpha {cold.divergence * 1e6:.1f} < {hot.divergence * 1e6:.1f}"),
        check(6, "shot count", hot.n_accepted >= 500 and cold.n_accepted >= 500,
              f"{hot.n_accepted}, {cold.n_accepted} accepted"),
    ])


@pytest.mark.slow
def test_c7_tof_ratio(scene, scene_basis):
    cfg = RunConfig(temperature=2e-3, shots=200, seed=0, scene=scene)
    full = tof_species_ratio(cfg, scene_basis, CA40, CAO)
    drift_cfg = replace(cfg, extraction=replace(cfg.extraction, rf_off=True))
    drift = tof_species_ratio(drift_cfg, scene_basis, CA40, CAO)
    root = math.sqrt(CAO.mass / CA40.mass)
    require([
        check(7, "TOF ratio CaO+/Ca+ full simulation", abs(full.ratio / 1.195 - 1) <= 0.02,
              f"{full.ratio:.4f} vs 1.195 ({full.ratio / 1.195 - 1:+.2%})"),
        check(7, "TOF ratio drift limit", abs(drift.ratio / math.sqrt(56 / 40) - 1) <= 0.005,
              f"{drift.ratio:.5f} vs sqrt(56/40) = {math.sqrt(56 / 40):.5f} "
              f"(exact masses {root:.5f})"),
    ])


@pytest.mark.slow
def test_c8_focus(scene, scene_basis, scene_secular):
    cfg = RunConfig(temperature=2e-3, shots=500, seed=0, scene=scene)
    hot = focus_ensemble(cfg, scene_basis, secular=scene_secular)
    cold = focus_ensemble(replace(cfg, temperature=1e-4), scene_basis, hot.lens_voltage,
                          secular=scene_secular)
    require([
        check(8, "2 mK focal spot", 2e-9 <= hot.spot_radius <= 30e-9,
              f"{hot.spot_radius * 1e9:.1f} nm in [2, 30] (f = {hot.focal_length * 1e3:.2f} mm, "
              f"V = {hot.lens_voltage:.2f})"),
        check(8, "100 uK spot smaller", cold.spot_radius < hot.spot_radius,
              f"{cold.spot_radius * 1e9:.1f} nm < {hot.spot_radius * 1e9:.1f} nm"),
    ])


# --------------------------------------------------------------------- 9

def test_c9_diffraction():
    d = diffraction_limit(CA40, 80.0, 1e-3)
    require([check(9, "diffraction-limited spot, Ca+ 80 eV, NA 1e-3",
                    1e-10 <= d.spot <= 5e-10, f"{d.spot:.3e} m in [1e-10, 5e-10]")])


# --------------------------------------------------------------------- 10

@pytest.mark.slow
def test_c10_threads_byte_identical(tmp_path, scene_basis):
    from ionsource.cli import main
    out = tmp_path / "run"
    args = ["extract", "--config", "fig4_focus_2mK", "--set", "run.shots=60",
            "--cache", str(CACHE), "--out", str(out)]
    snapshots = []
    for threads in ("1", "3"):
        assert main(args + ["--threads", threads]) == 0
        snapshots.append({p.relative_to(out): p.read_bytes()
                          for p in sorted(out.rglob("*")) if p.is_file()})
    same = snapshots[0] == snapshots[1]
    require([check(10, "extract with --threads 1 and 3", same,
                   f"{len(snapshots[0])} files " + ("byte-identical" if same else "differ"))])
