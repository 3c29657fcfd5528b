import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import constants as sc

from ionsource.ensemble import (EmptyEnsembleError, EnsembleStats, ExtractionConfig, RunConfig,
                                diffraction_limit, fit_aperture_transmission, fit_gaussian_tof,
                                gaussian_transmission, optimize_deflection, prepare_shots,
                                sample_thermal, shot_rng, simulate_shots, tof_species_ratio,
                                velocity_from_tof)
from ionsource.trap import CA40, CAO, IdealQuadrupole


def _records_equal(a, b, sl=slice(None)):
    for name in ("shots", "status", "x0", "v0", "t", "x", "v", "end", "steps", "detected"):
        assert np.array_equal(getattr(a, name)[sl], getattr(b, name), equal_nan=True), name


@pytest.fixture(scope="module")
def base_records(quad, quad_config, quad_secular):
    return simulate_shots(quad_config, quad, quad_secular)


def test_all_shots_arrive(base_records):
    assert base_records.arrived.all()
    assert base_records.plane_names == ["tof", "measurement", "detector"]
    st = EnsembleStats(base_records)
    assert st.n_accepted == 40
    rep = st.report()
    assert rep["accepted"] == 40 and rep["losses"] == {}


def test_zero_temperature_has_no_spread(quad, quad_config, quad_secular):
    st = EnsembleStats(simulate_shots(replace(quad_config, temperature=0.0, shots=5), quad,
                                      quad_secular))
    assert st.velocity_spread == 0.0
    assert st.spot_radius == 0.0


def test_shot_blocks_are_reproducible(quad, quad_config, quad_secular, base_records):
    first = simulate_shots(replace(quad_config, shots=20), quad, quad_secular)
    second = simulate_shots(replace(quad_config, shots=20), quad, quad_secular, first_shot=20)
    _records_equal(base_records, first, slice(0, 20))
    _records_equal(base_records, second, slice(20, 40))


def test_threads_do_not_change_results(quad, quad_config, quad_secular, base_records):
    _records_equal(base_records, simulate_shots(replace(quad_config, threads=3), quad,
                                                quad_secular))


def test_seed_changes_samples(quad, quad_config, quad_secular, base_records):
    other = simulate_shots(replace(quad_config, seed=1, shots=5), quad, quad_secular)
    assert not np.array_equal(other.x0, base_records.x0[:5])


def test_shot_rng_independent_of_order():
    a = shot_rng(7, 12).standard_normal(4)
    shot_rng(7, 11).standard_normal(100)
    assert np.array_equal(a, shot_rng(7, 12).standard_normal(4))


def test_thermal_sampling_scales_with_sqrt_t(quad_secular):
    a = sample_thermal(1e-3, quad_secular, CA40, 50, seed=3)
    b = sample_thermal(4e-3, quad_secular, CA40, 50, seed=3)
    c = quad_secular.position
    assert np.allclose(b.positions - c, 2 * (a.positions - c), rtol=1e-12, atol=1e-18)
    assert np.allclose(b.velocities, 2 * a.velocities, rtol=1e-12)
    big = sample_thermal(2e-3, quad_secular, CA40, 4000, seed=0)
    sv = math.sqrt(sc.k * 2e-3 / CA40.mass)
    assert np.std(big.velocities, axis=0) == pytest.approx([sv] * 3, rel=0.05)
    sx = sv / quad_secular.omegas
    proj = (big.positions - c) @ quad_secular.axes
    assert np.std(proj, axis=0) == pytest.approx(sx, rel=0.05)


def test_spreads_scale_with_sqrt_t(quad, quad_config, quad_secular, base_records):
    hot = EnsembleStats(base_records)
    cold = EnsembleStats(simulate_shots(replace(quad_config, temperature=0.5e-3), quad,
                                        quad_secular))
    # linear equations of motion; sampling at a fixed plane adds a small nonlinearity
    assert hot.velocity_spread / cold.velocity_spread == pytest.approx(2.0, rel=1e-4)
    assert hot.spot_radius / cold.spot_radius == pytest.approx(2.0, rel=1e-4)


def test_energy_bookkeeping_between_planes(base_records, quad_config):
    r = base_records
    k1, k2 = r.plane("tof"), r.plane("measurement")
    vz1, vz2 = r.v[:, k1, 2], r.v[:, k2, 2]
    dz = r.plane_z[k2] - r.plane_z[k1]
    gain = 0.5 * CA40.mass * (vz2 ** 2 - vz1 ** 2)
    assert gain == pytest.approx(np.full(len(gain), CA40.q * 2000.0 * dz), rel=1e-9)


def test_micromotion_kick(quad, quad_config, quad_secular):
    cfg = replace(quad_config, temperature=0.0, shots=1,
                  extraction=replace(quad_config.extraction, start_offset=(2e-5, 0.0, 0.0)))
    ps = prepare_shots(cfg, quad, quad_secular)
    d = cfg.drive
    expect = CA40.q * d.rf_amplitude * 2e-5 / (CA40.mass * d.omega * quad.r0 ** 2)
    assert ps.v0[0] == pytest.approx([expect, 0.0, 0.0], abs=1e-9 * expect)
    assert math.sin(d.omega * ps.t0 + d.rf_phase) == pytest.approx(0.0, abs=1e-9)


def test_boltzmann_matches_harmonic_in_ideal_well(quad, quad_config, quad_secular):
    cfg = replace(quad_config, shots=600)
    h = prepare_shots(cfg, quad, quad_secular).x0
    b = prepare_shots(replace(cfg, sampling="boltzmann"), quad, quad_secular).x0
    sh, sb = np.std(h, axis=0), np.std(b, axis=0)
    assert sb == pytest.approx(sh, rel=0.12)
    assert not np.array_equal(h, b)


def test_detection_efficiency_and_empty(quad, quad_config, quad_secular):
    rec = simulate_shots(replace(quad_config, detection_efficiency=0.0, shots=3), quad,
                         quad_secular)
    with pytest.raises(EmptyEnsembleError):
        EnsembleStats(rec)


def test_tof_csv(tmp_path, base_records):
    st = EnsembleStats(base_records)
    p = tmp_path / "tof.csv"
    st.write_tof_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "shot,arrival_time_s,status"
    assert len(lines) == 41 and lines[1].endswith(",arrived")
    assert float(lines[1].split(",")[1]) == st.tof[0]


def test_gaussian_tof_fits():
    rng = np.random.default_rng(11)
    t = rng.normal(12.8e-6, 4e-9, 123)
    fit = fit_gaussian_tof(t, bin_width=2e-9)
    assert fit.mle.mu == pytest.approx(t.mean())
    assert abs(fit.mle.mu - 12.8e-6) < 3 * fit.mle.mu_err
    assert abs(fit.binned.mu - fit.mle.mu) < 0.5 * 2e-9
    assert fit.binned.sigma == pytest.approx(fit.mle.sigma, rel=0.2)
    assert fit.histogram.counts.sum() == 123
    with pytest.raises(ValueError):
        fit_gaussian_tof(np.full(20, 1e-6))
    with pytest.raises(ValueError):
        fit_gaussian_tof(t[:9])


def test_velocity_from_tof():
    assert velocity_from_tof(10e-6, 0.2) == pytest.approx(2e4)
    assert velocity_from_tof(10e-6, 0.2, ref_time=2e-6, ref_distance=0.04) == pytest.approx(2e4)
    with pytest.raises(ValueError):
        velocity_from_tof(1e-6, 0.2, ref_time=1e-6)


@pytest.mark.parametrize("s", [83e-6, 300e-6])
def test_aperture_fit_round_trip(s):
    rng = np.random.default_rng(int(s * 1e6))
    n = 139
    radii = np.array([0.5, 1.0, 1.5, 2.0, 3.0]) * s
    # one independent bunch of n shots per aperture
    passed = np.array([(np.hypot(*rng.normal(0, s, (2, n))) < a).sum() for a in radii])
    fit = fit_aperture_transmission(radii, passed, n)
    assert abs(fit.spot_radius - s) < 3 * fit.spot_radius_err
    assert fit.spot_radius_err < 0.2 * s
    # noiseless counts give the exact width back
    exact = fit_aperture_transmission(radii, gaussian_transmission(radii, s) * 1e6, 1e6)
    assert exact.spot_radius == pytest.approx(s, rel=1e-6)
    with pytest.raises(ValueError):
        fit_aperture_transmission(radii, np.zeros(5), n)


class _DeflectingQuad(IdealQuadrupole):
    """Ideal trap plus uniform transverse fields: ``defl1`` along x, ``defl2`` along y."""

    groups = IdealQuadrupole.groups + ("defl1", "defl2")

    def _terms(self, p):
        t = super()._terms(p)
        z = 0 * p[:, 0]
        t["defl1"] = (-p[:, 0], np.stack([1 + z, z, z], 1))
        t["defl2"] = (-p[:, 1], np.stack([z, 1 + z, z], 1))
        return t

    def linear_model(self):
        A, b = super().linear_model()
        b2 = np.zeros((2, 3))
        b2[0, 0] = b2[1, 1] = 1.0
        return np.concatenate([A, np.zeros((2, 3, 3))]), np.concatenate([b, b2])


def test_deflection_optimum(quad_config, quad_secular):
    basis = _DeflectingQuad(1e-3)
    cfg = replace(quad_config, temperature=0.0, shots=2,
                  extraction=replace(quad_config.extraction, rf_off=True))
    sym = optimize_deflection(cfg, basis, [-5, 0, 5], [-5, 0, 5], secular=quad_secular)
    assert sym.voltages == (0.0, 0.0)
    assert sym.objective < 1e-12
    shifted = replace(cfg, extraction=replace(cfg.extraction, start_offset=(1e-5, 0.0, 0.0)))
    grid = np.linspace(-40, 40, 17)
    res = optimize_deflection(shifted, basis, grid, [0.0], secular=quad_secular)
    assert res.voltages[0] < 0 and res.voltages[1] == 0.0
    objs = {v1: o for v1, _, o in res.grid}
    assert res.objective < objs[0.0]
    i = list(grid).index(res.voltages[0])
    for j in (i - 1, i + 1):
        if 0 <= j < len(grid):
            assert res.objective <= objs[grid[j]]


def test_tof_ratio_same_species_is_one(quad, quad_config, quad_secular):
    cfg = replace(quad_config, shots=4)
    r = tof_species_ratio(cfg, quad, CA40, CA40)
    assert r.ratio == 1.0 and r.time_a == r.time_b


def test_tof_ratio_uniform_field_scales_with_sqrt_mass(quad, quad_config):
    # CaO+ needs a stiffer RF well to stay radially bound
    cfg = replace(quad_config, temperature=0.0, shots=2,
                  drive=replace(quad_config.drive, rf_amplitude=150.0),
                  extraction=replace(quad_config.extraction, ramp_duration=0.0))
    r = tof_species_ratio(cfg, quad, CA40, CAO)
    assert r.ratio == pytest.approx(math.sqrt(CAO.mass / CA40.mass), rel=1e-6)


def test_diffraction_limit():
    d = diffraction_limit(CA40, 100.0, 0.01)
    lam = sc.h / math.sqrt(2 * CA40.mass_amu * sc.atomic_mass * 100.0 * sc.e)
    assert d.wavelength == pytest.approx(lam, rel=1e-8)
    assert d.spot == pytest.approx(lam / 0.02, rel=1e-8)
    # halving with four times the energy
    assert diffraction_limit(CA40, 400.0, 0.01).spot == pytest.approx(d.spot / 2, rel=1e-12)
    with pytest.raises(ValueError):
        diffraction_limit(CA40, 0.0, 0.01)
    with pytest.raises(ValueError):
        diffraction_limit(CA40, 1.0, 1.5)


@pytest.mark.parametrize("kwargs", [dict(voltage=2e3), dict(ramp_duration=2e-6),
                                    dict(delay=-1e-9), dict(voltage_jitter=-0.1)])
def test_extraction_config_validation(kwargs):
    with pytest.raises(ValueError):
        ExtractionConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [dict(sampling="x"), dict(temperature=-1), dict(shots=0),
                                    dict(detection_efficiency=1.5), dict(threads=0)])
def test_run_config_validation(kwargs):
    with pytest.raises(ValueError):
        RunConfig(**kwargs)
