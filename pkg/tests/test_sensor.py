import math

import numpy as np
import pytest

from fluxforge.errors import GeometryError, NeelOverflowError, UsageError
from fluxforge.fields import PointDipoleField
from fluxforge.io import read_pgm
from fluxforge.sensor import (ParticleSpec, RelaxationReport, SensorSpec, alignment, brownian_time,
                              brownian_volume, classify_regime, decoherence_rate, effective_time, langevin,
                              neel_time, relaxation_report, render_response, temporal_filter)
from fluxforge.sources import Cuboid, single_magnet

K_B = 1.38e-23
IRON = ParticleSpec.macro_iron()
NANO = ParticleSpec.ferrolens_magnetite()


# --- relaxation -----------------------------------------------------------------


def test_particle_validation():
    with pytest.raises(UsageError):
        ParticleSpec(radius=0.0)
    with pytest.raises(UsageError):
        ParticleSpec(radius=1e-6, coating=-1e-9)
    with pytest.raises(UsageError):
        ParticleSpec(radius=1e-6, viscosity=0.0)
    with pytest.raises(UsageError):
        ParticleSpec(radius=1e-6, particle_moment=-1.0)
    assert ParticleSpec(radius=1e-6, coating=0.0).coating == 0.0


def test_brownian_volume():
    assert brownian_volume(IRON) == pytest.approx(3.351e-14, rel=1e-3)
    assert brownian_volume(NANO) == pytest.approx(5.236e-25, rel=1e-3)
    assert brownian_volume(ParticleSpec(40e-6)) / brownian_volume(IRON) == pytest.approx(8, rel=1e-12)
    coated = ParticleSpec(5e-9, coating=2e-9)
    assert brownian_volume(coated) == pytest.approx(4 / 3 * math.pi * (7e-9) ** 3, rel=1e-14)


def test_brownian_time():
    # 3 V eta / kT with the numbers written out independently
    expect = 3 * (4 / 3 * math.pi * (20e-6) ** 3) * 2.4e-3 / (K_B * 300)
    assert brownian_time(IRON) == pytest.approx(expect, rel=1e-14)
    assert brownian_time(IRON) == pytest.approx(5.83e4, rel=5e-3)
    assert brownian_time(NANO) == pytest.approx(9.1e-7, rel=5e-3)
    thick = ParticleSpec.macro_iron(viscosity=4.8e-3)
    assert brownian_time(thick) / brownian_time(IRON) == pytest.approx(2, rel=1e-14)
    assert brownian_time(ParticleSpec(40e-6)) / brownian_time(IRON) == pytest.approx(8, rel=1e-12)


def test_neel_time():
    kt = K_B * 300
    v = NANO.core_volume
    # K_a V / kT = ln 10 -> ten times tau0
    spec = ParticleSpec(5e-9, anisotropy=math.log(10) * kt / v)
    assert neel_time(spec) == pytest.approx(1e-8, rel=1e-12)
    tiny = ParticleSpec(5e-9, anisotropy=1e-30)
    assert neel_time(tiny) == pytest.approx(1e-9, rel=1e-12)
    assert neel_time(NANO) == pytest.approx(1e-9, rel=0.2)
    radii = [2e-9, 5e-9, 1e-8, 2e-8]
    times = [neel_time(ParticleSpec(r)) for r in radii]
    assert all(a < b for a, b in zip(times, times[1:]))
    with pytest.raises(NeelOverflowError, match="blocked"):
        neel_time(IRON)


def test_effective_time():
    assert effective_time(2.0, 2.0) == 1.0
    assert effective_time(3.0, 7.0) == effective_time(7.0, 3.0)
    assert effective_time(1e-9, 1e-6) == pytest.approx(1e-9, rel=1e-3)
    assert effective_time(5.0, math.inf) == 5.0
    assert math.isinf(effective_time(math.inf, math.inf))
    with pytest.raises(UsageError):
        effective_time(0.0, 1.0)


def test_decoherence_rate_and_regime():
    assert decoherence_rate(1.0) == 1.0
    assert decoherence_rate(1e-9) == pytest.approx(1e9, rel=1e-15)
    assert decoherence_rate(5.83e4) == pytest.approx(1.72e-5, rel=5e-3)
    assert classify_regime(5.83e4, 60) == "macroscopic_frozen"
    assert classify_regime(1e-9, 60) == "quantum_active"
    assert classify_regime(60.0, 60.0) == "quantum_active"
    with pytest.raises(UsageError):
        decoherence_rate(0.0)


def test_relaxation_reports():
    iron = relaxation_report(IRON)
    assert 1.6e-5 <= iron.delta <= 1.8e-5
    assert iron.regime == "macroscopic_frozen" and iron.neel_blocked and math.isinf(iron.tau_N)
    brown_only = relaxation_report(IRON, neel=False)
    assert brown_only.delta == iron.delta and not brown_only.neel_blocked
    nano = relaxation_report(NANO)
    assert 0.5e9 <= nano.delta <= 2e9 and nano.regime == "quantum_active"
    for rep in (iron, nano):
        assert abs(rep.delta * rep.tau_eff - 1) <= 1e-12
        assert rep.tau_eff <= min(rep.tau_B, rep.tau_N)
    text = iron.as_text()
    assert "tau_N_s=inf" in text and "regime=macroscopic_frozen" in text
    with pytest.raises(ValueError):
        RelaxationReport(1.0, 1.0, 1.0, 0.5, 3.0, "quantum_active")


# --- Langevin alignment ---------------------------------------------------------


def test_langevin_values():
    assert langevin(0.0) == 0.0
    # coth(1) - 1 via exponentials, independent of the tanh route
    e = math.exp(2.0)
    assert langevin(1.0) == pytest.approx((e + 1) / (e - 1) - 1, abs=1e-15)
    assert abs(langevin(1.0) - 0.31304) <= 1e-5
    # L(50) = 1 - 1/50 + O(e^-100) rounds to exactly 0.98 in double precision
    assert langevin(50.0) >= 0.98
    assert langevin(1e6) == pytest.approx(1 - 1e-6, abs=1e-15)
    assert langevin(-2.0) == -langevin(2.0)


def test_langevin_series_branch_is_continuous():
    x = np.array([9.99e-5, 1e-4, 1.001e-4, 1e-8])
    assert np.allclose(langevin(x), x / 3, rtol=1e-8)
    a, b = langevin(np.nextafter(1e-4, 0)), langevin(1e-4)
    assert abs(a - b) <= 1e-16 * a
    # across the whole series range, agreement with an extended-precision evaluation
    import mpmath
    mpmath.mp.dps = 40
    for v in (1e-5, 1e-4, 3e-3, 0.1, 0.49, 0.5, 0.51, 2.0, 30.0):
        ref = float(mpmath.coth(v) - 1 / mpmath.mpf(v))
        assert langevin(v) == pytest.approx(ref, rel=4e-16)


def test_alignment_monotone_in_field():
    bs = np.outer(np.linspace(0, 0.5, 400), [0.3, -0.4, 0.866])
    a = alignment(bs, NANO)
    assert a[0] == 0.0
    assert np.all(np.diff(a) >= 0)
    assert np.all((0 <= a) & (a <= 1))


# --- rendering ------------------------------------------------------------------


def test_sensor_spec_validation():
    with pytest.raises(UsageError):
        SensorSpec(nx=4)
    with pytest.raises(UsageError):
        SensorSpec(concentration=1.0)
    with pytest.raises(UsageError):
        SensorSpec(b_min=-1.0)
    with pytest.raises(UsageError):
        SensorSpec(normal=(0, 0, 0))
    assert SensorSpec().film_thickness == 37.5e-6


def test_empty_scene_is_idle():
    img = render_response(None, SensorSpec(nx=16, ny=12), NANO)
    assert img.mask_count == 16 * 12
    assert not np.any(img.angle) and not np.any(img.magnitude)
    assert img.angle.shape == (12, 16)


def test_dipole_angle_follows_azimuth():
    sensor = SensorSpec(center=(0, 0, 0.01), nx=48, ny=48, pixel_pitch=5e-4)
    img = render_response(PointDipoleField([0, 0, 1.0]), sensor, NANO)
    nodes = sensor.grid().nodes().reshape(48, 48, 3)
    az = np.arctan2(nodes[..., 1], nodes[..., 0])
    live = ~img.masked
    assert live.sum() > 1000
    diff = np.angle(np.exp(1j * (img.angle - az)))[live]
    assert np.max(np.abs(diff - diff[0])) <= 1e-6
    assert np.all(img.masked == (np.linalg.norm(
        PointDipoleField([0, 0, 1.0]).b(nodes.reshape(-1, 3)), axis=1) < 0.015).reshape(48, 48))
    assert np.all(img.magnitude[img.masked] == 0) and np.all(img.angle[img.masked] == 0)
    assert np.all((img.angle >= 0) & (img.angle < 2 * math.pi))


def test_render_is_deterministic(tmp_path):
    sensor = SensorSpec(center=(0.001, 0, 0.01), nx=32, ny=24, pixel_pitch=5e-4)
    src = PointDipoleField([0.2, 0.1, 1.0])
    a = render_response(src, sensor, NANO).write(tmp_path / "a")
    b = render_response(src, sensor, NANO).write(tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    pix = read_pgm(a[0].read_bytes())
    assert pix.shape == (24, 32)
    assert "mask_count=" in a[2].read_text()


def test_plane_through_magnet_is_rejected():
    mag = single_magnet(Cuboid(0.01, 0.01, 0.01), resolution=3)
    with pytest.raises(GeometryError):
        render_response(mag, SensorSpec(center=(0, 0, 0.002)), NANO)


# --- temporal filter ------------------------------------------------------------


def test_filter_constant_and_passthrough():
    x = np.full(50, 0.37)
    assert np.array_equal(temporal_filter(x, 1.0, 1e-3), x)
    rng = np.random.default_rng(3)
    y = rng.normal(size=(40, 3))
    assert np.array_equal(temporal_filter(y, math.inf, 1e-3), y)
    assert np.array_equal(temporal_filter(y, 1e12, 1.0), y)
    assert temporal_filter(np.zeros(0), 1.0, 1.0).shape == (0,)
    with pytest.raises(UsageError):
        temporal_filter(x, 1.0, 0.0)


def test_filter_attenuation_matches_first_order_response():
    delta, f, dt = 1.0, 100.0, 1e-4
    t = np.arange(40000) * dt
    y = temporal_filter(np.sin(2 * math.pi * f * t), delta, dt)
    amp = np.max(np.abs(y[-10000:] - y[-10000:].mean()))
    assert amp == pytest.approx(2 * math.pi * delta / (2 * math.pi * f), rel=0.1)
    # exact discrete transfer function of the recursion
    a = 1 - math.exp(-2 * math.pi * delta * dt)
    h = a / abs(1 - (1 - a) * np.exp(-2j * math.pi * f * dt))
    assert amp == pytest.approx(h, rel=1e-3)


def test_filter_bounded_by_input():
    rng = np.random.default_rng(11)
    x = rng.uniform(-2, 5, size=500)
    y = temporal_filter(x, 3.0, 1e-2)
    assert y[0] == x[0]
    assert x.min() <= y.min() and y.max() <= x.max()
