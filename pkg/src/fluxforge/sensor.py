"""Ferrofluid sensor-plane model: particle relaxation, regime, response images.

Relaxation times follow the usual ferrofluid relations:

    V_B   = 4/3 pi (R + d)^3
    tau_B = 3 V_B eta / (k T)
    tau_N = tau0 exp(K_a V_core / (k T)),   V_core = 4/3 pi R^3
    1/tau_eff = 1/tau_B + 1/tau_N,  delta = 1/tau_eff
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NeelOverflowError, UsageError
from .fields import CONSTANTS, FieldGrid, b_total, check_plane_clear, plane_axes
from .io import atomic_write, key_value_text, pgm_bytes
from .sources import as_vector

MAGNETITE_MS = 4.8e5  # A/m
NEEL_EXPONENT_LIMIT = 700.0
REGIMES = ("quantum_active", "macroscopic_frozen")
DEFAULT_OBSERVATION_TIME = 60.0  # s


def _sphere_volume(r):
    return 4.0 / 3.0 * math.pi * r ** 3


@dataclass(frozen=True)
class ParticleSpec:
    radius: float  # m
    coating: float = 0.0  # m, surfactant shell
    viscosity: float = 2.4e-3  # Pa s
    temperature: float = 300.0  # K
    neel_tau0: float = 1e-9  # s
    anisotropy: float = 1e3  # J/m^3
    particle_moment: float | None = None  # A m^2; None -> magnetite Ms x core volume

    def __post_init__(self):
        for name in ("radius", "viscosity", "temperature", "neel_tau0", "anisotropy"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise UsageError(f"{name} must be > 0, got {v}")
        if not (math.isfinite(self.coating) and self.coating >= 0):
            raise UsageError(f"coating must be >= 0, got {self.coating}")
        if self.particle_moment is None:
            object.__setattr__(self, "particle_moment", MAGNETITE_MS * _sphere_volume(self.radius))
        elif not self.particle_moment > 0:
            raise UsageError("particle_moment must be > 0")

    @property
    def core_volume(self) -> float:
        return _sphere_volume(self.radius)

    @property
    def kT(self) -> float:
        return CONSTANTS.boltzmann * self.temperature

    @classmethod
    def macro_iron(cls, **kw) -> "ParticleSpec":
        """20 um particles in 2.4 cP oil at 300 K."""
        return cls(**{"radius": 20e-6, **kw})

    @classmethod
    def ferrolens_magnetite(cls, **kw) -> "ParticleSpec":
        """10 nm magnetite; carrier viscosity defaults to the same mineral oil."""
        return cls(**{"radius": 5e-9, **kw})


def brownian_volume(spec: ParticleSpec) -> float:
    return _sphere_volume(spec.radius + spec.coating)


def brownian_time(spec: ParticleSpec) -> float:
    return 3.0 * brownian_volume(spec) * spec.viscosity / spec.kT


def neel_time(spec: ParticleSpec) -> float:
    x = spec.anisotropy * spec.core_volume / spec.kT
    if x > NEEL_EXPONENT_LIMIT:
        raise NeelOverflowError(
            f"Neel exponent K_a V / kT = {x:.3g} exceeds {NEEL_EXPONENT_LIMIT:g}: "
            "the particle is magnetically blocked (regime macroscopic_frozen)")
    return spec.neel_tau0 * math.exp(x)


def effective_time(tau_b: float, tau_n: float) -> float:
    """Parallel combination; an infinite time drops out."""
    if not (tau_b > 0 and tau_n > 0):
        raise UsageError("relaxation times must be > 0")
    if math.isinf(tau_b) and math.isinf(tau_n):
        return math.inf
    lo, hi = sorted((tau_b, tau_n))
    return lo / (1.0 + lo / hi)


def decoherence_rate(tau: float) -> float:
    if not tau > 0:
        raise UsageError("relaxation time must be > 0")
    return 1.0 / tau


def classify_regime(tau_eff: float, observation_time: float = DEFAULT_OBSERVATION_TIME) -> str:
    """A tie counts as quantum_active."""
    if not observation_time > 0:
        raise UsageError("observation time must be > 0")
    return "macroscopic_frozen" if tau_eff > observation_time else "quantum_active"


@dataclass(frozen=True)
class RelaxationReport:
    V_B: float
    tau_B: float
    tau_N: float
    tau_eff: float
    delta: float
    regime: str
    observation_time: float = DEFAULT_OBSERVATION_TIME
    neel_blocked: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise UsageError(f"unknown regime {self.regime!r}")
        if self.tau_eff > min(self.tau_B, self.tau_N):
            raise ValueError("tau_eff exceeds min(tau_B, tau_N)")
        if math.isfinite(self.tau_eff) and abs(self.delta * self.tau_eff - 1.0) > 1e-12:
            raise ValueError("delta * tau_eff != 1")

    def as_text(self) -> str:
        return key_value_text([("V_B_m3", self.V_B), ("tau_B_s", self.tau_B), ("tau_N_s", _inf(self.tau_N)),
                               ("tau_eff_s", self.tau_eff), ("delta_Hz", self.delta),
                               ("observation_time_s", self.observation_time),
                               ("neel_blocked", str(self.neel_blocked).lower()),
                               ("regime", self.regime)])


def _inf(x):
    return "inf" if math.isinf(x) else x


def relaxation_report(spec: ParticleSpec, observation_time: float = DEFAULT_OBSERVATION_TIME,
                      neel: bool = True) -> RelaxationReport:
    """With ``neel=False`` only Brownian rotation relaxes the particle (tau_N = inf).

    A Néel exponent past the overflow limit is reported as a blocked particle
    rather than an error.
    """
    tau_b = brownian_time(spec)
    tau_n, blocked = math.inf, False
    if neel:
        try:
            tau_n = neel_time(spec)
        except NeelOverflowError:
            blocked = True
    tau_eff = effective_time(tau_b, tau_n)
    return RelaxationReport(brownian_volume(spec), tau_b, tau_n, tau_eff, decoherence_rate(tau_eff),
                            classify_regime(tau_eff, observation_time), observation_time, blocked)


# --- alignment and rendering ------------------------------------------------


# Taylor coefficients of coth x - 1/x in odd powers: 2^2n B_2n / (2n)!
_LANGEVIN_SERIES = np.array([
    1 / 3, -1 / 45, 2 / 945, -1 / 4725, 2 / 93555, -1382 / 638512875, 4 / 18243225,
    -3617 / 162820783125, 87734 / 38979295480125, -349222 / 1531329465290625,
    310732 / 13447856940643125, -472728182 / 201919571963756521875])
_SERIES_LIMIT = 0.5  # terms shrink like (x/pi)^2; twelve reach double precision here


def langevin(x):
    """L(x) = coth x - 1/x, odd.

    Below 1e-4 the two-term series x/3 - x^3/45 is used; up to 0.5 the longer
    Taylor series, where the closed form still loses digits to cancellation.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    tiny = ax < 1e-4
    small = ax < _SERIES_LIMIT
    safe = np.where(small, 1.0, x)
    x2 = x * x
    series = x * np.polynomial.polynomial.polyval(x2, _LANGEVIN_SERIES)
    out = np.where(small, series, 1.0 / np.tanh(safe) - 1.0 / safe)
    out = np.where(tiny, x / 3.0 - x * x2 / 45.0, out)
    return out if out.ndim else float(out)


def alignment(b, spec: ParticleSpec):
    """Equilibrium alignment in [0, 1] of a particle in field ``b`` (vector or (N, 3))."""
    bmag = np.linalg.norm(np.asarray(b, dtype=float), axis=-1)
    return langevin(spec.particle_moment * bmag / spec.kT)


@dataclass(frozen=True)
class SensorSpec:
    center: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.01]))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    nx: int = 64
    ny: int = 64
    pixel_pitch: float = 1e-3
    film_thickness: float = 37.5e-6
    concentration: float = 0.0075
    b_min: float = 0.015
    u_axis: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center, "center"))
        object.__setattr__(self, "normal", as_vector(self.normal, "normal"))
        if not np.any(self.normal):
            raise UsageError("sensor normal must be nonzero")
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 8 or self.ny < 8:
            raise UsageError("sensor needs at least 8 x 8 pixels")
        if not self.pixel_pitch > 0 or not self.film_thickness > 0:
            raise UsageError("pixel_pitch and film_thickness must be > 0")
        if not 0 < self.concentration < 1:
            raise UsageError("concentration must lie in (0, 1)")
        if not self.b_min >= 0:
            raise UsageError("b_min must be >= 0")

    def grid(self) -> FieldGrid:
        u, v = plane_axes(self.normal, self.u_axis)
        origin = self.center - u * self.pixel_pitch * (self.nx - 1) / 2 - v * self.pixel_pitch * (self.ny - 1) / 2
        return FieldGrid(origin, np.array([u, v]), (self.nx, self.ny), self.pixel_pitch)


@dataclass(frozen=True, eq=False)
class ResponseImage:
    angle: np.ndarray  # [j, i], rad in [0, 2 pi)
    magnitude: np.ndarray  # [j, i], in [0, 1]
    masked: np.ndarray  # [j, i] bool
    sensor: SensorSpec
    particle: ParticleSpec

    @property
    def mask_count(self) -> int:
        return int(self.masked.sum())

    def angle_pixels(self) -> np.ndarray:
        q = np.floor(self.angle / (2 * math.pi) * 256)
        return np.clip(q, 0, 255).astype(np.uint8)

    def magnitude_pixels(self) -> np.ndarray:
        return np.clip(np.rint(self.magnitude * 255), 0, 255).astype(np.uint8)

    def sidecar_text(self) -> str:
        s, p = self.sensor, self.particle
        return key_value_text([
            ("nx", s.nx), ("ny", s.ny), ("mask_count", self.mask_count),
            ("center_m", s.center), ("normal", s.normal), ("pixel_pitch_m", s.pixel_pitch),
            ("film_thickness_m", s.film_thickness), ("concentration", s.concentration),
            ("b_min_T", s.b_min), ("particle_radius_m", p.radius), ("particle_moment_Am2", p.particle_moment),
            ("temperature_K", p.temperature), ("angle_encoding", "floor(angle/2pi*256)"),
            ("magnitude_encoding", "round(alignment*255)")])

    def write(self, stem) -> list[Path]:
        stem = Path(stem)
        return [atomic_write(stem.parent / f"{stem.name}_angle.pgm", pgm_bytes(self.angle_pixels())),
                atomic_write(stem.parent / f"{stem.name}_magnitude.pgm", pgm_bytes(self.magnitude_pixels())),
                atomic_write(stem.parent / f"{stem.name}.txt", self.sidecar_text())]


def render_response(source, sensor: SensorSpec, particle: ParticleSpec) -> ResponseImage:
    """Per-pixel in-plane field angle and Langevin alignment; |B| < b_min is idle.

    ``source`` may be None for an empty scene.
    """
    grid = sensor.grid()
    shape = (sensor.ny, sensor.nx)
    if source is None:
        b = np.zeros((sensor.nx * sensor.ny, 3))
    else:
        half = sensor.pixel_pitch * (max(sensor.nx, sensor.ny) - 1) / 2
        check_plane_clear(source, sensor.center, sensor.normal, half)
        b = b_total(source, grid.nodes())
    bmag = np.linalg.norm(b, axis=1)
    masked = bmag < sensor.b_min
    u, v = grid.axes
    angle = np.mod(np.arctan2(b @ v, b @ u), 2 * math.pi)
    angle = np.where(angle >= 2 * math.pi, 0.0, angle)  # mod can round up to 2 pi
    mag = np.clip(alignment(b, particle), 0.0, 1.0)
    angle[masked] = 0.0
    mag[masked] = 0.0
    return ResponseImage(angle.reshape(shape), np.asarray(mag).reshape(shape), masked.reshape(shape),
                         sensor, particle)


# --- temporal response ----------------------------------------------------------


def temporal_filter(series, delta: float, dt: float) -> np.ndarray:
    """First-order low-pass y[n] = y[n-1] + a (x[n] - y[n-1]), a = 1 - exp(-2 pi delta dt).

    Works on scalars or vectors per sample (first axis is time).
    """
    x = np.asarray(series, dtype=float)
    if not dt > 0:
        raise UsageError("dt must be > 0")
    if not delta >= 0:
        raise UsageError("delta must be >= 0")
    if x.shape[0] == 0:
        return x.copy()
    a = -math.expm1(-2 * math.pi * delta * dt) if math.isfinite(delta) else 1.0
    if a == 1.0:
        return x.copy()
    y = np.empty_like(x)
    y[0] = x[0]
    for n in range(1, len(x)):
        y[n] = y[n - 1] + a * (x[n] - y[n - 1])
    return y

