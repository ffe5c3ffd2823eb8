"""Spiral-arm fitting of digitized traces and conservativity checks of static fields."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import (DegenerateFitError, InsufficientDataError, NotASingleArmError, ParseError,
                     SingularityError, UsageError)
from .fields import as_field, curl, default_fd_step, jacobian, plane_axes, singularities
from .io import csv_text, key_value_text
from .sources import MU0, Assembly

MIN_TRACE_POINTS = 8
_ROUNDING = 64 * np.finfo(float).eps  # ln r spreads below this are indistinguishable from a circle
UNITS = ("pixel", "meter")


# --- traces --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trace:
    xy: np.ndarray  # (n, 2)
    unit: str = "meter"
    origin_hint: tuple | None = None

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise UsageError("trace points must be an (n, 2) array")
        if len(xy) < MIN_TRACE_POINTS:
            raise InsufficientDataError(f"trace has {len(xy)} points, need at least {MIN_TRACE_POINTS}")
        if not np.all(np.isfinite(xy)):
            raise UsageError("trace points must be finite")
        dup = np.flatnonzero(np.all(xy[1:] == xy[:-1], axis=1))
        if dup.size:
            raise UsageError(f"consecutive duplicate points at index {int(dup[0]) + 1}")
        if self.unit not in UNITS:
            raise UsageError(f"unit must be one of {UNITS}")
        object.__setattr__(self, "xy", xy)

    def __len__(self):
        return len(self.xy)

    def scaled(self, s: float) -> "Trace":
        return Trace(self.xy * s, self.unit, self.origin_hint)


def load_trace(path, unit: str = "meter") -> Trace:
    """Read an ``x,y`` CSV. Line numbers in errors count the header as line 1."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise UsageError(f"trace file not found: {path.name}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip().lower() for c in rows[0]] != ["x", "y"]:
        raise ParseError("expected header 'x,y'", 1)
    pts = []
    for n, row in enumerate(rows[1:], 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", n)
        try:
            p = (float(row[0]), float(row[1]))
        except ValueError:
            raise ParseError(f"non-numeric value in {row!r}", n) from None
        if not all(map(math.isfinite, p)):
            raise ParseError("non-finite value", n)
        pts.append(p)
    if len(pts) < MIN_TRACE_POINTS:
        raise InsufficientDataError(f"trace has {len(pts)} points, need at least {MIN_TRACE_POINTS}")
    return Trace(np.array(pts), unit)


@dataclass(frozen=True, eq=False)
class PolarTrace:
    theta: np.ndarray  # unwrapped, rad
    r: np.ndarray
    origin: tuple
    dropped: tuple = ()  # indices removed as single-sample reversals

    def __post_init__(self):
        if len(self.theta) != len(self.r):
            raise UsageError("theta and r lengths differ")
        if not np.all(self.r > 0):
            raise UsageError("r must be > 0")
        d = np.diff(self.theta)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise NotASingleArmError("theta is not strictly monotone")

    def __len__(self):
        return len(self.r)


def _unwrap(xy, origin):
    d = xy - origin
    r = np.hypot(d[:, 0], d[:, 1])
    if np.any(r == 0):
        i = int(np.flatnonzero(r == 0)[0])
        raise SingularityError(f"trace point {i} coincides with the origin", point_index=i)
    ang = np.arctan2(d[:, 1], d[:, 0])
    step = np.diff(ang)
    step = step - 2 * math.pi * np.ceil((step - math.pi) / (2 * math.pi))  # into (-pi, pi]
    return np.concatenate([[ang[0]], ang[0] + np.cumsum(step)]), r


def to_polar(trace: Trace, origin=(0.0, 0.0)) -> PolarTrace:
    """Polar form about ``origin`` with theta unwrapped sample to sample.

    A single sample that steps against the winding direction (digitization
    jitter) is dropped; any further reversal is rejected.
    """
    o = np.asarray(origin, dtype=float)
    theta, r = _unwrap(trace.xy, o)
    steps = np.diff(theta)
    if np.any(steps == 0):
        raise NotASingleArmError("trace has zero angular steps")
    sense = 1.0 if np.sum(np.sign(steps)) >= 0 else -1.0
    bad = np.flatnonzero(np.sign(steps) != sense)
    dropped = ()
    if bad.size:
        for k in (int(bad[0]) + 1, int(bad[0])):  # the sample after or before the backward step
            keep = np.delete(np.arange(len(theta)), k)
            if np.all(np.sign(np.diff(theta[keep])) == sense):
                theta, r, dropped = theta[keep], r[keep], (k,)
                break
        else:
            raise NotASingleArmError(f"winding reverses at {bad.size} steps; not a single spiral arm")
    return PolarTrace(theta, r, (float(o[0]), float(o[1])), dropped)


# --- logarithmic spiral fit ----------------------------------------------------


@dataclass(frozen=True)
class SpiralFit:
    a: float
    b: float
    r_squared: float
    rms_residual: float
    n_points: int

    def predict(self, theta):
        return self.a * np.exp(self.b * np.asarray(theta, dtype=float))

    def as_text(self) -> str:
        return key_value_text([("a", self.a), ("b", self.b), ("r_squared", self.r_squared),
                               ("rms_residual_ln_r", self.rms_residual), ("n_points", self.n_points)])


def fit_log_spiral(polar: PolarTrace) -> SpiralFit:
    """Least squares of ln r = ln a + b theta."""
    th = np.asarray(polar.theta, dtype=float)
    y = np.log(polar.r)
    tm, ym = th.mean(), y.mean()
    dt, dy = th - tm, y - ym
    sxx = dt @ dt
    if not sxx > 0:
        raise DegenerateFitError("theta has zero variance")
    b = (dt @ dy) / sxx
    c = ym - b * tm
    resid = y - (c + b * th)
    ss_res = resid @ resid
    ss_tot = dy @ dy
    if ss_tot <= len(y) * (_ROUNDING * (1.0 + abs(ym))) ** 2:
        b, c, r2 = 0.0, ym, 1.0  # constant radius to rounding: a circle
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return SpiralFit(math.exp(c), float(b), float(r2), float(math.sqrt(ss_res / len(y))), len(y))


def radius_growth_check(polar: PolarTrace, fit: SpiralFit) -> float:
    """Max relative mismatch between the finite-difference dr/dtheta and b r.

    For b = 0 the value returned is max |dr/dtheta| / r.
    """
    if len(polar) < 3:
        raise InsufficientDataError("need at least 3 points")
    drdt = np.gradient(polar.r, polar.theta)[1:-1]
    r = polar.r[1:-1]
    if fit.b == 0:
        return float(np.max(np.abs(drdt) / r))
    return float(np.max(np.abs(drdt - fit.b * r) / np.abs(fit.b * r)))


def search_origin(trace: Trace, center=None, span=None, levels: int = 4, n: int = 9):
    """Coarse-to-fine grid search for the origin minimizing fit rms (a heuristic)."""
    xy = trace.xy
    c = np.asarray(center if center is not None else xy.mean(axis=0), dtype=float)
    half = span if span is not None else 0.5 * float(np.ptp(xy, axis=0).max())
    best = None
    for _ in range(levels):
        for ox in np.linspace(c[0] - half, c[0] + half, n):
            for oy in np.linspace(c[1] - half, c[1] + half, n):
                try:
                    fit = fit_log_spiral(to_polar(trace, (ox, oy)))
                except (NotASingleArmError, SingularityError, DegenerateFitError):
                    continue
                if best is None or fit.rms_residual < best[1].rms_residual:
                    best = ((float(ox), float(oy)), fit)
        if best is None:
            break
        c = np.array(best[0])
        half *= 2.0 / (n - 1)
    if best is None:
        raise NotASingleArmError("no origin in the search window yields a single arm")
    return best


def spiral_plot_csv(polar: PolarTrace, fit: SpiralFit) -> str:
    ln_r = np.log(polar.r)
    rows = zip(polar.theta, polar.r, ln_r, math.log(fit.a) + fit.b * polar.theta)
    return csv_text(("theta", "r", "ln_r", "fit_ln_r"), rows)


def loglog_plot_csv(polar: PolarTrace) -> str:
    """ln r against ln |theta - theta_0 + 1|, a monotone companion view of the same data."""
    s = np.abs(polar.theta - polar.theta[0]) + 1.0
    return csv_text(("ln_theta_span", "ln_r"), zip(np.log(s), np.log(polar.r)))


# --- closed loops and work integrals -------------------------------------------


@dataclass(frozen=True, eq=False)
class Loop:
    """Closed curve; ``position(t)``/``velocity(t)`` on t in [0, 1), or a closed polyline."""

    position: Callable | None = None
    velocity: Callable | None = None
    vertices: np.ndarray | None = None
    name: str = ""

    def length(self, segments: int = 1024) -> float:
        pts = self.points(segments)
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def points(self, segments: int) -> np.ndarray:
        if self.vertices is not None:
            return self.vertices
        return self.position(np.linspace(0.0, 1.0, segments + 1))

    def segments(self, segments: int):
        """(midpoints, dr) for the midpoint rule."""
        if self.vertices is not None:
            v = self.vertices
            return 0.5 * (v[1:] + v[:-1]), np.diff(v, axis=0)
        t = (np.arange(segments) + 0.5) / segments
        return self.position(t), self.velocity(t) / segments


def circle_loop(center=(0, 0, 0), radius: float = 1.0, normal=(0, 0, 1)) -> Loop:
    c = np.asarray(center, dtype=float)
    u, v = plane_axes(normal)

    def pos(t):
        a = 2 * math.pi * np.asarray(t)[:, None]
        return c + radius * (np.cos(a) * u + np.sin(a) * v)

    def vel(t):
        a = 2 * math.pi * np.asarray(t)[:, None]
        return 2 * math.pi * radius * (-np.sin(a) * u + np.cos(a) * v)

    return Loop(pos, vel, name=f"circle r={radius:g}")


def square_loop(center=(0, 0, 0), side: float = 1.0, normal=(0, 0, 1)) -> Loop:
    c = np.asarray(center, dtype=float)
    u, v = plane_axes(normal)
    corners = np.array([(-1, -1), (1, -1), (1, 1), (-1, 1)]) * side / 2

    def pos(t):
        s = 4 * np.mod(np.asarray(t), 1.0)
        k = np.minimum(s.astype(int), 3)
        f = (s - k)[:, None]
        p = corners[k] + f * (corners[(k + 1) % 4] - corners[k])
        return c + p[:, :1] * u + p[:, 1:] * v

    def vel(t):
        k = np.minimum((4 * np.mod(np.asarray(t), 1.0)).astype(int), 3)
        d = 4 * (corners[(k + 1) % 4] - corners[k])
        return d[:, :1] * u + d[:, 1:] * v

    return Loop(pos, vel, name=f"square side={side:g}")


def polyline_loop(vertices, tol: float = 1e-12) -> Loop:
    v = np.asarray(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 3 or len(v) < 2:
        raise UsageError("polyline needs (n, 3) vertices")
    if np.linalg.norm(v[0] - v[-1]) > tol:
        raise UsageError("polyline loop is open: first and last points differ")
    return Loop(vertices=v, name="polyline")


def _refine_polyline(v):
    mids = 0.5 * (v[1:] + v[:-1])
    out = np.empty((2 * len(v) - 1, 3))
    out[0::2] = v
    out[1::2] = mids
    return out


@dataclass(frozen=True)
class WorkResult:
    W: float
    segments: int
    W_refined: float  # same loop at twice the segments

    @property
    def refinement_delta(self) -> float:
        return abs(self.W_refined - self.W)


def _work(force, loop: Loop, segments: int, speed):
    mids, dr = loop.segments(segments)
    ds = np.linalg.norm(dr, axis=1, keepdims=True)
    tangent = np.divide(dr, ds, out=np.zeros_like(dr), where=ds > 0)
    v = tangent * np.asarray(speed(mids) if callable(speed) else speed, dtype=float).reshape(-1, 1)
    f = np.asarray(force(mids, v), dtype=float)
    return float(np.einsum("ij,ij->", f, dr))


def work_integral(force: Callable, loop: Loop, segments: int = 1024, speed=1.0) -> WorkResult:
    """Midpoint-rule W = sum F(p_mid, v_mid) . dr, with v tangent to the loop.

    ``force(points, velocities)`` is vectorized; ``speed`` is a constant or a
    function of position.
    """
    if loop.vertices is not None:
        segments = len(loop.vertices) - 1
    if segments < 16:
        raise UsageError("work integral needs at least 16 segments")
    w = _work(force, loop, segments, speed)
    if loop.vertices is not None:
        fine = Loop(vertices=_refine_polyline(loop.vertices))
        w2 = _work(force, fine, 2 * segments, speed)
    else:
        w2 = _work(force, loop, 2 * segments, speed)
    return WorkResult(w, segments, w2)


def magnetic_force(source, q: float = 1.0):
    """F(p, v) = q v x B(p)."""
    b = as_field(source, "B")
    return lambda p, v: q * np.cross(v, b(p))


def curl_force_check(source, q: float, v, points, h: float) -> float:
    """Max over ``points`` of |curl(q v x B) + q (v . grad) B| / (q |v| |B| / L).

    L is the distance from the point to the nearest singularity, or 1 m for
    fields without one. Both sides are central differences with step ``h``.
    """
    v = np.asarray(v, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if q == 0 or not np.any(v):
        return 0.0
    bf = as_field(source, "B")
    lhs = curl(lambda p: q * np.cross(v, bf(p)), pts, h)
    jac = jacobian(bf, pts, h)  # J[i, j] = dB_i/dx_j
    rhs = -q * np.einsum("nij,j->ni", jac, v)
    bmag = np.linalg.norm(bf(pts), axis=1)
    pos, _ = singularities(source)
    if len(pos):
        L = np.min(np.linalg.norm(pts[:, None, :] - pos[None], axis=2), axis=1)
    else:
        L = np.ones(len(pts))
    scale = abs(q) * np.linalg.norm(v) * bmag / L
    diff = np.linalg.norm(lhs - rhs, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, diff / scale, np.where(diff > 0, np.inf, 0.0))
    return float(rel.max())


# --- conservativity report ---------------------------------------------------------


DEFAULT_TOLERANCES = {"div": 1e-6, "curl": 1e-6, "work": 1e-12}


@dataclass(frozen=True)
class ConservativityReport:
    max_abs_div: float  # |div B| L / |B|, L = assembly diameter
    max_abs_curl_H: float  # |curl H| L / |H|
    closed_loop_work: float | None  # max normalized |W| over loops, None if not run
    work_segments: int | None
    curl_force_residual: float
    passed: dict
    notes: tuple
    n_samples: int = 0

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def as_text(self) -> str:
        w = "not-run" if self.closed_loop_work is None else self.closed_loop_work
        items = [("n_samples", self.n_samples), ("max_abs_div", self.max_abs_div),
                 ("max_abs_curl_H", self.max_abs_curl_H), ("closed_loop_work", w),
                 ("work_segments", "not-run" if self.work_segments is None else self.work_segments),
                 ("curl_force_residual", self.curl_force_residual)]
        items += [(f"check_{k}", "pass" if ok else "FAIL") for k, ok in self.passed.items()]
        items += [("verdict", "conservative" if self.all_passed else "not-conservative")]
        return key_value_text(items) + "".join(f"note={n}\n" for n in self.notes)


def shell_samples(center, r_inner: float, r_outer: float, n: int, seed: int = 0) -> np.ndarray:
    """Scrambled-Halton points uniformly filling the spherical shell [r_inner, r_outer]."""
    if not 0 < r_inner <= r_outer:
        raise UsageError("shell needs 0 < r_inner <= r_outer")
    u = qmc.Halton(d=3, scramble=True, seed=seed).random(n)
    r = np.cbrt(r_inner ** 3 + u[:, 0] * (r_outer ** 3 - r_inner ** 3))
    cz = 2 * u[:, 1] - 1
    phi = 2 * math.pi * u[:, 2]
    s = np.sqrt(1 - cz * cz)
    return np.asarray(center, dtype=float) + r[:, None] * np.column_stack([s * np.cos(phi), s * np.sin(phi), cz])


@dataclass(frozen=True)
class Region:
    """Spherical shell about ``center`` in units of the characteristic radius."""

    inner: float = 3.0
    outer: float = 6.0
    n: int = 1000
    seed: int = 0
    center: tuple | None = None


def solenoidal_checks(source, points, h: float, length: float = 1.0):
    """Per-point |div B| L / |B| and |curl H| L / |H| (central differences)."""
    bf = as_field(source, "B")
    jb = jacobian(bf, points, h)
    jh = jacobian(as_field(source, "H"), points, h)
    bmag = np.linalg.norm(bf(points), axis=1)
    hmag = bmag / MU0
    div = jb[:, 0, 0] + jb[:, 1, 1] + jb[:, 2, 2]
    cur = np.stack([jh[:, 2, 1] - jh[:, 1, 2], jh[:, 0, 2] - jh[:, 2, 0], jh[:, 1, 0] - jh[:, 0, 1]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nd = np.where(bmag > 0, np.abs(div) * length / bmag, np.abs(div))
        nc = np.where(hmag > 0, np.linalg.norm(cur, axis=1) * length / hmag, np.linalg.norm(cur, axis=1))
    return nd, nc


def conservativity_report(source, region: Region = Region(), loops=(), tolerances=None,
                          h: float | None = None, q: float = 1.0, v=(1.0, 0.0, 0.0),
                          curl_force_samples: int = 100) -> ConservativityReport:
    """Divergence, curl, closed-loop work and curl-of-force checks over a sample shell.

    ``source`` is an Assembly or any field source; ``loops`` are Loop objects.
    Work is normalized by q |v|max |B|max L_loop.
    """
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    if isinstance(source, Assembly):
        R = source.characteristic_radius
        L = source.diameter
        c = source.centroid if region.center is None else np.asarray(region.center, dtype=float)
        h = default_fd_step(source) if h is None else h
    else:
        R = L = 1.0
        c = np.zeros(3) if region.center is None else np.asarray(region.center, dtype=float)
        if h is None:
            raise UsageError("pass the FD step h for non-assembly sources")
    pts = shell_samples(c, region.inner * R, region.outer * R, region.n, region.seed)
    div, cur = solenoidal_checks(source, pts, h, L)
    cf = curl_force_check(source, q, v, pts[:curl_force_samples], h)
    work, segs = None, None
    if loops:
        bf = as_field(source, "B")
        force = magnetic_force(source, q)
        norm = []
        for lp in loops:
            res = work_integral(force, lp)
            bmax = float(np.max(np.linalg.norm(bf(lp.points(res.segments)), axis=1)))
            scale = abs(q) * bmax * lp.length(res.segments)
            norm.append(abs(res.W) / scale if scale > 0 else abs(res.W))
            segs = res.segments
        work = float(max(norm))
    passed = {"divergence": bool(div.max() <= tol["div"]),
              "curl_H": bool(cur.max() <= tol["curl"])}
    if work is not None:
        passed["work"] = work <= tol["work"]
    notes = [f"{name} check {'passed' if ok else 'FAILED'} at tolerance {tol[key]:g}"
             for (name, ok), key in zip(passed.items(), ("div", "curl", "work"))]
    if work is None:
        notes.append("work check not-run: no loops given")
    return ConservativityReport(float(div.max()), float(cur.max()), work, segs, cf, passed, tuple(notes),
                                len(pts))


def default_loops(source: Assembly, radius_factor: float = 4.0) -> list[Loop]:
    """Two circles about the centroid in the xy and xz planes."""
    R = radius_factor * source.characteristic_radius
    c = source.centroid
    return [circle_loop(c, R, (0, 0, 1)), circle_loop(c, R, (0, 1, 0))]
