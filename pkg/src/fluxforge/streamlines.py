"""Field-line tracing with fixed-step RK4 on the unit tangent B/|B|."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateSeedError, FluxError, SingularityError, UsageError
from .fields import PointDipoleField, b_total, plane_axes, singularities
from .sources import as_vector

TERMINATIONS = ("left_bounds", "hit_singularity", "max_steps", "closed_loop")
MIN_LOOP_STEPS = 10
LOOP_ALIGNMENT = 0.99


@dataclass(frozen=True)
class IntegratorConfig:
    step: float
    max_steps: int
    bounds: tuple  # (lo, hi) corner vectors
    closure_eps: float
    direction: str = "forward"

    def __post_init__(self):
        lo, hi = (as_vector(b, "bounds") for b in self.bounds)
        if not np.all(hi > lo):
            raise UsageError("bounds must satisfy lo < hi on every axis")
        if not self.step > 0:
            raise UsageError("step must be > 0")
        if int(self.max_steps) != self.max_steps or self.max_steps < 1:
            raise UsageError("max_steps must be a positive integer")
        if not self.closure_eps > 0:
            raise UsageError("closure_eps must be > 0")
        if self.direction not in ("forward", "backward", "both"):
            raise UsageError("direction must be forward, backward or both")
        object.__setattr__(self, "bounds", (lo, hi))
        object.__setattr__(self, "max_steps", int(self.max_steps))

    @classmethod
    def for_bounds(cls, lo, hi, step=None, max_steps: int = 20000, closure_eps=None,
                   direction: str = "forward") -> "IntegratorConfig":
        """Defaults: step = box diagonal / 2000, closure_eps = step."""
        lo, hi = as_vector(lo, "lo"), as_vector(hi, "hi")
        step = float(np.linalg.norm(hi - lo)) / 2000 if step is None else step
        return cls(step, max_steps, (lo, hi), closure_eps or step, direction)

    def inside(self, p) -> bool:
        lo, hi = self.bounds
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(frozen=True, eq=False)
class Streamline:
    points: np.ndarray  # (n, 3)
    termination: str
    # for direction="both": termination of the backward half
    termination_backward: str | None = None

    def __len__(self):
        return len(self.points)


class _Stop(Exception):
    pass


def _tangent(field, p):
    try:
        b = b_total(field, p[None])[0]
    except SingularityError:
        raise _Stop
    n = math.sqrt(b @ b)
    if not (n > 0 and math.isfinite(n)):
        raise _Stop
    return b / n


def _guards(field, step):
    pos, rad = singularities(field)
    return pos, np.maximum(rad, step)


def _near_singularity(p, pos, guard):
    if len(pos) == 0:
        return False
    d = pos - p
    return bool(np.any(np.einsum("ij,ij->i", d, d) < guard * guard))


def _integrate(field, seed, cfg: IntegratorConfig, sign: float):
    h = sign * cfg.step
    pos, guard = _guards(field, cfg.step)
    pts = [seed]
    p = seed
    t0 = _tangent(field, seed)
    for n in range(1, cfg.max_steps + 1):
        try:
            k1 = _tangent(field, p)
            k2 = _tangent(field, p + 0.5 * h * k1)
            k3 = _tangent(field, p + 0.5 * h * k2)
            k4 = _tangent(field, p + h * k3)
        except _Stop:
            return pts, "hit_singularity"
        q = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not cfg.inside(q):
            return pts, "left_bounds"
        if _near_singularity(q, pos, guard):
            return pts, "hit_singularity"
        pts.append(q)
        p = q
        if n >= MIN_LOOP_STEPS and np.linalg.norm(q - seed) < cfg.closure_eps:
            try:
                if _tangent(field, q) @ t0 > LOOP_ALIGNMENT:
                    return pts, "closed_loop"
            except _Stop:
                return pts, "hit_singularity"
    return pts, "max_steps"


def trace(field, seed, config: IntegratorConfig) -> Streamline:
    """Integrate dp/ds = B/|B| from ``seed`` until a termination condition."""
    seed = as_vector(seed, "seed")
    if not config.inside(seed):
        raise UsageError(f"seed {seed.tolist()} lies outside the integration bounds")
    b = b_total(field, seed[None])[0]  # raises SingularityError inside exclusion zones
    if not np.any(b) or not np.all(np.isfinite(b)):
        raise DegenerateSeedError(f"degenerate seed: zero field at {seed.tolist()}")
    if config.direction == "forward":
        pts, why = _integrate(field, seed, config, 1.0)
        return Streamline(np.array(pts), why)
    if config.direction == "backward":
        pts, why = _integrate(field, seed, config, -1.0)
        return Streamline(np.array(pts), why)
    back, why_b = _integrate(field, seed, config, -1.0)
    fwd, why_f = _integrate(field, seed, config, 1.0)
    return Streamline(np.array(back[::-1] + fwd[1:]), why_f, why_b)


def seed_ring(center, normal, radius: float, n: int) -> list[np.ndarray]:
    """``n`` seeds equally spaced on a circle, starting along the in-plane +x direction."""
    normal = as_vector(normal, "normal")
    if not np.any(normal):
        raise UsageError("seed ring normal must be nonzero")
    if not radius > 0:
        raise UsageError("seed ring radius must be > 0")
    if int(n) != n or n < 1:
        raise UsageError("seed ring needs n >= 1")
    center = as_vector(center, "center")
    u, v = plane_axes(normal)
    return [center + radius * (math.cos(2 * math.pi * k / n) * u + math.sin(2 * math.pi * k / n) * v)
            for k in range(int(n))]


class TraceBatchError(FluxError):
    """Some seeds failed. ``results`` holds a Streamline or None per seed, ``errors`` maps index -> exception."""

    def __init__(self, results, errors):
        self.results = results
        self.errors = errors
        detail = "; ".join(f"seed {i}: {e}" for i, e in sorted(errors.items()))
        super().__init__(f"{len(errors)} of {len(results)} seeds failed: {detail}")


def _concurrent_kernels_ok() -> bool:
    """The workqueue threading layer aborts on concurrent parallel launches."""
    try:
        return numba.threading_layer() != "workqueue"
    except ValueError:  # no parallel kernel has run yet in this process
        b_total(PointDipoleField([0.0, 0.0, 1.0]), np.ones((1, 3)))
        return numba.threading_layer() != "workqueue"


def trace_set(field, seeds, config: IntegratorConfig, workers: int = 1) -> list[Streamline]:
    """Trace every seed; output order follows seed order regardless of ``workers``."""
    seeds = list(seeds)

    def one(s):
        try:
            return trace(field, s, config), None
        except FluxError as exc:
            return None, exc

    if workers > 1 and len(seeds) > 1 and _concurrent_kernels_ok():
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, seeds))
    else:
        out = [one(s) for s in seeds]
    results = [r for r, _ in out]
    errors = {i: e for i, (_, e) in enumerate(out) if e is not None}
    if errors:
        raise TraceBatchError(results, errors)
    return results
