"""Field evaluation: dipole superposition, analytic model fields, finite-difference
operators, scalar potential and surface maps.

All evaluators take points as ``(3,)`` or ``(N, 3)`` arrays and return the
same leading shape. Dipole sums run in stored dipole order with a strictly
sequential accumulation, so a point's value does not depend on how many
other points are evaluated with it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from .errors import GeometryError, PathError, SingularityError, UsageError
from .sources import MU0, Assembly, as_vector


@dataclass(frozen=True)
class PhysicalConstants:
    mu0: float = MU0  # T m / A
    eps0: float = 8.8541878128e-12  # F/m, unused in the magnetostatic scope
    boltzmann: float = 1.38e-23  # J/K


CONSTANTS = PhysicalConstants()

_PREFACTOR = 1e-7  # mu0 / 4 pi

numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
_CHUNK_ELEMENTS = 1 << 21


# --- analytic model fields --------------------------------------------------


@dataclass(frozen=True)
class UniformField:
    b0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "b0", as_vector(self.b0, "B0"))

    def b(self, pts):
        pts = np.asarray(pts, dtype=float)
        return np.broadcast_to(self.b0, pts.shape).copy()

    def singularities(self):
        return np.zeros((0, 3)), np.zeros(0)


@dataclass(frozen=True)
class PointDipoleField:
    m: np.ndarray
    pos: np.ndarray = field(default_factory=lambda: np.zeros(3))
    exclusion_radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "m", as_vector(self.m, "m"))
        object.__setattr__(self, "pos", as_vector(self.pos, "pos"))

    def b(self, pts):
        pts = np.asarray(pts, dtype=float)
        return _dipole_sum(self.pos[None], self.m[None], pts.reshape(-1, 3)).reshape(pts.shape)

    def singularities(self):
        return self.pos[None], np.array([self.exclusion_radius])


@dataclass(frozen=True)
class SpiralVortexField:
    """Planar double-vortex stand-in for the spiral flux pattern of a dipole magnet.

    Two poles sit on the x axis at ``center +- pole_separation/2``. Around each
    pole the in-plane field points along ``pitch * r_hat + theta_hat``
    (normalized) with magnitude ``strength * core_radius / max(r, core_radius)``,
    so its integral curves are logarithmic spirals ``r = a exp(pitch * theta)``.
    The right pole is the point reflection of the left one through the centre:
    each vortex turns the opposite way when viewed from its own pole face, and
    the in-plane field cancels exactly at the midpoint. Bz is zero.
    """

    pitch: float = 0.2
    core_radius: float = 1e-3
    strength: float = 0.05
    pole_separation: float = 0.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.core_radius > 0:
            raise UsageError("core_radius must be > 0")
        if not self.pole_separation >= 0:
            raise UsageError("pole_separation must be >= 0")
        if not all(np.isfinite([self.pitch, self.strength])):
            raise UsageError("pitch and strength must be finite")
        object.__setattr__(self, "center", as_vector(self.center, "center"))

    @property
    def poles(self) -> np.ndarray:
        half = np.array([self.pole_separation / 2, 0.0, 0.0])
        return np.array([self.center - half, self.center + half])

    def _pole(self, pts, pole):
        d = pts[:, :2] - pole[:2]
        r = np.hypot(d[:, 0], d[:, 1])
        out = np.zeros((len(pts), 3))
        ok = r > 0
        rhat = d[ok] / r[ok, None]
        that = np.column_stack([-rhat[:, 1], rhat[:, 0]])
        mag = self.strength * self.core_radius / np.maximum(r[ok], self.core_radius)
        out[ok, :2] = (self.pitch * rhat + that) * (mag / math.hypot(self.pitch, 1.0))[:, None]
        return out

    def b(self, pts):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 3)
        left, right = self.poles
        return (self._pole(flat, left) + self._pole(flat, right)).reshape(pts.shape)

    def singularities(self):
        return np.zeros((0, 3)), np.zeros(0)


ModelField = UniformField | PointDipoleField | SpiralVortexField


def spiral_vortex_field(params: SpiralVortexField, p):
    return params.b(p)


# --- dipole superposition ---------------------------------------------------


def b_dipole(m, source_pos, p) -> np.ndarray:
    """Closed-form point-dipole field [T] at ``p``."""
    m = as_vector(m, "m")
    r = as_vector(p, "p") - as_vector(source_pos, "source_pos")
    r2 = r @ r
    if r2 == 0:
        raise SingularityError("point-dipole field evaluated at the source point", 0)
    # same operation order as the superposition kernel, so one-dipole sums agree bitwise
    rn = math.sqrt(r2)
    inv3 = 1.0 / (r2 * rn)
    s = 3.0 * (m[0] * r[0] + m[1] * r[1] + m[2] * r[2]) / r2
    return np.array([_PREFACTOR * (s * r[k] - m[k]) * inv3 for k in range(3)])


@numba.njit(parallel=True, cache=True)
def _exclusion_kernel(positions, radii, pts, first):  # pragma: no cover - compiled
    for q in numba.prange(pts.shape[0]):
        first[q] = -1
        for k in range(positions.shape[0]):
            dx = pts[q, 0] - positions[k, 0]
            dy = pts[q, 1] - positions[k, 1]
            dz = pts[q, 2] - positions[k, 2]
            if dx * dx + dy * dy + dz * dz < radii[k] * radii[k]:
                first[q] = k
                break


def exclusion_violations(positions, radii, pts) -> np.ndarray:
    """Per point, the index of the first dipole whose exclusion zone contains it (-1 if none)."""
    pts = np.ascontiguousarray(pts, dtype=float).reshape(-1, 3)
    first = np.full(len(pts), -1, dtype=np.int64)
    if len(positions) and len(pts) and np.any(radii > 0):
        _exclusion_kernel(np.ascontiguousarray(positions, dtype=float),
                          np.ascontiguousarray(radii, dtype=float), pts, first)
    return first


def _check_exclusion(positions, radii, pts):
    first = exclusion_violations(positions, radii, pts)
    bad = np.flatnonzero(first >= 0)
    if bad.size:
        q = int(bad[0])
        di = int(first[q])
        raise SingularityError(
            f"point {pts[q].tolist()} lies within the exclusion radius "
            f"{radii[di]:.3g} m of dipole {di}", di, q)


@numba.njit(parallel=True, cache=True)
def _dipole_kernel(positions, moments, pts, out):  # pragma: no cover - compiled
    n = positions.shape[0]
    for q in numba.prange(pts.shape[0]):
        bx = 0.0
        by = 0.0
        bz = 0.0
        px = pts[q, 0]
        py = pts[q, 1]
        pz = pts[q, 2]
        for k in range(n):
            rx = px - positions[k, 0]
            ry = py - positions[k, 1]
            rz = pz - positions[k, 2]
            r2 = rx * rx + ry * ry + rz * rz
            rn = math.sqrt(r2)
            inv3 = 1.0 / (r2 * rn)
            s = 3.0 * (moments[k, 0] * rx + moments[k, 1] * ry + moments[k, 2] * rz) / r2
            bx += 1e-7 * (s * rx - moments[k, 0]) * inv3
            by += 1e-7 * (s * ry - moments[k, 1]) * inv3
            bz += 1e-7 * (s * rz - moments[k, 2]) * inv3
        out[q, 0] = bx
        out[q, 1] = by
        out[q, 2] = bz


def _dipole_sum(positions, moments, pts):
    """Sequential per-point sum over dipoles; points may run in parallel."""
    pts = np.ascontiguousarray(pts, dtype=float)
    out = np.empty((len(pts), 3))
    if len(pts) == 0:
        return out
    _dipole_kernel(np.ascontiguousarray(positions), np.ascontiguousarray(moments), pts, out)
    bad = np.flatnonzero(~np.isfinite(out).all(axis=1))
    if bad.size:
        q = int(bad[0])
        k = np.flatnonzero(np.all(positions == pts[q], axis=1))
        di = int(k[0]) if k.size else None
        raise SingularityError(f"field evaluated exactly at dipole {di}", di, q)
    return out


def _points(p):
    arr = np.asarray(p, dtype=float)
    if arr.shape[-1] != 3:
        raise UsageError(f"points must have trailing dimension 3, got shape {arr.shape}")
    flat = arr.reshape(-1, 3)
    if not np.all(np.isfinite(flat)):
        raise UsageError("points must be finite")
    return arr, flat


def b_total(source, p) -> np.ndarray:
    """Magnetic flux density [T] of an Assembly, model field or callable at ``p``."""
    arr, flat = _points(p)
    if isinstance(source, Assembly):
        _check_exclusion(source.positions, source.exclusion_radii, flat)
        out = _dipole_sum(source.positions, source.moments, flat)
    elif hasattr(source, "b"):
        pos, rad = source.singularities()
        _check_exclusion(pos, rad, flat)
        out = np.asarray(source.b(flat), dtype=float).reshape(-1, 3)
    elif callable(source):
        out = np.asarray(source(flat), dtype=float).reshape(-1, 3)
    else:
        raise UsageError(f"not a field source: {type(source).__name__}")
    return out.reshape(arr.shape)


def h_total(source, p) -> np.ndarray:
    """H = B / mu0 [A/m] (valid outside magnetized material)."""
    return b_total(source, p) / MU0


def as_field(source, quantity: str = "B") -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized callable ``points -> vectors`` for B or H of any source."""
    if quantity == "B":
        return lambda pts: b_total(source, pts)
    if quantity == "H":
        return lambda pts: h_total(source, pts)
    raise UsageError(f"quantity must be 'B' or 'H', got {quantity!r}")


def singularities(source):
    if isinstance(source, Assembly) or hasattr(source, "singularities"):
        return source.singularities()
    return np.zeros((0, 3)), np.zeros(0)


def default_fd_step(source) -> float:
    if isinstance(source, Assembly):
        return 1e-4 * source.diameter
    raise UsageError("no default FD step for this source; pass h explicitly")


# --- finite-difference operators ------------------------------------------
# Central differences, truncation error O(h^2 * |d^3 f|).


def _fieldfn(field_):
    if isinstance(field_, Assembly) or hasattr(field_, "b"):
        return as_field(field_, "B")
    if callable(field_):
        return lambda pts: np.asarray(field_(pts), dtype=float)
    raise UsageError("field must be a source or callable")


def jacobian(field_, p, h: float) -> np.ndarray:
    """Central-difference Jacobian J[..., i, j] = d f_i / d x_j."""
    if not h > 0:
        raise UsageError("FD step h must be > 0")
    f = _fieldfn(field_)
    arr, flat = _points(p)
    eye = np.eye(3) * h
    stencil = np.concatenate([flat[:, None, :] + eye[None], flat[:, None, :] - eye[None]], axis=1)
    vals = np.asarray(f(stencil.reshape(-1, 3))).reshape(len(flat), 6, 3)
    jac = (vals[:, :3, :] - vals[:, 3:, :]) / (2 * h)  # [point, j, i]
    jac = np.swapaxes(jac, 1, 2)
    return jac.reshape(arr.shape[:-1] + (3, 3))


def divergence(field_, p, h: float):
    jac = jacobian(field_, p, h)
    return jac[..., 0, 0] + jac[..., 1, 1] + jac[..., 2, 2]


def curl(field_, p, h: float) -> np.ndarray:
    j = jacobian(field_, p, h)
    return np.stack([j[..., 2, 1] - j[..., 1, 2],
                     j[..., 0, 2] - j[..., 2, 0],
                     j[..., 1, 0] - j[..., 0, 1]], axis=-1)


def _segment_clear(a, b, source):
    pos, rad = singularities(source)
    if len(pos) == 0:
        return
    d = b - a
    dd = d @ d
    t = np.clip(((pos - a) @ d) / dd if dd > 0 else np.zeros(len(pos)), 0.0, 1.0)
    closest = a + t[:, None] * d
    dist = np.linalg.norm(pos - closest, axis=1)
    bad = dist <= np.maximum(rad, 0.0)
    if bad.any():
        i = int(np.argmax(bad))
        raise PathError(f"segment {a.tolist()} -> {b.tolist()} passes within "
                        f"{dist[i]:.3g} m of dipole {i}", i)


def scalar_potential(field_, ref_point, p, path_steps: int = 64, via=()) -> float:
    """Magnetic scalar potential psi(p) = -integral of H . dl from ``ref_point``.

    ``field_`` is either a source (its H field is integrated) or a callable
    already returning H. The path is the polyline ref -> via... -> p, each leg
    integrated with composite Simpson on ``path_steps`` panels.
    """
    if path_steps < 2 or path_steps % 2:
        raise UsageError("path_steps must be an even integer >= 2")
    is_source = isinstance(field_, Assembly) or hasattr(field_, "b")
    f = as_field(field_, "H") if is_source else _fieldfn(field_)
    nodes = [as_vector(ref_point, "ref_point")] + [as_vector(v, "via") for v in via] + [as_vector(p, "p")]
    weights = np.ones(path_steps + 1)
    weights[1:-1:2] = 4
    weights[2:-1:2] = 2
    t = np.linspace(0.0, 1.0, path_steps + 1)
    total = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        d = b - a
        if not np.any(d):
            continue
        if is_source:
            _segment_clear(a, b, field_)
        vals = np.asarray(f(a + t[:, None] * d)) @ d
        total += (weights @ vals) / (3 * path_steps)
    return -float(total)


# --- grids and surface maps ------------------------------------------------


@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Regular grid of nodes ``origin + i*spacing*axes[0] + j*spacing*axes[1] (+ k...)``.

    ``values`` is indexed ``[j, i]`` (row-major, i fastest) for planes, with a
    trailing dimension 3 for vector data.
    """

    origin: np.ndarray
    axes: np.ndarray
    counts: tuple
    spacing: float
    values: np.ndarray | None = None
    quantity: str = ""

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vector(self.origin, "origin"))
        axes = np.asarray(self.axes, dtype=float)
        if axes.ndim != 2 or axes.shape[1] != 3 or axes.shape[0] not in (2, 3):
            raise UsageError("grid needs two or three 3-vectors as axes")
        if not np.allclose(axes @ axes.T, np.eye(len(axes)), atol=1e-12):
            raise UsageError("grid axes must be orthonormal")
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != len(axes) or min(counts) < 2:
            raise UsageError("grid needs a count >= 2 per axis")
        if not self.spacing > 0:
            raise UsageError("grid spacing must be > 0")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "counts", counts)
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if v.size not in (int(np.prod(counts)), 3 * int(np.prod(counts))):
                raise UsageError("values length must equal the product of counts")

    @classmethod
    def plane(cls, center, normal=(0, 0, 1), nx: int = 64, ny: int = 64, extent: float = 0.1,
              u_axis=None) -> "FieldGrid":
        """Square ``extent`` x ``extent`` plane grid centred on ``center``."""
        normal = as_vector(normal, "normal")
        if not np.any(normal):
            raise UsageError("plane normal must be nonzero")
        u, v = plane_axes(normal, u_axis)
        spacing = extent / (max(nx, ny) - 1)
        origin = as_vector(center, "center") - u * spacing * (nx - 1) / 2 - v * spacing * (ny - 1) / 2
        return cls(origin, np.array([u, v]), (nx, ny), spacing)

    @property
    def normal(self):
        return np.cross(self.axes[0], self.axes[1])

    def nodes(self) -> np.ndarray:
        idx = [np.arange(c) for c in self.counts]
        grids = np.meshgrid(*idx[::-1], indexing="ij")[::-1]  # slowest axis first
        offs = sum(g[..., None] * self.spacing * a for g, a in zip(grids, self.axes))
        return (self.origin + offs).reshape(-1, 3)

    def node_indices(self) -> np.ndarray:
        idx = [np.arange(c) for c in self.counts]
        grids = np.meshgrid(*idx[::-1], indexing="ij")[::-1]
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def with_values(self, values, quantity: str) -> "FieldGrid":
        shape = tuple(self.counts[::-1])
        v = np.asarray(values, dtype=float)
        v = v.reshape(shape + ((3,) if v.size == 3 * np.prod(shape) else ()))
        return FieldGrid(self.origin, self.axes, self.counts, self.spacing, v, quantity)


def plane_axes(normal, u_hint=None):
    """Orthonormal in-plane axes (u, v) with u x v = n; u follows +x when possible."""
    n = as_vector(normal, "normal")
    n = n / np.linalg.norm(n)
    ref = as_vector(u_hint, "u_axis") if u_hint is not None else np.array([1.0, 0.0, 0.0])
    u = ref - (ref @ n) * n
    if np.linalg.norm(u) < 1e-9:
        ref = np.array([0.0, 1.0, 0.0])
        u = ref - (ref @ n) * n
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


QUANTITIES = ("magnitude", "bz", "in-plane-angle")


def surface_map(source, plane: FieldGrid, quantity: str = "magnitude") -> FieldGrid:
    if quantity not in QUANTITIES:
        raise UsageError(f"quantity must be one of {QUANTITIES}")
    nodes = plane.nodes()
    pos, rad = singularities(source)
    bad = np.flatnonzero(exclusion_violations(pos, rad, nodes) >= 0)
    if bad.size:
        ij = plane.node_indices()[bad]
        listed = ", ".join(f"({i},{j})" for i, j in ij[:20])
        more = f" and {len(bad) - 20} more" if len(bad) > 20 else ""
        err = SingularityError(f"{len(bad)} grid nodes inside exclusion zones: {listed}{more}")
        err.nodes = [tuple(map(int, x)) for x in ij]
        raise err
    b = b_total(source, nodes)
    if quantity == "magnitude":
        vals = np.linalg.norm(b, axis=1)
    elif quantity == "bz":
        vals = b[:, 2]
    else:
        vals = np.mod(np.arctan2(b @ plane.axes[1], b @ plane.axes[0]), 2 * math.pi)
    return plane.with_values(vals, quantity)


def local_maxima(values: np.ndarray, mask: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Interior nodes strictly greater than all 8 neighbours, as (i, j) pairs."""
    v = np.asarray(values, dtype=float)
    core = v[1:-1, 1:-1]
    is_max = np.ones_like(core, dtype=bool)
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_max &= core > v[1 + dj:v.shape[0] - 1 + dj, 1 + di:v.shape[1] - 1 + di]
    if mask is not None:
        is_max &= np.asarray(mask)[1:-1, 1:-1]
    jj, ii = np.nonzero(is_max)
    return [(int(i) + 1, int(j) + 1) for j, i in zip(jj, ii)]


def perimeter_maxima(grid: FieldGrid, center, r_inner: float, r_outer: float) -> list[tuple[int, int]]:
    """Local maxima of a plane map whose node lies in the annulus [r_inner, r_outer] about ``center``."""
    nodes = grid.nodes()
    c = as_vector(center, "center")
    d = nodes - c
    d -= np.outer(d @ grid.normal, grid.normal)
    rho = np.linalg.norm(d, axis=1).reshape(grid.values.shape[:2])
    return local_maxima(grid.values, (rho >= r_inner) & (rho <= r_outer))


def check_plane_clear(source, center, normal, half_extent: float):
    """Raise GeometryError if any magnet body or dipole zone reaches the plane patch."""
    pos, rad = singularities(source)
    if len(pos) == 0:
        return
    n = as_vector(normal, "normal")
    n = n / np.linalg.norm(n)
    c = as_vector(center, "center")
    dist = (pos - c) @ n
    inplane = pos - np.outer(dist, n) - c
    reach = np.max(np.abs(inplane), axis=1) <= half_extent + rad
    hit = reach & (np.abs(dist) < rad)
    if isinstance(source, Assembly):
        signs = np.sign(dist[reach])
        if signs.size and signs.min() < 0 < signs.max():
            raise GeometryError("sensor plane cuts through the assembly")
    if hit.any():
        raise GeometryError(f"sensor plane intersects the exclusion zone of dipole {int(np.argmax(hit))}")
