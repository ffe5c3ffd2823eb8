"""Magnet primitives and the named assemblies, discretized into point dipoles.

Every magnet is modelled as a uniformly magnetized body. Its volume is cut
into a ``resolution``-per-axis grid of cells over the shape's bounding box,
cells whose centre falls outside the shape are dropped, and each surviving
cell carries one dipole. The cell moments are rescaled so the magnet's total
moment is exactly ``M * V``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from .errors import GeometryError, UsageError

MU0 = 4e-7 * math.pi

# Remanence defaults [T]
N42_REMANENCE = 1.32
FERRITE_REMANENCE = 0.35

EXCLUSION_CELLS = 1.5


def as_vector(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise UsageError(f"{name} must have 3 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} must be finite, got {arr}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


class Rotation:
    """Proper rotation stored as an orthonormal 3x3 matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise UsageError("rotation matrix must be 3x3")
        if not np.allclose(m.T @ m, np.eye(3), rtol=0, atol=1e-12):
            raise UsageError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-12:
            raise UsageError("rotation matrix must have det +1")
        self.matrix = _frozen(m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_euler_deg(cls, angles, seq: str = "xyz") -> "Rotation":
        """Extrinsic Euler angles in degrees (scipy convention)."""
        angles = as_vector(angles, "rot_deg")
        if not np.any(angles):
            return cls.identity()
        return cls(_ScipyRotation.from_euler(seq, angles, degrees=True).as_matrix())

    @classmethod
    def about_axis(cls, axis, angle: float) -> "Rotation":
        axis = as_vector(axis, "axis")
        n = np.linalg.norm(axis)
        if n == 0:
            raise UsageError("rotation axis must be nonzero")
        return cls(_ScipyRotation.from_rotvec(axis / n * angle).as_matrix())

    def as_euler_deg(self, seq: str = "xyz") -> np.ndarray:
        if np.array_equal(self.matrix, np.eye(3)):
            return np.zeros(3)
        return _ScipyRotation.from_matrix(self.matrix).as_euler(seq, degrees=True)

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix.T

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def __eq__(self, other):
        return isinstance(other, Rotation) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        return f"Rotation(euler_deg={np.round(self.as_euler_deg(), 6).tolist()})"


@dataclass(frozen=True)
class DipoleSource:
    position: np.ndarray  # m
    moment: np.ndarray  # A m^2

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(as_vector(self.position, "position")))
        object.__setattr__(self, "moment", _frozen(as_vector(self.moment, "moment")))


# --- shapes -----------------------------------------------------------------
# Local frame: body centred at the origin; cylinder axis and plate thickness
# run along local z.


def _positive(name, *values):
    for v in values:
        if not (np.isfinite(v) and v > 0):
            raise UsageError(f"{name} dimensions must be positive, got {values}")


@dataclass(frozen=True)
class Sphere:
    radius: float

    def __post_init__(self):
        _positive("sphere", self.radius)

    @property
    def half_extents(self):
        return np.array([self.radius] * 3)

    @property
    def volume(self):
        return 4.0 / 3.0 * math.pi * self.radius**3

    def contains(self, pts):
        return np.einsum("ij,ij->i", pts, pts) <= self.radius**2 * (1 + 1e-12)


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float

    def __post_init__(self):
        _positive("cylinder", self.radius, self.height)

    @property
    def half_extents(self):
        return np.array([self.radius, self.radius, self.height / 2])

    @property
    def volume(self):
        return math.pi * self.radius**2 * self.height

    def contains(self, pts):
        rho2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        return (rho2 <= self.radius**2 * (1 + 1e-12)) & (
            np.abs(pts[:, 2]) <= self.height / 2 * (1 + 1e-12)
        )


@dataclass(frozen=True)
class Cuboid:
    lx: float
    ly: float
    lz: float

    def __post_init__(self):
        _positive("cuboid", self.lx, self.ly, self.lz)

    @property
    def half_extents(self):
        return np.array([self.lx, self.ly, self.lz]) / 2

    @property
    def volume(self):
        return self.lx * self.ly * self.lz

    def contains(self, pts):
        return np.all(np.abs(pts) <= self.half_extents * (1 + 1e-12), axis=1)


@dataclass(frozen=True)
class Plate(Cuboid):
    """Thin cuboid; ``thickness`` (local z) is the magnetization axis in the presets."""

    def __init__(self, lx: float, ly: float, thickness: float):
        super().__init__(lx, ly, thickness)

    @property
    def thickness(self):
        return self.lz


MagnetShape = Union[Sphere, Cylinder, Cuboid, Plate]


def circumradius(shape: MagnetShape) -> float:
    if isinstance(shape, Sphere):
        return shape.radius
    if isinstance(shape, Cylinder):
        return math.hypot(shape.radius, shape.height / 2)
    return float(np.linalg.norm(shape.half_extents))


@dataclass(frozen=True)
class UniformMagnetization:
    direction: np.ndarray  # unit, world frame
    magnitude: float  # A/m

    def __post_init__(self):
        d = as_vector(self.direction, "magnetization direction")
        n = np.linalg.norm(d)
        if n == 0:
            raise UsageError("magnetization direction must be nonzero")
        if not (np.isfinite(self.magnitude) and self.magnitude >= 0):
            raise UsageError(f"magnetization must be >= 0, got {self.magnitude}")
        object.__setattr__(self, "direction", _frozen(d / n))
        object.__setattr__(self, "magnitude", float(self.magnitude))

    @classmethod
    def from_remanence(cls, direction, remanence: float) -> "UniformMagnetization":
        return cls(direction, remanence / MU0)

    @property
    def remanence(self) -> float:
        return self.magnitude * MU0

    @property
    def vector(self) -> np.ndarray:
        return self.direction * self.magnitude


@dataclass(frozen=True)
class PlacedMagnet:
    shape: MagnetShape
    position: np.ndarray
    rotation: Rotation
    magnetization: UniformMagnetization

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(as_vector(self.position, "position")))

    @property
    def moment(self) -> np.ndarray:
        return self.magnetization.vector * self.shape.volume

    def transformed(self, rotation: Rotation, translation=(0.0, 0.0, 0.0)) -> "PlacedMagnet":
        """Rigid motion x -> R x + t applied to pose and magnetization."""
        r = rotation.matrix
        mag = UniformMagnetization(r @ self.magnetization.direction, self.magnetization.magnitude)
        return PlacedMagnet(
            self.shape,
            r @ self.position + as_vector(translation, "translation"),
            rotation @ self.rotation,
            mag,
        )


def _local_cells(shape: MagnetShape, resolution: int):
    half = shape.half_extents
    edges = 2 * half / resolution
    axis = (np.arange(resolution) + 0.5) / resolution * 2 - 1  # cell centres in [-1, 1]
    # lexicographic (i, j, k) order, k fastest
    g = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    centres = g * half
    return centres[shape.contains(centres)], edges


def discretize_magnet(shape: MagnetShape, magnetization: UniformMagnetization,
                      pose=None, resolution: int = 5) -> list[DipoleSource]:
    """Dipole list for one magnet. ``pose`` is (position, Rotation) or a PlacedMagnet."""
    positions, moments, _ = _discretize_arrays(shape, magnetization, pose, resolution)
    return [DipoleSource(p, m) for p, m in zip(positions, moments)]


def _discretize_arrays(shape, magnetization, pose, resolution):
    if isinstance(resolution, bool) or not isinstance(resolution, (int, np.integer)) or resolution < 1:
        raise UsageError(f"resolution must be a positive integer, got {resolution!r}")
    if pose is None:
        position, rotation = np.zeros(3), Rotation.identity()
    elif isinstance(pose, PlacedMagnet):
        position, rotation = pose.position, pose.rotation
    else:
        position, rotation = pose
        position = as_vector(position, "position")
    local, edges = _local_cells(shape, int(resolution))
    if len(local) == 0:
        raise GeometryError("no cell centre falls inside the shape")
    world = position + rotation.apply(local)
    cell_volume = float(np.prod(edges))
    # rescale so the total moment is exactly M*V
    per_cell = magnetization.vector * cell_volume * (shape.volume / (cell_volume * len(local)))
    moments = np.broadcast_to(per_cell, world.shape).copy()
    return world, moments, float(edges.max())


@dataclass(frozen=True, eq=False)
class Assembly:
    """Placed magnets plus their dipole discretization.

    Dipole arrays are stored flat, magnet by magnet, in construction order.
    ``exclusion_radii`` holds, per dipole, the radius inside which field
    evaluation is refused (1.5 cell sizes).
    """

    magnets: tuple
    resolution: int | None
    positions: np.ndarray
    moments: np.ndarray
    exclusion_radii: np.ndarray
    magnet_index: np.ndarray
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_magnets(cls, magnets: Sequence[PlacedMagnet], resolution: int = 5,
                     label: str = "", metadata: dict | None = None) -> "Assembly":
        magnets = tuple(magnets)
        if not magnets:
            raise UsageError("assembly needs at least one magnet")
        pos, mom, rad, idx = [], [], [], []
        for i, mag in enumerate(magnets):
            p, m, cell = _discretize_arrays(mag.shape, mag.magnetization, mag, resolution)
            pos.append(p)
            mom.append(m)
            rad.append(np.full(len(p), EXCLUSION_CELLS * cell))
            idx.append(np.full(len(p), i, dtype=int))
        return cls(magnets, int(resolution), _frozen(np.concatenate(pos)), _frozen(np.concatenate(mom)),
                   _frozen(np.concatenate(rad)), np.concatenate(idx), label, dict(metadata or {}))

    @classmethod
    def from_dipoles(cls, dipoles: Sequence[DipoleSource], exclusion_radius: float = 0.0,
                     label: str = "") -> "Assembly":
        if not dipoles:
            raise UsageError("assembly needs at least one dipole")
        pos = np.array([d.position for d in dipoles])
        mom = np.array([d.moment for d in dipoles])
        return cls((), None, _frozen(pos), _frozen(mom),
                   _frozen(np.full(len(pos), float(exclusion_radius))),
                   np.full(len(pos), -1, dtype=int), label, {})

    def __len__(self):
        return len(self.positions)

    @property
    def dipoles(self) -> list[DipoleSource]:
        return [DipoleSource(p, m) for p, m in zip(self.positions, self.moments)]

    @property
    def total_moment(self) -> np.ndarray:
        return self.moments.sum(axis=0)

    def magnet_moments(self) -> np.ndarray:
        """Sum of dipole moments per magnet, shape (n_magnets, 3)."""
        out = np.zeros((len(self.magnets), 3))
        np.add.at(out, self.magnet_index, self.moments)
        return out

    @property
    def centroid(self) -> np.ndarray:
        if self.magnets:
            return np.mean([m.position for m in self.magnets], axis=0)
        return self.positions.mean(axis=0)

    @property
    def diameter(self) -> float:
        """Diameter of the bounding sphere (about the centroid) of all magnet bodies."""
        c = self.centroid
        if self.magnets:
            reach = [np.linalg.norm(m.position - c) + circumradius(m.shape) for m in self.magnets]
        else:
            reach = np.linalg.norm(self.positions - c, axis=1) + self.exclusion_radii
        return 2.0 * float(max(max(reach), 1e-300))

    @property
    def characteristic_radius(self) -> float:
        return self.diameter / 2

    def transformed(self, rotation: Rotation, translation=(0.0, 0.0, 0.0)) -> "Assembly":
        if not self.magnets:
            r = rotation.matrix
            t = as_vector(translation, "translation")
            return Assembly((), None, _frozen(self.positions @ r.T + t), _frozen(self.moments @ r.T),
                            self.exclusion_radii, self.magnet_index, self.label, dict(self.metadata))
        return Assembly.from_magnets([m.transformed(rotation, translation) for m in self.magnets],
                                     self.resolution, self.label, self.metadata)

    def union(self, other: "Assembly") -> "Assembly":
        offset = len(self.magnets)
        idx = np.where(other.magnet_index >= 0, other.magnet_index + offset, -1)
        res = self.resolution if self.resolution == other.resolution else None
        return Assembly(self.magnets + other.magnets, res,
                        _frozen(np.concatenate([self.positions, other.positions])),
                        _frozen(np.concatenate([self.moments, other.moments])),
                        _frozen(np.concatenate([self.exclusion_radii, other.exclusion_radii])),
                        np.concatenate([self.magnet_index, idx]), self.label, {})

    def singularities(self):
        return self.positions, self.exclusion_radii


# --- presets ----------------------------------------------------------------


def _nd_magnetization(direction, remanence):
    return UniformMagnetization.from_remanence(direction, remanence)


def single_magnet(shape: MagnetShape, direction=(0, 0, 1), remanence: float = N42_REMANENCE,
                  position=(0, 0, 0), rotation: Rotation | None = None,
                  resolution: int = 5) -> Assembly:
    mag = PlacedMagnet(shape, position, rotation or Rotation.identity(),
                       _nd_magnetization(direction, remanence))
    return Assembly.from_magnets([mag], resolution, label="single")


HALBACH_SEQUENCE = ((0, 1, 0), (1, 0, 0), (0, -1, 0), (-1, 0, 0))


def build_halbach_linear(n: int = 5, element: MagnetShape | None = None, gap: float = 0.0,
                         remanence: float = N42_REMANENCE, resolution: int = 5) -> Assembly:
    """Linear Halbach row with magnetization +y, +x, -y, -x, ... per element.

    Elements are laid out along x, element 0 at the +x end, so that this
    sequence concentrates flux on the +y side (the array's working face).
    """
    if isinstance(n, bool) or int(n) != n or n < 3:
        raise UsageError(f"Halbach array needs n >= 3 elements, got {n}")
    n = int(n)
    element = element or Cuboid(0.01, 0.01, 0.01)
    if gap < 0:
        raise UsageError("gap must be >= 0")
    pitch = 2 * element.half_extents[0] + gap
    magnets = []
    for k in range(n):
        x = ((n - 1) / 2 - k) * pitch
        magnets.append(PlacedMagnet(element, (x, 0.0, 0.0), Rotation.identity(),
                                    _nd_magnetization(HALBACH_SEQUENCE[k % 4], remanence)))
    return Assembly.from_magnets(magnets, resolution, label="halbach",
                                 metadata={"n": n, "gap": gap, "strong_side": "+y"})


def build_ring_twister(n: int = 12, plate: MagnetShape | None = None, ring_radius: float = 0.03,
                       skew: float = math.radians(15.0), remanence: float = N42_REMANENCE,
                       resolution: int = 5) -> Assembly:
    """Ring of vertical plates magnetized through their thickness (azimuthally).

    Plate k sits at azimuth 2*pi*k/n with its face normal along the azimuthal
    direction, then is turned by ``skew`` about its radial axis. Positive skew
    tilts every magnetization towards +z. Plates are centred on z = 0.
    """
    if isinstance(n, bool) or int(n) != n or n < 3:
        raise UsageError(f"ring needs n >= 3 plates, got {n}")
    n = int(n)
    plate = plate or Plate(0.01, 0.01, 0.001)
    half = plate.half_extents
    if ring_radius <= max(half[0], half[1]):
        raise UsageError("ring_radius must exceed the plate's half extent")
    diagonal = 2 * math.hypot(half[0], half[1])
    spacing = 2 * ring_radius * math.sin(math.pi / n)
    if spacing < diagonal:
        raise GeometryError(
            f"plates overlap: centre spacing {spacing:.4g} m < plate diagonal {diagonal:.4g} m")
    z = np.array([0.0, 0.0, 1.0])
    magnets = []
    for k in range(n):
        phi = 2 * math.pi * k / n
        radial = np.array([math.cos(phi), math.sin(phi), 0.0])
        azimuthal = np.array([-math.sin(phi), math.cos(phi), 0.0])
        # local x -> vertical, local y -> radial, local z (normal) -> azimuthal
        base = Rotation(np.column_stack([z, radial, azimuthal]))
        rot = Rotation.about_axis(radial, skew) @ base if skew else base
        magnets.append(PlacedMagnet(plate, ring_radius * radial, rot,
                                    _nd_magnetization(rot.matrix[:, 2], remanence)))
    return Assembly.from_magnets(magnets, resolution, label="ring",
                                 metadata={"n": n, "ring_radius": ring_radius, "skew": skew})


LATTICE_ROWS = {19: (3, 4, 5, 4, 3), 21: (1, 2, 3, 4, 5, 6)}


def triangular_sites(count: int, spacing: float) -> np.ndarray:
    """Close-packed site centres (z = 0), centred on their centroid, row by row."""
    if count not in LATTICE_ROWS:
        raise UsageError(f"unsupported lattice count {count}; choose one of {sorted(LATTICE_ROWS)}")
    rows = LATTICE_ROWS[count]
    dy = spacing * math.sqrt(3) / 2
    pts = []
    for r, m in enumerate(rows):
        y = r * dy
        for c in range(m):
            pts.append((c * spacing - (m - 1) * spacing / 2, y, 0.0))
    pts = np.array(pts)
    return pts - pts.mean(axis=0)


def build_triangular_lattice(count: int = 19, sphere_d: float = 0.005, moment_pattern="parallel",
                             remanence: float = N42_REMANENCE, resolution: int = 5) -> Assembly:
    """Touching spheres on a triangular lattice.

    ``moment_pattern``: "parallel" (all +z), "alternating" (in-plane, +x/-x
    alternating along each row), or an explicit sequence of direction vectors.
    """
    sites = triangular_sites(count, sphere_d)
    if isinstance(moment_pattern, str):
        if moment_pattern == "parallel":
            dirs = [(0, 0, 1)] * len(sites)
        elif moment_pattern == "alternating":
            dirs = []
            for m in LATTICE_ROWS[count]:
                dirs += [(1, 0, 0) if c % 2 == 0 else (-1, 0, 0) for c in range(m)]
        else:
            raise UsageError(f"unknown moment pattern {moment_pattern!r}")
    else:
        dirs = list(moment_pattern)
        if len(dirs) != len(sites):
            raise UsageError(f"moment_pattern needs {len(sites)} directions, got {len(dirs)}")
    shape = Sphere(sphere_d / 2)
    magnets = [PlacedMagnet(shape, p, Rotation.identity(), _nd_magnetization(d, remanence))
               for p, d in zip(sites, dirs)]
    return Assembly.from_magnets(magnets, resolution, label="lattice",
                                 metadata={"count": count, "rows": LATTICE_ROWS[count]})


def grid_pattern(name: str, rows: int = 4, cols: int = 4) -> list[int]:
    if name == "checkerboard":
        return [1 if (r + c) % 2 == 0 else -1 for r in range(rows) for c in range(cols)]
    if name in ("up", "all-up", "parallel"):
        return [1] * (rows * cols)
    if name == "stripes":
        return [1 if r % 2 == 0 else -1 for r in range(rows) for c in range(cols)]
    raise UsageError(f"unknown grid pattern {name!r}")


def build_grid_array(rows: int = 4, cols: int = 4, disk: MagnetShape | None = None,
                     orientations="checkerboard", grade_remanence: float = N42_REMANENCE,
                     gap: float = 0.0, resolution: int = 5) -> Assembly:
    """rows x cols disks in contact on a square grid, each magnetized +z or -z.

    ``orientations`` is a pattern name or a row-major sequence of +1/-1.
    """
    disk = disk or Cylinder(0.005, 0.004)
    if isinstance(orientations, str):
        orientations = grid_pattern(orientations, rows, cols)
    orientations = list(orientations)
    if len(orientations) != rows * cols:
        raise UsageError(f"orientations needs {rows * cols} entries, got {len(orientations)}")
    if any(o not in (1, -1) for o in orientations):
        raise UsageError("orientations entries must be +1 or -1")
    pitch = 2 * disk.half_extents[0] + gap
    magnets = []
    for r in range(rows):
        for c in range(cols):
            x = (c - (cols - 1) / 2) * pitch
            y = ((rows - 1) / 2 - r) * pitch
            s = orientations[r * cols + c]
            magnets.append(PlacedMagnet(disk, (x, y, 0.0), Rotation.identity(),
                                        _nd_magnetization((0, 0, s), grade_remanence)))
    return Assembly.from_magnets(magnets, resolution, label="grid",
                                 metadata={"rows": rows, "cols": cols})
