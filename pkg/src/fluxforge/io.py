"""File formats: assembly descriptions, dipole/grid/streamline CSVs, PGM images.

Every writer goes through :func:`atomic_write` (temp file + rename) and prints
floats with :func:`fmt` (9 significant digits, locale independent).
"""
from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError, UsageError
from .sources import (Assembly, Cuboid, Cylinder, PlacedMagnet, Plate, Rotation, Sphere,
                      UniformMagnetization)


def fmt(x) -> str:
    x = float(x)
    if x == 0:
        return "0"  # folds -0.0 so mirrored scenes export identically
    return format(x, ".9g")


def fmt_vec(v) -> str:
    return ",".join(fmt(c) for c in v)


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(c if isinstance(c, str) else (str(c) if isinstance(c, (int, np.integer))
                                                            else fmt(c)) for c in row))
    return "\n".join(lines) + "\n"


def key_value_text(items) -> str:
    out = []
    for k, v in items:
        if isinstance(v, float):
            v = fmt(v)
        elif isinstance(v, (list, tuple, np.ndarray)):
            v = fmt_vec(v)
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"


# --- dipoles, grids, images ---------------------------------------------------


DIPOLE_HEADER = ("x_m", "y_m", "z_m", "mx_Am2", "my_Am2", "mz_Am2")
GRID_HEADER = ("i", "j", "x_m", "y_m", "z_m", "value")
STREAMLINE_HEADER = ("line_id", "point_index", "x_m", "y_m", "z_m")


def dipole_csv(assembly: Assembly) -> str:
    return csv_text(DIPOLE_HEADER, np.hstack([assembly.positions, assembly.moments]))


def grid_csv(grid) -> str:
    nodes = grid.nodes()
    ij = grid.node_indices()
    vals = np.asarray(grid.values).reshape(len(nodes), -1)
    if vals.shape[1] != 1:
        raise UsageError("grid CSV export needs a scalar quantity")
    rows = ((int(i), int(j), *p, v) for (i, j), p, v in zip(ij, nodes, vals[:, 0]))
    return csv_text(GRID_HEADER, rows)


def streamline_csv(lines) -> str:
    rows = ((k, n, *p) for k, line in enumerate(lines) for n, p in enumerate(line.points))
    return csv_text(STREAMLINE_HEADER, rows)


def pgm_bytes(pixels) -> bytes:
    """Binary P5 image from a ``[j, i]`` uint8 array; row j = ny-1 is written first (top)."""
    px = np.asarray(pixels)
    if px.ndim != 2 or px.dtype != np.uint8:
        raise UsageError("PGM export needs a 2-D uint8 array")
    ny, nx = px.shape
    return f"P5\n{nx} {ny}\n255\n".encode("ascii") + np.ascontiguousarray(px[::-1]).tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Inverse of :func:`pgm_bytes`, returning the ``[j, i]`` array."""
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or parts[3] != b"255":
        raise ParseError("not an 8-bit P5 image")
    nx, ny = int(parts[1]), int(parts[2])
    px = np.frombuffer(parts[4][: nx * ny], dtype=np.uint8).reshape(ny, nx)
    return px[::-1].copy()


def scale_to_bytes(values, lo=None, hi=None):
    """Linear map of ``values`` onto 0..255; returns (pixels, lo, hi)."""
    v = np.asarray(values, dtype=float)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if hi > lo:
        px = np.rint((v - lo) / (hi - lo) * 255)
    else:
        px = np.zeros_like(v)
    return np.clip(px, 0, 255).astype(np.uint8), lo, hi


def write_grid(grid, stem) -> list[Path]:
    """Write ``stem.csv``, ``stem.pgm`` and the ``stem.txt`` min/max sidecar."""
    stem = Path(stem)
    px, lo, hi = scale_to_bytes(grid.values)
    side = key_value_text([("quantity", grid.quantity), ("nx", grid.counts[0]), ("ny", grid.counts[1]),
                           ("spacing_m", grid.spacing), ("origin_m", grid.origin),
                           ("u_axis", grid.axes[0]), ("v_axis", grid.axes[1]),
                           ("min", lo), ("max", hi)])
    return [atomic_write(stem.with_suffix(".csv"), grid_csv(grid)),
            atomic_write(stem.with_suffix(".pgm"), pgm_bytes(px)),
            atomic_write(stem.with_suffix(".txt"), side)]


# --- assembly description files ------------------------------------------------
#
# INI-like text. Repeated [magnet] sections, or one [preset] section, plus an
# optional [settings] section; a [model] section describes an analytic field.
# Lengths are in millimetres, angles in degrees (extrinsic xyz Euler).

SHAPES = {"sphere": 1, "cylinder": 2, "cuboid": 3, "plate": 3}
MAGNET_KEYS = {"shape", "dims_mm", "pos_mm", "rot_deg", "magnetization_dir", "remanence_T"}
MODEL_KINDS = ("uniform", "dipole", "spiral")


def _sections(text: str):
    """Yield (name, {key: (value, line)}, line) blocks in file order."""
    sections = []
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = (line[1:-1].strip().lower(), {}, n)
            sections.append(current)
            continue
        if current is None:
            raise ParseError("key outside of any section", n)
        if "=" not in line:
            raise ParseError(f"expected key = value, got {raw.strip()!r}", n)
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ParseError("empty key", n)
        if k in current[1]:
            raise ParseError(f"duplicate key {k!r}", n)
        current[1][k] = (v, n)
    return sections


def parse_floats(value: str, count: int | None, line=None, what="value") -> list[float]:
    try:
        out = [float(x) for x in value.replace(" ", "").split(",") if x != ""]
    except ValueError:
        raise ParseError(f"{what}: not a number list: {value!r}", line) from None
    if count is not None and len(out) != count:
        raise ParseError(f"{what}: expected {count} numbers, got {len(out)}", line)
    if not all(math.isfinite(x) for x in out):
        raise ParseError(f"{what}: values must be finite", line)
    return out


def _shape(kind: str, dims_mm, line):
    d = [x * 1e-3 for x in dims_mm]
    try:
        if kind == "sphere":
            return Sphere(d[0] / 2)
        if kind == "cylinder":
            return Cylinder(d[0] / 2, d[1])
        if kind == "cuboid":
            return Cuboid(*d)
        return Plate(*d)
    except UsageError as exc:
        raise ParseError(str(exc), line) from None


def _magnet(keys, line) -> PlacedMagnet:
    unknown = set(keys) - MAGNET_KEYS
    if unknown:
        k = sorted(unknown)[0]
        raise ParseError(f"unknown magnet key {k!r}", keys[k][1])
    for req in ("shape", "dims_mm", "pos_mm", "magnetization_dir"):
        if req not in keys:
            raise ParseError(f"magnet section missing {req!r}", line)
    kind, kl = keys["shape"]
    kind = kind.lower()
    if kind not in SHAPES:
        raise ParseError(f"unknown shape {kind!r}", kl)
    dims = parse_floats(keys["dims_mm"][0], SHAPES[kind], keys["dims_mm"][1], "dims_mm")
    shape = _shape(kind, dims, keys["dims_mm"][1])
    pos = np.array(parse_floats(keys["pos_mm"][0], 3, keys["pos_mm"][1], "pos_mm")) * 1e-3
    rot = Rotation.identity()
    if "rot_deg" in keys:
        rot = Rotation.from_euler_deg(parse_floats(keys["rot_deg"][0], 3, keys["rot_deg"][1], "rot_deg"))
    direction = parse_floats(keys["magnetization_dir"][0], 3, keys["magnetization_dir"][1],
                             "magnetization_dir")
    br = 1.32
    if "remanence_T" in keys:
        br = parse_floats(keys["remanence_T"][0], 1, keys["remanence_T"][1], "remanence_T")[0]
    try:
        mag = UniformMagnetization.from_remanence(direction, br)
    except UsageError as exc:
        raise ParseError(str(exc), keys["magnetization_dir"][1]) from None
    return PlacedMagnet(shape, pos, rot, mag)


def _shape_line(shape) -> tuple[str, list[float]]:
    if isinstance(shape, Sphere):
        return "sphere", [2 * shape.radius]
    if isinstance(shape, Cylinder):
        return "cylinder", [2 * shape.radius, shape.height]
    kind = "plate" if isinstance(shape, Plate) else "cuboid"
    return kind, [shape.lx, shape.ly, shape.lz]


def _exact(v) -> str:
    """Shortest round-tripping repr, so a description reloads to the same geometry."""
    return ", ".join(repr(float(c)) for c in v)


def assembly_text(assembly: Assembly) -> str:
    """Explicit description (one [magnet] per body) that reloads to the same dipoles."""
    if not assembly.magnets:
        raise UsageError("only magnet-based assemblies can be written as descriptions")
    out = ["[settings]", f"resolution = {assembly.resolution}"]
    if assembly.label:
        out.append(f"label = {assembly.label}")
    for m in assembly.magnets:
        kind, dims = _shape_line(m.shape)
        out += ["", "[magnet]", f"shape = {kind}",
                f"dims_mm = {_exact(np.array(dims) * 1e3)}",
                f"pos_mm = {_exact(m.position * 1e3)}",
                f"rot_deg = {_exact(m.rotation.as_euler_deg())}",
                f"magnetization_dir = {_exact(m.magnetization.direction)}",
                f"remanence_T = {_exact([m.magnetization.remanence])}"]
    return "\n".join(out) + "\n"


def parse_assembly(text: str, preset_builder=None):
    """Parse a description into an Assembly or a model field.

    ``preset_builder(name, options) -> Assembly`` resolves a [preset] section;
    ``options`` maps the remaining keys to raw strings.
    """
    sections = _sections(text)
    if not sections:
        raise ParseError("empty assembly description")
    settings = {}
    magnets, preset, model = [], None, None
    for name, keys, line in sections:
        if name == "settings":
            for k, (v, ln) in keys.items():
                if k not in ("resolution", "label"):
                    raise ParseError(f"unknown settings key {k!r}", ln)
                settings[k] = (v, ln)
        elif name == "magnet":
            magnets.append(_magnet(keys, line))
        elif name == "preset":
            if preset is not None:
                raise ParseError("more than one [preset] section", line)
            preset = (keys, line)
        elif name == "model":
            if model is not None:
                raise ParseError("more than one [model] section", line)
            model = (keys, line)
        else:
            raise ParseError(f"unknown section [{name}]", line)
    kinds = sum(x is not None and x != [] for x in (magnets or None, preset, model))
    if kinds != 1:
        raise ParseError("description needs exactly one of: [magnet] sections, [preset], [model]")
    res = 5
    if "resolution" in settings:
        v, ln = settings["resolution"]
        try:
            res = int(v)
        except ValueError:
            raise ParseError(f"resolution must be an integer, got {v!r}", ln) from None
    label = settings.get("label", ("", 0))[0]
    if magnets:
        try:
            return Assembly.from_magnets(magnets, res, label=label)
        except UsageError as exc:
            raise ParseError(str(exc)) from None
    if preset is not None:
        keys, line = preset
        if "name" not in keys:
            raise ParseError("[preset] needs a name", line)
        if preset_builder is None:
            raise ParseError("presets are not supported here", line)
        opts = {k: v for k, (v, _) in keys.items() if k != "name"}
        opts.setdefault("resolution", str(res))
        return preset_builder(keys["name"][0], opts)
    keys, line = model
    kind = keys.get("kind", ("", line))[0].lower()
    params = {k: v for k, v in keys.items() if k != "kind"}
    return build_model(kind, {k: v for k, (v, _) in params.items()},
                       {k: ln for k, (_, ln) in params.items()}, line)


def build_model(kind: str, params: dict, lines: dict | None = None, line=None):
    """Analytic field from string parameters (SI units)."""
    from .fields import PointDipoleField, SpiralVortexField, UniformField

    lines = lines or {}
    allowed = {"uniform": {"b0"}, "dipole": {"m", "pos", "exclusion_radius"},
               "spiral": {"pitch", "core_radius", "strength", "pole_separation", "center"}}
    if kind not in allowed:
        raise ParseError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}", line)
    for k in params:
        if k not in allowed[kind]:
            raise ParseError(f"unknown {kind} model parameter {k!r}", lines.get(k, line))
    vec = {"b0", "m", "pos", "center"}
    val = {k: (parse_floats(v, 3, lines.get(k, line), k) if k in vec
               else parse_floats(v, 1, lines.get(k, line), k)[0]) for k, v in params.items()}
    try:
        if kind == "uniform":
            return UniformField(val.get("b0", [0, 0, 0]))
        if kind == "dipole":
            return PointDipoleField(val.get("m", [0, 0, 1]), val.get("pos", [0, 0, 0]),
                                    val.get("exclusion_radius", 0.0))
        return SpiralVortexField(**val)
    except UsageError as exc:
        raise ParseError(str(exc), line) from None


def model_text(model) -> str:
    from .fields import PointDipoleField, SpiralVortexField, UniformField

    if isinstance(model, UniformField):
        return f"[model]\nkind = uniform\nb0 = {fmt_vec(model.b0)}\n"
    if isinstance(model, PointDipoleField):
        return (f"[model]\nkind = dipole\nm = {fmt_vec(model.m)}\npos = {fmt_vec(model.pos)}\n"
                f"exclusion_radius = {fmt(model.exclusion_radius)}\n")
    if isinstance(model, SpiralVortexField):
        return (f"[model]\nkind = spiral\npitch = {fmt(model.pitch)}\ncore_radius = {fmt(model.core_radius)}\n"
                f"strength = {fmt(model.strength)}\npole_separation = {fmt(model.pole_separation)}\n"
                f"center = {fmt_vec(model.center)}\n")
    raise UsageError(f"cannot describe {type(model).__name__}")
