"""Command-line entry point.

    fluxforge [--out DIR] [--config FILE] GROUP COMMAND [options]

Exit codes: 0 success, 1 numeric or domain failure, 2 usage/config/parse error.
Output directory: ``--out``, else ``$FLUXFORGE_OUT``, else ``./fluxforge_out``.
A config file is INI text with one section per command (``[field map]``)
holding option names as keys; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FluxError, ParseError, UsageError
from .fields import (FieldGrid, QUANTITIES, b_total, check_plane_clear, h_total, local_maxima,
                     surface_map)
from .io import (assembly_text, atomic_write, build_model, csv_text, dipole_csv, key_value_text,
                 parse_assembly, parse_floats, write_grid)
from .sources import (Assembly, Cuboid, Cylinder, Plate, Sphere, build_grid_array, build_halbach_linear,
                      build_ring_twister, build_triangular_lattice, single_magnet)

DEFAULT_OUT = "fluxforge_out"
GROUPS = ("assembly", "field", "streamline", "sensor", "analyze")
OUT_ENV = "FLUXFORGE_OUT"


# --- presets from string options ----------------------------------------------

PRESET_KEYS = {
    "single": {"shape", "size_mm", "direction", "remanence_T"},
    "halbach": {"n", "size_mm", "gap_mm", "remanence_T"},
    "ring": {"n", "skew_deg", "ring_radius_mm", "plate_mm", "thickness_mm", "remanence_T"},
    "lattice": {"count", "sphere_d_mm", "pattern", "remanence_T"},
    "grid": {"rows", "cols", "pattern", "diameter_mm", "height_mm", "gap_mm", "remanence_T"},
}


def _num(opts, key, default, kind=float):
    if key not in opts or opts[key] is None:
        return default
    try:
        v = kind(opts[key])
    except (TypeError, ValueError):
        raise ParseError(f"preset option {key}: bad value {opts[key]!r}") from None
    if kind is float and not math.isfinite(v):
        raise ParseError(f"preset option {key} must be finite")
    return v


def build_preset(name: str, opts: dict) -> Assembly:
    """Preset assembly from string-valued options (lengths in mm)."""
    name = name.strip().lower()
    if name not in PRESET_KEYS:
        raise ParseError(f"unknown preset {name!r}; choose one of {sorted(PRESET_KEYS)}")
    opts = {k: v for k, v in opts.items() if v is not None}
    unknown = set(opts) - PRESET_KEYS[name] - {"resolution"}
    if unknown:
        raise ParseError(f"unknown option {sorted(unknown)[0]!r} for preset {name}")
    res = _num(opts, "resolution", 5, int)
    br = _num(opts, "remanence_T", 1.32)
    if name == "single":
        size = _num(opts, "size_mm", 10.0) * 1e-3
        kind = opts.get("shape", "cube")
        shapes = {"cube": lambda: Cuboid(size, size, size), "sphere": lambda: Sphere(size / 2),
                  "cylinder": lambda: Cylinder(size / 2, size)}
        if kind not in shapes:
            raise ParseError(f"single preset shape must be one of {sorted(shapes)}")
        direction = parse_floats(opts.get("direction", "0,0,1"), 3, what="direction")
        return single_magnet(shapes[kind](), direction, br, resolution=res)
    if name == "halbach":
        size = _num(opts, "size_mm", 10.0) * 1e-3
        return build_halbach_linear(_num(opts, "n", 5, int), Cuboid(size, size, size),
                                    _num(opts, "gap_mm", 0.0) * 1e-3, br, res)
    if name == "ring":
        side = _num(opts, "plate_mm", 10.0) * 1e-3
        plate = Plate(side, side, _num(opts, "thickness_mm", 1.0) * 1e-3)
        return build_ring_twister(_num(opts, "n", 12, int), plate, _num(opts, "ring_radius_mm", 30.0) * 1e-3,
                                  math.radians(_num(opts, "skew_deg", 15.0)), br, res)
    if name == "lattice":
        return build_triangular_lattice(_num(opts, "count", 19, int), _num(opts, "sphere_d_mm", 5.0) * 1e-3,
                                        opts.get("pattern", "parallel"), br, res)
    disk = Cylinder(_num(opts, "diameter_mm", 10.0) * 5e-4, _num(opts, "height_mm", 4.0) * 1e-3)
    return build_grid_array(_num(opts, "rows", 4, int), _num(opts, "cols", 4, int), disk,
                            opts.get("pattern", "checkerboard"), br, _num(opts, "gap_mm", 0.0) * 1e-3, res)


def preset_text(name: str, opts: dict) -> str:
    lines = ["[preset]", f"name = {name}"]
    lines += [f"{k} = {v}" for k, v in sorted(opts.items()) if v is not None and k != "resolution"]
    lines += ["", "[settings]", f"resolution = {opts.get('resolution') or 5}"]
    return "\n".join(lines) + "\n"


# --- argument helpers ----------------------------------------------------------


def _vec(text: str) -> np.ndarray:
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z numbers, got {text!r}") from None
    if len(v) != 3 or not all(map(math.isfinite, v)):
        raise argparse.ArgumentTypeError(f"expected three finite numbers, got {text!r}")
    return np.array(v)


def _pair(text: str) -> tuple:
    try:
        v = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y numbers, got {text!r}") from None
    if len(v) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}")
    return v


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text!r}")
        return v
    return conv


def _plane(text: str):
    """``z=0.01`` style axis-aligned plane -> (center, normal)."""
    try:
        axis, value = text.replace(" ", "").split("=")
        value = float(value)
        k = "xyz".index(axis.lower())
    except (ValueError, AttributeError):
        raise argparse.ArgumentTypeError(f"plane must look like z=0.01, got {text!r}") from None
    normal = np.zeros(3)
    normal[k] = 1.0
    return normal * value, normal


def _add_source(p, required=True):
    g = p.add_argument_group("field source")
    g.add_argument("--assembly", help="assembly description file")
    g.add_argument("--model", choices=("uniform", "dipole", "spiral"), help="analytic model field")
    g.add_argument("--param", action="append", default=[], metavar="K=V",
                   help="model parameter (SI units; vectors as x,y,z)")
    p.set_defaults(source_required=required)


def _load_source(args):
    if args.assembly and args.model:
        raise UsageError("give either --assembly or --model, not both")
    if args.assembly:
        path = Path(args.assembly)
        if not path.is_file():
            raise UsageError(f"assembly file not found: {args.assembly}")
        return parse_assembly(path.read_text(), build_preset)
    if args.model:
        params = {}
        for item in args.param:
            if "=" not in item:
                raise UsageError(f"--param expects K=V, got {item!r}")
            k, v = item.split("=", 1)
            params[k.strip()] = v.strip()
        return build_model(args.model, params)
    if args.param:
        raise UsageError("--param needs --model")
    if args.source_required:
        raise UsageError("a field source is required: --assembly FILE or --model KIND")
    return None


def _outdir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _emit(text: str):
    sys.stdout.write(text)


# --- commands -------------------------------------------------------------------


def cmd_assembly_build(args):
    out = _outdir(args)
    if args.preset and args.from_file:
        raise UsageError("give either --preset or --from, not both")
    if args.preset:
        opts = {"n": args.n, "skew_deg": args.skew_deg, "count": args.count, "pattern": args.pattern,
                "rows": args.rows, "cols": args.cols, "shape": args.shape, "size_mm": args.size_mm,
                "resolution": args.resolution}
        allowed = PRESET_KEYS.get(args.preset, set()) | {"resolution"}
        extra = sorted(k for k, v in opts.items() if v is not None and k not in allowed)
        if extra:
            raise UsageError(f"option --{extra[0].replace('_', '-')} does not apply to preset {args.preset}")
        opts = {k: (None if v is None else str(v)) for k, v in opts.items()}
        asm = build_preset(args.preset, opts)
        desc = preset_text(args.preset, opts)
    elif args.from_file:
        path = Path(args.from_file)
        if not path.is_file():
            raise UsageError(f"magnet list not found: {args.from_file}")
        asm = parse_assembly(path.read_text(), build_preset)
        if not isinstance(asm, Assembly):
            raise UsageError("--from needs magnets or a preset, not a model field")
        if args.resolution is not None and args.resolution != asm.resolution:
            asm = Assembly.from_magnets(asm.magnets, args.resolution, asm.label)
        desc = assembly_text(asm)
    else:
        raise UsageError("assembly build needs --preset or --from")
    name = args.name
    atomic_write(out / f"{name}.asm", desc)
    atomic_write(out / f"{name}_dipoles.csv", dipole_csv(asm))
    _emit(key_value_text([("magnets", len(asm.magnets)), ("dipoles", len(asm)),
                          ("total_moment_Am2", asm.total_moment)]))


def cmd_field_sample(args):
    src = _load_source(args)
    if not args.at:
        raise UsageError("field sample needs at least one --at x,y,z")
    pts = np.array(args.at)
    vals = b_total(src, pts) if args.quantity == "B" else h_total(src, pts)
    unit = "T" if args.quantity == "B" else "A_per_m"
    q = args.quantity
    _emit(csv_text(("x_m", "y_m", "z_m", f"{q}x_{unit}", f"{q}y_{unit}", f"{q}z_{unit}"),
                   np.hstack([pts, vals])))


def cmd_field_map(args):
    src = _load_source(args)
    if args.plane is not None:
        center, normal = args.plane
        if args.center is not None:
            raise UsageError("give either --plane or --center/--normal")
    else:
        center = args.center if args.center is not None else np.zeros(3)
        normal = args.normal if args.normal is not None else np.array([0.0, 0.0, 1.0])
    if args.extent_mm is not None:
        extent = args.extent_mm * 1e-3
    elif isinstance(src, Assembly):
        extent = 1.5 * src.diameter
    else:
        extent = 0.1
    if isinstance(src, Assembly):
        check_plane_clear(src, center, normal, extent / 2)
    grid = FieldGrid.plane(center, normal, args.nx, args.ny, extent)
    fmap = surface_map(src, grid, args.quantity)
    write_grid(fmap, _outdir(args) / args.name)
    v = fmap.values
    _emit(key_value_text([("quantity", args.quantity), ("nx", args.nx), ("ny", args.ny),
                          ("extent_m", extent), ("min", float(v.min())), ("max", float(v.max())),
                          ("local_maxima", len(local_maxima(v)))]))


def _bounds_for(src, args):
    if args.lo is not None and args.hi is not None:
        return args.lo, args.hi
    if args.lo is not None or args.hi is not None:
        raise UsageError("give both --lo and --hi")
    if isinstance(src, Assembly):
        c, d = src.centroid, src.diameter
        return c - 3 * d, c + 3 * d
    return np.full(3, -1.0), np.full(3, 1.0)


def cmd_streamline_trace(args):
    from .streamlines import IntegratorConfig, TraceBatchError, seed_ring, trace_set

    src = _load_source(args)
    seeds = list(args.seed or [])
    if args.ring_n:
        if args.ring_radius is None:
            raise UsageError("--ring-n needs --ring-radius")
        seeds += seed_ring(args.ring_center if args.ring_center is not None else np.zeros(3),
                           args.ring_normal if args.ring_normal is not None else np.array([0.0, 0.0, 1.0]),
                           args.ring_radius, args.ring_n)
    if not seeds:
        raise UsageError("streamline trace needs --seed or --ring-n")
    lo, hi = _bounds_for(src, args)
    cfg = IntegratorConfig.for_bounds(lo, hi, args.step, args.max_steps, args.closure_eps, args.direction)
    out = _outdir(args)
    try:
        lines = trace_set(src, seeds, cfg, args.workers)
        failed = {}
    except TraceBatchError as exc:
        lines, failed = exc.results, exc.errors
    good = [ln for ln in lines if ln is not None]
    ids = [k for k, ln in enumerate(lines) if ln is not None]
    rows = ((k, n, *p) for k, ln in zip(ids, good) for n, p in enumerate(ln.points))
    atomic_write(out / f"{args.name}.csv", csv_text(("line_id", "point_index", "x_m", "y_m", "z_m"), rows))
    summary = csv_text(("line_id", "points", "termination"),
                       [(k, len(ln) if ln else 0, ln.termination if ln else f"error: {failed[k]}")
                        for k, ln in enumerate(lines)])
    atomic_write(out / f"{args.name}_summary.csv", summary)
    _emit(summary)
    if failed:
        raise next(iter(failed.values()))


def _particle(args):
    from .sensor import ParticleSpec

    if args.radius_um is not None and args.radius_nm is not None:
        raise UsageError("give either --radius-um or --radius-nm")
    if args.radius_um is not None:
        radius = args.radius_um * 1e-6
    elif args.radius_nm is not None:
        radius = args.radius_nm * 1e-9
    else:
        radius = args.default_radius
    kw = {"radius": radius, "coating": args.coating_nm * 1e-9, "viscosity": args.eta_cP * 1e-3,
          "temperature": args.temp_K, "neel_tau0": args.tau0_s, "anisotropy": args.anisotropy}
    if args.moment is not None:
        kw["particle_moment"] = args.moment
    return ParticleSpec(**kw)


def cmd_sensor_relax(args):
    from .sensor import relaxation_report

    rep = relaxation_report(_particle(args), args.t_obs, neel=args.neel)
    text = rep.as_text()
    atomic_write(_outdir(args) / f"{args.name}.txt", text)
    _emit(text)


def cmd_sensor_render(args):
    from .sensor import SensorSpec, render_response

    src = _load_source(args)
    center = args.center if args.center is not None else np.array([0.0, 0.0, 0.01])
    sensor = SensorSpec(center, args.normal if args.normal is not None else np.array([0.0, 0.0, 1.0]),
                        args.nx, args.ny, args.pitch_mm * 1e-3, b_min=args.b_min)
    img = render_response(src, sensor, _particle(args))
    img.write(_outdir(args) / args.name)
    _emit(key_value_text([("nx", args.nx), ("ny", args.ny), ("mask_count", img.mask_count),
                          ("mean_alignment", float(img.magnitude.mean()))]))


def cmd_sensor_filter(args):
    from .sensor import relaxation_report, temporal_filter

    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"series file not found: {args.input}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty series file", 1)
    header = [h.strip() for h in lines[0].split(",")]
    rows = []
    for n, ln in enumerate(lines[1:], 2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(cells)}", n)
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise ParseError(f"non-numeric value in {ln!r}", n) from None
    delta = args.delta if args.delta is not None else relaxation_report(_particle(args), neel=args.neel).delta
    y = temporal_filter(np.array(rows).reshape(len(rows), len(header)), delta, args.dt)
    atomic_write(_outdir(args) / f"{args.name}.csv", csv_text(header, y))
    _emit(key_value_text([("samples", len(rows)), ("delta_Hz", delta), ("dt_s", args.dt)]))


def cmd_analyze_fit_spiral(args):
    from .analysis import (fit_log_spiral, load_trace, loglog_plot_csv, radius_growth_check,
                           search_origin, spiral_plot_csv, to_polar)

    trace = load_trace(args.trace, args.unit)
    if args.origin is not None and args.search_origin:
        raise UsageError("give either --origin or --search-origin")
    origin = args.origin if args.origin is not None else (0.0, 0.0)
    if args.search_origin:
        origin, _ = search_origin(trace)
    polar = to_polar(trace, origin)
    fit = fit_log_spiral(polar)
    out = _outdir(args)
    text = fit.as_text() + key_value_text([
        ("origin", origin), ("unit", trace.unit), ("dropped_samples", len(polar.dropped)),
        ("radius_growth_residual", radius_growth_check(polar, fit))])
    atomic_write(out / f"{args.name}.txt", text)
    atomic_write(out / f"{args.name}_plot.csv", spiral_plot_csv(polar, fit))
    atomic_write(out / f"{args.name}_loglog.csv", loglog_plot_csv(polar))
    _emit(text)


def cmd_analyze_conserve(args):
    from .analysis import Region, conservativity_report, default_loops

    src = _load_source(args)
    if not isinstance(src, Assembly):
        if args.h is None:
            raise UsageError("model fields need an explicit --h")
    region = Region(args.inner, args.outer, args.samples, args.seed)
    loops = []
    if args.loops:
        if not isinstance(src, Assembly):
            raise UsageError("default loops need an assembly; use --loops 0 for model fields")
        loops = default_loops(src)[: args.loops]
    rep = conservativity_report(src, region, loops, h=args.h)
    text = rep.as_text()
    atomic_write(_outdir(args) / f"{args.name}.txt", text)
    _emit(text)
    if not rep.all_passed:
        failed = ", ".join(k for k, ok in rep.passed.items() if not ok)
        raise FluxError(f"conservativity checks failed: {failed}")


# --- parser ---------------------------------------------------------------------


def _particle_args(p, default_radius):
    g = p.add_argument_group("particle")
    g.add_argument("--radius-um", type=_positive(float))
    g.add_argument("--radius-nm", type=_positive(float))
    g.add_argument("--coating-nm", type=float, default=0.0)
    g.add_argument("--eta-cP", type=_positive(float), default=2.4)
    g.add_argument("--temp-K", type=_positive(float), default=300.0)
    g.add_argument("--tau0-s", type=_positive(float), default=1e-9)
    g.add_argument("--anisotropy", type=_positive(float), default=1e3, help="K_a [J/m^3]")
    g.add_argument("--moment", type=_positive(float), help="particle moment [A m^2]")
    g.add_argument("--neel", action="store_true", help="include Neel relaxation (default: Brownian only)")
    p.set_defaults(default_radius=default_radius)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fluxforge", description="Magnet assembly field toolkit.")
    ap.add_argument("--version", action="version", version=f"fluxforge {__version__}")
    ap.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    ap.add_argument("--config", help="INI file with one section per command")
    groups = ap.add_subparsers(dest="group", required=True)

    asm = groups.add_parser("assembly").add_subparsers(dest="command", required=True)
    p = asm.add_parser("build", help="build a preset or explicit assembly")
    p.add_argument("--preset", choices=sorted(PRESET_KEYS))
    p.add_argument("--from", dest="from_file", help="description file with [magnet] sections")
    p.add_argument("--n", type=int)
    p.add_argument("--skew-deg", type=float)
    p.add_argument("--count", type=int)
    p.add_argument("--pattern")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--shape", choices=("cube", "sphere", "cylinder"))
    p.add_argument("--size-mm", type=_positive(float))
    p.add_argument("--resolution", type=_positive(int))
    p.add_argument("--name", default="assembly")
    p.set_defaults(func=cmd_assembly_build)

    fld = groups.add_parser("field").add_subparsers(dest="command", required=True)
    p = fld.add_parser("sample", help="print B or H at points")
    _add_source(p)
    p.add_argument("--at", type=_vec, action="append", metavar="X,Y,Z")
    p.add_argument("--quantity", choices=("B", "H"), default="B")
    p.set_defaults(func=cmd_field_sample)
    p = fld.add_parser("map", help="surface map on a plane")
    _add_source(p)
    p.add_argument("--plane", type=_plane, help="axis-aligned plane, e.g. z=0.01")
    p.add_argument("--center", type=_vec)
    p.add_argument("--normal", type=_vec)
    p.add_argument("--nx", type=_positive(int), default=64)
    p.add_argument("--ny", type=_positive(int), default=64)
    p.add_argument("--extent-mm", type=_positive(float))
    p.add_argument("--quantity", choices=QUANTITIES, default="magnitude")
    p.add_argument("--name", default="map")
    p.set_defaults(func=cmd_field_map)

    sl = groups.add_parser("streamline").add_subparsers(dest="command", required=True)
    p = sl.add_parser("trace", help="trace field lines")
    _add_source(p)
    p.add_argument("--seed", type=_vec, action="append", metavar="X,Y,Z")
    p.add_argument("--ring-n", type=_positive(int))
    p.add_argument("--ring-radius", type=_positive(float))
    p.add_argument("--ring-center", type=_vec)
    p.add_argument("--ring-normal", type=_vec)
    p.add_argument("--lo", type=_vec)
    p.add_argument("--hi", type=_vec)
    p.add_argument("--step", type=_positive(float))
    p.add_argument("--max-steps", type=_positive(int), default=20000)
    p.add_argument("--closure-eps", type=_positive(float))
    p.add_argument("--direction", choices=("forward", "backward", "both"), default="forward")
    p.add_argument("--workers", type=_positive(int), default=1)
    p.add_argument("--name", default="streamlines")
    p.set_defaults(func=cmd_streamline_trace)

    sn = groups.add_parser("sensor").add_subparsers(dest="command", required=True)
    p = sn.add_parser("relax", help="relaxation times, decoherence rate and regime")
    _particle_args(p, 20e-6)
    p.add_argument("--t-obs", type=_positive(float), default=60.0)
    p.add_argument("--name", default="relaxation")
    p.set_defaults(func=cmd_sensor_relax)
    p = sn.add_parser("render", help="sensor response images")
    _add_source(p, required=False)
    _particle_args(p, 5e-9)
    p.add_argument("--center", type=_vec)
    p.add_argument("--normal", type=_vec)
    p.add_argument("--nx", type=int, default=64)
    p.add_argument("--ny", type=int, default=64)
    p.add_argument("--pitch-mm", type=_positive(float), default=1.0)
    p.add_argument("--b-min", type=float, default=0.015)
    p.add_argument("--name", default="response")
    p.set_defaults(func=cmd_sensor_render)
    p = sn.add_parser("filter", help="first-order low-pass of a sampled series")
    _particle_args(p, 5e-9)
    p.add_argument("--input", required=True, help="CSV with a header row")
    p.add_argument("--dt", type=_positive(float), required=True)
    p.add_argument("--delta", type=float, help="rate [Hz]; default: from the particle")
    p.add_argument("--name", default="filtered")
    p.set_defaults(func=cmd_sensor_filter)

    an = groups.add_parser("analyze").add_subparsers(dest="command", required=True)
    p = an.add_parser("fit-spiral", help="log-spiral fit of an x,y trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--origin", type=_pair)
    p.add_argument("--search-origin", action="store_true")
    p.add_argument("--unit", choices=("pixel", "meter"), default="meter")
    p.add_argument("--name", default="spiral_fit")
    p.set_defaults(func=cmd_analyze_fit_spiral)
    p = an.add_parser("conserve", help="divergence/curl/work checks")
    _add_source(p)
    p.add_argument("--inner", type=_positive(float), default=3.0, help="shell inner radius / R")
    p.add_argument("--outer", type=_positive(float), default=6.0)
    p.add_argument("--samples", type=_positive(int), default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loops", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--h", type=_positive(float))
    p.add_argument("--name", default="conservativity")
    p.set_defaults(func=cmd_analyze_conserve)
    return ap


def _subparser(ap, group, command):
    for action in ap._subparsers._group_actions:
        grp = action.choices.get(group)
        if grp is None:
            return None
        for sub in grp._subparsers._group_actions:
            return sub.choices.get(command)
    return None


def _config_tokens(ap, path, group, command) -> list[str]:
    """Translate a ``[group command]`` config section into CLI tokens."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cp.read_string(p.read_text())
    except configparser.Error as exc:
        raise ParseError(f"config: {exc}") from None
    for section in cp.sections():
        if len(section.split()) != 2:
            raise UsageError(f"config section [{section}] must name a command, e.g. [field map]")
    section = f"{group} {command}"
    if not cp.has_section(section):
        return []
    sub = _subparser(ap, group, command)
    if sub is None:
        return []
    actions = {}
    for act in sub._actions:
        for opt in act.option_strings:
            if opt.startswith("--"):
                actions[opt[2:]] = act
    tokens = []
    for key, value in cp.items(section):
        act = actions.get(key.replace("_", "-")) or actions.get(key)
        if act is None or key in ("help",):
            raise UsageError(f"unknown config key {key!r} in [{section}]")
        opt = act.option_strings[-1]
        if isinstance(act, argparse._StoreTrueAction):
            if value.strip().lower() in ("1", "true", "yes", "on"):
                tokens.append(opt)
            elif value.strip().lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects true/false")
        elif isinstance(act, argparse._AppendAction):
            for item in value.split(";"):
                tokens += [opt, item.strip()]
        else:
            tokens += [opt, value.strip()]
    return tokens


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            gi = next((i for i, a in enumerate(argv) if a in GROUPS), None)
            if gi is not None and gi + 1 < len(argv):
                # config values go right after the command so that explicit flags override them
                ci = gi + 1
                argv = argv[:ci + 1] + _config_tokens(ap, known.config, argv[gi], argv[ci]) + argv[ci + 1:]
        args = ap.parse_args(argv)
        args.func(args)
        return 0
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"fluxforge: error: {exc}", file=sys.stderr)
        return 2
    except FluxError as exc:
        print(f"fluxforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fluxforge: error: {exc.strerror or exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
