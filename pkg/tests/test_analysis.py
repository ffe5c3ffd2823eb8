import math

import numpy as np
import pytest

from fluxforge.analysis import (ConservativityReport, Region, Trace, circle_loop, conservativity_report,
                                curl_force_check, default_loops, fit_log_spiral, load_trace,
                                loglog_plot_csv, magnetic_force, polyline_loop, radius_growth_check,
                                search_origin, shell_samples, spiral_plot_csv, square_loop, to_polar,
                                work_integral, PolarTrace)
from fluxforge.errors import (DegenerateFitError, InsufficientDataError, NotASingleArmError, ParseError,
                              SingularityError, UsageError)
from fluxforge.fields import PointDipoleField, UniformField, b_total
from fluxforge.sources import Cuboid, build_halbach_linear, single_magnet


def spiral_xy(a, b, theta, origin=(0.0, 0.0)):
    r = a * np.exp(b * theta)
    return np.column_stack([origin[0] + r * np.cos(theta), origin[1] + r * np.sin(theta)])


def write_csv(path, rows, header="x,y"):
    path.write_text(header + "\n" + "".join(f"{x},{y}\n" for x, y in rows))
    return path


# --- trace ingestion -------------------------------------------------------------


def test_load_trace_eight_rows(tmp_path):
    rows = spiral_xy(1.0, 0.2, np.linspace(0, 3, 8))
    t = load_trace(write_csv(tmp_path / "t.csv", rows.tolist()), unit="pixel")
    assert len(t) == 8 and t.unit == "pixel"
    assert np.array_equal(t.xy, rows)


def test_load_trace_header_only(tmp_path):
    (tmp_path / "h.csv").write_text("x,y\n")
    with pytest.raises(InsufficientDataError):
        load_trace(tmp_path / "h.csv")


def test_load_trace_bad_cell_names_line(tmp_path):
    rows = [[str(k), str(k * k)] for k in range(1, 10)]
    rows[3][1] = "abc"  # data row 4 is line 5 (header is line 1)
    with pytest.raises(ParseError, match="line 5") as exc:
        load_trace(write_csv(tmp_path / "bad.csv", rows))
    assert exc.value.line == 5


def test_load_trace_other_errors(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_trace(write_csv(tmp_path / "h.csv", [(1, 2)] * 8, header="a,b"))
    with pytest.raises(UsageError):
        load_trace(tmp_path / "missing.csv")
    with pytest.raises(UsageError, match="duplicate"):
        Trace(np.array([[0, 0], [1, 0], [1, 0], [2, 0], [3, 0], [4, 0], [5, 0], [6, 0]], dtype=float))
    with pytest.raises(UsageError):
        Trace(np.zeros((8, 2)) + np.arange(8)[:, None], unit="furlong")


# --- polar conversion ------------------------------------------------------------


def test_unit_circle_every_ten_degrees():
    deg = np.arange(0, 360, 10)
    xy = np.column_stack([np.cos(np.radians(deg)), np.sin(np.radians(deg))])
    pol = to_polar(Trace(xy))
    assert np.allclose(pol.r, 1.0, atol=1e-15)
    assert np.allclose(np.degrees(pol.theta), deg, atol=1e-12)


def test_synthetic_spiral_radius_recovered():
    th = np.linspace(0, 4 * math.pi, 300)
    pol = to_polar(Trace(spiral_xy(1.0, 0.2, th)))
    assert np.max(np.abs(pol.r - np.exp(0.2 * th))) <= 1e-12
    assert np.max(np.abs(pol.theta - th)) <= 1e-12


def test_clockwise_arm_and_offset_origin():
    th = np.linspace(0, -3 * math.pi, 120)
    pol = to_polar(Trace(spiral_xy(2.0, -0.1, th, origin=(5.0, -1.0))), (5.0, -1.0))
    assert np.all(np.diff(pol.theta) < 0)
    fit = fit_log_spiral(pol)
    assert fit.b == pytest.approx(-0.1, abs=1e-12) and fit.a == pytest.approx(2.0, rel=1e-12)


def test_zigzag_rejected():
    th = np.array([0.0, 0.3, 0.6, 0.4, 0.2, 0.5, 0.8, 0.5, 0.3, 0.7])
    with pytest.raises(NotASingleArmError):
        to_polar(Trace(spiral_xy(1.0, 0.2, th)))


def test_single_jitter_sample_dropped():
    th = np.linspace(0, 2 * math.pi, 40)
    th[17] = th[15] - 0.01  # one digitized point lands behind its neighbour
    pol = to_polar(Trace(spiral_xy(1.0, 0.2, th)))
    assert len(pol) == 39 and len(pol.dropped) == 1
    assert np.all(np.diff(pol.theta) > 0)


def test_point_at_origin_is_singular():
    xy = spiral_xy(1.0, 0.2, np.linspace(0, 3, 10))
    xy[4] = 0.0
    with pytest.raises(SingularityError):
        to_polar(Trace(xy))


def test_polar_invariants():
    with pytest.raises(UsageError):
        PolarTrace(np.array([0.0, 1.0]), np.array([1.0, 0.0]), (0, 0))
    with pytest.raises(NotASingleArmError):
        PolarTrace(np.array([0.0, 1.0, 0.5]), np.ones(3), (0, 0))


# --- log-spiral fit --------------------------------------------------------------


def test_exact_spiral_fit():
    th = np.linspace(0, 4 * math.pi, 200)
    fit = fit_log_spiral(to_polar(Trace(spiral_xy(1.0, 0.2, th))))
    assert abs(fit.a - 1.0) <= 1e-12 and abs(fit.b - 0.2) <= 1e-12
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
    assert fit.rms_residual <= 1e-13 and fit.n_points == 200


def test_circle_fit():
    th = np.linspace(0, 2 * math.pi, 50, endpoint=False)
    fit = fit_log_spiral(to_polar(Trace(spiral_xy(3.0, 0.0, th))))
    assert abs(fit.b) <= 1e-12 and fit.a == pytest.approx(3.0, rel=1e-12)
    # radius constant up to rounding is reported as an exact circle
    assert fit.b == 0.0 and fit.r_squared == 1.0


def test_degenerate_fit():
    with pytest.raises(DegenerateFitError):
        fit_log_spiral(PolarTrace(np.array([0.5]), np.array([1.0]), (0, 0)))


def test_noisy_fit_monte_carlo():
    th = np.linspace(0, 4 * math.pi, 200)
    errs = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        r = np.exp(0.2 * th) * (1 + 0.02 * rng.standard_normal(200))
        xy = np.column_stack([r * np.cos(th), r * np.sin(th)])
        fit = fit_log_spiral(to_polar(Trace(xy)))
        # independent least squares on the same samples
        assert fit.b == pytest.approx(np.polyfit(th, np.log(r), 1)[0], rel=1e-9)
        errs.append(abs(fit.b - 0.2) / 0.2)
    errs = np.array(errs)
    assert np.all(errs <= 0.05)
    # bound frozen from the Monte-Carlo oracle: 95th percentile 3.64e-3, max 4.29e-3
    assert np.percentile(errs, 95) <= 4e-3


def test_fit_idempotence_and_scale_equivariance():
    rng = np.random.default_rng(5)
    th = np.linspace(0.2, 5.0, 80)
    r = 0.7 * np.exp(0.15 * th) * (1 + 0.01 * rng.standard_normal(80))
    tr = Trace(np.column_stack([r * np.cos(th), r * np.sin(th)]))
    fit = fit_log_spiral(to_polar(tr))
    again = fit_log_spiral(to_polar(Trace(spiral_xy(fit.a, fit.b, th))))
    assert again.a == pytest.approx(fit.a, rel=1e-12) and again.b == pytest.approx(fit.b, abs=1e-12)
    big = fit_log_spiral(to_polar(tr.scaled(37.5)))
    assert big.a == pytest.approx(37.5 * fit.a, rel=1e-12)
    assert big.b == pytest.approx(fit.b, abs=1e-12)


def test_radius_growth_check():
    def residual(dth, b=0.2):
        th = np.arange(0, 4 * math.pi, dth)
        pol = to_polar(Trace(spiral_xy(1.0, b, th)))
        return radius_growth_check(pol, fit_log_spiral(pol))

    assert residual(0.01) <= 1e-4
    # central difference of e^{b theta}: relative error sinh(b d)/(b d) - 1
    for d in (0.01, 0.1, 0.5):
        assert residual(d) == pytest.approx(math.sinh(0.2 * d) / (0.2 * d) - 1, rel=1e-6)
    steps = [0.01, 0.05, 0.1, 0.25, 0.5]
    vals = [residual(d) for d in steps]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    circ = to_polar(Trace(spiral_xy(2.0, 0.0, np.linspace(0, 6, 60))))
    assert radius_growth_check(circ, fit_log_spiral(circ)) <= 1e-9


def test_origin_search_finds_pole():
    th = np.linspace(0.5, 4 * math.pi, 150)
    tr = Trace(spiral_xy(1.0, 0.2, th, origin=(0.3, -0.2)))
    (ox, oy), fit = search_origin(tr, center=(0.0, 0.0), span=1.0, levels=6)
    assert math.hypot(ox - 0.3, oy + 0.2) <= 1e-3
    assert fit.b == pytest.approx(0.2, rel=1e-2)


def test_plot_csvs():
    th = np.linspace(0, 2, 10)
    pol = to_polar(Trace(spiral_xy(1.0, 0.2, th)))
    fit = fit_log_spiral(pol)
    lines = spiral_plot_csv(pol, fit).splitlines()
    assert lines[0] == "theta,r,ln_r,fit_ln_r" and len(lines) == 11
    ln_r, fit_ln_r = map(float, lines[5].split(",")[2:])
    assert ln_r == pytest.approx(fit_ln_r, abs=1e-8)
    assert loglog_plot_csv(pol).splitlines()[0] == "ln_theta_span,ln_r"


# --- work integrals --------------------------------------------------------------


def test_rotational_field_circulation():
    rot = lambda p, v: np.column_stack([-p[:, 1], p[:, 0], np.zeros(len(p))])
    res = work_integral(rot, circle_loop(radius=1.0), segments=1024)
    assert res.segments == 1024
    assert abs(res.W - 2 * math.pi) <= 1e-6
    assert abs(res.W_refined - 2 * math.pi) <= 1e-6
    sq = work_integral(rot, square_loop(side=2.0), segments=64)
    assert sq.W == pytest.approx(8.0, rel=1e-12)  # 2 x area


def test_gradient_field_square_loop():
    grad = lambda p, v: -np.column_stack([2 * p[:, 0], 2 * p[:, 1], np.zeros(len(p))])
    res = work_integral(grad, square_loop(center=(0.3, -0.1, 0), side=0.8), segments=400)
    assert abs(res.W) <= 1e-9 and abs(res.W_refined) <= 1e-9


def test_magnetic_force_does_no_work():
    src = build_halbach_linear(5, resolution=3)
    force = magnetic_force(src, q=2.0)
    c = src.centroid
    loops = [circle_loop(c, 0.06, (0.2, 1, 0.3)), square_loop(c + [0, 0, 0.01], 0.08, (1, 0, 0))]
    ang = np.linspace(0, 2 * math.pi, 200)
    poly = np.column_stack([0.07 * np.cos(ang), 0.05 * np.sin(ang), 0.02 * np.sin(3 * ang)]) + c
    poly[-1] = poly[0]
    loops.append(polyline_loop(poly))
    for lp in loops:
        res = work_integral(force, lp, speed=lambda p: 1 + p[:, 0] ** 2)
        pts = lp.points(res.segments)
        bmax = np.max(np.linalg.norm(b_total(src, pts), axis=1))
        vmax = 1 + np.max(pts[:, 0] ** 2)
        assert abs(res.W) <= 1e-12 * 2.0 * vmax * bmax * lp.length(res.segments)


def test_work_integral_preconditions():
    f = lambda p, v: np.zeros_like(p)
    with pytest.raises(UsageError, match="open"):
        polyline_loop([[0, 0, 0], [1, 0, 0], [1, 1, 0]])
    with pytest.raises(UsageError, match="16"):
        work_integral(f, circle_loop(), segments=8)
    tri = polyline_loop([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0]])
    with pytest.raises(UsageError):
        work_integral(f, tri)


# --- curl of the Lorentz force ---------------------------------------------------


def test_curl_force_uniform_and_zero_charge():
    u = UniformField([0.1, -0.3, 0.2])
    pts = shell_samples((0, 0, 0), 1.0, 2.0, 20)
    assert curl_force_check(u, 1.5, (0.3, 1, -2), pts, 1e-3) <= 1e-12
    dip = PointDipoleField([0, 0, 1.0])
    assert curl_force_check(dip, 0.0, (1, 0, 0), pts, 1e-3) == 0.0


def test_curl_force_dipole_and_order():
    f = PointDipoleField([0.2, -0.3, 1.0])
    pts = shell_samples((0, 0, 0), 0.05, 0.1, 100, seed=1)
    assert curl_force_check(f, 1.0, (1, 0, 0), pts, 1e-4) <= 1e-4
    res = [curl_force_check(f, 1.0, (1, 0, 0), pts, h) for h in (2e-3, 1e-3, 5e-4)]
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders >= 1.9)


def test_curl_force_propagates_singularity():
    src = single_magnet(Cuboid(0.01, 0.01, 0.01), resolution=3)
    with pytest.raises(SingularityError):
        curl_force_check(src, 1.0, (1, 0, 0), [[0.0, 0.0, 0.0]], 1e-5)


# --- conservativity report -------------------------------------------------------


def test_shell_samples():
    p = shell_samples((1.0, 2.0, 3.0), 0.5, 0.8, 500, seed=4)
    r = np.linalg.norm(p - [1, 2, 3], axis=1)
    assert p.shape == (500, 3) and r.min() >= 0.5 - 1e-15 and r.max() <= 0.8 + 1e-15
    assert np.array_equal(p, shell_samples((1.0, 2.0, 3.0), 0.5, 0.8, 500, seed=4))
    with pytest.raises(UsageError):
        shell_samples((0, 0, 0), 0.0, 1.0, 10)


def test_cube_report_passes():
    cube = single_magnet(Cuboid(0.01, 0.01, 0.01), resolution=5)
    rep = conservativity_report(cube, Region(inner=3, outer=6, n=300), loops=default_loops(cube))
    assert rep.all_passed, rep.as_text()
    assert rep.closed_loop_work <= 1e-12 and rep.work_segments == 1024
    assert rep.max_abs_div <= 1e-6 and rep.max_abs_curl_H <= 1e-6
    assert np.isfinite(rep.curl_force_residual)
    text = rep.as_text()
    assert "verdict=conservative" in text and "check_work=pass" in text


def test_corrupted_field_fails_divergence():
    cube = single_magnet(Cuboid(0.01, 0.01, 0.01), resolution=3)
    bad = lambda p: b_total(cube, p) + np.column_stack([np.asarray(p)[:, 0], np.zeros((len(p), 2))])
    rep = conservativity_report(bad, Region(inner=0.03, outer=0.06, n=200), h=1e-6)
    assert not rep.passed["divergence"] and rep.passed["curl_H"]
    assert any("divergence check FAILED" in n for n in rep.notes)
    assert "verdict=not-conservative" in rep.as_text()


def test_empty_loop_list_marks_work_not_run():
    rep = conservativity_report(PointDipoleField([0, 0, 1.0]), Region(n=50), h=1e-4)
    assert rep.closed_loop_work is None and "work" not in rep.passed
    assert "closed_loop_work=not-run" in rep.as_text()
    assert any("not-run" in n for n in rep.notes)
    assert isinstance(rep, ConservativityReport)
    with pytest.raises(UsageError):
        conservativity_report(PointDipoleField([0, 0, 1.0]), Region(n=10))
