"""Tests for the experiment driver: config parsing, presets, run
outputs, determinism, rate fitting, and exit codes."""

import json
import os

import numpy as np
import pytest

from ajn import cli
from ajn.cli import (
    ConfigError,
    ExperimentConfig,
    GeometryError,
    data_preset,
    fit_rate,
    geometry_preset,
    parse_config,
    run_experiment,
)


# -- config parsing ----------------------------------------------------------


def test_parse_config_defaults_and_overrides():
    cfg = parse_config(
        """
        # a comment
        geometry = square
        data = zero          # trailing comment
        theta = 0.5
        max_steps = 7
        certificate = true
        """
    )
    assert cfg.geometry == "square"
    assert cfg.data == "zero"
    assert cfg.theta == 0.5
    assert cfg.max_steps == 7
    assert cfg.certificate is True
    assert cfg.d_grad == 4 and cfg.k_mesh == 2 and cfg.seed == 0


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("bogus = 1\n")


def test_parse_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="theta"):
        parse_config("theta = 1.5\n")
    with pytest.raises(ConfigError, match="integer"):
        parse_config("max_steps = many\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just words\n")
    with pytest.raises(ConfigError, match="geometry"):
        parse_config("geometry = pentagon\n")
    with pytest.raises(ConfigError, match="marking_mode"):
        parse_config("marking_mode = cubic\n")


def test_slit_with_corner_singular_is_a_geometry_error():
    with pytest.raises(GeometryError, match="slit"):
        parse_config("geometry = slit\ndata = corner-singular\n")


# -- geometry presets --------------------------------------------------------


@pytest.mark.parametrize("name", ["square", "l-shape", "slit"])
def test_geometry_presets_are_small_enough_for_the_log_kernel(name):
    root, segs, x0 = geometry_preset(name)
    pts = root.coords
    diam = max(
        np.linalg.norm(pts - pts[i], axis=1).max() for i in range(len(pts))
    )
    assert diam <= 0.5 + 1e-12
    assert root.n_elements >= 2


def test_square_normals_match_the_side_of_each_point():
    _, segs, _ = geometry_preset("square")
    a = 0.3
    normal = cli._segment_normals(segs)
    pts = np.array(
        [[a / 2, 0.0], [a, a / 3], [a / 2, a], [0.0, 2 * a / 3]]
    )
    expected = np.array([[0, -1], [1, 0], [0, 1], [-1, 0]], dtype=float)
    assert np.allclose(normal(pts), expected)


def test_lshape_normals_near_the_reentrant_corner():
    _, segs, _ = geometry_preset("l-shape")
    a = 0.15
    normal = cli._segment_normals(segs)
    # interior points of the two edges meeting at the origin
    pts = np.array([[a / 7, 0.0], [0.0, -a / 7]])
    assert np.allclose(normal(pts), [[0, -1], [1, 0]])


# -- corner-singular data ----------------------------------------------------


def _u_pair(x, x0):
    """Independent oracle for the harmonic pair via complex arithmetic."""
    z = x[..., 0] + 1j * x[..., 1]
    phi = np.mod(np.angle(z), 2 * np.pi)
    r = np.abs(z)
    u_int = r ** (2.0 / 3.0) * np.sin(2.0 * phi / 3.0)
    u_ext = np.log(np.abs(z - complex(*x0)))
    return u_int - u_ext


def test_corner_singular_trace_matches_the_complex_oracle():
    _, data = data_preset("corner-singular", "l-shape")
    x0 = (-0.075, 0.075)
    rng = np.random.default_rng(5)
    t = rng.uniform(0.01, 0.99, size=20)
    a = 0.15
    # points on the right and top edges
    pts = np.vstack([np.column_stack([np.full(20, a), t * a]),
                     np.column_stack([a - 2 * a * t, np.full(20, a)])])
    assert np.allclose(data.U(pts), _u_pair(pts, x0), atol=1e-13)


def test_corner_singular_flux_matches_finite_differences():
    _, data = data_preset("corner-singular", "l-shape")
    x0 = (-0.075, 0.075)
    a, h = 0.15, 1e-6
    cases = [
        (np.array([a, a / 3]), np.array([1.0, 0.0])),
        (np.array([-a / 3, a]), np.array([0.0, 1.0])),
        (np.array([a / 5, 0.0]), np.array([0.0, -1.0])),
        (np.array([0.0, -a / 5]), np.array([1.0, 0.0])),
    ]
    for x, n in cases:
        # one-sided stencil into the domain to stay clear of the cut
        f0 = _u_pair((x - 0 * h * n)[None], x0)[0]
        f1 = _u_pair((x - 1 * h * n)[None], x0)[0]
        f2 = _u_pair((x - 2 * h * n)[None], x0)[0]
        fd = (3 * f0 - 4 * f1 + f2) / (2 * h)
        assert abs(data.Phi(x[None])[0] - fd) < 1e-7


def test_corner_singular_interior_part_is_harmonic():
    # five-point Laplacian of U away from both singular points
    _, data = data_preset("corner-singular", "l-shape")
    h = 1e-4
    for x in ([0.05, 0.08], [-0.1, -0.05], [0.02, 0.13]):
        x = np.asarray(x)
        s = np.array([[0, 0], [h, 0], [-h, 0], [0, h], [0, -h]]) + x
        u = data.U(s)
        lap = (u[1:].sum() - 4 * u[0]) / h ** 2
        assert abs(lap) < 1e-4


# -- runs --------------------------------------------------------------------


def test_zero_data_run_is_instant_and_exact(tmp_path):
    cfg = parse_config("geometry = square\ndata = zero\n")
    payload = run_experiment(cfg, tmp_path)
    assert payload["record"]["steps"] == 1
    assert payload["record"]["eta"] == [0.0]
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == cli.CSV_HEADER
    assert len(lines) == 2
    assert lines[1].split(",")[3] == "0.0"


@pytest.fixture(scope="module")
def corner_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("corner")
    cfg = parse_config(
        "geometry = l-shape\ndata = corner-singular\nmax_steps = 5\n"
    )
    payload = run_experiment(cfg, out)
    return out, payload


def test_corner_run_record_is_consistent(corner_run):
    out, payload = corner_run
    rec = payload["record"]
    nd = rec["n_dofs"]
    assert all(b > a for a, b in zip(nd, nd[1:]))
    assert rec["marked"][-1] == 0
    assert all(m > 0 for m in rec["marked"][:-1])
    assert len(rec["eta"]) == rec["steps"]
    eta = rec["eta"]
    assert eta[-1] < eta[0]
    # energy bookkeeping was small enough to run
    assert rec["increments"] is not None
    assert len(rec["increments"]) == rec["steps"] - 1
    assert rec["ref_errors"][-1] == 0.0
    q = [v for v in rec["qo_ratios"] if v is not None]
    assert q and all(0.1 < v < 20 for v in q)


def test_corner_run_csv_matches_the_json_record(corner_run):
    out, payload = corner_run
    rec = payload["record"]
    lines = (out / "convergence.csv").read_text().splitlines()
    assert lines[0] == cli.CSV_HEADER
    assert len(lines) == rec["steps"] + 1
    for k, line in enumerate(lines[1:]):
        parts = line.split(",")
        assert int(parts[0]) == k
        assert int(parts[1]) == rec["n_elements"][k]
        assert int(parts[2]) == rec["n_dofs"][k]
        assert float(parts[3]) == rec["eta"][k]
        assert int(parts[4]) == rec["marked"][k]
    # last row has no increment, zero reference error
    assert lines[-1].split(",")[5] == ""
    assert float(lines[-1].split(",")[6]) == 0.0


def test_identical_config_and_seed_give_identical_bytes(tmp_path):
    text = "geometry = l-shape\ndata = corner-singular\nmax_steps = 3\n"
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(parse_config(text), a)
    run_experiment(parse_config(text), b)
    for name in ("convergence.csv", "run.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_uniform_refinement_marks_every_element(tmp_path):
    cfg = parse_config(
        "geometry = square\ndata = smooth\nrefinement = uniform\n"
        "max_steps = 3\nk_mesh = 1\n"
    )
    payload = run_experiment(cfg, tmp_path)
    rec = payload["record"]
    assert rec["marked"][:-1] == rec["n_elements"][:-1]
    assert rec["marked"][-1] == 0
    assert rec["n_elements"] == [2, 4, 8, 16]


def test_energy_cap_skips_bookkeeping(tmp_path):
    cfg = parse_config(
        "geometry = square\ndata = smooth\nmax_steps = 3\n"
        "energy_max_dofs = 10\n"
    )
    payload = run_experiment(cfg, tmp_path)
    assert payload["record"]["increments"] is None
    assert "skipped" in payload and payload["skipped"]
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[1].split(",")[5] == "" and lines[1].split(",")[6] == ""


def test_dump_files_are_written(tmp_path):
    cfg = parse_config(
        "geometry = square\ndata = smooth\nmax_steps = 2\n"
        "dump_matrix = true\ndump_basis = true\n"
    )
    payload = run_experiment(cfg, tmp_path)
    assert sorted(payload["dumps"]) == ["basis.txt", "galerkin.mtx"]
    from ajn.matrix import load_matrix

    M = load_matrix(tmp_path / "galerkin.mtx")
    assert M.shape[0] == M.shape[1] > 0
    assert (tmp_path / "basis.txt").stat().st_size > 0


# -- rate fitting ------------------------------------------------------------


def _write_rows(path, rows, ref=None):
    lines = [cli.CSV_HEADER]
    for k, (n, v) in enumerate(rows):
        r = "" if ref is None else repr(ref[k])
        lines.append(f"{k},{n},{n},{v!r},1,,{r}")
    path.write_text("\n".join(lines) + "\n")


def test_fit_rate_recovers_an_exact_power_law(tmp_path):
    p = tmp_path / "c.csv"
    ns = [10, 20, 40, 80, 160, 320]
    _write_rows(p, [(n, 3.7 / n) for n in ns])
    slope, resid = fit_rate(p, window=6)
    assert abs(slope + 1.0) < 1e-12
    assert resid < 1e-12


def test_fit_rate_uses_only_the_trailing_window(tmp_path):
    p = tmp_path / "c.csv"
    rows = [(10, 999.0), (20, 123.0)] + [(n, 5.0 * n ** -0.5) for n in (40, 80, 160)]
    _write_rows(p, rows)
    slope, _ = fit_rate(p, window=3)
    assert abs(slope + 0.5) < 1e-12


def test_fit_rate_constant_column_has_zero_slope(tmp_path):
    p = tmp_path / "c.csv"
    _write_rows(p, [(n, 2.5) for n in (10, 20, 40, 80)])
    slope, _ = fit_rate(p, window=4)
    assert abs(slope) < 1e-12


def test_fit_rate_needs_three_rows(tmp_path):
    p = tmp_path / "c.csv"
    _write_rows(p, [(10, 1.0), (20, 0.5)])
    with pytest.raises(ValueError, match="3 rows"):
        fit_rate(p, window=5)


def test_fit_rate_drops_the_last_two_reference_rows(tmp_path):
    p = tmp_path / "c.csv"
    ns = [10, 20, 40, 80, 160, 320]
    ref = [100.0 / n for n in ns]
    ref[-1] = 1e-30   # surrogate bias in the tail
    ref[-2] = 1e-15
    _write_rows(p, [(n, 1.0) for n in ns], ref=ref)
    slope, resid = fit_rate(p, window=6, column="ref_error")
    assert abs(slope + 1.0) < 1e-12


def test_fit_rate_rejects_missing_column(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("step,n_dofs\n0,10\n1,20\n2,40\n")
    with pytest.raises(ValueError, match="eta"):
        fit_rate(p, window=3)


# -- entry point and exit codes ----------------------------------------------


def _run_main(tmp_path, text, *extra):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(text)
    return cli.main(
        ["run", "--config", str(cfg), "--out", str(tmp_path / "out"), "--quiet",
         *extra]
    )


def test_main_success_exit_code(tmp_path):
    assert _run_main(tmp_path, "geometry = square\ndata = zero\n") == 0
    assert (tmp_path / "out" / "run.json").exists()


def test_main_config_error_exit_code(tmp_path, capsys):
    assert _run_main(tmp_path, "bogus = 1\n") == cli.EXIT_CONFIG
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["code"] == cli.EXIT_CONFIG
    assert "bogus" in err["error"]["message"]


def test_main_geometry_error_exit_code(tmp_path, capsys):
    text = "geometry = slit\ndata = corner-singular\n"
    assert _run_main(tmp_path, text) == cli.EXIT_GEOMETRY
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["code"] == cli.EXIT_GEOMETRY


def test_main_numerical_error_exit_code(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("synthetic solver breakdown")

    monkeypatch.setattr(cli, "adaptive_loop", boom)
    text = "geometry = square\ndata = zero\n"
    assert _run_main(tmp_path, text) == cli.EXIT_NUMERICAL
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["code"] == cli.EXIT_NUMERICAL
    assert "breakdown" in err["error"]["message"]


def test_main_missing_config_file(tmp_path, capsys):
    code = cli.main(
        ["run", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]
    )
    assert code == cli.EXIT_CONFIG
    capsys.readouterr()


def test_certificate_flag_appends_the_certificate(tmp_path):
    text = "geometry = square\ndata = smooth\nmax_steps = 3\n"
    assert _run_main(tmp_path, text, "--certificate") == 0
    payload = json.loads((tmp_path / "out" / "run.json").read_text())
    cert = payload["certificate"]
    assert cert is not None
    assert cert["telescope_residual"] < 1e-8
    assert cert["c_qo"] >= 1.0 - 1e-8
