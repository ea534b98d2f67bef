"""Experiment driver: geometry and data presets, key=value config
files, run orchestration, CSV/JSON serialization, and rate fitting.

Outputs are plain text (convergence.csv + run.json) and are
byte-identical for identical config and seed on one platform: nothing
time- or environment-dependent is written.
"""

import os

# cap worker parallelism before numpy initializes its thread pools
_threads = os.environ.get("AJN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import dataclass, asdict

import numpy as np

from .mesh import (
    GradingConfig,
    enforce_grading,
    nvb_refine,
    root_mesh,
    uniform_hierarchy,
)
from .operators import CoupledProblemData, assemble_coupled
from .solver import (
    AdaptiveConfig,
    AdaptiveRunRecord,
    adaptive_loop,
    assemble_hierarchical,
    energy_norms,
    estimate,
    qo_ratios,
    solve,
)
from .hierarchy import hierarchical_basis, dump_basis
from .matrix import (
    pairwise_metric,
    qo_certificate,
    save_matrix,
    search_metric_params,
)

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "GeometryError",
    "NumericalError",
    "parse_config",
    "geometry_preset",
    "data_preset",
    "run_experiment",
    "fit_rate",
    "main",
    "EXIT_CONFIG",
    "EXIT_GEOMETRY",
    "EXIT_NUMERICAL",
    "CSV_HEADER",
]

EXIT_CONFIG = 2
EXIT_GEOMETRY = 3
EXIT_NUMERICAL = 4

CSV_HEADER = "step,n_elements,n_dofs,eta,marked,increment_energy,ref_error"
SCHEMA_VERSION = 1

# cutoff for the d3 Jaffard certificate scan
CERT_GAMMA_PRIME = 0.5


class ConfigError(Exception):
    """Config file cannot be parsed or holds invalid values."""


class GeometryError(Exception):
    """Geometry preset invalid or incompatible with the requested data."""


class NumericalError(Exception):
    """The numerical pipeline failed (solve, assembly, factorization)."""


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    geometry: str = "l-shape"
    data: str = "smooth"
    theta: float = 0.3
    d_grad: int = 4
    k_mesh: int = 2
    max_steps: int = 15
    max_dofs: int = None
    marking_mode: str = "linear"
    refinement: str = "adaptive"
    seed: int = 0
    certificate: bool = False
    energy_max_dofs: int = 6000
    dump_matrix: bool = False
    dump_basis: bool = False

    def validate(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry preset {self.geometry!r}")
        if self.data not in DATA_PRESETS:
            raise ConfigError(f"unknown data preset {self.data!r}")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.marking_mode not in ("linear", "squared"):
            raise ConfigError(f"unknown marking_mode {self.marking_mode!r}")
        if self.refinement not in ("adaptive", "uniform"):
            raise ConfigError(f"unknown refinement {self.refinement!r}")
        if self.d_grad < 1 or self.k_mesh < 1 or self.max_steps < 1:
            raise ConfigError("d_grad, k_mesh, and max_steps must be >= 1")
        if self.geometry == "slit" and self.data == "corner-singular":
            # the slit boundary visits coincident points with opposite
            # normals, so pointwise U/Phi data cannot be single-valued
            raise GeometryError(
                "corner-singular data is not single-valued on the slit "
                "boundary; use the square or l-shape geometry"
            )

    def adaptive_config(self):
        return AdaptiveConfig(
            theta=self.theta,
            d_grad=self.d_grad,
            max_steps=self.max_steps,
            max_dofs=self.max_dofs,
            marking=self.marking_mode,
        )


_BOOL_KEYS = {"certificate", "dump_matrix", "dump_basis"}
_INT_KEYS = {"d_grad", "k_mesh", "max_steps", "max_dofs", "seed", "energy_max_dofs"}
_FLOAT_KEYS = {"theta"}
_STR_KEYS = {"geometry", "data", "marking_mode", "refinement"}


def parse_config(text):
    """Parse a key = value config file into an ExperimentConfig."""
    cfg = ExperimentConfig()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key in _BOOL_KEYS:
            if val.lower() not in ("true", "false", "0", "1", "yes", "no"):
                raise ConfigError(f"line {ln}: {key} must be a boolean, got {val!r}")
            setattr(cfg, key, val.lower() in ("true", "1", "yes"))
        elif key in _INT_KEYS:
            try:
                setattr(cfg, key, int(val))
            except ValueError as exc:
                raise ConfigError(f"line {ln}: {key} must be an integer") from exc
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(val))
            except ValueError as exc:
                raise ConfigError(f"line {ln}: {key} must be a number") from exc
        elif key in _STR_KEYS:
            setattr(cfg, key, val)
        else:
            raise ConfigError(f"line {ln}: unknown config key {key!r}")
    cfg.validate()
    return cfg


# -- geometry presets --------------------------------------------------------
#
# All roots are rescaled so diam(Omega) < 1/2, which the boundary
# integral operators require (log kernel sign).  Each preset also
# carries its boundary segments with outward normals for pointwise data.


def _square_geometry(a=0.3):
    coords = [(0, 0), (a, 0), (a, a), (0, a)]
    root = root_mesh(coords, [(0, 1, 2), (0, 2, 3)])
    segs = [
        ((0, 0), (a, 0), (0, -1)),
        ((a, 0), (a, a), (1, 0)),
        ((a, a), (0, a), (0, 1)),
        ((0, a), (0, 0), (-1, 0)),
    ]
    return root, segs, (a / 2, a / 2)


def _lshape_geometry(a=0.15):
    coords = [
        (0, 0), (a, 0), (a, a), (0, a), (-a, a), (-a, 0), (-a, -a), (0, -a),
    ]
    tris = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5), (0, 5, 6), (0, 6, 7)]
    root = root_mesh(coords, tris)
    segs = [
        ((0, 0), (a, 0), (0, -1)),
        ((a, 0), (a, a), (1, 0)),
        ((a, a), (-a, a), (0, 1)),
        ((-a, a), (-a, -a), (-1, 0)),
        ((-a, -a), (0, -a), (0, -1)),
        ((0, -a), (0, 0), (1, 0)),
    ]
    return root, segs, (-a / 2, a / 2)


def _slit_geometry(a=0.15):
    coords = [
        (0, 0),
        (a, 0),
        (a, -a), (0, -a), (-a, -a), (-a, 0), (-a, a), (0, a), (a, a),
        (a, 0),
    ]
    ring = [1, 2, 3, 4, 5, 6, 7, 8, 9]
    tris = [(0, ring[i], ring[i + 1]) for i in range(len(ring) - 1)]
    root = root_mesh(coords, tris)
    return root, None, (-a / 2, a / 2)


GEOMETRIES = {
    "square": _square_geometry,
    "l-shape": _lshape_geometry,
    "slit": _slit_geometry,
}


def geometry_preset(name):
    try:
        builder = GEOMETRIES[name]
    except KeyError as exc:
        raise ConfigError(f"unknown geometry preset {name!r}") from exc
    try:
        return builder()
    except Exception as exc:
        raise GeometryError(f"geometry preset {name!r} failed: {exc}") from exc


def _segment_normals(segs):
    """Pointwise outward normal on a polygonal boundary: each point is
    assigned the normal of the nearest boundary segment."""
    pa = np.array([s[0] for s in segs], dtype=float)
    pb = np.array([s[1] for s in segs], dtype=float)
    nr = np.array([s[2] for s in segs], dtype=float)
    d = pb - pa
    ln2 = np.einsum("sa,sa->s", d, d)

    def normal(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.clip(np.einsum("na,sa->ns", x, d) - (pa * d).sum(axis=1), 0.0, ln2)
        proj = pa[None] + (t / ln2)[:, :, None] * d[None]
        dist = np.linalg.norm(x[:, None, :] - proj, axis=2)
        return nr[np.argmin(dist, axis=1)]

    return normal


# -- data presets ------------------------------------------------------------


def _zero_data(root, segs, x0):
    return CoupledProblemData()


def _smooth_data(root, segs, x0):
    return CoupledProblemData(F=lambda x: np.ones(np.asarray(x).shape[:-1]))


def _corner_singular_data(root, segs, x0):
    """Transmission data of a harmonic pair: interior r^(2/3) corner
    singularity at the origin (branch cut along the positive x axis,
    which lies on the boundary), exterior point source log|x - x0|
    with x0 inside the domain."""
    x0 = np.asarray(x0, dtype=float)
    normal = _segment_normals(segs)

    def polar(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.hypot(x[:, 0], x[:, 1])
        phi = np.arctan2(x[:, 1], x[:, 0])
        phi = np.where(phi < 0, phi + 2 * np.pi, phi)
        return r, phi

    def u_int(x):
        r, phi = polar(x)
        return r ** (2.0 / 3.0) * np.sin(2.0 * phi / 3.0)

    def grad_int(x):
        r, phi = polar(x)
        with np.errstate(divide="ignore"):
            m = (2.0 / 3.0) * r ** (-1.0 / 3.0)
        m = np.where(r > 0, m, 0.0)
        # for f(z) = z^(2/3): grad Im f = (Im f', Re f')
        return np.column_stack([-m * np.sin(phi / 3.0), m * np.cos(phi / 3.0)])

    def u_ext(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.log(np.linalg.norm(x - x0, axis=1))

    def grad_ext(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x - x0
        return d / np.einsum("na,na->n", d, d)[:, None]

    def U(x):
        return u_int(x) - u_ext(x)

    def Phi(x):
        n = normal(x)
        g = grad_int(x) - grad_ext(x)
        return np.einsum("na,na->n", g, n)

    return CoupledProblemData(U=U, Phi=Phi)


DATA_PRESETS = {
    "zero": _zero_data,
    "smooth": _smooth_data,
    "corner-singular": _corner_singular_data,
}


def data_preset(name, geometry_name):
    root, segs, x0 = geometry_preset(geometry_name)
    try:
        builder = DATA_PRESETS[name]
    except KeyError as exc:
        raise ConfigError(f"unknown data preset {name!r}") from exc
    if name == "corner-singular" and segs is None:
        raise GeometryError(
            "corner-singular data is not single-valued on the slit "
            "boundary; use the square or l-shape geometry"
        )
    return root, builder(root, segs, x0)


# -- run orchestration -------------------------------------------------------


def _uniform_loop(root, data, cfg):
    """Solve/estimate on a uniformly refined family (k_mesh bisection
    rounds of every element per step); same record layout as the
    adaptive loop, marked = all elements."""
    acfg = cfg.adaptive_config()
    acfg.validate()
    gcfg = GradingConfig(d_grad=cfg.d_grad)
    mesh = enforce_grading(root, gcfg)
    record = AdaptiveRunRecord(config=acfg)
    max_dofs = np.inf if cfg.max_dofs is None else cfg.max_dofs
    while True:
        sys = assemble_coupled(mesh, data)
        x = solve(sys)
        est = estimate(sys, x, data)
        done = (
            est.total == 0.0
            or record.n_steps >= cfg.max_steps
            or sys.dim >= max_dofs
        )
        marked = np.empty(0, dtype=np.int64) if done else np.arange(mesh.n_elements)
        record.append(mesh, x, est, marked, sys.dim)
        if done:
            return record
        for _ in range(cfg.k_mesh):
            mesh = nvb_refine(mesh, np.arange(mesh.n_elements))
        mesh = enforce_grading(mesh, gcfg)


def _run_certificate(hs, hb, root, seed):
    funcs = [
        hb.volume[i] if kind == "volume" else hb.density[i] for kind, i in hb.order
    ]
    maxlev = max(f.level for f in funcs)
    mhier = uniform_hierarchy(root, 1, maxlev)
    params = search_metric_params(funcs, mhier, n_triples=10000, seed=seed)
    d2 = pairwise_metric(funcs, "d2", params)
    d3 = pairwise_metric(funcs, "d3", params)
    out = qo_certificate(
        hs.M,
        hs.level,
        1e-3,
        n_l=hs.n_l,
        f=hs.f,
        d2=d2,
        d3=d3,
        gamma_prime=CERT_GAMMA_PRIME,
    )
    out["beta"] = params.beta
    out["gamma"] = params.gamma
    out["gamma_prime"] = CERT_GAMMA_PRIME
    return out


def _fmt(x):
    return repr(float(x))


def _write_csv(path, record):
    inc = record.increments
    ref = record.ref_errors
    lines = [CSV_HEADER]
    for k in range(record.n_steps):
        i = _fmt(inc[k]) if inc is not None and k < len(inc) else ""
        r = _fmt(ref[k]) if ref is not None and k < len(ref) else ""
        lines.append(
            ",".join(
                [
                    str(k),
                    str(int(record.meshes[k].n_elements)),
                    str(int(record.n_dofs[k])),
                    _fmt(record.estimators[k].total),
                    str(int(len(record.marked[k]))),
                    i,
                    r,
                ]
            )
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def fit_rate(csv_path, window, column="eta"):
    """Least-squares slope of log(column) vs log(n_dofs) over the
    trailing window rows; returns (slope, residual).

    When fitting a reference-error column the final two rows are
    excluded (the reference solution is the last iterate, which biases
    the tail).  Rows with nonpositive values are a fitting error.
    """
    rows = []
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) == len(header):
                rows.append(dict(zip(header, parts)))
    for col in ("n_dofs", column):
        if col not in header:
            raise ValueError(f"column {col!r} missing from {csv_path}")
    if column == "ref_error":
        rows = rows[:-2]
    rows = rows[-window:]
    vals = [(r["n_dofs"], r[column]) for r in rows if r[column] != ""]
    if len(vals) < 3:
        raise ValueError(f"need at least 3 rows in the window, got {len(vals)}")
    n = np.array([float(a) for a, _ in vals])
    v = np.array([float(b) for _, b in vals])
    if np.any(v <= 0):
        raise ValueError("values must be positive for a log-log fit")
    slope, intercept = np.polyfit(np.log(n), np.log(v), 1)
    resid = np.log(v) - (slope * np.log(n) + intercept)
    return float(slope), float(np.sqrt(np.mean(resid ** 2)))


def run_experiment(cfg, out_dir, quiet=True, log=None):
    """Run the configured experiment and write convergence.csv and
    run.json into out_dir; returns the run.json payload."""
    cfg.validate()
    root, data = data_preset(cfg.data, cfg.geometry)
    os.makedirs(out_dir, exist_ok=True)

    def say(msg):
        if not quiet:
            print(msg, file=log or sys.stdout)

    say(f"running {cfg.refinement} {cfg.geometry}/{cfg.data} "
        f"theta={cfg.theta} d_grad={cfg.d_grad}")
    try:
        if cfg.refinement == "uniform":
            record = _uniform_loop(root, data, cfg)
        else:
            record = adaptive_loop(root, data, cfg.adaptive_config())
    except ValueError as exc:
        raise GeometryError(str(exc)) from exc
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise NumericalError(str(exc)) from exc
    say(f"finished {record.n_steps} steps, final dofs {record.n_dofs[-1]}")

    hb = hs = None
    certificate = None
    skipped = None
    if record.n_dofs[-1] <= cfg.energy_max_dofs:
        try:
            hier = uniform_hierarchy(record.meshes[0], 1, 0)
            hb = hierarchical_basis(hier, record.meshes)
            hs = assemble_hierarchical(hb, data, record.meshes[-1])
            energy_norms(record, hs)
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            raise NumericalError(str(exc)) from exc
        say(f"energy bookkeeping on {hs.dim} hierarchical dofs")
        if cfg.certificate:
            try:
                certificate = _run_certificate(hs, hb, record.meshes[0], cfg.seed)
            except (RuntimeError, np.linalg.LinAlgError) as exc:
                raise NumericalError(str(exc)) from exc
            say(f"certificate: c_qo = {certificate['c_qo']:.3f}")
    else:
        skipped = (
            f"energy bookkeeping skipped: {record.n_dofs[-1]} dofs exceed "
            f"energy_max_dofs = {cfg.energy_max_dofs}"
        )
        say(skipped)
        if cfg.certificate:
            raise ConfigError(
                "certificate requested but energy bookkeeping is skipped; "
                "raise energy_max_dofs or lower max_dofs"
            )

    csv_path = os.path.join(out_dir, "convergence.csv")
    _write_csv(csv_path, record)

    dumps = []
    if cfg.dump_matrix:
        target = os.path.join(out_dir, "galerkin.mtx")
        if hs is not None:
            save_matrix(target, hs.M)
        else:
            save_matrix(target, assemble_coupled(record.meshes[-1], data).matrix())
        dumps.append("galerkin.mtx")
    if cfg.dump_basis and hb is not None:
        dump_basis(hb, os.path.join(out_dir, "basis.txt"))
        dumps.append("basis.txt")

    fits = None
    eta = record.eta
    if np.all(eta > 0) and record.n_steps >= 3:
        nd = np.asarray(record.n_dofs, dtype=float)
        window = max(3, int(np.sum(nd >= nd[-1] / 10.0)))
        window = min(window, record.n_steps)
        if window >= 3:
            slope, resid = fit_rate(csv_path, window, column="eta")
            fits = {"eta_slope": slope, "eta_residual": resid, "window": window}

    ratios = None
    if record.increments is not None:
        q = qo_ratios(record.increments, record.ref_errors)
        ratios = [None if not np.isfinite(v) else float(v) for v in q]

    payload = {
        "schema_version": SCHEMA_VERSION,
        "csv_header": CSV_HEADER,
        "config": asdict(cfg),
        "record": {
            "steps": record.n_steps,
            "n_elements": [int(v) for v in record.n_elements],
            "n_dofs": [int(v) for v in record.n_dofs],
            "eta": [float(v) for v in eta],
            "marked": [int(len(m)) for m in record.marked],
            "increments": None
            if record.increments is None
            else [float(v) for v in record.increments],
            "ref_errors": None
            if record.ref_errors is None
            else [float(v) for v in record.ref_errors],
            "qo_ratios": ratios,
            "hier_dofs": None if hs is None else [int(v) for v in hs.n_l],
        },
        "fits": fits,
        "certificate": certificate,
        "skipped": skipped,
        "dumps": dumps,
    }
    with open(os.path.join(out_dir, "run.json"), "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


# -- entry point -------------------------------------------------------------


def _error_report(code, exc):
    return json.dumps(
        {"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}}
    )


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ajn", description="adaptive FEM/BEM coupling experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True, help="key = value config file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument(
        "--certificate",
        action="store_true",
        help="append the quasi-orthogonality certificate to run.json",
    )
    run_p.add_argument("--quiet", action="store_true", help="suppress progress output")
    args = parser.parse_args(argv)

    try:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        cfg = parse_config(text)
        if args.certificate:
            cfg.certificate = True
        run_experiment(cfg, args.out, quiet=args.quiet)
    except ConfigError as exc:
        print(_error_report(EXIT_CONFIG, exc), file=sys.stderr)
        return EXIT_CONFIG
    except GeometryError as exc:
        print(_error_report(EXIT_GEOMETRY, exc), file=sys.stderr)
        return EXIT_GEOMETRY
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(_error_report(EXIT_NUMERICAL, exc), file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
