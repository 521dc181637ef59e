"""Experiment harness: config parsing, runs, sweeps, artifact emission.

Configs are INI files with [problem], [solver], [analysis] and [output]
sections; all closed-form data (forcing, exterior values, obstacle) is given
in the built-in expression grammar, so a config never executes code.  Every
run writes a manifest with the config hash, package versions, timings and a
content hash per emitted file (schema_version 1).

Exit codes: 0 all enabled assertions pass; 2 invalid config; 3 solver did
not converge; 4 an enabled assertion failed.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    comparison_test,
    default_radii,
    estimate_exponent_auto,
    free_boundary,
    refine_anchor,
)
from .energy import ProblemSpec, el_residuals
from .expressions import ExpressionError, compile_expression
from .frequency import (
    classify_point,
    compute_frequency,
    default_frequency_params,
    extend_solution,
    mollified_obstacle_extension,
    FrequencyParams,
)
from .grid_kernel import (
    FractionalPower,
    Grid,
    GridFunction,
    KernelSpec,
    LocalMatrix,
    classical_normalization,
)
from .obstacle import (
    ObstacleProblemSpec,
    alternating_two_membranes,
    contact_intervals,
    solve_obstacle,
)
from .two_membranes import Method, SolverConfig, solve_two_membranes

SCHEMA_VERSION = 1
WORKERS_ENV = "MEMBRANELAB_WORKERS"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config loading


def load_config(path) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    cfg = {sec: dict(parser[sec]) for sec in parser.sections()}
    for required in ("problem", "solver"):
        if required not in cfg:
            raise ConfigError(f"config is missing the [{required}] section")
    cfg.setdefault("analysis", {})
    cfg.setdefault("output", {})
    return cfg


def config_digest(cfg: dict) -> str:
    payload = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _get(section: dict, key: str, conv, default=None, where=""):
    if key not in section:
        if default is not None:
            return default
        raise ConfigError(f"missing key {key!r} in [{where}]")
    try:
        return conv(section[key])
    except (ValueError, ExpressionError) as exc:
        raise ConfigError(f"bad value for {where}.{key}: {exc}") from exc


def _as_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def build_grid(problem: dict) -> Grid:
    dim = _get(problem, "dim", int, 1, "problem")
    R = _get(problem, "exterior_radius", float, 4.0, "problem")
    if "n_nodes" in problem:
        n = _get(problem, "n_nodes", int, where="problem")
        if dim != 1:
            raise ConfigError("n_nodes shorthand is 1D; give h for dim = 2")
        return Grid.unit_interval(n, R)
    h = _get(problem, "h", float, where="problem")
    return Grid(dim, h, R)


def build_kernel(problem: dict, suffix: str, dim: int) -> KernelSpec:
    s = _get(problem, f"s{suffix}", float, where="problem")
    kind_name = problem.get(f"kind{suffix}", "fractional").strip().lower()
    if kind_name == "local":
        a = _get(problem, f"a{suffix}", float, 1.0, "problem")
        return KernelSpec(1.0, LocalMatrix(a))
    if kind_name != "fractional":
        raise ConfigError(f"unknown kernel kind {kind_name!r} (fractional | local)")
    if _as_bool(problem.get(f"classical{suffix}", "false")):
        c = classical_normalization(dim, s)
    else:
        c = _get(problem, f"c{suffix}", float, 1.0, "problem")
    return KernelSpec(s, FractionalPower(c))


def _field(problem: dict, key: str, grid: Grid, default: str | None = None) -> GridFunction:
    text = problem.get(key, default)
    if text is None:
        raise ConfigError(f"missing expression {key!r} in [problem]")
    names = ("x",) if grid.dim == 1 else ("x", "y")
    fn = compile_expression(text, names)
    tail_c = _get(problem, f"{key}_tail_coeff", float, 0.0, "problem")
    tail_e = _get(problem, f"{key}_tail_exp", float, 0.0, "problem")
    if grid.dim == 1:
        vals = fn(grid.axis)
    else:
        X, Y = np.meshgrid(grid.axis, grid.axis, indexing="ij")
        vals = fn(X, Y)
    return GridFunction(grid, vals, tail_c, tail_e)


def build_problem(cfg: dict):
    problem = cfg["problem"]
    mode = problem.get("mode", "two_membranes").strip().lower()
    grid = build_grid(problem)
    try:
        if mode == "two_membranes":
            k1 = build_kernel(problem, "1", grid.dim)
            k2 = build_kernel(problem, "2", grid.dim)
            spec = ProblemSpec(
                grid, k1, k2,
                f1=_field(problem, "f1", grid, "0.0"),
                f2=_field(problem, "f2", grid, "0.0"),
                exterior1=_field(problem, "exterior1", grid, "0.0"),
                exterior2=_field(problem, "exterior2", grid, "0.0"),
            )
            return mode, spec
        if mode == "obstacle":
            k = build_kernel(problem, "", grid.dim)
            spec = ObstacleProblemSpec(
                grid, k,
                f=_field(problem, "f", grid, "0.0"),
                obstacle=_field(problem, "obstacle", grid),
                exterior=_field(problem, "exterior", grid, "0.0"),
            )
            return mode, spec
    except (ValueError, ExpressionError) as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown problem mode {mode!r}")


def build_solver_config(cfg: dict) -> SolverConfig:
    sol = cfg["solver"]
    name = sol.get("method", "ActiveSetQP").strip()
    try:
        method = Method(name)
    except ValueError as exc:
        raise ConfigError(f"unknown solver method {name!r}") from exc
    return SolverConfig(
        method=method,
        max_iters=_get(sol, "max_iters", int, 200000, "solver"),
        tol=_get(sol, "tol", float, 1e-8, "solver"),
        step_rule=sol.get("step_rule", "fixed"),
        seed=_get(sol, "seed", int, 0, "solver"),
    )


# ---------------------------------------------------------------------------
# artifact emission


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if not isinstance(v, (bool, np.bool_)) else
                              str(int(v)) for v in row) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Artifacts:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def csv(self, name, header, rows):
        path = self.dir / name
        _write_csv(path, header, rows)
        self.files.append(name)

    def json(self, name, payload):
        path = self.dir / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        self.files.append(name)

    def manifest(self, cfg, timings, notes):
        payload = {
            "schema_version": SCHEMA_VERSION,
            "config_sha256": config_digest(cfg),
            "versions": {
                "membranelab": __version__,
                "numpy": np.__version__,
                "python": sys.version.split()[0],
            },
            "timings": timings,
            "warnings": notes,
            "files": {name: _sha256(self.dir / name) for name in self.files},
        }
        (self.dir / "manifest.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# the run pipeline


def run(config_path, out_dir=None, force_frequency=False, exponent_at=None) -> int:
    try:
        cfg = load_config(config_path)
        mode, spec = build_problem(cfg)
        solver_cfg = build_solver_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    analysis = cfg["analysis"]
    out = Path(out_dir or cfg["output"].get("directory", "out"))
    art = _Artifacts(out)
    notes = []
    timings = {}

    t0 = time.perf_counter()
    if mode == "two_membranes":
        if spec.kernel1.order > spec.kernel2.order:
            notes.append("s1 > s2: outside the bootstrap regime")
        if solver_cfg.method == Method.AlternatingObstacle:
            pair, report = alternating_two_membranes(spec, solver_cfg)
        else:
            pair, report = solve_two_membranes(spec, solver_cfg)
        residuals = report.residuals
        xs = spec.grid.axis[spec.grid.interior_mask]
        art.csv("solution.csv", ["x", "u1", "u2", "contact"],
                zip(xs, pair.u1.interior_values, pair.u2.interior_values,
                    report.contact_mask))
        fields = {"u1": pair.u1, "u2": pair.u2}
    else:
        sol, report = solve_obstacle(spec, solver_cfg)
        residuals = report.residuals
        xs = spec.grid.axis[spec.grid.interior_mask]
        art.csv("solution.csv", ["x", "u1", "u2", "contact"],
                zip(xs, sol.interior_values, spec.obstacle.interior_values,
                    report.contact_mask))
        fields = {"u": sol, "u_minus_obstacle": GridFunction(
            spec.grid, sol.values - spec.obstacle.values)}
    timings["solve_s"] = time.perf_counter() - t0
    report_dict = report.to_dict()
    report_dict["messages"].extend(notes)
    art.json("solve_report.json", report_dict)
    art.json("residuals.json", residuals.to_dict())

    fb_points = free_boundary(report.contact_mask, spec.grid)
    summary = {"free_boundary": fb_points}
    if spec.grid.dim == 1:
        summary["contact_intervals"] = contact_intervals(report.contact_mask, spec.grid)
    art.json("contact.json", summary)

    exit_code = 0
    if _as_bool(analysis.get("require_converged", "true")) and not report.converged:
        print("solver did not converge", file=sys.stderr)
        exit_code = 3
    if exit_code == 0 and _as_bool(analysis.get("check_residuals", "true")):
        if residuals.worst() > solver_cfg.tol:
            print(f"residuals exceed tol: {residuals.worst():.3e}", file=sys.stderr)
            exit_code = 4

    t1 = time.perf_counter()
    anchors_req = exponent_at if exponent_at is not None else analysis.get("exponent_anchors", "")
    if anchors_req:
        try:
            fits = _exponent_fits(anchors_req, analysis, fb_points, fields, spec, art)
            if fits is not None:
                art.json("exponent_fits.json", fits)
        except (ValueError, ConfigError) as exc:
            print(f"exponent analysis failed: {exc}", file=sys.stderr)
            exit_code = exit_code or 4
    timings["exponent_s"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    want_freq = force_frequency or _as_bool(analysis.get("frequency", "false"))
    if want_freq:
        if mode != "obstacle":
            print("frequency analysis requires an obstacle-mode config", file=sys.stderr)
            return 2
        if float(np.abs(spec.f.interior_values).max()) > 0:
            print("frequency runs require zero forcing", file=sys.stderr)
            return 2
        try:
            _frequency_artifacts(spec, sol, fb_points, analysis, art)
        except ValueError as exc:
            print(f"frequency analysis failed: {exc}", file=sys.stderr)
            exit_code = exit_code or 4
    timings["frequency_s"] = time.perf_counter() - t2

    if "comparison_shift" in analysis and mode == "two_membranes":
        shift = _get(analysis, "comparison_shift", float, where="analysis")
        verdict = _comparison_artifact(spec, solver_cfg, shift, art)
        if not verdict.passed:
            exit_code = exit_code or 4

    art.manifest(cfg, timings, notes)
    return exit_code


def _exponent_fits(request, analysis, fb_points, fields, spec, art):
    request = request.strip()
    if request.lower() in ("auto", "auto-free-boundary"):
        anchors = fb_points
        if not anchors:
            return {"note": "no free-boundary points detected"}
        refined = True
    else:
        try:
            anchors = [float(tok) for tok in request.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad exponent anchor list {request!r}") from exc
        refined = False
    degree = analysis.get("exponent_degree", "auto").strip().lower()
    radii = default_radii(spec.grid.h)
    out = {}
    for name, fieldfun in fields.items():
        per_anchor = []
        for x0 in anchors:
            if refined and degree in ("1", "auto"):
                fit = refine_anchor(fieldfun, x0, 1, radii)
            elif degree == "auto":
                fit, _ = estimate_exponent_auto(fieldfun, x0, radii)
            else:
                from .diagnostics import estimate_exponent
                fit = estimate_exponent(fieldfun, x0, int(degree), radii)
            per_anchor.append(fit.to_dict())
            tag = f"{name}_{len(per_anchor) - 1}"
            art.csv(f"exponent_{tag}.csv", ["r", "osc", "log_r", "log_osc"],
                    zip(fit.radii, fit.oscillations, np.log(fit.radii),
                        np.log(fit.oscillations)))
        out[name] = per_anchor
    return out


def _frequency_artifacts(spec, sol, fb_points, analysis, art):
    s = spec.kernel.order
    delta = float(analysis.get("frequency_delta", "0.5"))
    params = default_frequency_params(s, delta)
    if analysis.get("frequency_alpha") or analysis.get("frequency_eps") or \
            analysis.get("frequency_c0"):
        params = FrequencyParams(
            alpha=float(analysis.get("frequency_alpha", params.alpha)),
            eps=float(analysis.get("frequency_eps", params.eps)),
            C0=float(analysis.get("frequency_c0", params.C0)),
        )
    center = fb_points[-1] if fb_points else 0.0
    # snap the anchor to the grid so the extension window stays aligned
    ax = spec.grid.axis
    center = float(ax[np.argmin(np.abs(ax - center))])
    h = spec.grid.h
    trace = sol
    field = extend_solution(trace, s, Y=1.0, h_y=h, half_width=2.0, center=center)
    shifted = GridFunction(spec.grid, spec.obstacle.values,
                           spec.obstacle.tail_coeff, spec.obstacle.tail_exp)
    obst = mollified_obstacle_extension(shifted, field.y, half_width=2.0, center=center)
    field.x = field.x - center
    obst.x = obst.x - center
    r0 = min(min(-field.x[0], field.x[-1]), field.y[-1]) / 4.0
    radii = np.geomspace(max(6 * h, r0 / 16), r0, 16)
    report = compute_frequency(field, obst, params, radii)
    art.json("frequency.json", report.to_dict())
    art.csv("frequency.csv", ["r", "F", "Phi"],
            [(r, f, p if not np.isnan(p) else 0.0)
             for r, f, p in zip(report.radii, report.F, report.Phi)])
    cls = classify_point(report, s)
    art.json("classification.json", cls.to_dict())


def _comparison_artifact(spec, solver_cfg, shift, art):
    raised = ProblemSpec(
        spec.grid, spec.kernel1, spec.kernel2,
        f1=spec.f1, f2=spec.f2,
        exterior1=GridFunction(spec.grid, spec.exterior1.values + shift,
                               spec.exterior1.tail_coeff, spec.exterior1.tail_exp),
        exterior2=GridFunction(spec.grid, spec.exterior2.values + shift,
                               spec.exterior2.tail_coeff, spec.exterior2.tail_exp),
    )
    verdict = comparison_test(spec, raised, solver_cfg)
    art.json("comparison.json", verdict.to_dict())
    return verdict


# ---------------------------------------------------------------------------
# sweeps


def _parse_grid_spec(tokens, cfg) -> list:
    axes = []
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"bad sweep token {token!r}; expected key=v1,v2,...")
        key, _, rhs = token.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"sweep key {key!r} must be section.key")
        section, _, name = key.partition(".")
        if section not in cfg or name not in cfg[section]:
            raise ConfigError(f"unknown sweep parameter {key!r}")
        try:
            values = [float(v) for v in rhs.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"sweep values for {key!r} must be numeric") from exc
        if not values:
            raise ConfigError(f"sweep key {key!r} has no values")
        axes.append((section, name, values))
    return axes


def _run_cell(args):
    cfg, cell_dir = args
    t0 = time.perf_counter()
    import io
    from contextlib import redirect_stderr
    buf = io.StringIO()
    cell = Path(cell_dir)
    try:
        with redirect_stderr(buf):
            code = _run_from_dict(cfg, cell)
    except Exception as exc:   # any cell failure is recorded, sweep continues
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "error.txt").write_text(f"{exc}\n")
        return {"exit_code": 5, "error": str(exc), "runtime_s": time.perf_counter() - t0}
    row = {"exit_code": code, "runtime_s": time.perf_counter() - t0}
    rep = cell / "solve_report.json"
    if rep.exists():
        data = json.loads(rep.read_text())
        row["converged"] = data["converged"]
        row["max_residual"] = max(data["residuals"].values())
    fits = cell / "exponent_fits.json"
    if fits.exists():
        data = json.loads(fits.read_text())
        for field_name, items in data.items():
            if isinstance(items, list) and items:
                row[f"alpha_{field_name}"] = items[-1]["alpha_hat"]
    return row


def _run_from_dict(cfg: dict, out_dir: Path) -> int:
    import tempfile
    parser = configparser.ConfigParser()
    for sec, body in cfg.items():
        parser[sec] = {k: str(v) for k, v in body.items()}
    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        parser.write(fh)
        tmp = fh.name
    try:
        return run(tmp, out_dir)
    finally:
        os.unlink(tmp)


def sweep(config_path, grid_tokens, out_dir=None, workers=None) -> int:
    try:
        cfg = load_config(config_path)
        axes = _parse_grid_spec(grid_tokens, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(out_dir or cfg["output"].get("directory", "out")) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for combo in product(*(vals for _, _, vals in axes)):
        patched = {sec: dict(body) for sec, body in cfg.items()}
        label = []
        for (section, name, _), value in zip(axes, combo):
            patched[section][name] = repr(value)
            label.append((f"{section}.{name}", value))
        cells.append((patched, label))
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "0")) or None
    rows = []
    args = [(patched, str(out / f"cell_{k:03d}")) for k, (patched, _) in enumerate(cells)]
    if workers == 1 or len(cells) == 1:
        results = [_run_cell(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, args))
    param_names = [f"{sec}.{name}" for sec, name, _ in axes]
    extra_keys = sorted({k for r in results for k in r} - {"error"})
    all_ok = True
    with open(out / "summary.csv", "w") as fh:
        fh.write(",".join(["cell"] + param_names + extra_keys) + "\n")
        for k, ((_, label), row) in enumerate(zip(cells, results)):
            vals = [str(k)] + [_fmt(v) for _, v in label]
            for key in extra_keys:
                v = row.get(key, "")
                vals.append(_fmt(v) if isinstance(v, float) else str(v))
            fh.write(",".join(vals) + "\n")
            if row["exit_code"] != 0:
                all_ok = False
    print(f"sweep of {len(cells)} cells -> {out}")
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="membranelab",
        description="two-membranes / obstacle problem runs for nonlocal operators")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve one config and emit artifacts")
    p_solve.add_argument("config")
    p_solve.add_argument("--out", default=None)

    p_sweep = sub.add_parser("sweep", help="cartesian sweep over numeric config keys")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--grid", nargs="+", required=True,
                         metavar="SECTION.KEY=V1,V2")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--workers", type=int, default=None)

    p_freq = sub.add_parser("frequency", help="solve then run the frequency analysis")
    p_freq.add_argument("config")
    p_freq.add_argument("--out", default=None)

    p_exp = sub.add_parser("exponent", help="solve then fit local exponents")
    p_exp.add_argument("config")
    p_exp.add_argument("--at", default="auto",
                       help="comma list of anchor points, or 'auto'")
    p_exp.add_argument("--out", default=None)

    ns = parser.parse_args(argv)
    if ns.command == "solve":
        return run(ns.config, ns.out)
    if ns.command == "sweep":
        return sweep(ns.config, ns.grid, ns.out, ns.workers)
    if ns.command == "frequency":
        return run(ns.config, ns.out, force_frequency=True)
    if ns.command == "exponent":
        return run(ns.config, ns.out, exponent_at=ns.at)
    parser.error("unknown command")
    return 2


if __name__ == "__main__":
    sys.exit(main())
