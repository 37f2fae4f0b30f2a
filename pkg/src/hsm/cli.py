"""Command-line driver: solves, far fields, field reconstruction, parameter studies, validation.

Configuration is a ``key = value`` text file (``#`` starts a comment). Values
are resolved in the order preset, config file, ``--set`` overrides. Angles
accept ``pi`` expressions such as ``pi/6``; complex values use Python
literals such as ``0.25j``. Every run writes ``config.txt`` with the resolved
values into the output directory.

Exit codes: 0 success, 1 failed validation, 2 configuration error,
3 numerical failure, 4 mesh error.
"""

from __future__ import annotations

import ast
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import click
import numpy as np

from .complex_special import SpecialFunctionError
from .fem_coupling import MaterialError, MaterialField, Mesh2D, MeshError, solve_general, structured_mesh
from .hsm_assembly import NumericalFailure, QuadratureSpec, solve_dirichlet
from .linalg import NonConvergenceError, SingularMatrixError
from .postprocess import (
    ConvergenceError,
    FarFieldReport,
    UncoveredPointError,
    exact_far_field,
    exact_hankel_solution,
    exact_scaled_trace,
    far_field_axis,
    fit_log10_slope,
    plane_wave,
    reconstruct_field,
    trace_l2_error,
)
from .scaling_geometry import ParameterError, WaveParams
from .trace_space import BoundaryData, InvalidSpecError, TraceGridSpec, TraceVector

EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_MESH = 4


class ConfigError(ValueError):
    pass


# Schema: key -> (parser name, default). ``None`` defaults mean "unset".
SCHEMA: dict[str, tuple[str, Any]] = {
    "problem": ("choice:dirichlet-square,general", "dirichlet-square"),
    "k": ("real", 2 * math.pi),
    "a": ("real", 1.0),
    "b": ("real", 2.0),
    "theta": ("real", math.pi / 6),
    "T": ("real", 5.0),
    "h": ("real", 0.1),
    "q": ("int", 1),
    "panel_order": ("int", 5),
    "recon_step": ("real", 0.1),
    "recon_order": ("int", 5),
    "data": ("choice:hankel-trace,plane-wave,constant,none", "hankel-trace"),
    "amplitude": ("complex", 0.25j),
    "value": ("complex", 1.0),
    "incidence": ("real", math.pi / 6),
    "mesh": ("path", None),
    "obstacle_radius": ("real", None),
    "rho_inner": ("real", 1.0),
    "source": ("choice:none,bump", "none"),
    "source_radius": ("real", 0.5),
    "source_amplitude": ("complex", 1.0),
    "method": ("choice:auto,dense,schur", "auto"),
    "far_field_reference": ("complex", None),
    "study_param": ("choice:T,theta,h", "T"),
    "study_start": ("real", None),
    "study_stop": ("real", None),
    "study_step": ("real", None),
    "slope_window": ("pair", None),
    "grid_n": ("int", 81),
    "grid_extent": ("real", 3.0),
}

PRESETS: dict[str, dict[str, str]] = {
    "fig7": {"problem": "dirichlet-square", "a": "1", "k": "2*pi", "theta": "pi/6", "T": "5", "h": "0.1", "q": "1"},
    # h = 0.02 keeps the dense system at desk scale and still resolves the decay slope.
    "fig9-left": {
        "problem": "dirichlet-square", "a": "1", "k": "pi", "theta": "pi/6", "h": "0.02", "q": "3",
        "study_param": "T", "study_start": "1.2", "study_stop": "2.2", "study_step": "0.2",
        "slope_window": "1.4,2.0",
    },
    "fig9-right": {
        "problem": "dirichlet-square", "a": "1", "k": "2*pi", "theta": "pi/6", "h": "0.02", "q": "3",
        "study_param": "T", "study_start": "1.2", "study_stop": "2.2", "study_step": "0.2",
        "slope_window": "1.4,2.0",
    },
    "fig11": {
        "problem": "dirichlet-square", "a": "1", "k": "2*pi", "theta": "pi/6", "h": "0.01", "q": "3",
        "amplitude": "1", "far_field_reference": "0.225079-0.225079j",
        "study_param": "T", "study_start": "1.0", "study_stop": "2.6", "study_step": "0.2",
    },
    "fig12": {
        "problem": "general", "a": "0.8", "b": "1.2", "k": "2*pi", "theta": "pi/6", "T": "5", "h": "0.05",
        "q": "2", "data": "plane-wave", "incidence": "pi/6", "obstacle_radius": "0.5", "grid_extent": "3",
    },
}


_BINARY = {
    ast.Add: lambda x, y: x + y,
    ast.Sub: lambda x, y: x - y,
    ast.Mult: lambda x, y: x * y,
    ast.Div: lambda x, y: x / y,
    ast.Pow: lambda x, y: x**y,
}


def _eval_real(text: str) -> float:
    """Arithmetic on numbers and ``pi``; nothing else is evaluated."""

    def ev(node: ast.AST) -> float:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
            return _BINARY[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "sqrt":
            return math.sqrt(ev(node.args[0]))
        raise ConfigError(f"unsupported expression {text!r}")

    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError, ValueError) as exc:
        raise ConfigError(f"cannot parse number {text!r}") from exc


def parse_value(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    kind, _ = SCHEMA[key]
    text = text.strip()
    if text.lower() in ("", "none") and SCHEMA[key][1] is None:
        return None
    if kind == "real":
        return _eval_real(text)
    if kind == "int":
        value = _eval_real(text)
        if value != int(value):
            raise ConfigError(f"{key} must be an integer, got {text!r}")
        return int(value)
    if kind == "complex":
        try:
            return complex(ast.literal_eval(text.replace(" ", "")))
        except (ValueError, SyntaxError, TypeError):
            return complex(_eval_real(text))
    if kind == "pair":
        parts = text.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{key} needs two comma-separated numbers")
        return tuple(_eval_real(p) for p in parts)
    if kind == "path":
        return Path(text)
    if kind.startswith("choice:"):
        options = kind.split(":", 1)[1].split(",")
        if text not in options:
            raise ConfigError(f"{key} must be one of {', '.join(options)}, got {text!r}")
        return text
    raise AssertionError(kind)


def read_config_text(text: str) -> dict[str, str]:
    out = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def resolve(cls, preset: str | None, path: Path | None, overrides: tuple[str, ...] = ()) -> "RunConfig":
        raw: dict[str, str] = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            raw.update(PRESETS[preset])
        if path is not None:
            try:
                raw.update(read_config_text(Path(path).read_text()))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, text in raw.items():
            values[key] = parse_value(key, text)
        cfg = cls(values, raw)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        mesh = self["mesh"]
        if mesh is not None and not Path(mesh).is_file():
            raise ConfigError(f"mesh file {mesh} does not exist")
        self.params()
        self.grid().validate(self["a"])
        self.quadrature()

    def params(self) -> WaveParams:
        return WaveParams(k=self["k"], a=self["a"], b=self["b"], theta=self["theta"])

    def grid(self, **changes) -> TraceGridSpec:
        return TraceGridSpec(changes.get("T", self["T"]), changes.get("h", self["h"]), self["q"])

    def quadrature(self) -> QuadratureSpec:
        return QuadratureSpec(self["panel_order"], self["recon_step"], self["recon_order"])

    def study_values(self) -> list[float]:
        start, stop, step = self["study_start"], self["study_stop"], self["study_step"]
        if start is None:
            return [self[self["study_param"]]]
        stop = start if stop is None else stop
        if stop < start:
            raise ConfigError(f"study range is reversed: start {start} > stop {stop}")
        if stop == start:
            return [start]
        if step is None or not step > 0:
            raise ConfigError("study_step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(count)]

    def echo(self, out: Path) -> None:
        lines = [f"{key} = {_format(value)}" for key, value in self.values.items()]
        (out / "config.txt").write_text("\n".join(lines) + "\n")


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, complex):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return "none" if value is None else str(value)


# Problem data -------------------------------------------------------------


def square_boundary_data(cfg: RunConfig, params: WaveParams) -> BoundaryData:
    kind = cfg["data"]
    if kind == "hankel-trace":
        amp = cfg["amplitude"]
        return BoundaryData.from_global(lambda x, y: exact_hankel_solution(params, x, y, amp), params.a)
    if kind == "plane-wave":
        return BoundaryData.from_global(lambda x, y: -plane_wave(params.k, cfg["incidence"], x, y), params.a)
    if kind == "constant":
        return BoundaryData.constant(cfg["value"])
    return BoundaryData.zero()


def radial_bump(radius: float, amplitude: complex):
    """``amplitude (1 - r^2/radius^2)^2`` inside the disk, zero outside."""

    def f(x, y):
        rr = (np.asarray(x) ** 2 + np.asarray(y) ** 2) / radius**2
        return np.where(rr < 1.0, amplitude * (1.0 - rr) ** 2, 0.0)

    return f


def general_problem(cfg: RunConfig, params: WaveParams):
    if cfg["mesh"] is not None:
        mesh = Mesh2D.read(cfg["mesh"])
    else:
        mesh = structured_mesh(params.a, params.b, cfg["h"], obstacle_radius=cfg["obstacle_radius"])
    source = radial_bump(cfg["source_radius"], cfg["source_amplitude"]) if cfg["source"] == "bump" else None
    materials = MaterialField(rho={0: 1.0, 1: cfg["rho_inner"]}, f=source)
    obstacle_g = None
    if mesh.has_obstacle():
        if cfg["data"] == "plane-wave":
            obstacle_g = lambda x, y: -plane_wave(params.k, cfg["incidence"], x, y)  # noqa: E731
        elif cfg["data"] == "constant":
            value = cfg["value"]
            obstacle_g = lambda x, y: np.full(np.shape(x), value, dtype=complex)  # noqa: E731
        else:
            raise ConfigError("an obstacle needs data = plane-wave or constant")
    return mesh, materials, obstacle_g


@dataclass
class Solution:
    params: WaveParams
    traces: TraceVector
    u_b: Any = None
    report: dict = field(default_factory=dict)


def run_solve(cfg: RunConfig, threads: int, **grid_changes) -> Solution:
    params = cfg.params() if "theta" not in grid_changes else WaveParams(
        cfg["k"], cfg["a"], cfg["b"], grid_changes.pop("theta")
    )
    grid, quad = cfg.grid(**grid_changes), cfg.quadrature()
    start = time.perf_counter()
    if cfg["problem"] == "dirichlet-square":
        traces, system = solve_dirichlet(params, grid, quad, square_boundary_data(cfg, params), threads=threads)
        report = {
            "problem": "dirichlet-square",
            "trace_dofs": int(traces.basis.ndofs),
            "unknowns": int(system.matrix.shape[0]),
            "residual": float(system.timings.get("residual", float("nan"))),
            "timings": {k: float(v) for k, v in system.timings.items()},
        }
        sol = Solution(params, traces, None, report)
    else:
        mesh, materials, obstacle_g = general_problem(cfg, params)
        u_b, traces, system = solve_general(
            params, grid, quad, mesh, materials, obstacle_g, method=cfg["method"], threads=threads,
            return_system=True,
        )
        report = {
            "problem": "general",
            "fem_dofs": int(u_b.space.ndofs),
            "trace_dofs": int(traces.basis.ndofs),
            "unknowns": int(system.size),
            "vertices": int(mesh.vertices.shape[0]),
            "triangles": int(mesh.triangles.shape[0]),
            "residual": float(system.timings.get("residual", float("nan"))),
            "timings": {k: float(v) for k, v in system.timings.items()},
        }
        sol = Solution(params, traces, u_b, report)
    sol.report["seconds"] = time.perf_counter() - start
    sol.report["params"] = vars(params)
    return sol


# Commands -----------------------------------------------------------------


def _prepare(ctx: click.Context) -> tuple[RunConfig, Path, int]:
    obj = ctx.obj
    cfg = RunConfig.resolve(obj["preset"], obj["config"], obj["overrides"])
    out = Path(obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out)
    return cfg, out, obj["threads"]


def _write_json(path: Path, body: dict) -> None:
    path.write_text(json.dumps(body, indent=2, default=_json_default) + "\n")


def _json_default(value: Any):
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(type(value).__name__)


def _far_field(sol: Solution, cfg: RunConfig) -> FarFieldReport:
    values = [far_field_axis(sol.traces, j, sol.params) for j in range(4)]
    extra = {}
    ref = cfg["far_field_reference"]
    if ref is None and cfg["problem"] == "dirichlet-square" and cfg["data"] == "hankel-trace":
        ref = exact_far_field(sol.params, cfg["amplitude"])
    if ref is not None:
        extra["reference"] = {"re": ref.real, "im": ref.imag}
        extra["errors"] = [abs(v - ref) for v in values]
    return FarFieldReport(values, sol.traces.basis.T, cfg.quadrature(), sol.params, extra)


def _grid_points(cfg: RunConfig) -> np.ndarray:
    n, ext = cfg["grid_n"], cfg["grid_extent"]
    axis = np.linspace(-ext, ext, n)
    x, y = np.meshgrid(axis, axis)
    return np.column_stack([x.ravel(), y.ravel()])


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", default="hsm-out", show_default=True, type=click.Path(file_okay=False))
@click.option("--threads", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key.")
@click.pass_context
def cli(ctx, config, out, threads, preset, overrides):
    """Half-space matching solver for 2D Helmholtz scattering."""
    ctx.obj = {"config": config, "out": out, "threads": threads, "preset": preset, "overrides": overrides}


@cli.command("solve-square")
@click.pass_context
def solve_square(ctx):
    """Dirichlet problem outside the inner square."""
    cfg, out, threads = _prepare(ctx)
    if cfg["problem"] != "dirichlet-square":
        raise ConfigError("solve-square needs problem = dirichlet-square")
    sol = run_solve(cfg, threads)
    sol.traces.to_csv(out / "traces.csv")
    _write_json(out / "report.json", sol.report)
    click.echo(f"wrote {out / 'traces.csv'} ({sol.report['unknowns']} unknowns, {sol.report['seconds']:.2f} s)")


@cli.command("solve-general")
@click.pass_context
def solve_general_cmd(ctx):
    """Coupled finite element and half-space problem."""
    cfg, out, threads = _prepare(ctx)
    if cfg["problem"] != "general":
        raise ConfigError("solve-general needs problem = general")
    sol = run_solve(cfg, threads)
    sol.traces.to_csv(out / "traces.csv")
    sol.u_b.to_vtk(out / "u_b.vtk")
    _write_json(out / "report.json", sol.report)
    click.echo(f"wrote {out / 'u_b.vtk'} ({sol.report['unknowns']} unknowns, {sol.report['seconds']:.2f} s)")


@cli.command()
@click.pass_context
def farfield(ctx):
    """Far-field coefficients on the four axis directions, optionally swept in T."""
    cfg, out, threads = _prepare(ctx)
    if cfg["study_param"] != "T":
        raise ConfigError("farfield sweeps only T")
    rows, reports = [], []
    for T in cfg.study_values():
        report = _far_field(run_solve(cfg, threads, T=T), cfg)
        reports.append(json.loads(report.to_text()))
        for j, v in enumerate(report.values):
            err = report.extra["errors"][j] if "errors" in report.extra else float("nan")
            rows.append([repr(T), j, repr(v.real), repr(v.imag), repr(err)])
        click.echo(f"T={T:.4g}: F0 = {report.values[0]:.6f}")
    with open(out / "farfield.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "j", "re", "im", "error"])
        writer.writerows(rows)
    _write_json(out / "farfield.json", {"runs": reports})


@cli.command()
@click.pass_context
def reconstruct(ctx):
    """Solve, then sample the field on a square grid (CSV and VTK)."""
    cfg, out, threads = _prepare(ctx)
    sol = run_solve(cfg, threads)
    grid = reconstruct_field(
        sol.traces, sol.u_b, _grid_points(cfg), sol.params, cfg.quadrature(), check_overlap=sol.u_b is not None
    )
    grid.to_csv(out / "field.csv")
    grid.to_vtk(out / "field.vtk")
    sol.traces.to_csv(out / "traces.csv")
    _write_json(out / "report.json", sol.report)
    click.echo(f"wrote {out / 'field.csv'} ({len(grid.points)} points)")


@cli.command()
@click.pass_context
def study(ctx):
    """Sweep T, theta or h against the exact source solution; fit the log10 error slope."""
    cfg, out, threads = _prepare(ctx)
    if cfg["problem"] != "dirichlet-square" or cfg["data"] != "hankel-trace":
        raise ConfigError("study needs problem = dirichlet-square and data = hankel-trace")
    param = cfg["study_param"]
    values = cfg.study_values()
    errors = []
    for v in values:
        sol = run_solve(cfg, threads, **{param: v})
        exact = lambda s, p=sol.params: exact_scaled_trace(p, s, cfg["amplitude"])  # noqa: E731
        errors.append(trace_l2_error(sol.traces, exact, sol.params))
        click.echo(f"{param}={v:.6g}: L2 error {errors[-1]:.4e}")
    window = cfg["slope_window"] or (min(values), max(values))
    inside = [i for i, v in enumerate(values) if window[0] - 1e-9 <= v <= window[1] + 1e-9]
    slope = fit_log10_slope([values[i] for i in inside], [errors[i] for i in inside]) if len(inside) > 1 else None
    with open(out / "study.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "l2_error", "slope"])
        for v, e in zip(values, errors):
            writer.writerow([param, repr(v), repr(e), "" if slope is None else repr(slope)])
    if slope is not None:
        click.echo(f"fitted log10 slope on [{window[0]:.4g}, {window[1]:.4g}]: {slope:.4f}")


@cli.command()
@click.option("--only", multiple=True, type=click.IntRange(1, 7), help="Run only these criteria.")
def validate(only):
    """Run the acceptance criteria and print one line per criterion."""
    from .acceptance import run_all

    results = run_all(set(only) or None, echo=click.echo)
    passed = sum(r.passed for r in results)
    click.echo(f"{passed}/{len(results)} criteria passed")
    if passed != len(results):
        sys.exit(EXIT_VALIDATION)


ERROR_CODES: tuple[tuple[tuple[type[BaseException], ...], int], ...] = (
    ((MeshError,), EXIT_MESH),
    ((ConfigError, InvalidSpecError, ParameterError, MaterialError), EXIT_CONFIG),
    (
        (
            NumericalFailure,
            SingularMatrixError,
            NonConvergenceError,
            ConvergenceError,
            SpecialFunctionError,
            UncoveredPointError,
        ),
        EXIT_NUMERICAL,
    ),
)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, prog_name="hsm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # mapped to documented exit codes below
        for types, code in ERROR_CODES:
            if isinstance(exc, types):
                click.echo(f"error: {exc}", err=True)
                return code
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
