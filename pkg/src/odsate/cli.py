"""Command-line front end: ``odsate {fit,simulate,sensitivity}``.

Settings come from defaults, then an optional TOML config file, then flags.
Exit codes: 0 success, 2 input error, 3 numerical failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .core_model import MismeasureSpec, ObservedSample
from .ee_solver import SolveOptions
from .errors import (
    AllGridFailed,
    CalibrationFailure,
    DegenerateSample,
    DegenerateTreatment,
    DomainError,
    IllConditioned,
    IllConditionedWarning,
    InsufficientClass,
    NonConvergence,
    OdsateError,
    ParseError,
    RangeCollapse,
    SchemaError,
    SingularJacobian,
)
from .gam_ee import DEFAULT_LAMBDA_GRID, SplineConfig, fit_gam_ee
from .glm_ee import fit_glm_ee
from .sim_harness import ScenarioSpec, case_control_sample, generate_pool, run_replications, stream, STAGE_SAMPLE

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4
OUTCOME, TREATMENT = "outcome_star", "treatment"
COMMANDS = ("fit", "simulate", "sensitivity")
ENGINES = ("glm", "gam", "both")

INPUT_ERRORS = (ParseError, SchemaError, DomainError, DegenerateSample, DegenerateTreatment,
                InsufficientClass, FileNotFoundError, IsADirectoryError, tomllib.TOMLDecodeError)
NUMERIC_ERRORS = (NonConvergence, SingularJacobian, RangeCollapse, IllConditioned, AllGridFailed,
                  CalibrationFailure)


class AllPointsFailed(OdsateError):
    """Every sensitivity grid point failed to produce an estimate."""


@dataclass
class SensitivityGrid:
    v_values: tuple
    p10_values: tuple
    p01_values: tuple

    def __post_init__(self):
        for name in ("v_values", "p10_values", "p01_values"):
            vals = tuple(float(x) for x in getattr(self, name))
            if not vals:
                raise DomainError(f"{name} must be non-empty", constraint=f"{name} non-empty")
            setattr(self, name, vals)
        list(self.specs())  # MismeasureSpec validates each triple

    def specs(self):
        for v, p10, p01 in itertools.product(self.v_values, self.p10_values, self.p01_values):
            yield MismeasureSpec(v, p01, p10)

    def __len__(self):
        return len(self.v_values) * len(self.p10_values) * len(self.p01_values)


@dataclass
class RunConfig:
    command: str = "fit"
    input_path: str | None = None
    v: tuple = (0.01,)
    p01: tuple = (0.0,)
    p10: tuple = (0.0,)
    engine: str = "glm"
    covariates: tuple | None = None
    covariate_kinds: tuple | None = None
    spline: SplineConfig = field(default_factory=SplineConfig)
    solver: SolveOptions = field(default_factory=SolveOptions)
    output_dir: str = "odsate_out"
    seed: int = 2024
    jobs: int = 1
    model: str = "M1"
    n_sample: int = 2000
    pool_size: int = 1_000_000
    replications: int = 200
    n_mc: int = 2_000_000
    treatment_coef: float = -2.0
    methods: tuple = ("glm", "gam")
    export_sample: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise DomainError(f"unknown command {self.command!r}", constraint="command")
        if self.engine not in ENGINES:
            raise DomainError(f"unknown engine {self.engine!r}", constraint="engine")
        if self.jobs < 1:
            raise DomainError("jobs must be >= 1", constraint="jobs>=1")

    def single_spec(self) -> MismeasureSpec:
        if max(len(self.v), len(self.p01), len(self.p10)) != 1:
            raise DomainError(f"{self.command} takes a single (v, p01, p10)", constraint="single spec")
        return MismeasureSpec(self.v[0], self.p01[0], self.p10[0])

    def grid(self) -> SensitivityGrid:
        return SensitivityGrid(self.v, self.p10, self.p01)

    def scenario(self) -> ScenarioSpec:
        spec = self.single_spec()
        return ScenarioSpec(self.model, spec.v, spec.p01, spec.p10, self.n_sample, self.pool_size,
                            self.replications, self.seed, self.treatment_coef, self.n_mc)


# -- data files ----------------------------------------------------------------------


def _parse_float(text, row, column):
    try:
        val = float(text)
    except ValueError:
        raise ParseError(f"row {row}, column {column!r}: {text!r} is not a number", row=row, column=column)
    if not math.isfinite(val):
        raise ParseError(f"row {row}, column {column!r}: value must be finite", row=row, column=column)
    return val


def load_dataset(path, covariates=None, covariate_kinds=None) -> ObservedSample:
    """Read a comma-separated file with ``outcome_star``, ``treatment`` and covariate columns.

    Rows are numbered from 1 after the header. Covariates default to every
    other column in file order.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise SchemaError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        for col in (OUTCOME, TREATMENT):
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        if covariates is None:
            covariates = [h for h in header if h not in (OUTCOME, TREATMENT)]
        missing = [c for c in covariates if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing covariate column(s) {missing}")
        pos = {h: k for k, h in enumerate(header)}
        y, t, x = [], [], []
        for row, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(f"row {row}: expected {len(header)} fields, found {len(record)}", row=row)
            for col in [OUTCOME, TREATMENT, *covariates]:
                if record[pos[col]].strip() == "":
                    raise ParseError(f"row {row}, column {col!r}: missing value", row=row, column=col)
            for col, dest in ((OUTCOME, y), (TREATMENT, t)):
                val = _parse_float(record[pos[col]], row, col)
                if val not in (0.0, 1.0):
                    raise ParseError(f"row {row}, column {col!r}: {val:g} is not 0 or 1", row=row, column=col)
                dest.append(val)
            x.append([_parse_float(record[pos[c]], row, c) for c in covariates])
    if not y:
        raise SchemaError(f"{path}: no data rows")
    return ObservedSample(
        np.array(y), np.array(t), np.array(x).reshape(len(y), len(covariates)),
        covariate_kinds=tuple(covariate_kinds) if covariate_kinds else (),
        covariate_names=tuple(covariates),
    )


def write_dataset(sample: ObservedSample, path) -> None:
    """Write a sample in the layout :func:`load_dataset` reads, with round-trip float text."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([OUTCOME, TREATMENT, *sample.covariate_names])
        for yi, ti, xi in zip(sample.y_star, sample.t, sample.x):
            w.writerow([int(yi), int(ti), *(repr(float(v)) for v in xi)])


# -- reports -------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")


def _fmt(val):
    if isinstance(val, (float, np.floating)):
        val = float(val)
        return repr(val) if math.isfinite(val) else "nan"
    return str(val)


def write_csv(rows, columns, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def load_schema() -> dict:
    return json.loads(resources.files("odsate").joinpath("schemas/results.schema.json").read_text())


def config_block(config: RunConfig) -> dict:
    return {
        "engine": config.engine,
        "seed": config.seed,
        "jobs": config.jobs,
        "spline": {
            "degree_p": config.spline.degree_p,
            "knots_Kn": config.spline.knots_Kn,
            "penalty_order_m": config.spline.penalty_order_m,
            "lambda_grid": list(config.spline.lambda_grid),
            "gamma": config.spline.gamma,
        },
        "solver": asdict(config.solver),
    }


# -- commands ------------------------------------------------------------------------


def _engines(engine):
    return ("glm", "gam") if engine == "both" else (engine,)


def fit_engine(sample, spec, engine, config: RunConfig):
    if engine == "glm":
        return fit_glm_ee(sample, spec, config.solver)
    return fit_gam_ee(sample, spec, config.spline, config.solver)


def _failed_block(engine, spec, exc):
    block = {"engine": engine, "converged": False, "error": f"{type(exc).__name__}: {exc}",
             "spec": spec.as_dict(), "v_star": spec.v_star}
    if isinstance(exc, NonConvergence):
        block["diagnostics"] = {"converged": False, "iterations": exc.iterations,
                                "final_score_norm": exc.score_norm, "halvings_used": None}
    return block


def cmd_fit(config: RunConfig):
    """Fit each requested engine; returns ``(report, exit_code)`` and writes results.json."""
    if config.input_path is None:
        raise SchemaError("fit needs --input")
    spec = config.single_spec()
    sample = load_dataset(config.input_path, config.covariates, config.covariate_kinds)
    blocks, code = [], EXIT_OK
    for engine in _engines(config.engine):
        try:
            block = fit_engine(sample, spec, engine, config).report()
            block["converged"] = True
        except NUMERIC_ERRORS as exc:
            block, code = _failed_block(engine, spec, exc), EXIT_NUMERIC
        blocks.append(block)
    report = {"command": "fit", "input": str(config.input_path), "n": sample.n,
              "covariates": list(sample.covariate_names), "spec": spec.as_dict(),
              "config": config_block(config), "estimates": blocks}
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "results.json")
    lines = [f"odsate fit: n={sample.n} v={spec.v:g} p01={spec.p01:g} p10={spec.p10:g} v*={spec.v_star:.6g}"]
    for b in blocks:
        if b.get("converged"):
            lo, hi = b["tau_ci95"]
            extra = f" lambda={b['lambda_selected']:.4g}" if "lambda_selected" in b else ""
            lines.append(f"  {b['engine']}: tau={b['tau_hat']:.6g} se={b['tau_se']:.4g} "
                         f"95% CI=({lo:.6g}, {hi:.6g}) s_hat={b['s_hat']:.4g}{extra}")
        else:
            lines.append(f"  {b['engine']}: FAILED {b['error']}")
    print("\n".join(lines))
    return report, code


METRIC_COLUMNS = ("method", "model_id", "v", "p01", "p10", "n_sample", "replications",
                  "rbias_pct", "rmse_x1000", "coverage_pct", "mean_tau_hat", "true_tau",
                  "n_converged", "status")


def cmd_simulate(config: RunConfig):
    scenario = config.scenario()
    pool = generate_pool(scenario)
    result = run_replications(scenario, list(config.methods), jobs=config.jobs,
                              config=config.spline, opts=config.solver, pool=pool)
    rows = [m.as_dict() for m in result.metrics]
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, METRIC_COLUMNS, out / "metrics.csv")
    if config.export_sample:
        half = scenario.n_sample // 2
        write_dataset(case_control_sample(pool, half, half, stream(scenario.seed, STAGE_SAMPLE, 0)),
                      out / "sample.csv")
    report = {"command": "simulate", "scenario": asdict(scenario), "true_tau": result.true_tau,
              "config": config_block(config), "metrics": rows}
    write_json(report, out / "results.json")
    print(f"odsate simulate: {scenario.model_id} v={scenario.v:g} p10={scenario.p10:g} "
          f"n={scenario.n_sample} reps={scenario.replications} true tau={result.true_tau:.6g}")
    for m in result.metrics:
        print(f"  {m.method:<10} Rbias={m.rbias_pct:8.3f}%  RMSEx1000={m.rmse_x1000:8.4f}  "
              f"CP={m.coverage_pct:6.1f}  converged={m.n_converged}  {m.status}")
    return report, EXIT_OK


SENSITIVITY_COLUMNS = ("v", "p10", "p01", "v_star", "engine", "tau_hat", "ci_low", "ci_high", "converged")


def _sensitivity_point(task):
    sample, spec, engine, config = task
    row = {"v": spec.v, "p10": spec.p10, "p01": spec.p01, "v_star": spec.v_star, "engine": engine}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        try:
            fit = fit_engine(sample, spec, engine, config)
            row.update(tau_hat=fit.tau_hat, ci_low=fit.tau_ci95[0], ci_high=fit.tau_ci95[1], converged=True)
        except (OdsateError, np.linalg.LinAlgError) as exc:
            row.update(tau_hat=float("nan"), ci_low=float("nan"), ci_high=float("nan"), converged=False,
                       error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sensitivity(config: RunConfig):
    if config.input_path is None:
        raise SchemaError("sensitivity needs --input")
    grid = config.grid()
    sample = load_dataset(config.input_path, config.covariates, config.covariate_kinds)
    tasks = [(sample, spec, engine, config) for spec in grid.specs() for engine in _engines(config.engine)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            rows = list(ex.map(_sensitivity_point, tasks))
    else:
        rows = [_sensitivity_point(t) for t in tasks]
    ok = [r for r in rows if r["converged"]]
    excludes = [r for r in ok if r["ci_low"] > 0 or r["ci_high"] < 0]
    frac = len(excludes) / len(ok) if ok else float("nan")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, SENSITIVITY_COLUMNS, out / "sensitivity.csv")
    report = {"command": "sensitivity", "input": str(config.input_path), "n": sample.n,
              "grid": asdict(grid), "config": config_block(config), "points": rows,
              "n_points": len(rows), "n_converged": len(ok), "fraction_ci_excludes_zero": frac}
    write_json(report, out / "results.json")
    print(f"odsate sensitivity: {len(rows)} points, {len(ok)} converged, "
          f"CI excludes 0 at {len(excludes)}/{len(ok)}")
    if not ok:
        raise AllPointsFailed("no sensitivity grid point produced an estimate")
    return report, EXIT_OK


# -- argument handling ---------------------------------------------------------------


def _floats(text):
    if isinstance(text, (int, float)):
        return (float(text),)
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _names(text):
    if isinstance(text, (list, tuple)):
        return tuple(str(x) for x in text)
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odsate", description="Treatment effects from case-control "
                                "samples with a misclassified binary outcome.")
    p.add_argument("command_pos", nargs="?", choices=COMMANDS, metavar="{fit,simulate,sensitivity}")
    p.add_argument("--command", choices=COMMANDS)
    p.add_argument("--config", help="TOML file with any of the settings below")
    p.add_argument("--input", help="CSV with outcome_star, treatment and covariate columns")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    p.add_argument("--v", help="population prevalence (comma list for sensitivity)")
    p.add_argument("--p01", help="false positive rate (comma list for sensitivity)")
    p.add_argument("--p10", help="false negative rate (comma list for sensitivity)")
    p.add_argument("--engine", choices=ENGINES)
    p.add_argument("--kn", type=int, help="interior intervals per spline")
    p.add_argument("--lambda-grid", help="comma-separated smoothing grid")
    p.add_argument("--gamma", type=float, help="ridge added to spline coefficients")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output directory")
    sim = p.add_argument_group("simulate")
    sim.add_argument("--model", choices=("M1", "M2", "M3", "M4"))
    sim.add_argument("--n-sample", type=int)
    sim.add_argument("--replications", type=int)
    sim.add_argument("--pool-size", type=int)
    sim.add_argument("--n-mc", type=int)
    sim.add_argument("--treatment-coef", type=float)
    sim.add_argument("--methods", help="comma list of glm, gam, iptw, oracle, naive{1,2,3}_{glm,gam}")
    sim.add_argument("--export-sample", action="store_true", default=None,
                     help="also write replication 0's sample as sample.csv")
    return p


def resolve_config(args) -> RunConfig:
    settings = {}
    if args.config:
        with open(args.config, "rb") as fh:
            settings.update(tomllib.load(fh))
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "command_pos")}
    if args.command_pos:
        flags["command"] = args.command_pos
    settings.update(flags)

    aliases = {"input": "input_path", "out": "output_dir", "kn": "knots_Kn", "lambda-grid": "lambda_grid",
               "n-sample": "n_sample", "pool-size": "pool_size", "n-mc": "n_mc",
               "treatment-coef": "treatment_coef", "export-sample": "export_sample"}
    settings = {aliases.get(k, k): v for k, v in settings.items()}

    spline = SplineConfig(
        degree_p=int(settings.pop("degree_p", 3)),
        knots_Kn=int(settings.pop("knots_Kn", 10)),
        penalty_order_m=int(settings.pop("penalty_order_m", 2)),
        lambda_grid=_floats(settings.pop("lambda_grid", DEFAULT_LAMBDA_GRID)),
        gamma=float(settings.pop("gamma", 0.1)),
    )
    solver = SolveOptions(
        tol_score=float(settings.pop("tol_score", 1e-8)),
        max_iter=int(settings.pop("max_iter", 100)),
        step_halving_max=int(settings.pop("step_halving_max", 30)),
    )
    kw = {"spline": spline, "solver": solver}
    for key in ("v", "p01", "p10"):
        if key in settings:
            kw[key] = _floats(settings.pop(key))
    for key in ("covariates", "covariate_kinds", "methods"):
        if key in settings:
            kw[key] = _names(settings.pop(key))
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(settings) - known
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    kw.update(settings)
    return RunConfig(**kw)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        try:
            config = resolve_config(args)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad configuration value: {exc}") from exc
        handler = {"fit": cmd_fit, "simulate": cmd_simulate, "sensitivity": cmd_sensitivity}[config.command]
        _, code = handler(config)
        return code
    except INPUT_ERRORS as exc:
        where = f" [{exc.constraint}]" if getattr(exc, "constraint", None) else ""
        print(f"odsate: input error: {exc}{where}", file=sys.stderr)
        return EXIT_INPUT
    except (*NUMERIC_ERRORS, AllPointsFailed, np.linalg.LinAlgError) as exc:
        print(f"odsate: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - stable exit code contract
        print(f"odsate: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
