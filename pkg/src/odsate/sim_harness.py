"""Simulation protocol: population pool, misclassification, case-control draws,
comparator estimators and Rbias / RMSE / coverage summaries.

All randomness comes from Philox streams keyed by ``(seed, stage, index)``, so
pools, truths and each replication's sample are reproducible on their own and
results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import bisect

from .core_model import MismeasureSpec, ObservedSample, expit
from .ee_solver import SolveOptions, newton_solve
from .errors import (
    CalibrationFailure,
    DegenerateTreatment,
    DomainError,
    IllConditionedWarning,
    InsufficientClass,
    OdsateError,
)
from .gam_ee import SplineConfig, fit_gam_ee
from .glm_ee import FitResult, fit_glm_ee

MODELS = ("M1", "M2", "M3", "M4")
STAGE_POOL, STAGE_CALIBRATION, STAGE_TRUTH, STAGE_SAMPLE, STAGE_MISCLASSIFY = range(5)
CALIBRATION_SIZE = 500_000
CALIBRATION_RTOL = 0.02
ABORT_FRACTION = 0.20


def stream(seed: int, stage: int, index: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one ``(seed, stage, index)`` key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stage), int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ScenarioSpec:
    model_id: str = "M1"
    v: float = 0.01
    p01: float = 0.0
    p10: float = 0.0
    n_sample: int = 2000
    pool_size: int = 1_000_000
    replications: int = 200
    seed: int = 2024
    treatment_coef: float = -2.0
    n_mc: int = 2_000_000

    def __post_init__(self):
        if self.model_id not in MODELS:
            raise DomainError(f"unknown model {self.model_id!r}", constraint="model_id")
        if self.n_sample < 2 or self.n_sample % 2:
            raise DomainError("n_sample must be a positive even number", constraint="n_sample even")
        if self.replications < 1:
            raise DomainError("replications must be >= 1", constraint="replications")
        MismeasureSpec(self.v, self.p01, self.p10)

    @property
    def spec(self) -> MismeasureSpec:
        return MismeasureSpec(self.v, self.p01, self.p10)


@dataclass
class DataPool:
    y: np.ndarray
    y_star: np.ndarray
    t: np.ndarray
    u: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    a0: float
    case_index: np.ndarray = field(repr=False, default=None)
    control_index: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.case_index is None:
            self.case_index = np.flatnonzero(self.y_star == 1)
            self.control_index = np.flatnonzero(self.y_star == 0)

    @property
    def size(self) -> int:
        return self.y.shape[0]


def draw_covariates(rng: np.random.Generator, size: int):
    x1 = rng.standard_normal(size)
    x2 = rng.random(size)
    u = (rng.random(size) < 0.5).astype(np.int8)
    t = (rng.random(size) < expit(1.0 + 0.1 * x1 - 0.1 * x2 - 0.5 * u)).astype(np.int8)
    return t, u, x1, x2


def true_index(model_id, a0, t, u, x1, x2, treatment_coef=-2.0):
    base = a0 + treatment_coef * t - u
    if model_id == "M1":
        return base - 0.5 * x1 + x2
    if model_id == "M2":
        return base - np.sin(3 * np.pi * x1) + (3 * (x2 - 0.5)) ** 3
    if model_id == "M3":
        return base - np.exp(2 * x1) - np.sin(3 * np.pi * x2) * x2
    if model_id == "M4":
        return base - np.exp(2 * x1) + (3 * (x2 - 0.5)) ** 3 + x1 * x2
    raise DomainError(f"unknown model {model_id!r}", constraint="model_id")


@lru_cache(maxsize=64)
def calibrate_intercept(model_id: str, v: float, seed: int, treatment_coef: float = -2.0,
                        size: int = CALIBRATION_SIZE) -> float:
    """Intercept giving population prevalence ``v`` on a fixed calibration draw."""
    t, u, x1, x2 = draw_covariates(stream(seed, STAGE_CALIBRATION), size)
    rest = true_index(model_id, 0.0, t, u, x1, x2, treatment_coef)

    def gap(a0):
        return float(np.mean(expit(a0 + rest))) - v

    lo, hi = -40.0, 10.0
    if not gap(lo) < 0.0 < gap(hi):
        raise CalibrationFailure(f"cannot bracket prevalence {v} for {model_id} on [{lo}, {hi}]")
    a0 = bisect(gap, lo, hi, xtol=1e-12, maxiter=200)
    if abs(gap(a0)) > CALIBRATION_RTOL * v:
        raise CalibrationFailure(f"calibrated prevalence misses {v} by more than 2%")
    return float(a0)


def misclassify(y, p01: float, p10: float, rng: np.random.Generator) -> np.ndarray:
    """Flip true outcomes: 1 -> 0 with probability p10, 0 -> 1 with probability p01."""
    y = np.asarray(y)
    r = rng.random(y.shape[0])
    return np.where(y == 1, r >= p10, r < p01).astype(np.int8)


def generate_pool(scenario: ScenarioSpec) -> DataPool:
    a0 = calibrate_intercept(scenario.model_id, scenario.v, scenario.seed, scenario.treatment_coef)
    rng = stream(scenario.seed, STAGE_POOL)
    t, u, x1, x2 = draw_covariates(rng, scenario.pool_size)
    eta = true_index(scenario.model_id, a0, t, u, x1, x2, scenario.treatment_coef)
    y = (rng.random(scenario.pool_size) < expit(eta)).astype(np.int8)
    y_star = misclassify(y, scenario.p01, scenario.p10, stream(scenario.seed, STAGE_MISCLASSIFY))
    return DataPool(y=y, y_star=y_star, t=t, u=u, x1=x1, x2=x2, a0=a0)


def case_control_sample(pool: DataPool, n_cases: int, n_controls: int,
                        rng: np.random.Generator) -> ObservedSample:
    """Draw cases and controls without replacement within each observed class."""
    for label, idx, want in (("case", pool.case_index, n_cases), ("control", pool.control_index, n_controls)):
        if idx.size < want:
            raise InsufficientClass(
                f"pool has {idx.size} {label}s, {want} requested", label=label, available=int(idx.size)
            )
    rows = np.concatenate([
        rng.choice(pool.case_index, n_cases, replace=False),
        rng.choice(pool.control_index, n_controls, replace=False),
    ])
    return ObservedSample(
        pool.y_star[rows],
        pool.t[rows],
        np.column_stack([pool.u[rows], pool.x1[rows], pool.x2[rows]]),
        covariate_kinds=("discrete", "continuous", "continuous"),
        covariate_names=("u", "x1", "x2"),
    )


@lru_cache(maxsize=64)
def _true_tau(model_id, v, n_mc, seed, treatment_coef):
    a0 = calibrate_intercept(model_id, v, seed, treatment_coef)
    rng = stream(seed, STAGE_TRUTH)
    total = 0.0
    total_sq = 0.0
    done = 0
    chunk = 500_000
    while done < n_mc:
        m = min(chunk, n_mc - done)
        _, u, x1, x2 = draw_covariates(rng, m)
        diff = expit(true_index(model_id, a0, 1, u, x1, x2, treatment_coef)) - \
            expit(true_index(model_id, a0, 0, u, x1, x2, treatment_coef))
        total += diff.sum()
        total_sq += (diff**2).sum()
        done += m
    mean = total / n_mc
    se = math.sqrt(max(total_sq / n_mc - mean**2, 0.0) / n_mc)
    return mean, se


def true_tau_mc(model_id: str, v: float, n_mc: int = 2_000_000, seed: int = 2024,
                treatment_coef: float = -2.0, return_se: bool = False):
    """Monte Carlo ATE of the calibrated population model."""
    mean, se = _true_tau(model_id, float(v), int(n_mc), int(seed), float(treatment_coef))
    return (mean, se) if return_se else mean


# -- comparators -------------------------------------------------------------------


def _logistic_fit(y, z, opts=SolveOptions()):
    n = y.shape[0]

    def score(b):
        return z.T @ (y - expit(z @ b)) / n

    def jac(b):
        p = expit(z @ b)
        return -(z.T @ ((p * (1 - p))[:, None] * z)) / n

    beta, _ = newton_solve(score, jac, np.zeros(z.shape[1]), opts)
    return beta


def iptw_estimate(sample: ObservedSample) -> float:
    """Hajek-normalised IPTW contrast of ``y*`` with a logistic propensity model."""
    t = sample.t
    if t.min() == t.max():
        raise DegenerateTreatment("both treatment arms are required")
    z = np.column_stack([np.ones(sample.n), sample.x])
    e = expit(z @ _logistic_fit(t, z))
    w1 = t / np.maximum(e, 1e-6)
    w0 = (1 - t) / np.maximum(1 - e, 1e-6)
    y = sample.y_star
    return float(np.sum(w1 * y) / np.sum(w1) - np.sum(w0 * y) / np.sum(w0))


NAIVE_VARIANTS = ("naive1", "naive2", "naive3")


def naive_fit(sample: ObservedSample, spec: MismeasureSpec, variant: str, engine: str = "glm",
              config: SplineConfig = SplineConfig(), opts: SolveOptions = SolveOptions()) -> FitResult:
    """Estimators that deliberately drop selection and/or misclassification information.

    naive1 sets p01 = p10 = 0 and s = 1; naive2 keeps the rates but sets s = 1;
    naive3 sets p01 = p10 = 0 but keeps the observed prevalence ``v*``, so its
    estimated s (and the weights in tau) match the corrected fit.
    """
    if variant == "naive1":
        used, fixed_s = MismeasureSpec(spec.v, 0.0, 0.0), 1.0
    elif variant == "naive2":
        used, fixed_s = spec, 1.0
    elif variant == "naive3":
        # with no misclassification v* = v, so passing v* as v keeps s-hat unchanged
        used, fixed_s = MismeasureSpec(spec.v_star, 0.0, 0.0), None
    else:
        raise DomainError(f"unknown naive variant {variant!r}", constraint="variant")
    if engine == "glm":
        fit = fit_glm_ee(sample, used, opts, fixed_s=fixed_s)
    elif engine == "gam":
        fit = fit_gam_ee(sample, used, config, opts, fixed_s=fixed_s)
    else:
        raise DomainError(f"unknown engine {engine!r}", constraint="engine")
    fit.extra["variant"] = variant
    return fit


# -- replications ------------------------------------------------------------------


class MethodOutcome(NamedTuple):
    tau_hat: float
    tau_se: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")


def _from_fit(fit: FitResult) -> MethodOutcome:
    return MethodOutcome(fit.tau_hat, fit.tau_se, fit.tau_ci95[0], fit.tau_ci95[1])


def run_method(name, sample, spec, context, config, opts) -> MethodOutcome:
    if callable(name):
        return name(sample, spec, context)
    if name == "glm":
        return _from_fit(fit_glm_ee(sample, spec, opts))
    if name == "gam":
        return _from_fit(fit_gam_ee(sample, spec, config, opts))
    if name == "iptw":
        return MethodOutcome(iptw_estimate(sample))
    if name == "oracle":
        tau = context["true_tau"]
        return MethodOutcome(tau, 0.0, tau, tau)
    variant, _, engine = name.partition("_")
    if variant in NAIVE_VARIANTS and engine in ("glm", "gam"):
        return _from_fit(naive_fit(sample, spec, variant, engine, config, opts))
    raise DomainError(f"unknown method {name!r}", constraint="method")


def method_label(method) -> str:
    if isinstance(method, str):
        return method
    return getattr(method, "label", getattr(method, "__name__", repr(method)))


@dataclass
class ScenarioMetrics:
    method: str
    model_id: str
    v: float
    p01: float
    p10: float
    n_sample: int
    replications: int
    rbias_pct: float
    rmse_x1000: float
    coverage_pct: float
    mean_tau_hat: float
    true_tau: float
    n_converged: int
    status: str = "ok"

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimulationResult:
    scenario: ScenarioSpec
    true_tau: float
    metrics: list
    raw: dict

    def metric(self, method) -> ScenarioMetrics:
        label = method_label(method)
        return next(m for m in self.metrics if m.method == label)


def summarize(label, scenario, tau, est, se, covered, ok) -> ScenarioMetrics:
    n_ok = int(ok.sum())
    status = "ok"
    if scenario.replications - n_ok > ABORT_FRACTION * scenario.replications:
        status = "aborted"
    if n_ok == 0 or status == "aborted":
        nan = float("nan")
        return ScenarioMetrics(label, scenario.model_id, scenario.v, scenario.p01, scenario.p10,
                               scenario.n_sample, scenario.replications, nan, nan, nan, nan, tau, n_ok, status)
    e = est[ok]
    mean = float(e.mean())
    rmse = float(np.sqrt(np.mean((e - tau) ** 2)))
    cov = covered[ok]
    cp = float(100.0 * np.mean(cov)) if not np.all(np.isnan(cov)) else float("nan")
    return ScenarioMetrics(label, scenario.model_id, scenario.v, scenario.p01, scenario.p10,
                           scenario.n_sample, scenario.replications, float(100.0 * (mean - tau) / tau),
                           1000.0 * rmse, cp, mean, float(tau), n_ok, status)


def _replicate(task):
    """Fit every method on one replication's sample; runs in a worker."""
    index, sample, spec, methods, context, config, opts = task
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditionedWarning)
        for method in methods:
            try:
                out.append(run_method(method, sample, spec, context, config, opts))
            except (OdsateError, np.linalg.LinAlgError, FloatingPointError):
                out.append(None)
    return index, out


def run_replications(scenario: ScenarioSpec, methods, jobs: int = 1,
                     config: SplineConfig = SplineConfig(), opts: SolveOptions = SolveOptions(),
                     pool: DataPool | None = None) -> SimulationResult:
    """Repeat sample-and-fit ``scenario.replications`` times for each method.

    ``methods`` holds built-in names (``glm``, ``gam``, ``iptw``, ``oracle``,
    ``naive{1,2,3}_{glm,gam}``) or callables ``f(sample, spec, context)``
    returning :class:`MethodOutcome`; ``context`` carries ``true_tau``.
    Failed fits count as non-converged; a method with more than 20% failures is
    reported with status ``aborted``.
    """
    methods = list(methods)
    pool = generate_pool(scenario) if pool is None else pool
    tau = true_tau_mc(scenario.model_id, scenario.v, scenario.n_mc, scenario.seed, scenario.treatment_coef)
    spec = scenario.spec
    context = {"true_tau": tau, "scenario": scenario}
    half = scenario.n_sample // 2

    def tasks():
        for r in range(scenario.replications):
            sample = case_control_sample(pool, half, half, stream(scenario.seed, STAGE_SAMPLE, r))
            yield (r, sample, spec, methods, context, config, opts)

    results = [None] * scenario.replications
    if jobs <= 1:
        for task in tasks():
            idx, out = _replicate(task)
            results[idx] = out
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for idx, out in ex.map(_replicate, tasks(), chunksize=4):
                results[idx] = out

    metrics, raw = [], {}
    for k, method in enumerate(methods):
        label = method_label(method)
        est = np.full(scenario.replications, np.nan)
        se = np.full(scenario.replications, np.nan)
        covered = np.full(scenario.replications, np.nan)
        for r, out in enumerate(results):
            res = out[k]
            if res is None or not np.isfinite(res.tau_hat):
                continue
            est[r] = res.tau_hat
            se[r] = res.tau_se
            if np.isfinite(res.ci_low) and np.isfinite(res.ci_high):
                covered[r] = float(res.ci_low <= tau <= res.ci_high)
        ok = np.isfinite(est)
        metrics.append(summarize(label, scenario, tau, est, se, covered, ok))
        raw[label] = {"tau_hat": est, "tau_se": se, "covered": covered}
    return SimulationResult(scenario=scenario, true_tau=tau, metrics=metrics, raw=raw)
