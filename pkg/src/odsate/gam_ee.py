"""GAM-EE: additive B-spline index with difference + ridge penalties.

Continuous covariates are min-max rescaled to [0, 1] and expanded in a B-spline
basis on a uniform knot grid extended past both ends; each basis block is column
centred so the smooth averages to zero over the sample, and an explicit,
unpenalized intercept column carries the level. Discrete covariates (and any
flagged linear) enter as a single centred column. Column order is
``[spline blocks..., intercept, linear columns..., treatment]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core_model import (
    AdjustedLink,
    MismeasureSpec,
    ObservedSample,
    link_components,
    log_likelihood,
    require_both_classes,
)
from .ee_solver import SolveOptions
from .errors import AllGridFailed, DomainError, OdsateError
from .glm_ee import FitResult, StackedProblem, check_range_collapse, finish_fit, warm_start

DEFAULT_LAMBDA_GRID = tuple(np.logspace(-1, 2, 15))
INTEGER_LAMBDA_GRID = tuple(float(k) for k in range(1, 21))


@dataclass(frozen=True)
class SplineConfig:
    degree_p: int = 3
    knots_Kn: int = 10
    penalty_order_m: int = 2
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    gamma: float = 0.1
    # None: discrete covariates linear, continuous ones smooth
    per_covariate_linear: tuple | None = None

    def __post_init__(self):
        if self.degree_p < 1:
            raise DomainError("degree_p must be >= 1", constraint="degree_p>=1")
        if self.knots_Kn < self.penalty_order_m + 1:
            raise DomainError("knots_Kn must be >= penalty_order_m + 1", constraint="knots_Kn")
        if self.gamma < 0:
            raise DomainError("gamma must be >= 0", constraint="gamma")
        if len(self.lambda_grid) == 0 or any(lam < 0 for lam in self.lambda_grid):
            raise DomainError("lambda_grid must be non-empty and non-negative", constraint="lambda_grid")
        object.__setattr__(self, "lambda_grid", tuple(sorted(float(v) for v in self.lambda_grid)))

    @property
    def basis_dim(self) -> int:
        return self.knots_Kn + self.degree_p


@dataclass
class GamDesign:
    Z: np.ndarray
    Q_a: np.ndarray
    T_a: np.ndarray
    knot_vectors: list
    spline_slices: list
    intercept_index: int
    linear_indices: list
    treatment_index: int
    smooth_columns: list = field(default_factory=list)
    linear_columns: list = field(default_factory=list)

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def with_treatment(self, t) -> np.ndarray:
        z = self.Z.copy()
        z[:, self.treatment_index] = float(t)
        return z


def equidistant_knots(n_intervals: int, degree: int, lo=0.0, hi=1.0) -> np.ndarray:
    """Uniform knots ``lo + k (hi - lo) / K`` for ``k = -degree..K + degree``.

    The grid extends ``degree`` knots past each boundary, so all
    ``K + degree`` basis functions are translates of one another and
    coefficients in the null space of an ``m``-th difference penalty give
    polynomials of degree ``m - 1``.
    """
    step = (hi - lo) / n_intervals
    return lo + step * np.arange(-degree, n_intervals + degree + 1)


def _validate_knots(knots, degree):
    t = np.asarray(knots, dtype=float)
    if t.ndim != 1 or t.size < degree + 2 or np.any(np.diff(t) < 0) or not np.all(np.isfinite(t)):
        raise DomainError("knot vector must be finite, non-decreasing and long enough", constraint="knots")
    breaks = t[degree: t.size - degree]
    if np.any(np.diff(breaks) <= 0):
        raise DomainError("knots spanning the domain must be strictly increasing", constraint="knots")
    return t


def bspline_basis(x, degree: int, knots) -> np.ndarray:
    """Evaluate all B-splines of ``degree`` on the full knot vector ``knots``.

    Points outside the spline domain are clamped to its boundary. Returns a
    vector for scalar ``x`` and an ``(n, n_basis)`` matrix otherwise.
    """
    t = _validate_knots(knots, degree)
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    nb = t.size - degree - 1
    lo, hi = t[degree], t[nb]
    xs = np.clip(xs, lo, hi)
    n_int = t.size - 1
    basis = ((t[:-1] <= xs[:, None]) & (xs[:, None] < t[1:])).astype(float)
    # right boundary belongs to the last non-empty interval inside the domain
    last = np.max(np.flatnonzero((t[:-1] < t[1:]) & (t[1:] <= hi)))
    at_end = xs >= hi
    basis[at_end] = 0.0
    basis[at_end, last] = 1.0
    for k in range(1, degree + 1):
        nxt = np.zeros((xs.size, n_int - k))
        for i in range(n_int - k):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                nxt[:, i] += (xs - t[i]) / d1 * basis[:, i]
            if d2 > 0:
                nxt[:, i] += (t[i + k + 1] - xs) / d2 * basis[:, i + 1]
        basis = nxt
    return basis[0] if scalar else basis


def difference_penalty(order_m: int, dim_q: int) -> np.ndarray:
    """``order_m``-th order difference matrix, shape ``(dim_q - order_m, dim_q)``."""
    if order_m < 0 or dim_q <= order_m:
        raise DomainError(f"need dim_q > order_m, got q={dim_q}, m={order_m}", constraint="dim_q>order_m")
    return np.diff(np.eye(dim_q), n=order_m, axis=0)


def _linear_flags(sample: ObservedSample, config: SplineConfig):
    if config.per_covariate_linear is not None:
        flags = tuple(bool(f) for f in config.per_covariate_linear)
        if len(flags) != sample.x.shape[1]:
            raise DomainError("per_covariate_linear must match the covariate count", constraint="kinds")
        return flags
    return tuple(kind == "discrete" for kind in sample.covariate_kinds)


def build_gam_design(sample: ObservedSample, config: SplineConfig, lambdas) -> GamDesign:
    flags = _linear_flags(sample, config)
    n = sample.n
    smooth_cols = [j for j, lin in enumerate(flags) if not lin]
    linear_cols = [j for j, lin in enumerate(flags) if lin]
    lam = np.broadcast_to(np.asarray(lambdas, dtype=float), (max(len(smooth_cols), 1),))
    dim = config.basis_dim
    knots = equidistant_knots(config.knots_Kn, config.degree_p)
    dpen = difference_penalty(config.penalty_order_m, dim)
    dtd = dpen.T @ dpen

    blocks, knot_vectors, slices = [], [], []
    for k, j in enumerate(smooth_cols):
        col = sample.x[:, j]
        lo, hi = col.min(), col.max()
        if hi <= lo:
            raise DomainError(f"covariate {sample.covariate_names[j]} is constant", constraint="constant covariate")
        b = bspline_basis((col - lo) / (hi - lo), config.degree_p, knots)
        blocks.append(b - b.mean(axis=0))
        knot_vectors.append(knots * (hi - lo) + lo)
        slices.append(slice(k * dim, (k + 1) * dim))
    for j in linear_cols:
        if np.ptp(sample.x[:, j]) == 0:
            raise DomainError(f"covariate {sample.covariate_names[j]} is constant", constraint="constant covariate")
    n_spline = dim * len(smooth_cols)
    lin = sample.x[:, linear_cols] - sample.x[:, linear_cols].mean(axis=0)
    z = np.hstack(blocks + [np.ones((n, 1)), lin, sample.t[:, None]]) if blocks else \
        np.hstack([np.ones((n, 1)), lin, sample.t[:, None]])
    q = z.shape[1]
    q_a = np.zeros((q, q))
    t_a = np.zeros((q, q))
    for k, sl in enumerate(slices):
        q_a[sl, sl] = lam[k] * dtd
        t_a[sl, sl] = config.gamma * np.eye(dim)
    return GamDesign(
        Z=z, Q_a=q_a, T_a=t_a, knot_vectors=knot_vectors, spline_slices=slices,
        intercept_index=n_spline, linear_indices=list(range(n_spline + 1, n_spline + 1 + len(linear_cols))),
        treatment_index=q - 1, smooth_columns=smooth_cols, linear_columns=linear_cols,
    )


def penalized_score(beta, s, design: GamDesign, y_star, link: AdjustedLink) -> np.ndarray:
    """Mean penalized score ``(Z'U - Q_a beta - T_a beta) / n`` at sampling ratio ``s``."""
    beta = np.asarray(beta, dtype=float)
    comp = link_components(design.Z @ beta, AdjustedLink(link.p01, link.p10, float(s)))
    y = np.asarray(y_star, dtype=float)
    u = (y - comp["mu"]) * comp["ratio"]
    return (design.Z.T @ u - design.Q_a @ beta - design.T_a @ beta) / y.size


def penalized_loglik(beta, s, design: GamDesign, y_star, link: AdjustedLink) -> float:
    """Sum log-likelihood minus ``beta'(Q_a + T_a)beta / 2``."""
    beta = np.asarray(beta, dtype=float)
    ll = log_likelihood(y_star, design.Z @ beta, AdjustedLink(link.p01, link.p10, float(s)))
    return ll - 0.5 * beta @ (design.Q_a + design.T_a) @ beta


def effective_df(info, q_a, t_a) -> float:
    """``trace[(F + Q_a + T_a)^-1 F]`` for a (sum-scale) information matrix ``F``."""
    return float(np.trace(sla.solve(info + q_a + t_a, info, assume_a="sym")))


def _problem(sample, spec, design, fixed_s):
    return StackedProblem(
        sample.y_star, design.Z, design.with_treatment(1), design.with_treatment(0),
        spec.v_star, spec.p01, spec.p10,
        penalty=design.Q_a + design.T_a, variance_penalty=design.Q_a, fixed_s=fixed_s,
    )


def select_lambda_bic(sample: ObservedSample, spec: MismeasureSpec, config: SplineConfig,
                      opts: SolveOptions = SolveOptions(), fixed_s=None):
    """Pick one shared smoothing parameter from ``config.lambda_grid`` by BIC.

    ``BIC = -2 loglik + log(n) edf`` at each grid fit. Failed grid points are
    recorded and skipped. Returns ``(lambda_star, trace)`` where ``trace`` is a
    list of dicts (one per grid value, ascending).
    """
    require_both_classes(sample.y_star)
    trace = []
    beta = None
    for lam in config.lambda_grid:
        design = build_gam_design(sample, config, lam)
        problem = _problem(sample, spec, design, fixed_s)
        s = problem.s_hat()
        link = problem.link(s)
        init = beta if beta is not None else warm_start(sample.y_star, design.q, link, design.intercept_index)
        try:
            b, diag = problem.solve_beta(s, init, opts)
        except OdsateError as exc:
            trace.append({"lambda": lam, "bic": None, "edf": None, "loglik": None,
                          "converged": False, "error": str(exc)})
            continue
        beta = b
        ll = log_likelihood(sample.y_star, design.Z @ b, link)
        edf = effective_df(problem.fisher_information(b, s), design.Q_a, design.T_a)
        trace.append({"lambda": lam, "bic": -2.0 * ll + np.log(sample.n) * edf, "edf": edf,
                      "loglik": ll, "converged": True})
    ok = [row for row in trace if row["converged"]]
    if not ok:
        raise AllGridFailed("no smoothing parameter in the grid produced a converged fit")
    best = min(ok, key=lambda row: (row["bic"], row["lambda"]))
    return best["lambda"], trace


def fit_gam_ee(sample: ObservedSample, spec: MismeasureSpec, config: SplineConfig = SplineConfig(),
               opts: SolveOptions = SolveOptions(), lam=None, fixed_s=None) -> FitResult:
    """Spline-index estimator of the ATE.

    ``lam`` fixes the smoothing parameter (scalar or one per smooth); when
    omitted it is chosen by :func:`select_lambda_bic`. The sandwich uses the
    Jacobian with the difference penalty but no ridge, and unpenalized
    per-row contributions.
    """
    require_both_classes(sample.y_star)
    trace = None
    if lam is None:
        lam, trace = select_lambda_bic(sample, spec, config, opts, fixed_s=fixed_s)
    design = build_gam_design(sample, config, lam)
    problem = _problem(sample, spec, design, fixed_s)
    s = problem.s_hat()
    init = warm_start(sample.y_star, design.q, problem.link(s), design.intercept_index)
    beta, diag = problem.solve_beta(s, init, opts)
    check_range_collapse(problem, beta, s)
    extra = {"lambda_selected": float(lam) if np.ndim(lam) == 0 else [float(v) for v in lam]}
    if trace is not None:
        extra["bic_trace"] = trace
    return finish_fit(problem, beta, s, diag, spec, "gam", variance_penalty=design.Q_a, extra=extra)
