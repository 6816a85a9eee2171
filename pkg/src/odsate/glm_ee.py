"""GLM-EE: adjusted-link logistic model, plug-in ATE and stacked sandwich inference.

The parameter vector is ``theta = (s, beta, u)`` with ``u`` ordered
``(u11, u10, u01, u00)``; ``u_ij`` is the mean of ``g_i(x)`` over sampled rows
with ``y* = j``. The same stacked machinery serves the spline estimator, which
only swaps the design matrices and adds penalty matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core_model import (
    MU_CLAMP,
    AdjustedLink,
    MismeasureSpec,
    ObservedSample,
    expit,
    invert_outcome_regression,
    link_components,
    log_likelihood,
    require_both_classes,
)
from .ee_solver import SolveDiagnostics, SolveOptions, newton_solve, sandwich_covariance
from .errors import DegenerateSample, NonConvergence, RangeCollapse, SingularJacobian

Z95 = 1.959963984540054
COLLAPSE_FRACTION = 0.10
PREVALENCE_FACTOR = 10.0


@dataclass(frozen=True)
class GlmTheta:
    s: float
    beta: np.ndarray
    u: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.s], self.beta, self.u])


@dataclass(frozen=True)
class FitResult:
    theta: GlmTheta
    tau_hat: float
    v_hat: np.ndarray
    tau_se: float
    tau_ci95: tuple
    diagnostics: SolveDiagnostics
    engine: str = "glm"
    spec: MismeasureSpec | None = None
    v_star: float = float("nan")
    s_fixed: bool = False
    link: AdjustedLink | None = None
    n: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def s_hat(self) -> float:
        return self.theta.s

    def covers(self, tau: float) -> bool:
        return self.tau_ci95[0] <= tau <= self.tau_ci95[1]

    def report(self) -> dict:
        out = {
            "engine": self.engine,
            "theta_hat": {
                "s": self.theta.s,
                "beta": [float(b) for b in self.theta.beta],
                "u": dict(zip(("u11", "u10", "u01", "u00"), map(float, self.theta.u))),
            },
            "tau_hat": self.tau_hat,
            "tau_se": self.tau_se,
            "tau_ci95": [self.tau_ci95[0], self.tau_ci95[1]],
            "s_hat": self.theta.s,
            "s_fixed": self.s_fixed,
            "v_star": self.v_star,
            "spec": self.spec.as_dict() if self.spec is not None else None,
            "n": self.n,
            "diagnostics": self.diagnostics.as_dict(),
        }
        out.update(self.extra)
        return out


def tau_weights(v_star: float) -> np.ndarray:
    """Coefficients ``c`` with ``tau = c . u`` for ``u = (u11, u10, u01, u00)``."""
    return np.array([v_star, 1.0 - v_star, -v_star, -(1.0 - v_star)])


def tau_from_u(u, v_star: float) -> float:
    u = np.asarray(u, dtype=float)
    return float((v_star * u[0] + (1.0 - v_star) * u[1]) - (v_star * u[2] + (1.0 - v_star) * u[3]))


def estimate_s_hat(sample: ObservedSample, v_star: float) -> float:
    y = sample.y_star
    require_both_classes(y)
    return float(np.sum(y) * (1.0 - v_star) / (np.sum(1.0 - y) * v_star))


def glm_design(sample: ObservedSample, t=None) -> np.ndarray:
    """Rows ``(1, t, x)``; ``t`` overrides the treatment column when given."""
    n = sample.n
    tcol = sample.t if t is None else np.full(n, float(t))
    return np.column_stack([np.ones(n), tcol, sample.x])


def _u_from_probs(g1, g0, y) -> np.ndarray:
    n1 = np.sum(y)
    n0 = np.sum(1.0 - y)
    if n1 == 0 or n0 == 0:
        raise DegenerateSample("observed outcome must contain both 0 and 1")
    return np.array([
        np.sum(y * g1) / n1,
        np.sum((1.0 - y) * g1) / n0,
        np.sum(y * g0) / n1,
        np.sum((1.0 - y) * g0) / n0,
    ])


def compute_u_hat(beta, sample: ObservedSample) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    g1 = expit(glm_design(sample, t=1) @ beta)
    g0 = expit(glm_design(sample, t=0) @ beta)
    return _u_from_probs(g1, g0, sample.y_star)


def glm_score(beta, sample: ObservedSample, link: AdjustedLink) -> np.ndarray:
    """Mean gradient of the adjusted-link log-likelihood in ``beta``."""
    z = glm_design(sample)
    comp = link_components(z @ np.asarray(beta, dtype=float), link)
    return z.T @ ((sample.y_star - comp["mu"]) * comp["ratio"]) / sample.n


def glm_loglik(beta, sample: ObservedSample, link: AdjustedLink) -> float:
    return log_likelihood(sample.y_star, glm_design(sample) @ np.asarray(beta, dtype=float), link)


class StackedProblem:
    """Stacked estimating equations ``(S_n, G_n, M_n)`` for a fixed design.

    ``penalty`` enters the beta block as ``-penalty @ beta / n`` (sum-scale
    penalty matrix). ``variance_penalty`` replaces it in the Jacobian used for
    the sandwich; the per-row contributions used for the meat never carry a
    penalty.
    """

    def __init__(self, y, z, z1, z0, v_star, p01, p10, penalty=None,
                 variance_penalty=None, fixed_s=None):
        self.y = np.asarray(y, dtype=float)
        self.z, self.z1, self.z0 = z, z1, z0
        self.n, self.p = z.shape
        self.v_star = float(v_star)
        self.p01, self.p10 = float(p01), float(p10)
        zero = np.zeros((self.p, self.p))
        self.penalty = zero if penalty is None else penalty
        self.variance_penalty = self.penalty if variance_penalty is None else variance_penalty
        self.fixed_s = fixed_s

    # -- pieces ---------------------------------------------------------------
    def link(self, s) -> AdjustedLink:
        return AdjustedLink(self.p01, self.p10, float(s))

    def s_hat(self) -> float:
        if self.fixed_s is not None:
            return float(self.fixed_s)
        require_both_classes(self.y)
        return float(np.sum(self.y) * (1 - self.v_star) / (np.sum(1 - self.y) * self.v_star))

    def beta_score(self, beta, s, penalty=None) -> np.ndarray:
        pen = self.penalty if penalty is None else penalty
        comp = link_components(self.z @ beta, self.link(s))
        return (self.z.T @ ((self.y - comp["mu"]) * comp["ratio"]) - pen @ beta) / self.n

    def _weights(self, comp, fisher=False):
        w = comp["h1"] * comp["ratio"]
        if fisher:
            return w
        resid = self.y - comp["mu"]
        one_m_2mu = comp["one_minus_mu"] - comp["mu"]
        return w - resid * (comp["h2_over_v"] - comp["ratio"] ** 2 * one_m_2mu)

    def beta_jacobian(self, beta, s, penalty=None, fisher=False) -> np.ndarray:
        pen = self.penalty if penalty is None else penalty
        comp = link_components(self.z @ beta, self.link(s))
        w = self._weights(comp, fisher)
        return -(self.z.T @ (w[:, None] * self.z) + pen) / self.n

    def fisher_information(self, beta, s) -> np.ndarray:
        """``Z' W Z`` with expected (Fisher) weights, sum scale."""
        comp = link_components(self.z @ beta, self.link(s))
        w = comp["h1"] * comp["ratio"]
        return self.z.T @ (w[:, None] * self.z)

    def u_hat(self, beta) -> np.ndarray:
        return _u_from_probs(expit(self.z1 @ beta), expit(self.z0 @ beta), self.y)

    # -- stacked system --------------------------------------------------------
    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.fixed_s is not None:
            return float(self.fixed_s), theta[: self.p], theta[self.p:]
        return theta[0], theta[1: 1 + self.p], theta[1 + self.p:]

    def psi_rows(self, theta) -> np.ndarray:
        """Per-row contributions (no penalty), n x dim(theta)."""
        s, beta, u = self.split(theta)
        y = self.y
        comp = link_components(self.z @ beta, self.link(s))
        g1 = expit(self.z1 @ beta)
        g0 = expit(self.z0 @ beta)
        blocks = []
        if self.fixed_s is None:
            blocks.append((s * self.v_star * (1 - y) - (1 - self.v_star) * y)[:, None])
        blocks.append(self.z * ((y - comp["mu"]) * comp["ratio"])[:, None])
        blocks.append(np.column_stack([
            y * (u[0] - g1), (1 - y) * (u[1] - g1), y * (u[2] - g0), (1 - y) * (u[3] - g0),
        ]))
        return np.hstack(blocks)

    def equation(self, theta) -> np.ndarray:
        """Mean stacked equation including the fitting penalty."""
        s, beta, _ = self.split(theta)
        out = self.psi_rows(theta).mean(axis=0)
        off = 0 if self.fixed_s is not None else 1
        out[off: off + self.p] -= self.penalty @ beta / self.n
        return out

    def jacobian(self, theta, penalty=None) -> np.ndarray:
        """Analytic mean derivative of the stacked equation (block lower triangular)."""
        pen = self.penalty if penalty is None else penalty
        s, beta, u = self.split(theta)
        y, n, p = self.y, self.n, self.p
        comp = link_components(self.z @ beta, self.link(s))
        g1 = expit(self.z1 @ beta)
        g0 = expit(self.z0 @ beta)
        off = 0 if self.fixed_s is not None else 1
        q = off + p + 4
        jac = np.zeros((q, q))
        if off:
            jac[0, 0] = np.mean(self.v_star * (1 - y))
            # d/ds of (y - mu) * ratio; ratio does not depend on s
            jac[1: 1 + p, 0] = self.z.T @ (-comp["dmu_ds"] * comp["ratio"]) / n
        w = self._weights(comp)
        jac[off: off + p, off: off + p] = -(self.z.T @ (w[:, None] * self.z) + pen) / n
        d1 = g1 * (1 - g1)
        d0 = g0 * (1 - g0)
        r = off + p
        jac[r + 0, off: off + p] = -(self.z1.T @ (y * d1)) / n
        jac[r + 1, off: off + p] = -(self.z1.T @ ((1 - y) * d1)) / n
        jac[r + 2, off: off + p] = -(self.z0.T @ (y * d0)) / n
        jac[r + 3, off: off + p] = -(self.z0.T @ ((1 - y) * d0)) / n
        jac[r:, r:] = np.diag([y.mean(), (1 - y).mean(), y.mean(), (1 - y).mean()])
        return jac

    def q_vector(self) -> np.ndarray:
        off = 0 if self.fixed_s is not None else 1
        return np.concatenate([np.zeros(off + self.p), tau_weights(self.v_star)])

    # -- solving ---------------------------------------------------------------
    def solve_beta(self, s, init, opts: SolveOptions):
        eq = lambda b: self.beta_score(b, s)  # noqa: E731
        jac = lambda b: self.beta_jacobian(b, s)  # noqa: E731
        try:
            return newton_solve(eq, jac, init, opts)
        except (NonConvergence, SingularJacobian):
            if opts.jacobian_mode != "analytic":
                raise
        # observed-information Newton can wander far from the root; warm up with
        # Fisher scoring, then polish with the full Jacobian
        fisher = lambda b: self.beta_jacobian(b, s, fisher=True)  # noqa: E731
        warm_opts = replace(opts, tol_score=max(opts.tol_score, 1e-6))
        try:
            warm, warm_diag = newton_solve(eq, fisher, init, warm_opts)
        except NonConvergence as exc:
            warm, warm_diag = exc.theta, None
        beta, diag = newton_solve(eq, jac, warm, opts)
        extra = warm_diag.iterations if warm_diag is not None else opts.max_iter
        return beta, SolveDiagnostics(diag.converged, diag.iterations + extra,
                                      diag.final_score_norm, diag.halvings_used)


def warm_start(y, p, link: AdjustedLink, intercept_index=0) -> np.ndarray:
    """Intercept-only start whose adjusted mean matches the case fraction.

    ``logit(mean y*)`` alone can land where the link is saturated and the score
    vanishes without a root, so the case fraction is pulled back through the link.
    """
    m = float(np.clip(np.mean(y), 1e-6, 1 - 1e-6))
    lo, hi = link.infimum, link.supremum
    target = min(max(m, lo + 1e-3 * (hi - lo)), hi - 1e-3 * (hi - lo))
    g = float(np.clip(invert_outcome_regression(target, link), 1e-8, 1 - 1e-8))
    beta = np.zeros(p)
    beta[intercept_index] = np.log(g / (1 - g))
    return beta


def implied_prevalence(problem: StackedProblem, beta) -> float:
    """Population P(Y=1) implied by the fitted outcome model.

    Cases and controls are reweighted to their population shares v* and 1 - v*,
    which undoes the outcome-dependent selection.
    """
    g = expit(problem.z @ beta)
    y = problem.y
    return float(problem.v_star * g[y == 1].mean() + (1.0 - problem.v_star) * g[y == 0].mean())


def check_range_collapse(problem: StackedProblem, beta, s):
    """Reject fits pinned to the edge of the adjusted link's range.

    Two symptoms: more than 10% of fitted means on the probability clamp, or an
    outcome model whose implied prevalence is off from v by more than a factor
    of ``PREVALENCE_FACTOR`` when s is estimated (the estimating equations then have no interior
    root and Newton creeps along a flat boundary direction).
    """
    comp = link_components(problem.z @ beta, problem.link(s))
    hit = (comp["mu"] <= MU_CLAMP) | (comp["one_minus_mu"] <= MU_CLAMP)
    frac = float(np.mean(hit))
    if frac > COLLAPSE_FRACTION:
        raise RangeCollapse(
            f"{100 * frac:.1f}% of fitted means sit on the probability clamp; "
            "the adjusted link range has collapsed"
        )
    c = 1.0 - problem.p01 - problem.p10
    v = (problem.v_star - problem.p01) / c
    implied = implied_prevalence(problem, beta)
    # the reweighting assumes the selection model is fitted, so skip it when s is imposed
    if problem.fixed_s is None and v > 0 and not (v / PREVALENCE_FACTOR <= implied <= min(1.0, v * PREVALENCE_FACTOR)):
        raise RangeCollapse(
            f"fitted outcome model implies prevalence {implied:.3g} against v={v:.3g}; "
            "the adjusted link range has collapsed"
        )
    return frac


def finish_fit(problem: StackedProblem, beta, s, diag, spec, engine,
               variance_penalty=None, extra=None) -> FitResult:
    """Steps 3-4 plus stacked sandwich inference, given the fitted beta."""
    u = problem.u_hat(beta)
    tau = tau_from_u(u, problem.v_star)
    theta_vec = np.concatenate(([s] if problem.fixed_s is None else [], beta, u))
    rows = problem.psi_rows(theta_vec)
    jac = problem.jacobian(theta_vec, penalty=variance_penalty)
    cov = sandwich_covariance(rows, jac)
    q = problem.q_vector()
    se = float(np.sqrt(max(q @ cov @ q, 0.0)))
    if problem.fixed_s is not None:
        full = np.zeros((cov.shape[0] + 1, cov.shape[0] + 1))
        full[1:, 1:] = cov
        cov = full
    return FitResult(
        theta=GlmTheta(float(s), beta, u),
        tau_hat=tau,
        v_hat=cov,
        tau_se=se,
        tau_ci95=(tau - Z95 * se, tau + Z95 * se),
        diagnostics=diag,
        engine=engine,
        spec=spec,
        v_star=problem.v_star,
        s_fixed=problem.fixed_s is not None,
        link=problem.link(s),
        n=problem.n,
        extra=extra or {},
    )


def glm_problem(sample: ObservedSample, spec: MismeasureSpec, fixed_s=None) -> StackedProblem:
    return StackedProblem(
        sample.y_star, glm_design(sample), glm_design(sample, t=1), glm_design(sample, t=0),
        spec.v_star, spec.p01, spec.p10, fixed_s=fixed_s,
    )


def fit_glm_ee(sample: ObservedSample, spec: MismeasureSpec,
               opts: SolveOptions = SolveOptions(), fixed_s=None) -> FitResult:
    """Fit the adjusted-link GLM and return the ATE with sandwich inference.

    ``fixed_s`` pins the sampling ratio instead of estimating it (used by the
    naive comparators); the s row and column of ``v_hat`` are then zero.
    """
    require_both_classes(sample.y_star)
    problem = glm_problem(sample, spec, fixed_s=fixed_s)
    s = problem.s_hat()
    beta, diag = problem.solve_beta(s, warm_start(sample.y_star, problem.p, problem.link(s)), opts)
    check_range_collapse(problem, beta, s)
    return finish_fit(problem, beta, s, diag, spec, "glm")
