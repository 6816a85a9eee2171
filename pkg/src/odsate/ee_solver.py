"""Damped Newton root finding for stacked estimating equations, and the sandwich."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import DomainError, IllConditionedWarning, NonConvergence, SingularJacobian

COND_LIMIT = 1e12
RIDGE = 1e-10


@dataclass(frozen=True)
class SolveOptions:
    tol_score: float = 1e-8
    max_iter: int = 100
    step_halving_max: int = 30
    jacobian_mode: str = "analytic"
    # minimum-norm steps when the Jacobian is exactly rank deficient (unpenalized spline fits)
    allow_singular: bool = False

    def __post_init__(self):
        if not self.tol_score > 0:
            raise DomainError("tol_score must be > 0", constraint="tol_score>0")
        if self.max_iter < 1:
            raise DomainError("max_iter must be >= 1", constraint="max_iter>=1")
        if self.step_halving_max < 0:
            raise DomainError("step_halving_max must be >= 0", constraint="step_halving_max>=0")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise DomainError(f"unknown jacobian_mode {self.jacobian_mode!r}", constraint="jacobian_mode")


@dataclass(frozen=True)
class SolveDiagnostics:
    converged: bool
    iterations: int
    final_score_norm: float
    halvings_used: int

    def as_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_score_norm": self.final_score_norm,
            "halvings_used": self.halvings_used,
        }


def finite_difference_jacobian(equation, theta, rel_step=1e-6):
    """Central-difference Jacobian of a vector function."""
    theta = np.asarray(theta, dtype=float)
    f0 = np.asarray(equation(theta), dtype=float)
    jac = np.empty((f0.size, theta.size))
    for k in range(theta.size):
        h = rel_step * max(1.0, abs(theta[k]))
        up = theta.copy()
        dn = theta.copy()
        up[k] += h
        dn[k] -= h
        jac[:, k] = (np.asarray(equation(up)) - np.asarray(equation(dn))) / (2.0 * h)
    return jac


def _sup(v):
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _newton_step(jac, f, allow_singular):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(jac, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularJacobian(f"Jacobian factorization failed: {exc}") from exc
    diag = np.abs(np.diag(lu))
    scale = max(float(np.max(np.abs(jac))), 1e-300)
    if np.min(diag) <= 1e-14 * scale:
        if allow_singular:
            return np.linalg.lstsq(jac, -f, rcond=None)[0]
        raise SingularJacobian(
            "Jacobian is numerically singular", condition=float(np.linalg.cond(jac))
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        return sla.lu_solve((lu, piv), -f)


def newton_solve(equation, jacobian, init, opts: SolveOptions = SolveOptions()):
    """Solve ``equation(theta) = 0`` by Newton's method with step halving.

    A full step is halved (up to ``opts.step_halving_max`` times) while it
    produces non-finite values or a larger sup-norm of the equation. If no
    halving helps, the finite candidate with the smallest norm is taken.

    Returns ``(theta_hat, SolveDiagnostics)``; raises ``NonConvergence`` when the
    iteration budget is exhausted.
    """
    theta = np.array(init, dtype=float, copy=True).ravel()
    if not np.all(np.isfinite(theta)):
        raise DomainError("initial value must be finite", constraint="init")
    if opts.jacobian_mode == "finite_difference" or jacobian is None:
        jac_fn = lambda th: finite_difference_jacobian(equation, th)  # noqa: E731
    else:
        jac_fn = jacobian

    f = np.asarray(equation(theta), dtype=float).ravel()
    norm = _sup(f)
    if not np.isfinite(norm):
        raise DomainError("equation is not finite at the initial value", constraint="init")
    halvings = 0
    for it in range(opts.max_iter + 1):
        if norm <= opts.tol_score:
            return theta, SolveDiagnostics(True, it, norm, halvings)
        if it == opts.max_iter:
            break
        jac = np.atleast_2d(np.asarray(jac_fn(theta), dtype=float))
        if not np.all(np.isfinite(jac)):
            raise SingularJacobian("Jacobian has non-finite entries")
        step = _newton_step(jac, f, opts.allow_singular)

        best = None
        t = 1.0
        for k in range(opts.step_halving_max + 1):
            cand = theta + t * step
            f_c = np.asarray(equation(cand), dtype=float).ravel()
            n_c = _sup(f_c)
            if np.isfinite(n_c) and np.all(np.isfinite(cand)):
                if best is None or n_c < best[2]:
                    best = (cand, f_c, n_c)
                if n_c <= norm:
                    break
            if k < opts.step_halving_max:
                t *= 0.5
                halvings += 1
        if best is None:
            raise NonConvergence(
                "every damped Newton step produced non-finite values",
                theta=theta, score_norm=norm, iterations=it,
            )
        theta, f, norm = best
    raise NonConvergence(
        f"no convergence after {opts.max_iter} iterations (|score|={norm:.3e})",
        theta=theta, score_norm=norm, iterations=opts.max_iter,
    )


def sandwich_covariance(psi_per_row, jacobian_mean):
    """Sandwich covariance ``(1/n) H^-1 B H^-T`` of an M-estimator.

    ``psi_per_row`` is the n x q matrix of estimating-function contributions at
    the solution and ``jacobian_mean`` the q x q mean derivative of psi. The sign
    convention of the Jacobian cancels. An ill-conditioned Jacobian is ridge
    perturbed by ``1e-10 I`` with a warning.
    """
    psi = np.atleast_2d(np.asarray(psi_per_row, dtype=float))
    jac = np.atleast_2d(np.asarray(jacobian_mean, dtype=float))
    n, q = psi.shape
    if jac.shape != (q, q):
        raise DomainError(f"jacobian shape {jac.shape} does not match psi width {q}", constraint="shape")
    bread = psi.T @ psi / n
    cond = np.linalg.cond(jac)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        warnings.warn(
            f"sandwich Jacobian condition number {cond:.3e}; adding {RIDGE:g} ridge",
            IllConditionedWarning,
            stacklevel=2,
        )
        jac = jac + RIDGE * np.eye(q)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(jac)
    except (ValueError, sla.LinAlgError) as exc:
        raise SingularJacobian(f"sandwich Jacobian factorization failed: {exc}", condition=cond) from exc
    if np.min(np.abs(np.diag(lu[0]))) == 0.0:
        raise SingularJacobian("sandwich Jacobian is singular", condition=cond)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        left = sla.lu_solve(lu, bread)
        cov = sla.lu_solve(lu, left.T).T / n
    return 0.5 * (cov + cov.T)
