"""Misclassification and selection algebra plus the adjusted link.

The observed-outcome mean in a case-control sample is a fixed transform of the
population outcome regression ``g = expit(eta)``::

    m   = p01 + (1 - p10 - p01) * g          # P(Y* = 1 | x, t) in the population
    h   = s * m / (1 + m * (s - 1))          # P(Y* = 1 | x, t, S = 1)

Everything here is written in terms of ``g`` and ``1 - g`` (both evaluated with a
stable logistic), which keeps the link, its derivatives and ``1 - h`` free of
overflow and cancellation for any finite index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _expit

from .errors import DegenerateSample, DomainError

MU_CLAMP = 1e-10


def expit(eta):
    """Logistic function ``1 / (1 + exp(-eta))``; saturates instead of overflowing."""
    out = _expit(eta)
    return float(out) if np.ndim(out) == 0 else out


def _check_prob(name, value, upper_open=False):
    if not np.isfinite(value) or value < 0 or value > 1 or (upper_open and value >= 1):
        raise DomainError(f"{name}={value} is not a valid probability", constraint=name)


def _check_rates(p01, p10):
    _check_prob("p01", p01, upper_open=True)
    _check_prob("p10", p10, upper_open=True)
    if p01 + p10 >= 1:
        raise DomainError(f"p01 + p10 = {p01 + p10} must be < 1", constraint="p01+p10<1")


@dataclass(frozen=True)
class MismeasureSpec:
    """Externally supplied prevalence and misclassification rates.

    ``p01 = P(Y*=1 | Y=0)`` is the false positive rate and
    ``p10 = P(Y*=0 | Y=1)`` the false negative rate.
    """

    v: float
    p01: float = 0.0
    p10: float = 0.0

    def __post_init__(self):
        _check_prob("v", self.v)
        _check_rates(self.p01, self.p10)

    @property
    def v_star(self) -> float:
        return observed_prevalence(self)

    def as_dict(self) -> dict:
        return {"v": self.v, "p01": self.p01, "p10": self.p10, "v_star": self.v_star}


@dataclass(frozen=True)
class AdjustedLink:
    p01: float
    p10: float
    s: float

    def __post_init__(self):
        _check_rates(self.p01, self.p10)
        if not np.isfinite(self.s) or self.s <= 0:
            raise DomainError(f"sampling ratio s={self.s} must be > 0", constraint="s>0")

    @property
    def sensitivity_gap(self) -> float:
        """``1 - p10 - p01``, the slope of the misclassification map."""
        return 1.0 - self.p10 - self.p01

    @property
    def infimum(self) -> float:
        return self.p01 * self.s / (1.0 + self.p01 * (self.s - 1.0))

    @property
    def supremum(self) -> float:
        q = 1.0 - self.p10
        return q * self.s / (1.0 + q * (self.s - 1.0))

    def __call__(self, eta):
        return adjusted_link(eta, self)


@dataclass
class ObservedSample:
    """Case-control rows ``(y*, t, x)``.

    ``covariate_kinds`` holds ``"continuous"`` or ``"discrete"`` per column of ``x``.
    """

    y_star: np.ndarray
    t: np.ndarray
    x: np.ndarray
    covariate_kinds: tuple = ()
    covariate_names: tuple = ()
    check_classes: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.y_star = np.asarray(self.y_star, dtype=float).ravel()
        self.t = np.asarray(self.t, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        self.x = x
        n = self.y_star.shape[0]
        if n < 1 or self.t.shape[0] != n or self.x.shape[0] != n:
            raise DomainError("y_star, t and x must share a row count >= 1", constraint="rows")
        for name, arr in (("y_star", self.y_star), ("t", self.t)):
            if not np.all((arr == 0) | (arr == 1)):
                raise DomainError(f"{name} must be binary", constraint=name)
        if not np.all(np.isfinite(self.x)):
            raise DomainError("covariates must be finite", constraint="x")
        d = self.x.shape[1]
        if not self.covariate_kinds:
            self.covariate_kinds = tuple(
                "discrete" if np.all(np.isin(self.x[:, j], (0.0, 1.0))) else "continuous"
                for j in range(d)
            )
        if not self.covariate_names:
            self.covariate_names = tuple(f"x{j + 1}" for j in range(d))
        if len(self.covariate_kinds) != d or len(self.covariate_names) != d:
            raise DomainError("covariate_kinds/names must match x columns", constraint="kinds")
        if self.check_classes:
            require_both_classes(self.y_star)

    @property
    def n(self) -> int:
        return self.y_star.shape[0]

    @property
    def case_fraction(self) -> float:
        return float(self.y_star.mean())


def require_both_classes(y_star):
    total = np.sum(y_star)
    if total == 0 or total == len(y_star):
        raise DegenerateSample("observed outcome must contain both 0 and 1")


def link_components(eta, link: AdjustedLink) -> dict:
    """Quantities the score, Hessian and sandwich code need, evaluated stably.

    Keys: ``mu`` (h), ``one_minus_mu``, ``h1`` (dh/deta), ``ratio``
    (h'/(h(1-h)), which does not depend on s), ``h2_over_v`` (h''/(h(1-h))),
    ``dmu_ds`` (dh/ds at fixed eta).
    """
    eta = np.asarray(eta, dtype=float)
    p01, p10, s = link.p01, link.p10, link.s
    c = link.sensitivity_gap
    g = _expit(eta)
    gc = _expit(-eta)
    q = g * gc
    m = p01 + c * g
    m_c = p10 + c * gc
    den = 1.0 + m * (s - 1.0)
    mu, one_minus_mu = _mean_pair(m, m_c, s)
    h1 = s * c * q / den**2
    # h'/V = c g (1-g) / (m (1-m)); split so that g -> 0 with p01 = 0 (or
    # g -> 1 with p10 = 0) stays finite
    with np.errstate(divide="ignore", invalid="ignore"):
        g_over_m = np.where(m > 0, g / m, 1.0 / c)
        gc_over_mc = np.where(m_c > 0, gc / m_c, 1.0 / c)
    ratio = c * g_over_m * gc_over_mc
    h2_over_v = ratio * ((gc - g) - 2.0 * (s - 1.0) * c * q / den)
    dmu_ds = m * m_c / den**2
    return {
        "g": g,
        "mu": mu,
        "one_minus_mu": one_minus_mu,
        "h1": h1,
        "ratio": ratio,
        "h2_over_v": h2_over_v,
        "dmu_ds": dmu_ds,
    }


def _mean_pair(m, m_c, s):
    """``h = s m / (1 + m (s - 1))`` and ``1 - h`` from ``m`` and ``1 - m``.

    Written as ``s / (s + m_c / m)`` and ``1 / (1 + s m / m_c)`` so every float
    operation is monotone in ``g``: rounding can tie neighbouring values but
    never reverse their order.
    """
    with np.errstate(divide="ignore"):
        mu = s / (s + m_c / m)
        one_minus_mu = 1.0 / (1.0 + s * m / m_c)
    return mu, one_minus_mu


def _scalarize(out):
    return float(out) if np.ndim(out) == 0 else out


def adjusted_link(eta, link: AdjustedLink):
    """Mean of ``Y*`` in the selected sample given the index ``eta``."""
    eta = np.asarray(eta, dtype=float)
    c = link.sensitivity_gap
    mu, _ = _mean_pair(link.p01 + c * _expit(eta), link.p10 + c * _expit(-eta), link.s)
    return _scalarize(mu)


def adjusted_link_derivs(eta, link: AdjustedLink):
    """Analytic first and second derivatives of the adjusted link in ``eta``."""
    eta = np.asarray(eta, dtype=float)
    s, c = link.s, link.sensitivity_gap
    g = _expit(eta)
    gc = _expit(-eta)
    q = g * gc
    den = 1.0 + (link.p01 + c * g) * (s - 1.0)
    h1 = s * c * q / den**2
    h2 = s * c * q * ((gc - g) * den - 2.0 * (s - 1.0) * c * q) / den**3
    return _scalarize(h1), _scalarize(h2)


def observed_prevalence(spec: MismeasureSpec) -> float:
    return (1.0 - spec.p10 - spec.p01) * spec.v + spec.p01


def true_prevalence_from_observed(v_star: float, p01: float, p10: float) -> float:
    _check_rates(p01, p10)
    v = (v_star - p01) / (1.0 - p10 - p01)
    if not (0.0 <= v <= 1.0):
        raise DomainError(
            f"v*={v_star} is outside [p01, 1-p10] = [{p01}, {1 - p10}]",
            constraint="p01<=v_star<=1-p10",
        )
    return v


def sampling_ratio(v_star: float, case_fraction: float) -> float:
    """Odds of selection for observed cases relative to observed controls."""
    if not 0.0 < v_star < 1.0:
        raise DomainError(f"v*={v_star} must lie in (0, 1)", constraint="0<v_star<1")
    if not 0.0 < case_fraction < 1.0:
        raise DomainError(
            f"case fraction {case_fraction} must lie in (0, 1)", constraint="0<case_fraction<1"
        )
    return (case_fraction / v_star) / ((1.0 - case_fraction) / (1.0 - v_star))


def forward_outcome_regression(g, link: AdjustedLink):
    """Map a population regression ``g`` to the sample regression ``g*``."""
    g = np.asarray(g, dtype=float)
    c = link.sensitivity_gap
    mu, _ = _mean_pair(link.p01 + c * g, link.p10 + c * (1.0 - g), link.s)
    return _scalarize(mu)


def invert_outcome_regression(g_star, link: AdjustedLink):
    """Recover ``g`` from the sample regression ``g*`` (inverse of the forward map)."""
    gs = np.asarray(g_star, dtype=float)
    lo, hi = link.infimum, link.supremum
    if np.any(gs <= lo):
        raise DomainError(f"g*={g_star} at or below the link infimum {lo}", constraint="infimum")
    if np.any(gs >= hi):
        raise DomainError(f"g*={g_star} at or above the link supremum {hi}", constraint="supremum")
    m = gs / (link.s - gs * (link.s - 1.0))
    return _scalarize((m - link.p01) / link.sensitivity_gap)


def clamp_mu(mu):
    return np.clip(mu, MU_CLAMP, 1.0 - MU_CLAMP)


def log_likelihood(y_star, eta, link: AdjustedLink) -> float:
    """Bernoulli log-likelihood of ``y*`` under the adjusted link (summed)."""
    comp = link_components(eta, link)
    mu = np.clip(comp["mu"], MU_CLAMP, None)
    one_minus = np.clip(comp["one_minus_mu"], MU_CLAMP, None)
    y = np.asarray(y_star, dtype=float)
    return float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(one_minus)))
