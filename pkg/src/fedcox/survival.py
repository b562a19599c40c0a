"""Stratified Cox model numerics.

Partial log-likelihood with Efron tie handling (analytic gradient and
Hessian), Newton updates with step damping, Breslow cumulative baseline
hazard, Kaplan-Meier estimation and survival prediction.  All functions are
pure; concurrent use from multiple workers is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fedcox import kernels
from fedcox.errors import (
    LikelihoodOverflowError,
    NoEventsError,
    NumericalError,
    SingularHessianError,
)

__all__ = [
    "SurvivalData",
    "RiskSetIndex",
    "LikelihoodEval",
    "StepFunction",
    "FitOutcome",
    "NewtonDriver",
    "build_risk_index",
    "linear_predictor",
    "efron_loglik",
    "newton_step",
    "breslow_baseline",
    "cox_survival",
    "kaplan_meier",
    "fit",
    "sum_evals",
]


@dataclass(frozen=True)
class SurvivalData:
    """One stratum of fully-observed survival data.

    ``times`` are strictly positive follow-up times (months), ``events`` is
    1 for an observed event and 0 for censoring, ``covariates`` is the n x p
    design matrix with no missing entries.
    """

    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        events = np.asarray(self.events, dtype=np.int64)
        cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if times.ndim != 1 or times.size == 0:
            raise ValueError("times must be a nonempty 1-d array")
        if np.any(~np.isfinite(times)) or np.any(times <= 0):
            raise ValueError("times must be strictly positive and finite")
        if events.shape != times.shape or not np.isin(events, (0, 1)).all():
            raise ValueError("events must be 0/1 and match times")
        if cov.shape[0] != times.size:
            raise ValueError("covariate rows must match times")
        if np.any(~np.isfinite(cov)):
            raise ValueError("covariates contain missing or non-finite entries")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise ValueError("feature_names length must match covariate columns")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, rows) -> "SurvivalData":
        """Row subset; repeated indices yield repeated (independent) rows."""
        rows = np.asarray(rows, dtype=np.intp)
        return SurvivalData(
            self.times[rows], self.events[rows], self.covariates[rows], self.feature_names
        )


@dataclass(frozen=True)
class RiskSetIndex:
    """Sorted layout of one stratum for repeated likelihood evaluations.

    ``order`` sorts rows by time descending with event rows after censored
    rows inside each tied block, so that every risk set is a prefix of the
    sorted array and every tied-event group is a contiguous tail slice.
    Censored rows at an event time belong to that risk set (events are
    taken to precede censorings at equal times).
    """

    order: np.ndarray               # (n,) original row positions, sorted
    risk_len_desc: np.ndarray       # (B,) rows at risk per event time, latest first
    tie_counts_desc: np.ndarray     # (B,) events per event time, latest first
    event_times_desc: np.ndarray    # (B,) distinct event times, latest first

    @property
    def n_event_times(self) -> int:
        return self.event_times_desc.size

    @property
    def event_times(self) -> np.ndarray:
        """Distinct event times, ascending."""
        return self.event_times_desc[::-1]

    @property
    def tie_counts(self) -> np.ndarray:
        """Events per distinct event time, ascending time order."""
        return self.tie_counts_desc[::-1]

    @property
    def risk_set_sizes(self) -> np.ndarray:
        """Number at risk per distinct event time, ascending time order."""
        return self.risk_len_desc[::-1]

    def tied_event_rows(self, j: int) -> np.ndarray:
        """Original row positions of the events at the j-th ascending event time."""
        jd = self.n_event_times - 1 - j
        hi = self.risk_len_desc[jd]
        return np.sort(self.order[hi - self.tie_counts_desc[jd]: hi])


def build_risk_index(data: SurvivalData) -> RiskSetIndex:
    """Build the sorted risk-set layout for one stratum.

    Raises
    ------
    NoEventsError
        If the stratum contains no events.
    """
    order = np.lexsort((data.events, -data.times))
    ts = data.times[order]
    ev = data.events[order]
    n = ts.size

    change = np.flatnonzero(ts[1:] != ts[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [n]])
    cum_ev = np.concatenate([[0], np.cumsum(ev)])
    m_per_block = cum_ev[ends] - cum_ev[starts]
    with_events = m_per_block > 0
    if not with_events.any():
        raise NoEventsError("no events in stratum")
    return RiskSetIndex(
        order=order,
        risk_len_desc=ends[with_events].astype(np.int64),
        tie_counts_desc=m_per_block[with_events].astype(np.int64),
        event_times_desc=ts[starts[with_events]],
    )


@dataclass(frozen=True)
class LikelihoodEval:
    """Partial log-likelihood value with its gradient and Hessian."""

    loglik: float
    gradient: np.ndarray
    hessian: np.ndarray


def sum_evals(evals: Sequence[LikelihoodEval], weights=None) -> LikelihoodEval:
    """Combine per-stratum evaluations, optionally rescaling each stratum."""
    if weights is None:
        weights = [1.0] * len(evals)
    return LikelihoodEval(
        loglik=float(sum(w * e.loglik for w, e in zip(weights, evals))),
        gradient=sum(w * e.gradient for w, e in zip(weights, evals)),
        hessian=sum(w * e.hessian for w, e in zip(weights, evals)),
    )


def linear_predictor(covariates, beta) -> np.ndarray:
    """Row-wise risk score X @ beta."""
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    beta = np.asarray(beta, dtype=float)
    if covariates.shape[1] != beta.size:
        raise ValueError(
            f"dimension mismatch: {covariates.shape[1]} columns vs {beta.size} coefficients"
        )
    return covariates @ beta


def efron_loglik(
    data: SurvivalData,
    index: RiskSetIndex,
    beta,
    want_derivatives: bool = True,
) -> LikelihoodEval:
    """Evaluate the tied-event partial log-likelihood at ``beta``.

    The linear predictor is centred before exponentiation, which leaves the
    value and derivatives unchanged but avoids overflow of the hazard
    ratios for large coefficients.

    Raises
    ------
    LikelihoodOverflowError
        On non-finite intermediates; carries the offending ``beta``.
    """
    beta = np.asarray(beta, dtype=float)
    x = np.ascontiguousarray(data.covariates[index.order])
    lp = x @ beta
    if lp.size and beta.size:
        lp = lp - lp.mean()
    try:
        ll, grad, hess = kernels.efron_eval(
            x, lp, index.risk_len_desc, index.tie_counts_desc, want_derivatives
        )
    except ValueError as exc:
        raise LikelihoodOverflowError(str(exc), beta=beta) from exc
    if not want_derivatives:
        p = beta.size
        return LikelihoodEval(ll, np.zeros(p), np.zeros((p, p)))
    return LikelihoodEval(ll, grad, hess)


def newton_step(ev: LikelihoodEval, rcond_limit: float = 1e-12) -> np.ndarray:
    """Newton update -H^-1 g; the maximiser of the local quadratic model.

    Raises
    ------
    SingularHessianError
        If the reciprocal condition estimate falls below ``rcond_limit``.
    """
    hess = np.asarray(ev.hessian, dtype=float)
    grad = np.asarray(ev.gradient, dtype=float)
    if grad.size == 0:
        return np.zeros(0)
    try:
        cond = np.linalg.cond(hess, 1)
    except np.linalg.LinAlgError:
        raise SingularHessianError() from None
    if not np.isfinite(cond) or cond <= 0 or 1.0 / cond < rcond_limit:
        raise SingularHessianError()
    return -np.linalg.solve(hess, grad)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with optional confidence band."""

    knots: np.ndarray
    values: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    start_value: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.ndim != 1 or knots.shape != values.shape:
            raise ValueError("knots and values must be matching 1-d arrays")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly ascending")
        for band in (self.lower, self.upper):
            if band is not None and np.asarray(band).shape != knots.shape:
                raise ValueError("band must match knots")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        """Value at ``t`` (scalar or array); ``start_value`` before the first knot."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.clip(idx, 0, None)], self.start_value)
        return float(out) if out.ndim == 0 else out


def breslow_baseline(data: SurvivalData, beta) -> StepFunction:
    """Cumulative baseline hazard given fitted coefficients.

    Steps occur at distinct event times; each increment is the event count
    there divided by the at-risk hazard-ratio mass.  With all-zero
    coefficients this reduces to the Nelson-Aalen estimator.
    """
    index = build_risk_index(data)
    beta = np.asarray(beta, dtype=float)
    theta = np.exp(linear_predictor(data.covariates, beta))[index.order]
    cum_theta = np.concatenate([[0.0], np.cumsum(theta)])
    denom = cum_theta[index.risk_len_desc]
    increments = index.tie_counts_desc / denom
    return StepFunction(
        knots=index.event_times_desc[::-1].copy(),
        values=np.cumsum(increments[::-1]),
        start_value=0.0,
    )


def cox_survival(baseline: StepFunction, lp, t):
    """Predicted survival probability exp(-H0(t) * exp(lp)); saturates in [0, 1]."""
    cumhaz = baseline(t)
    out = np.exp(-np.asarray(cumhaz) * np.exp(np.asarray(lp, dtype=float)))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def kaplan_meier(times, events) -> StepFunction:
    """Product-limit survival estimator; constant 1 when nothing fails."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int64)
    if times.size == 0:
        raise ValueError("empty sample")
    try:
        index = build_risk_index(SurvivalData(times, events, np.zeros((times.size, 0))))
    except NoEventsError:
        return StepFunction(np.zeros(0), np.zeros(0), start_value=1.0)
    at_risk = index.risk_len_desc.astype(float)
    factors = 1.0 - index.tie_counts_desc / at_risk
    return StepFunction(
        knots=index.event_times_desc[::-1].copy(),
        values=np.cumprod(factors[::-1]),
        start_value=1.0,
    )


@dataclass
class FitOutcome:
    beta: np.ndarray
    loglik: float
    eval: LikelihoodEval
    iterations: int
    converged: bool
    halvings: int = 0


_RUNNING = "running"
_CONVERGED = "converged"
_FAILED = "failed"


class NewtonDriver:
    """State machine for one damped Newton maximisation.

    The same driver runs both the local (monolithic) fit and each
    per-bootstrap fit at the coordinator, so distributed and direct fits
    follow identical trajectories.  ``proposal`` is the point to evaluate
    next; feed the result back through ``update``.  A proposed full step
    that lowers the log-likelihood is halved, up to ``max_step_halvings``
    times, before being accepted.  Convergence is declared when the
    max-norm of the next Newton update drops below ``tolerance``; the final
    sub-tolerance step is applied to the returned coefficients.
    """

    def __init__(self, p, tolerance=1e-6, max_iterations=50, max_step_halvings=10):
        self.p = int(p)
        self.tolerance = float(tolerance)
        self.max_iterations = int(max_iterations)
        self.max_step_halvings = int(max_step_halvings)
        self.beta = np.zeros(self.p)
        self.loglik = None
        self.iterations = 0
        self.total_halvings = 0
        self.status = _RUNNING
        self.failure = None
        self._step = None
        self._halvings = 0

    @property
    def wants_eval(self) -> bool:
        return self.status == _RUNNING

    @property
    def converged(self) -> bool:
        return self.status == _CONVERGED

    @property
    def failed(self) -> bool:
        return self.status == _FAILED

    @property
    def proposal(self) -> np.ndarray:
        if self._step is None:
            return self.beta
        return self.beta + self._step * (0.5 ** self._halvings)

    def fail(self, reason: str):
        self.status = _FAILED
        self.failure = reason

    def update(self, ev: LikelihoodEval):
        """Consume the evaluation at ``proposal`` and advance the state."""
        if self.status != _RUNNING:
            raise RuntimeError("driver is finished")
        if not np.isfinite(ev.loglik):
            self.fail("non-finite log-likelihood")
            return
        if self._step is not None:
            if (
                self.loglik is not None
                and ev.loglik < self.loglik
                and self._halvings < self.max_step_halvings
            ):
                self._halvings += 1
                self.total_halvings += 1
                return
            self.beta = self.proposal
            self._step = None
            self._halvings = 0
            self.iterations += 1
        self.loglik = ev.loglik
        try:
            delta = newton_step(ev)
        except SingularHessianError:
            self.fail("singular Hessian")
            return
        if delta.size == 0 or np.max(np.abs(delta)) < self.tolerance:
            self.beta = self.beta + delta
            self.status = _CONVERGED
            return
        if self.iterations >= self.max_iterations:
            self.fail(f"no convergence within {self.max_iterations} iterations")
            return
        self._step = delta


def fit(
    data,
    beta0=None,
    tolerance=1e-6,
    max_iterations=50,
) -> FitOutcome:
    """Maximise the (possibly stratified) partial log-likelihood.

    ``data`` is a single :class:`SurvivalData` or a sequence of strata whose
    log-likelihoods are summed.  Used directly for single-cohort fits and as
    the oracle the distributed optimiser is checked against.

    Raises
    ------
    SingularHessianError, LikelihoodOverflowError, NumericalError
        On numerical failure (non-convergence included).
    """
    strata = [data] if isinstance(data, SurvivalData) else list(data)
    indexes = [build_risk_index(d) for d in strata]
    p = strata[0].p
    driver = NewtonDriver(p, tolerance=tolerance, max_iterations=max_iterations)
    if beta0 is not None:
        driver.beta = np.asarray(beta0, dtype=float).copy()
    last = None
    while driver.wants_eval:
        beta = driver.proposal
        last = sum_evals([efron_loglik(d, ix, beta) for d, ix in zip(strata, indexes)])
        driver.update(last)
    if driver.failed:
        if driver.failure == "singular Hessian":
            raise SingularHessianError()
        raise NumericalError(driver.failure)
    return FitOutcome(
        beta=driver.beta,
        loglik=driver.loglik,
        eval=last,
        iterations=driver.iterations,
        converged=True,
        halvings=driver.total_halvings,
    )
