"""Model-performance statistics and privacy-safe curve aggregation.

Everything a local node reports about the final model flows through
:func:`aggregate_curve`, which thins reporting knots so that every reported
point covers at least a configured number of patients, then summarises the
per-bootstrap curves by their median and a percentile band.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fedcox.errors import DataError
from fedcox.survival import StepFunction, cox_survival, kaplan_meier

__all__ = [
    "AggregatedCurve",
    "SubgroupCurves",
    "CalibrationGroup",
    "CalibrationPoint",
    "c_harrell",
    "thin_knots",
    "aggregate_curve",
    "subgroup_km_vs_cox",
    "calibration",
]


def c_harrell(times, events, lp) -> float:
    """Concordance fraction over comparable patient pairs.

    A pair is comparable when the member with the shorter time had an
    event; pairs tied in time are excluded.  Concordant means the higher
    risk score belongs to the shorter survival; tied scores count one half.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int64)
    lp = np.asarray(lp, dtype=float)
    if times.size < 2:
        raise DataError("need at least two patients")

    concordant = 0.0
    comparable = 0
    # row i against all later rows, vectorised
    for i in range(times.size - 1):
        tj = times[i + 1:]
        ej = events[i + 1:]
        sj = lp[i + 1:]
        i_shorter = (times[i] < tj) & (events[i] == 1)
        j_shorter = (tj < times[i]) & (ej == 1)
        usable = i_shorter | j_shorter
        if not usable.any():
            continue
        comparable += int(usable.sum())
        shorter_score = np.where(i_shorter, lp[i], sj)
        longer_score = np.where(i_shorter, sj, lp[i])
        diff = shorter_score[usable] - longer_score[usable]
        concordant += float((diff > 0).sum()) + 0.5 * float((diff == 0).sum())
    if comparable == 0:
        raise DataError("no comparable pairs")
    return concordant / comparable


@dataclass(frozen=True)
class AggregatedCurve:
    """Bootstrap-median step curve with a percentile band and, per reported
    knot, the number of underlying patients it aggregates."""

    knots: np.ndarray
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coverage: np.ndarray

    def __post_init__(self):
        for name in ("knots", "values", "lower", "upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "coverage", np.asarray(self.coverage, dtype=np.int64))
        n = self.knots.size
        if any(getattr(self, f).size != n for f in ("values", "lower", "upper", "coverage")):
            raise ValueError("curve fields must have matching lengths")
        if n > 1 and np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly ascending")
        if np.any(self.lower > self.values) or np.any(self.values > self.upper):
            raise ValueError("band must bracket the median")


def thin_knots(knots, counts, min_patients):
    """Indices of reporting knots, each covering >= ``min_patients``.

    Walks the knots accumulating patient counts and emits a knot whenever
    the accumulator fills; a trailing remainder is merged into the last
    emitted knot, which moves to the final position so the curve keeps its
    full extent.  When the whole curve holds fewer than ``min_patients``
    only the terminal knot is reported.
    """
    knots = np.asarray(knots)
    counts = np.asarray(counts, dtype=np.int64)
    if knots.size == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.int64)
    picked = []
    coverage = []
    acc = 0
    for i in range(knots.size):
        acc += int(counts[i])
        if acc >= min_patients:
            picked.append(i)
            coverage.append(acc)
            acc = 0
    if acc > 0 or not picked:
        if picked:
            coverage[-1] += acc
            picked[-1] = knots.size - 1
        else:
            picked = [knots.size - 1]
            coverage = [acc]
    return np.asarray(picked, dtype=np.intp), np.asarray(coverage, dtype=np.int64)


def aggregate_curve(
    curves: Sequence[StepFunction],
    min_patients: int,
    alpha: float,
    grid_knots=None,
    grid_counts=None,
) -> AggregatedCurve:
    """Median and percentile band of step curves on a privacy-thinned grid.

    The reporting grid defaults to the first curve's own knots with one
    patient per knot; callers normally supply the cohort's event times and
    per-time event counts.
    """
    if not curves:
        raise ValueError("need at least one curve")
    if grid_knots is None:
        grid_knots = curves[0].knots
        grid_counts = np.ones(len(grid_knots), dtype=np.int64)
    grid_knots = np.asarray(grid_knots, dtype=float)
    grid_counts = np.asarray(grid_counts, dtype=np.int64)
    idx, coverage = thin_knots(grid_knots, grid_counts, min_patients)
    knots = grid_knots[idx]
    sample = np.vstack([np.asarray(c(knots), dtype=float).reshape(1, -1) for c in curves]) \
        if knots.size else np.zeros((len(curves), 0))
    return AggregatedCurve(
        knots=knots,
        values=np.median(sample, axis=0),
        lower=np.percentile(sample, 100 * alpha / 2, axis=0),
        upper=np.percentile(sample, 100 * (1 - alpha / 2), axis=0),
        coverage=coverage,
    )


@dataclass
class SubgroupCurves:
    """One risk-score subgroup: observed and model-predicted survival."""

    label: str
    n_members: int
    km: StepFunction
    cox_knots: np.ndarray
    cox_values: np.ndarray
    empty: bool = False


def subgroup_km_vs_cox(data, beta_median, baseline, lp_thresholds, grid=None):
    """Observed Kaplan-Meier against the model-mean survival per subgroup.

    Patients are split by their risk score at the supplied ascending
    thresholds (no thresholds: one whole-cohort group).  For each subgroup
    the model curve is the member-average of predicted survival evaluated
    at the subgroup's event times (or ``grid`` when given).  Empty
    subgroups are returned flagged instead of raising.
    """
    lp_thresholds = list(lp_thresholds or [])
    if any(b <= a for a, b in zip(lp_thresholds, lp_thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    lp = data.covariates @ np.asarray(beta_median, dtype=float)
    labels = np.digitize(lp, lp_thresholds)
    out = []
    for g in range(len(lp_thresholds) + 1):
        members = np.flatnonzero(labels == g)
        name = f"group{g + 1}"
        if members.size == 0:
            out.append(
                SubgroupCurves(name, 0, StepFunction(np.zeros(0), np.zeros(0), start_value=1.0),
                               np.zeros(0), np.zeros(0), empty=True)
            )
            continue
        km = kaplan_meier(data.times[members], data.events[members])
        knots = np.asarray(grid, dtype=float) if grid is not None else km.knots
        cox_vals = np.array(
            [np.mean(cox_survival(baseline, lp[members], t)) for t in knots]
        )
        out.append(SubgroupCurves(name, members.size, km, knots, cox_vals))
    return out


@dataclass
class CalibrationGroup:
    predicted: float        # median predicted survival in the group
    observed: float         # bootstrap-median Kaplan-Meier value
    lower: float
    upper: float
    count: int              # smallest per-bootstrap group size


@dataclass
class CalibrationPoint:
    time: float
    groups: list[CalibrationGroup]
    flagged: bool           # time beyond the last baseline knot, or degenerate cutpoints


def calibration(frames, beta_median, time_points, n_groups, alpha):
    """Predicted-versus-observed survival at fixed time points.

    ``frames`` is one (data, baseline) pair per bootstrap: the in-bag
    sample and the cumulative baseline hazard fitted on it.  Predicted
    probabilities are pooled over all bootstraps to define equal-count
    cutpoints, which then split each bootstrap into groups; the observed
    value per group is a Kaplan-Meier estimate at the time point.
    """
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    beta_median = np.asarray(beta_median, dtype=float)
    out = []
    for t in time_points:
        flagged = False
        preds = []
        for data, baseline in frames:
            if baseline.knots.size and t > baseline.knots[-1]:
                flagged = True
            preds.append(cox_survival(baseline, data.covariates @ beta_median, t))
        pooled = np.concatenate(preds)
        qs = np.linspace(0, 1, n_groups + 1)[1:-1]
        cuts = np.unique(np.quantile(pooled, qs)) if qs.size else np.zeros(0)
        if cuts.size < n_groups - 1:
            flagged = True  # degenerate cutpoints collapse groups
        n_eff = cuts.size + 1

        groups = []
        for g in range(n_eff):
            lo = -np.inf if g == 0 else cuts[g - 1]
            hi = np.inf if g == n_eff - 1 else cuts[g]
            observed_vals = []
            sizes = []
            member_preds = []
            for (data, baseline), pr in zip(frames, preds):
                sel = (pr > lo) & (pr <= hi)
                if not sel.any():
                    continue
                sizes.append(int(sel.sum()))
                member_preds.append(pr[sel])
                km = kaplan_meier(data.times[sel], data.events[sel])
                observed_vals.append(km(t))
            if not observed_vals:
                continue
            observed_vals = np.asarray(observed_vals)
            groups.append(
                CalibrationGroup(
                    predicted=float(np.median(np.concatenate(member_preds))),
                    observed=float(np.median(observed_vals)),
                    lower=float(np.percentile(observed_vals, 100 * alpha / 2)),
                    upper=float(np.percentile(observed_vals, 100 * (1 - alpha / 2))),
                    count=int(min(sizes)),
                )
            )
        out.append(CalibrationPoint(time=float(t), groups=groups, flagged=flagged))
    return out
