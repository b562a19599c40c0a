"""Simulated local data holder.

A node loads its own CSV, filters patients by allowed missingness, builds
one imputation plus one bootstrap per replicate, and answers three request
kinds: prepare (initialisation only, nothing returned), evaluate
(per-model, per-bootstrap likelihood reports) and performance (aggregated
final-model diagnostics).  Patient-level quantities never leave the node;
outbound payloads carry only coefficients-sized arrays, scalars and curves
aggregated over at least ``NrPtPerBin`` patients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedcox import diagnostics as dg
from fedcox import simulation as sim
from fedcox.errors import DataError, LikelihoodOverflowError, NoEventsError
from fedcox.imputation import ImputationConfig, RawDataset, chained_impute, initial_impute
from fedcox.kernels import efron_eval
from fedcox.survival import (
    RiskSetIndex,
    SurvivalData,
    breslow_baseline,
    build_risk_index,
    cox_survival,
)
from fedcox.transport import Message, decode_payload, encode_payload

log = logging.getLogger(__name__)

__all__ = ["LocalConfig", "BootstrapReplicate", "EvalReport", "LocalNode", "NodeRunner"]


@dataclass
class LocalConfig:
    """Local-only settings; the seed never leaves the node."""

    data_path: Optional[str] = None
    local_seed: int = 0
    nr_pt_per_bin: int = 5
    n_allowed_missing: Optional[int] = None

    def __post_init__(self):
        if self.nr_pt_per_bin < 1:
            raise ValueError("NrPtPerBin must be >= 1")


@dataclass
class BootstrapReplicate:
    """One imputation followed by one with-replacement resample."""

    completed: np.ndarray            # (n, P) imputed covariates
    inbag: np.ndarray                # (n,) row positions, multiset
    oob: np.ndarray                  # row positions absent from inbag
    inbag_index: Optional[RiskSetIndex]
    inbag_x: Optional[np.ndarray]    # completed[inbag][order], presorted
    oob_index: Optional[RiskSetIndex]
    oob_x: Optional[np.ndarray]
    fallback_cells: int = 0


@dataclass
class EvalReport:
    """One (model, bootstrap) likelihood contribution."""

    model_id: str
    bootstrap: int
    ok: bool
    loglik: float = 0.0
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    cv_loglik: Optional[float] = None
    n_oob: int = 0
    error: Optional[str] = None


def _centred_eval(x, beta, index, want_derivatives):
    lp = x @ beta
    if lp.size and beta.size:
        lp = lp - lp.mean()
    return efron_eval(x, lp, index.risk_len_desc, index.tie_counts_desc, want_derivatives)


class LocalNode:
    """One data holder; the coordinator reaches it only through the three
    request handlers (or transport messages wrapping them)."""

    def __init__(self, config: LocalConfig, name: str, data: Optional[RawDataset] = None):
        self.config = config
        self.name = name
        self._data = data
        self._filtered: Optional[RawDataset] = None
        self._reference: Optional[np.ndarray] = None
        self._replicates: list[BootstrapReplicate] = []
        self._level_sets: tuple = ()

    # -- data access ---------------------------------------------------------

    def _load(self, level_sets=None) -> RawDataset:
        if self._data is None:
            if not self.config.data_path:
                raise DataError(f"{self.name}: no data path configured")
            self._data = sim.read_centre_csv(
                self.config.data_path,
                level_sets=level_sets if level_sets is not None else (sim.TSTAGE_LEVEL_SET,),
            )
        return self._data

    @property
    def n_local(self) -> int:
        if self._filtered is None:
            raise DataError(f"{self.name}: prepare_replicates has not run")
        return self._filtered.n

    @property
    def n_replicates(self) -> int:
        return len(self._replicates)

    # -- method 1: initialisation (nothing returned) --------------------------

    def prepare_replicates(
        self,
        n_boot: int,
        global_seed: int,
        model_universe: Optional[list[str]] = None,
        level_sets=None,
        n_allowed_missing: Optional[int] = None,
        phase: int = 0,
        resample: bool = True,
        impute: bool = True,
    ) -> None:
        """Create ``n_boot`` replicates (one fresh imputation, then one
        bootstrap each).  In-bag and out-of-bag stay local."""
        raw = self._load(level_sets)
        self._level_sets = tuple(tuple(g) for g in (level_sets or raw.level_sets))
        if model_universe:
            missing = [c for c in model_universe if c not in raw.columns]
            if missing:
                raise DataError(f"{self.name}: data lacks columns {missing}")

        allowed = self.config.n_allowed_missing
        if allowed is None:
            allowed = n_allowed_missing
        if allowed is None:
            allowed = len(raw.columns)
        filtered = sim.filter_missing(raw, allowed)
        if filtered.n < 10:
            raise DataError(
                f"{self.name}: only {filtered.n} patients after missing-value filtering"
            )
        self._filtered = filtered
        self._reference = initial_impute(filtered)

        base = (int(global_seed) + int(self.config.local_seed)) & 0xFFFFFFFF
        n = filtered.n
        replicates = []
        for k in range(int(n_boot)):
            rng = np.random.default_rng(np.random.SeedSequence([base, int(phase), k]))
            if impute:
                completed, diag = chained_impute(filtered, ImputationConfig(rng=rng))
                fallback = diag["fallback_cells"]
            else:
                if np.isnan(filtered.values).any():
                    raise DataError(f"{self.name}: missing cells but imputation disabled")
                completed, fallback = filtered.values.copy(), 0
            if resample:
                inbag = np.sort(rng.integers(0, n, size=n))
            else:
                inbag = np.arange(n)
            oob = np.setdiff1d(np.arange(n), inbag)
            replicates.append(
                self._build_replicate(filtered, completed, inbag, oob, fallback)
            )
        self._replicates = replicates

    def _build_replicate(self, filtered, completed, inbag, oob, fallback):
        def sorted_view(rows):
            if rows.size == 0:
                return None, None
            try:
                index = build_risk_index(
                    SurvivalData(
                        filtered.times[rows],
                        filtered.events[rows],
                        np.zeros((rows.size, 0)),
                    )
                )
            except NoEventsError:
                return None, None
            x = np.ascontiguousarray(completed[rows][index.order])
            return index, x

        ib_index, ib_x = sorted_view(inbag)
        oob_index, oob_x = sorted_view(oob)
        return BootstrapReplicate(
            completed=completed,
            inbag=inbag,
            oob=oob,
            inbag_index=ib_index,
            inbag_x=ib_x,
            oob_index=oob_index,
            oob_x=oob_x,
            fallback_cells=fallback,
        )

    # -- method 2: likelihood reports -----------------------------------------

    def evaluate(self, models: dict, requests, want_cv: bool = True) -> list[EvalReport]:
        """Likelihood, gradient and Hessian per requested (model, bootstrap).

        ``models`` maps model id to its design columns; ``requests`` is a
        sequence of (model_id, bootstrap, beta).  Per-candidate numerical
        failures are reported in-band, never raised.
        """
        if self._filtered is None:
            raise DataError(f"{self.name}: prepare_replicates has not run")
        col_cache = {
            mid: np.asarray([self._filtered.col(c) for c in cols], dtype=np.intp)
            for mid, cols in models.items()
        }
        n_local = self.n_local
        out = []
        for model_id, boot, beta in requests:
            beta = np.asarray(beta, dtype=float)
            rep = self._replicates[boot]
            cols = col_cache[model_id]
            if rep.inbag_index is None:
                out.append(EvalReport(model_id, boot, ok=False,
                                      error="no events in bootstrap sample"))
                continue
            try:
                x = np.take(rep.inbag_x, cols, axis=1)
                ll, grad, hess = _centred_eval(x, beta, rep.inbag_index, True)
                cv = None
                n_oob = int(rep.oob.size)
                if want_cv and rep.oob_index is not None:
                    xo = np.take(rep.oob_x, cols, axis=1)
                    ll_oob, _, _ = _centred_eval(xo, beta, rep.oob_index, False)
                    cv = ll_oob * n_local / n_oob
                out.append(EvalReport(model_id, boot, ok=True, loglik=ll,
                                      gradient=grad, hessian=hess,
                                      cv_loglik=cv, n_oob=n_oob))
            except ValueError as exc:
                out.append(EvalReport(model_id, boot, ok=False, error=str(exc)))
        return out

    # -- method 3: final-model performance ------------------------------------

    def performance(
        self,
        columns,
        beta_median,
        betas,
        pi_thresholds=None,
        pi_quantiles=(0.25, 0.75),
        cal_time_points=(24.0, 60.0),
        n_cal_groups=10,
        alpha=0.05,
    ) -> dict:
        """Aggregated diagnostics of the final model on local data.

        Everything in the returned report passed through curve aggregation
        with ``NrPtPerBin``; only medians and percentile bands over the
        replicate set are exposed.
        """
        if self._filtered is None or not self._replicates:
            raise DataError(f"{self.name}: prepare_replicates has not run")
        filtered = self._filtered
        bin_size = self.config.nr_pt_per_bin
        beta_median = np.asarray(beta_median, dtype=float)
        betas = np.asarray(betas, dtype=float)
        if betas.shape[0] != len(self._replicates):
            raise DataError(
                f"{self.name}: got {betas.shape[0]} coefficient rows for "
                f"{len(self._replicates)} replicates"
            )
        cols = np.asarray([filtered.col(c) for c in columns], dtype=np.intp)
        warnings = []

        lp_ref = self._reference[:, cols] @ beta_median
        if pi_thresholds is not None and len(pi_thresholds):
            thresholds = np.asarray(pi_thresholds, dtype=float)
        elif pi_quantiles is not None and len(pi_quantiles):
            thresholds = np.quantile(lp_ref, np.asarray(pi_quantiles, dtype=float))
            thresholds = np.unique(thresholds)
        else:
            thresholds = np.zeros(0)

        cohort_index = build_risk_index(
            SurvivalData(filtered.times, filtered.events, np.zeros((filtered.n, 0)))
        )
        base_grid = cohort_index.event_times
        base_counts = cohort_index.tie_counts

        ref_labels = np.digitize(lp_ref, thresholds)
        n_groups = thresholds.size + 1
        subgroup_grids = []
        for g in range(n_groups):
            members = np.flatnonzero(ref_labels == g)
            if members.size == 0:
                subgroup_grids.append(None)
                warnings.append(f"subgroup group{g + 1} empty in reference cohort")
                continue
            try:
                gi = build_risk_index(
                    SurvivalData(filtered.times[members], filtered.events[members],
                                 np.zeros((members.size, 0)))
                )
                subgroup_grids.append((gi.event_times, gi.tie_counts))
            except NoEventsError:
                subgroup_grids.append(None)
                warnings.append(f"subgroup group{g + 1} has no events")

        m = len(self._replicates)
        base_curves_med, base_curves_boot, lp_sorted_rows = [], [], []
        charrell_in, charrell_oob = [], []
        km_values = [[] for _ in range(n_groups)]
        cox_values = [[] for _ in range(n_groups)]
        cal_frames = []
        rank_idx, rank_cov = dg.thin_knots(
            np.arange(1, filtered.n + 1), np.ones(filtered.n, dtype=np.int64), bin_size
        )

        for b, rep in enumerate(self._replicates):
            ib = rep.inbag
            data_ib = SurvivalData(
                filtered.times[ib], filtered.events[ib], rep.completed[ib][:, cols]
            )
            bl_med = breslow_baseline(data_ib, beta_median)
            base_curves_med.append(bl_med)
            base_curves_boot.append(breslow_baseline(data_ib, betas[b]))
            lp_full = rep.completed[:, cols] @ beta_median
            lp_sorted_rows.append(np.sort(lp_full[ib])[rank_idx])

            lp_boot_ib = rep.completed[ib][:, cols] @ betas[b]
            try:
                charrell_in.append(dg.c_harrell(filtered.times[ib], filtered.events[ib],
                                                lp_boot_ib))
            except DataError:
                warnings.append(f"bootstrap {b}: in-bag concordance undefined")
            if rep.oob.size >= 2:
                lp_boot_oob = rep.completed[rep.oob][:, cols] @ betas[b]
                try:
                    charrell_oob.append(dg.c_harrell(filtered.times[rep.oob],
                                                     filtered.events[rep.oob], lp_boot_oob))
                except DataError:
                    warnings.append(f"bootstrap {b}: out-of-bag concordance undefined")

            labels = np.digitize(lp_full, thresholds)
            for g in range(n_groups):
                if subgroup_grids[g] is None:
                    continue
                grid_g = subgroup_grids[g][0]
                sel = ib[labels[ib] == g]
                if sel.size == 0:
                    continue
                km = dg.kaplan_meier(filtered.times[sel], filtered.events[sel])
                km_values[g].append(km(grid_g))
                surv = np.array(
                    [np.mean(cox_survival(bl_med, lp_full[sel], t)) for t in grid_g]
                )
                cox_values[g].append(surv)

            cal_frames.append((data_ib, bl_med))

        response = {
            "baseline": _curve_dict(
                dg.aggregate_curve(base_curves_med, bin_size, alpha, base_grid, base_counts)
            ),
            "baseline_beta_variant": _curve_dict(
                dg.aggregate_curve(base_curves_boot, bin_size, alpha, base_grid, base_counts)
            ),
            "lp_cdf": _lp_cdf_curve(lp_sorted_rows, rank_idx, rank_cov, filtered.n, alpha),
            "c_harrell": {
                "inbag": _stats_dict(charrell_in, alpha),
                "oob": _stats_dict(charrell_oob, alpha),
            },
            "subgroups": [],
            "calibration": [],
            "warnings": warnings,
        }

        for g in range(n_groups):
            label = f"group{g + 1}"
            if subgroup_grids[g] is None or not km_values[g]:
                response["subgroups"].append(
                    {"label": label, "km": _empty_curve(), "cox_values": [], "empty": True}
                )
                continue
            grid_g, counts_g = subgroup_grids[g]
            idx, coverage = dg.thin_knots(grid_g, counts_g, bin_size)
            km_mat = np.vstack([v[idx] for v in km_values[g]])
            cox_mat = np.vstack([v[idx] for v in cox_values[g]])
            curve = dg.AggregatedCurve(
                knots=grid_g[idx],
                values=np.median(km_mat, axis=0),
                lower=np.percentile(km_mat, 100 * alpha / 2, axis=0),
                upper=np.percentile(km_mat, 100 * (1 - alpha / 2), axis=0),
                coverage=coverage,
            )
            response["subgroups"].append(
                {
                    "label": label,
                    "km": _curve_dict(curve),
                    "cox_values": np.median(cox_mat, axis=0),
                    "empty": False,
                }
            )

        for point in dg.calibration(cal_frames, beta_median, cal_time_points,
                                    n_cal_groups, alpha):
            response["calibration"].append(
                {
                    "time": point.time,
                    "flagged": point.flagged,
                    "groups": [
                        {
                            "predicted": grp.predicted,
                            "observed": grp.observed,
                            "lower": grp.lower,
                            "upper": grp.upper,
                            "count": grp.count,
                        }
                        for grp in point.groups
                    ],
                }
            )
        return response

    # -- naive unstratified mode (leakage demonstration only) -----------------

    def naive_event_info(self) -> dict:
        """Event times and cohort size -- shared only by the naive protocol
        that the reconstruction attack targets."""
        raw = self._load()
        if np.isnan(raw.values).any():
            raise DataError(f"{self.name}: naive mode requires complete cases")
        times = raw.times[raw.events == 1]
        return {"event_times": np.sort(times), "n": raw.n}

    def naive_eval(self, beta, global_times) -> dict:
        """Risk-set sums at every global event time, as the unstratified
        protocol must share them.  Raw hazard ratios, no recentring."""
        raw = self._load()
        beta = np.asarray(beta, dtype=float)
        x = raw.values
        theta = np.exp(x @ beta)
        p = beta.size
        gt = np.asarray(global_times, dtype=float)
        s0 = np.empty(gt.size)
        s1 = np.empty((gt.size, p))
        s2 = np.empty((gt.size, p, p))
        m = np.empty(gt.size, dtype=np.int64)
        h0 = np.empty(gt.size)
        h1 = np.empty((gt.size, p))
        h2 = np.empty((gt.size, p, p))
        sx = np.empty((gt.size, p))
        for i, t in enumerate(gt):
            at_risk = raw.times >= t
            s0[i] = theta[at_risk].sum()
            xa = x[at_risk]
            ta = theta[at_risk]
            s1[i] = xa.T @ ta
            s2[i] = (xa * ta[:, None]).T @ xa
            tied = (raw.times == t) & (raw.events == 1)
            m[i] = int(tied.sum())
            xt = x[tied]
            tt = theta[tied]
            h0[i] = tt.sum()
            h1[i] = xt.T @ tt
            h2[i] = (xt * tt[:, None]).T @ xt if xt.size else np.zeros((p, p))
            sx[i] = xt.sum(axis=0)
        return {"s0": s0, "s1": s1, "s2": s2, "m": m,
                "h0": h0, "h1": h1, "h2": h2, "sx": sx}

    # -- wire handlers ---------------------------------------------------------

    def handle_prepare(self, payload: dict) -> None:
        self.prepare_replicates(
            n_boot=payload["n_boot"],
            global_seed=payload["global_seed"],
            model_universe=payload.get("features"),
            level_sets=payload.get("level_sets"),
            n_allowed_missing=payload.get("n_allowed_missing"),
            phase=payload.get("phase", 0),
            resample=payload.get("resample", True),
            impute=payload.get("impute", True),
        )

    def handle_evaluate(self, payload: dict) -> dict:
        models = {m["model_id"]: m["columns"] for m in payload["models"]}
        requests = [
            (r["model_id"], r["bootstrap"], np.asarray(r["beta"], dtype=float))
            for r in payload["requests"]
        ]
        reports = self.evaluate(models, requests, want_cv=payload.get("want_cv", True))
        results = []
        for r in reports:
            entry = {"model_id": r.model_id, "bootstrap": r.bootstrap, "ok": r.ok,
                     "error": r.error}
            if r.ok:
                entry.update(
                    loglik=r.loglik,
                    gradient=r.gradient,
                    hessian=r.hessian,
                    cv_loglik=r.cv_loglik,
                    n_oob=r.n_oob,
                )
            results.append(entry)
        return {"n_local": self.n_local, "results": results}

    def handle_performance(self, payload: dict) -> dict:
        return self.performance(
            columns=payload["columns"],
            beta_median=payload["beta_median"],
            betas=payload["betas"],
            pi_thresholds=payload.get("pi_thresholds"),
            pi_quantiles=payload.get("pi_quantiles"),
            cal_time_points=payload["cal_time_points"],
            n_cal_groups=payload["n_cal_groups"],
            alpha=payload["alpha"],
        )


def _curve_dict(curve: dg.AggregatedCurve) -> dict:
    return {
        "knots": curve.knots,
        "values": curve.values,
        "lower": curve.lower,
        "upper": curve.upper,
        "coverage": curve.coverage,
    }


def _empty_curve() -> dict:
    z = np.zeros(0)
    return {"knots": z, "values": z, "lower": z, "upper": z,
            "coverage": np.zeros(0, dtype=np.int64)}


def _stats_dict(values, alpha) -> dict:
    if not values:
        return {"median": float("nan"), "lower": float("nan"), "upper": float("nan")}
    arr = np.asarray(values, dtype=float)
    return {
        "median": float(np.median(arr)),
        "lower": float(np.percentile(arr, 100 * alpha / 2)),
        "upper": float(np.percentile(arr, 100 * (1 - alpha / 2))),
    }


def _lp_cdf_curve(lp_rows, rank_idx, rank_cov, n, alpha) -> dict:
    mat = np.vstack(lp_rows)
    levels = (np.asarray(rank_idx, dtype=float) + 1.0) / n
    return {
        "knots": levels,
        "values": np.median(mat, axis=0),
        "lower": np.percentile(mat, 100 * alpha / 2, axis=0),
        "upper": np.percentile(mat, 100 * (1 - alpha / 2), axis=0),
        "coverage": np.asarray(rank_cov, dtype=np.int64),
    }


_REQUEST_HANDLERS = {
    "PrepareRequest": ("handle_prepare", None),
    "EvaluateRequest": ("handle_evaluate", "EvaluateResponse"),
    "PerformanceRequest": ("handle_performance", "PerformanceResponse"),
}


class NodeRunner:
    """Polls the channel for coordinator requests and posts responses."""

    def __init__(self, node: LocalNode, channel, coordinator: str = "coordinator"):
        self.node = node
        self.channel = channel
        self.coordinator = coordinator

    def drain(self) -> int:
        """Handle every pending request once; returns how many were processed."""
        handled = 0
        for kind, (method, response_kind) in _REQUEST_HANDLERS.items():
            for msg in self.channel.fetch_new(self.node.name, self.coordinator, kind):
                handled += 1
                try:
                    result = getattr(self.node, method)(decode_payload(msg.payload))
                    if response_kind is not None:
                        self.channel.push(
                            Message(response_kind, self.node.name, msg.round,
                                    encode_payload(result))
                        )
                except Exception as exc:  # reported in-band, node keeps serving
                    log.exception("%s failed handling %s", self.node.name, kind)
                    self.channel.push(
                        Message(
                            "ErrorReport", self.node.name, msg.round,
                            encode_payload({"context": kind, "error": str(exc),
                                            "model_id": None}),
                        )
                    )
        return handled
