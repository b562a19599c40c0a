"""Central optimiser for the stratified federated fit.

Per bootstrap, coefficients start at zero and are updated with damped
Newton steps computed from per-centre (log-likelihood, gradient, Hessian)
triples summed pooled or rescaled to equal centre weight.  Candidate models
are batched: one evaluate round carries every still-active (model,
bootstrap) pair, so the number of communication rounds stays at the number
of Newton iterations.  The null model rides along as an ordinary candidate
with zero columns and its per-bootstrap log-likelihoods are subtracted
from every reported value.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fedcox.errors import ConfigError, NodeError, NumericalError, TransportTimeout
from fedcox.survival import LikelihoodEval, NewtonDriver
from fedcox.transport import Message, decode_payload, encode_payload

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerConfig",
    "ModelSpec",
    "FitResult",
    "CandidateResult",
    "FederatedSession",
    "Coordinator",
    "derive_groups",
    "enumerate_subsets",
    "select_model",
]

NULL_MODEL_ID = "null"


@dataclass
class OptimizerConfig:
    """Coordinator-side settings (config-file keys follow these fields)."""

    features: list
    level_sets: list = field(default_factory=list)
    global_seed: int = 0
    n_boot_cv: int = 20
    n_boot_model_info: int = 1000
    tolerance: float = 1e-6
    alpha: float = 0.05
    pi_thresholds: Optional[list] = None
    pi_quantiles: tuple = (0.25, 0.75)
    cal_time_points: tuple = (24.0, 60.0)
    n_cal_groups: int = 10
    n_allowed_missing: Optional[int] = None
    weighting: str = "pooled"
    max_iterations: int = 50
    batch_size: int = 256
    timeout: float = 600.0

    def __post_init__(self):
        if not self.features:
            raise ConfigError("FeaturesToOptimizeFrom must be nonempty")
        if self.n_boot_cv < 2 or self.n_boot_model_info < self.n_boot_cv:
            raise ConfigError("need NbootModelInfo >= NbootCV >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("Alpha must lie in (0, 1)")
        if self.tolerance <= 0:
            raise ConfigError("ConvergTolerance must be positive")
        if self.weighting not in ("pooled", "equal-centre"):
            raise ConfigError("weighting must be 'pooled' or 'equal-centre'")
        known = set(self.features)
        for group in self.level_sets:
            for name in group:
                if name not in known:
                    raise ConfigError(f"FeaturesLevelSets names unknown feature {name!r}")


@dataclass(frozen=True)
class ModelSpec:
    """One candidate: a subset of feature groups expanded to design columns."""

    mask: int
    groups: tuple[str, ...]
    columns: tuple[str, ...]

    @property
    def model_id(self) -> str:
        return NULL_MODEL_ID if self.mask == 0 else str(self.mask)

    @property
    def n_params(self) -> int:
        return len(self.groups)


def derive_groups(features, level_sets):
    """Feature groups in listed order; a level set forms one group placed at
    its first member, other features are singleton groups."""
    sets = [tuple(g) for g in level_sets]
    grouped = {name: s for s in sets for name in s}
    seen = set()
    groups = []
    for name in features:
        if name in grouped:
            s = grouped[name]
            if s not in seen:
                seen.add(s)
                groups.append(("+".join(s), s))
        else:
            groups.append((name, (name,)))
    return groups


def enumerate_subsets(cfg: OptimizerConfig) -> list[ModelSpec]:
    """Every nonempty subset of the feature groups, in binary counting order
    (bit i of the mask selects group i)."""
    groups = derive_groups(cfg.features, cfg.level_sets)
    g = len(groups)
    if g > 20:
        raise ConfigError(
            f"{g} feature groups make exhaustive subset search infeasible; "
            "reduce the candidate set to at most 20 groups"
        )
    specs = []
    for mask in range(1, 2 ** g):
        chosen = [groups[i] for i in range(g) if mask >> i & 1]
        specs.append(
            ModelSpec(
                mask=mask,
                groups=tuple(label for label, _ in chosen),
                columns=tuple(c for _, cols in chosen for c in cols),
            )
        )
    return specs


@dataclass
class CandidateResult:
    """Slim per-candidate record kept during selection."""

    spec: ModelSpec
    cv_values: np.ndarray          # null-corrected adjusted cv loglik per usable bootstrap
    mean_cv: float
    sd_cv: float
    n_failed: int
    failed: bool
    iterations: list
    failures: dict


@dataclass
class FitResult:
    """Full record of one model's bootstrap fits."""

    spec: ModelSpec
    boot_indices: list
    betas: np.ndarray              # (n_ok, p) converged coefficients
    beta_median: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    loglik: np.ndarray             # null-corrected in-bag loglik per converged bootstrap
    cv_loglik: np.ndarray          # null-corrected adjusted cv per usable bootstrap
    iterations: list
    failures: dict
    cv_excluded: int

    @property
    def n_failed(self) -> int:
        return len(self.failures)


class FederatedSession:
    """Request/response bookkeeping over one channel.

    With in-process runners the session drives them synchronously between
    push and collect; with external runners (threads, other processes) it
    polls until the deadline.  Error reports abort the wait with centre
    attribution.
    """

    def __init__(self, channel, node_names, runners=None, timeout=600.0):
        self.channel = channel
        self.nodes = list(node_names)
        self.runners = list(runners or [])
        self.timeout = timeout
        self._rounds = {}

    def broadcast(self, kind, payload) -> int:
        round_ = self._rounds.get(kind, -1) + 1
        self._rounds[kind] = round_
        self.channel.push(Message(kind, "coordinator", round_, encode_payload(payload)))
        return round_

    def drive(self):
        for runner in self.runners:
            runner.drain()

    def check_errors(self):
        for sender in self.nodes:
            for msg in self.channel.fetch_new("coordinator", sender, "ErrorReport"):
                payload = decode_payload(msg.payload)
                raise NodeError(
                    f"{sender} failed during {payload.get('context')}: {payload.get('error')}",
                    centre=sender,
                )

    def collect(self, kind, round_) -> dict:
        """One decoded payload per node for (kind, round)."""
        got = {}
        deadline = time.monotonic() + self.timeout
        while True:
            self.drive()
            self.check_errors()
            for sender in self.nodes:
                for msg in self.channel.fetch_new("coordinator", sender, kind):
                    if msg.round == round_:
                        got[sender] = decode_payload(msg.payload)
            if all(s in got for s in self.nodes):
                return got
            if time.monotonic() >= deadline:
                missing = [s for s in self.nodes if s not in got]
                raise TransportTimeout(
                    f"no {kind} (round {round_}) from: {missing}", missing=missing
                )
            time.sleep(self.channel.poll_interval)


class Coordinator:
    """Drives selection and finalisation over a federated session."""

    def __init__(self, cfg: OptimizerConfig, session: FederatedSession):
        self.cfg = cfg
        self.session = session
        self._phase = None
        self._n_boot = 0
        self._null = None           # (null_ll[b], null_cv[b] or None) after first batch
        self._n_local = {}

    # -- phase control --------------------------------------------------------

    def prepare(self, n_boot, phase, resample=True, impute=True):
        """Instruct every node to build its replicate set; nothing returns."""
        self.session.broadcast(
            "PrepareRequest",
            {
                "phase": phase,
                "n_boot": int(n_boot),
                "global_seed": int(self.cfg.global_seed),
                "n_allowed_missing": self.cfg.n_allowed_missing,
                "features": list(self.cfg.features),
                "level_sets": [list(g) for g in self.cfg.level_sets],
                "resample": bool(resample),
                "impute": bool(impute),
            },
        )
        self._phase = phase
        self._n_boot = int(n_boot)
        self._null = None

    # -- batched distributed Newton -------------------------------------------

    def _weights(self):
        if self.cfg.weighting == "pooled" or not self._n_local:
            return {c: 1.0 for c in self.session.nodes}
        n_ref = max(self._n_local.values())
        return {c: n_ref / self._n_local[c] for c in self.session.nodes}

    def _run_batch(self, specs: Sequence[ModelSpec], n_boot: int):
        """Newton-iterate all (model, bootstrap) pairs of ``specs`` at once.

        Returns per-pair drivers plus the final (loglik, cv) totals taken at
        each pair's last accepted coefficients.
        """
        columns = {s.model_id: list(s.columns) for s in specs}
        p_of = {s.model_id: len(s.columns) for s in specs}
        drivers = {
            (s.model_id, b): NewtonDriver(
                p_of[s.model_id],
                tolerance=self.cfg.tolerance,
                max_iterations=self.cfg.max_iterations,
            )
            for s in specs
            for b in range(n_boot)
        }
        final_ll = {}
        final_cv = {}
        cv_missing = set()

        while True:
            active = [key for key, d in drivers.items() if d.wants_eval]
            if not active:
                break
            payload = {
                "models": [
                    {"model_id": mid, "columns": columns[mid]}
                    for mid in sorted({k[0] for k in active})
                ],
                "requests": [
                    {"model_id": mid, "bootstrap": b, "beta": drivers[(mid, b)].proposal}
                    for mid, b in active
                ],
                "want_cv": True,
            }
            round_ = self.session.broadcast("EvaluateRequest", payload)
            responses = self.session.collect("EvaluateResponse", round_)

            by_pair = {}
            for centre, resp in responses.items():
                self._n_local[centre] = int(resp["n_local"])
                for entry in resp["results"]:
                    by_pair.setdefault((entry["model_id"], int(entry["bootstrap"])), {})[
                        centre
                    ] = entry
            weights = self._weights()

            for key in active:
                driver = drivers[key]
                per_centre = by_pair.get(key, {})
                if len(per_centre) < len(self.session.nodes):
                    driver.fail("missing centre contribution")
                    continue
                bad = [c for c, e in per_centre.items() if not e.get("ok")]
                if bad:
                    driver.fail(per_centre[bad[0]].get("error") or "node-side failure")
                    continue
                ll = grad = hess = None
                cv_total = 0.0
                cv_ok = True
                for centre, e in per_centre.items():
                    w = weights[centre]
                    g = np.asarray(e["gradient"], dtype=float)
                    h = np.asarray(e["hessian"], dtype=float).reshape(g.size, g.size)
                    if ll is None:
                        ll, grad, hess = w * e["loglik"], w * g, w * h
                    else:
                        ll, grad, hess = ll + w * e["loglik"], grad + w * g, hess + w * h
                    if e.get("cv_loglik") is None:
                        cv_ok = False
                    else:
                        cv_total += w * e["cv_loglik"]

                before = driver.iterations
                fresh = driver.loglik is None
                driver.update(LikelihoodEval(ll, grad, hess))
                accepted = fresh or driver.iterations > before or driver.converged
                if accepted and not driver.failed:
                    final_ll[key] = ll
                    if cv_ok:
                        final_cv[key] = cv_total
                    else:
                        final_cv.pop(key, None)
                        cv_missing.add(key[1])
        return drivers, final_ll, final_cv, cv_missing

    def _null_values(self, n_boot):
        """Per-bootstrap totals of the empty model, computed once per phase."""
        if self._null is None:
            null_spec = ModelSpec(mask=0, groups=(), columns=())
            drivers, ll, cv, missing = self._run_batch([null_spec], n_boot)
            ll_arr = np.array([ll[(NULL_MODEL_ID, b)] for b in range(n_boot)])
            cv_arr = np.array(
                [cv.get((NULL_MODEL_ID, b), np.nan) for b in range(n_boot)]
            )
            self._null = (ll_arr, cv_arr, missing)
        return self._null

    def fit_model(self, spec: ModelSpec, n_boot=None) -> FitResult:
        return self.fit_models([spec], n_boot=n_boot, full=True)[spec.model_id]

    def fit_models(self, specs, n_boot=None, full=False) -> dict:
        """Fit candidates in batches; returns per-model results keyed by id.

        A bootstrap whose Newton iteration fails (singular Hessian,
        non-finite likelihood, no convergence) is dropped from summaries and
        counted; a candidate with more than 20% failed bootstraps is marked
        failed as a whole.
        """
        if self._phase is None:
            raise NumericalError("prepare() must run before fitting")
        n_boot = self._n_boot if n_boot is None else int(n_boot)
        null_ll, null_cv, null_cv_missing = self._null_values(n_boot)

        out = {}
        specs = list(specs)
        for lo in range(0, len(specs), self.cfg.batch_size):
            chunk = specs[lo: lo + self.cfg.batch_size]
            drivers, ll, cv, cv_missing = self._run_batch(chunk, n_boot)
            cv_bad = cv_missing | null_cv_missing
            for spec in chunk:
                mid = spec.model_id
                failures = {}
                boots_ok = []
                iterations = []
                for b in range(n_boot):
                    d = drivers[(mid, b)]
                    if d.converged:
                        boots_ok.append(b)
                        iterations.append(d.iterations)
                    else:
                        failures[b] = d.failure or "did not converge"
                failed = len(failures) > 0.2 * n_boot or not boots_ok
                cv_boots = [b for b in boots_ok if b not in cv_bad and (mid, b) in cv]
                cv_vals = np.array([cv[(mid, b)] - null_cv[b] for b in cv_boots])
                mean_cv = float(cv_vals.mean()) if cv_vals.size else float("nan")
                sd_cv = float(cv_vals.std(ddof=1)) if cv_vals.size > 1 else float("nan")
                if full:
                    betas = np.vstack(
                        [drivers[(mid, b)].beta for b in boots_ok]
                    ) if boots_ok else np.zeros((0, len(spec.columns)))
                    lo_q, hi_q = 100 * self.cfg.alpha / 2, 100 * (1 - self.cfg.alpha / 2)
                    out[mid] = FitResult(
                        spec=spec,
                        boot_indices=boots_ok,
                        betas=betas,
                        beta_median=np.median(betas, axis=0) if boots_ok else np.zeros(0),
                        ci_lower=np.percentile(betas, lo_q, axis=0) if boots_ok else np.zeros(0),
                        ci_upper=np.percentile(betas, hi_q, axis=0) if boots_ok else np.zeros(0),
                        loglik=np.array([ll[(mid, b)] - null_ll[b] for b in boots_ok]),
                        cv_loglik=cv_vals,
                        iterations=iterations,
                        failures=failures,
                        cv_excluded=len([b for b in boots_ok if b in cv_bad]),
                    )
                else:
                    out[mid] = CandidateResult(
                        spec=spec,
                        cv_values=cv_vals,
                        mean_cv=mean_cv,
                        sd_cv=sd_cv,
                        n_failed=len(failures),
                        failed=failed,
                        iterations=iterations,
                        failures=failures,
                    )
        return out

    # -- selection and finalisation ---------------------------------------------

    def run_selection(self, specs=None):
        """Fit all candidates with the cross-validation bootstraps and apply
        the one-standard-error rule.  Returns (chosen, results dict)."""
        specs = enumerate_subsets(self.cfg) if specs is None else list(specs)
        self.prepare(self.cfg.n_boot_cv, phase=0)
        results = self.fit_models(specs, n_boot=self.cfg.n_boot_cv)
        chosen = select_model(results, specs)
        return chosen, results

    def finalize(self, chosen: ModelSpec):
        """Refit the chosen model with the large bootstrap set and collect
        per-centre performance reports."""
        self.prepare(self.cfg.n_boot_model_info, phase=1)
        fit = self.fit_model(chosen, n_boot=self.cfg.n_boot_model_info)

        # one coefficient row per replicate; failed replicates fall back to the median
        betas = np.tile(fit.beta_median, (self.cfg.n_boot_model_info, 1))
        for row, b in zip(fit.betas, fit.boot_indices):
            betas[b] = row

        payload = {
            "columns": list(chosen.columns),
            "beta_median": fit.beta_median,
            "betas": betas,
            "pi_thresholds": self.cfg.pi_thresholds,
            "pi_quantiles": list(self.cfg.pi_quantiles) if self.cfg.pi_quantiles else None,
            "cal_time_points": list(self.cfg.cal_time_points),
            "n_cal_groups": int(self.cfg.n_cal_groups),
            "alpha": float(self.cfg.alpha),
        }
        round_ = self.session.broadcast("PerformanceRequest", payload)
        reports = self.session.collect("PerformanceResponse", round_)
        return fit, reports


def select_model(results: dict, specs) -> ModelSpec:
    """One-standard-error rule on the cross-validated likelihoods.

    The best candidate maximises the mean adjusted cv log-likelihood; its
    per-bootstrap standard deviation defines the band, and among candidates
    whose mean lies within one sd of the best, the fewest-parameter one wins
    (ties: higher mean, then enumeration order).
    """
    order = {s.model_id: i for i, s in enumerate(specs)}
    viable = [
        r for r in results.values()
        if not r.failed and np.isfinite(r.mean_cv)
    ]
    if not viable:
        raise NumericalError("all model candidates failed")
    best = max(viable, key=lambda r: r.mean_cv)
    band = best.sd_cv if np.isfinite(best.sd_cv) else 0.0
    threshold = best.mean_cv - band
    qualifying = [r for r in viable if r.mean_cv >= threshold]
    chosen = min(
        qualifying,
        key=lambda r: (r.spec.n_params, -r.mean_cv, order[r.spec.model_id]),
    )
    return chosen.spec
