"""Synthetic multi-centre head-and-neck survival cohorts.

Covariates are sampled from bundled empirical marginals, survival times from
a constant per-centre baseline hazard scaled by the nomogram linear
predictor, with a competing lost-to-follow-up draw at a lower hazard,
administrative censoring at a fixed horizon, and per-variable missingness
applied to the clinical predictors only.  Also owns the per-centre CSV
schema read by the local nodes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import pandas as pd

from fedcox.errors import ConfigError, DataError
from fedcox.imputation import BINARY, NUMERIC, RawDataset

__all__ = [
    "NOMOGRAM_COEFFICIENTS",
    "TSTAGE_LEVEL_SET",
    "SimConfig",
    "simulate_cohort",
    "simulate_uncensored_centre",
    "filter_missing",
    "nomogram_linear_predictor",
    "write_centre_csv",
    "read_centre_csv",
]

# survival nomogram coefficients, in design-matrix column order
NOMOGRAM_COEFFICIENTS = {
    "Age": 0.04136,
    "hemoglobin": -0.400,
    "eqd2t": -0.03506,
    "T2": 0.1943,
    "T3": 0.7965,
    "T4": 1.4546,
    "Nplus": 0.3764,
    "genderMale": 0.8353,
    "NonGlottis": 0.2695,
}

TSTAGE_LEVEL_SET = ("T2", "T3", "T4")

# clinical variables that receive missingness (a level set is one variable)
_IMPUTABLE_VARIABLES = (
    ("Age",),
    ("hemoglobin",),
    ("eqd2t",),
    TSTAGE_LEVEL_SET,
    ("Nplus",),
    ("genderMale",),
    ("NonGlottis",),
)

_NOISE_COLUMNS = ("Cont1", "Cont2", "Factor1", "Factor2")

CSV_COLUMNS = (
    "Age", "hemoglobin", "eqd2t", "T2", "T3", "T4",
    "Nplus", "genderMale", "NonGlottis",
    "Cont1", "Cont2", "Factor1", "Factor2",
)

_COLUMN_KINDS = {
    "Age": NUMERIC, "hemoglobin": NUMERIC, "eqd2t": NUMERIC,
    "T2": BINARY, "T3": BINARY, "T4": BINARY,
    "Nplus": BINARY, "genderMale": BINARY, "NonGlottis": BINARY,
    "Cont1": NUMERIC, "Cont2": NUMERIC, "Factor1": BINARY, "Factor2": BINARY,
}


@dataclass
class SimConfig:
    """Cohort generator settings.

    ``baseline_hazards`` is one constant event rate per centre (per month);
    lost-to-follow-up censoring uses ``ltfu_factor`` times that rate.  The
    default rates are package defaults, chosen to give a clinically
    plausible event fraction under the nomogram, not published values.
    """

    n_per_centre: int = 1000
    baseline_hazards: tuple[float, ...] = (0.010, 0.014, 0.018)
    ltfu_factor: float = 0.6
    admin_censor_months: float = 60.0
    missing_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_per_centre <= 0:
            raise ConfigError("n_per_centre must be positive")
        if not self.baseline_hazards or any(h <= 0 for h in self.baseline_hazards):
            raise ConfigError("baseline hazards must be positive")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError("missing_fraction must lie in [0, 1)")
        if self.ltfu_factor < 0:
            raise ConfigError("ltfu_factor must be nonnegative")


def _load_marginals():
    with resources.files("fedcox.data").joinpath("nomogram_marginals.json").open() as fh:
        return json.load(fh)["variables"]


def _sample_marginal(spec, n, rng):
    if spec["kind"] == "quantile":
        return np.interp(rng.random(n), spec["q"], spec["v"])
    if spec["kind"] == "bernoulli":
        return (rng.random(n) < spec["p"]).astype(float)
    if spec["kind"] == "multinomial":
        cum = np.cumsum(spec["p"])
        return (rng.random(n)[:, None] > cum[None, :]).sum(axis=1)
    raise ConfigError(f"unknown marginal kind {spec['kind']!r}")


def nomogram_linear_predictor(table: np.ndarray, columns) -> np.ndarray:
    """Risk score of the generating model for rows of the full design table."""
    beta = np.array([NOMOGRAM_COEFFICIENTS.get(c, 0.0) for c in columns])
    return table @ beta


def _simulate_centre(n, lam0, ltfu_factor, admin_censor, missing_fraction, rng):
    marginals = _load_marginals()
    table = np.zeros((n, len(CSV_COLUMNS)))
    cols = {c: i for i, c in enumerate(CSV_COLUMNS)}
    table[:, cols["Age"]] = _sample_marginal(marginals["Age"], n, rng)
    table[:, cols["hemoglobin"]] = _sample_marginal(marginals["hemoglobin"], n, rng)
    table[:, cols["eqd2t"]] = _sample_marginal(marginals["eqd2t"], n, rng)
    tstage = _sample_marginal(marginals["Tstage"], n, rng)
    for k, name in enumerate(TSTAGE_LEVEL_SET):
        table[:, cols[name]] = (tstage == k + 1).astype(float)
    for name in ("Nplus", "genderMale", "NonGlottis"):
        table[:, cols[name]] = _sample_marginal(marginals[name], n, rng)
    table[:, cols["Cont1"]] = rng.standard_normal(n)
    table[:, cols["Cont2"]] = rng.standard_normal(n)
    table[:, cols["Factor1"]] = (rng.random(n) < 0.5).astype(float)
    table[:, cols["Factor2"]] = (rng.random(n) < 0.5).astype(float)

    lp = nomogram_linear_predictor(table, CSV_COLUMNS)
    rate = lam0 * np.exp(lp)
    t_event = -np.log(rng.random(n)) / rate
    if ltfu_factor > 0:
        t_ltfu = -np.log(rng.random(n)) / (ltfu_factor * rate)
    else:
        t_ltfu = np.full(n, np.inf)

    observed = np.minimum.reduce([t_event, t_ltfu, np.full(n, admin_censor)])
    events = (t_event < t_ltfu) & (t_event < admin_censor)

    values = table.copy()
    if missing_fraction > 0:
        for group in _IMPUTABLE_VARIABLES:
            hit = rng.random(n) < missing_fraction
            for name in group:
                values[hit, cols[name]] = np.nan

    return RawDataset(
        times=observed,
        events=events.astype(np.int64),
        columns=CSV_COLUMNS,
        values=values,
        kinds=tuple(_COLUMN_KINDS[c] for c in CSV_COLUMNS),
        level_sets=(TSTAGE_LEVEL_SET,),
    )


def simulate_cohort(cfg: SimConfig) -> list[RawDataset]:
    """One raw dataset per centre; bit-identical for identical configs."""
    out = []
    for c, lam0 in enumerate(cfg.baseline_hazards):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c]))
        out.append(
            _simulate_centre(
                cfg.n_per_centre, lam0, cfg.ltfu_factor,
                cfg.admin_censor_months, cfg.missing_fraction, rng,
            )
        )
    return out


def simulate_uncensored_centre(n, p, seed, beta=None, lam0=0.05) -> RawDataset:
    """Small fully-observed centre with unique event times and no censoring.

    Used by the reconstruction-attack demonstration, which needs the
    tie-free uncensored setting.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 971]))
    x = rng.normal(size=(n, p))
    beta = np.asarray(beta if beta is not None else np.linspace(0.5, -0.5, p))
    times = -np.log(rng.random(n)) / (lam0 * np.exp(x @ beta))
    # continuous draws are almost surely unique; enforce it for safety
    while np.unique(times).size < n:
        times += rng.random(n) * 1e-9
    columns = tuple(f"x{i + 1}" for i in range(p))
    return RawDataset(
        times=times,
        events=np.ones(n, dtype=np.int64),
        columns=columns,
        values=x.astype(float),
        kinds=(NUMERIC,) * p,
    )


def filter_missing(raw: RawDataset, n_allowed: int) -> RawDataset:
    """Keep patients with at most ``n_allowed`` missing variables."""
    if n_allowed < 0:
        raise ConfigError("n_allowed must be nonnegative")
    keep = raw.missing_per_patient() <= n_allowed
    if not keep.any():
        raise DataError("no patients remain after missing-value filtering")
    return raw.subset(np.flatnonzero(keep))


def write_centre_csv(path, raw: RawDataset):
    """Write ``id,time,event,<covariates...>``; missing cells are empty."""
    int_like = {i for i, k in enumerate(raw.kinds) if k == BINARY}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "event", *raw.columns])
        for i in range(raw.n):
            row = [str(i + 1), repr(float(raw.times[i])), str(int(raw.events[i]))]
            for j in range(len(raw.columns)):
                v = raw.values[i, j]
                if np.isnan(v):
                    row.append("")
                elif j in int_like:
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            writer.writerow(row)


def read_centre_csv(path, level_sets=(TSTAGE_LEVEL_SET,)) -> RawDataset:
    """Parse a per-centre CSV back into a raw dataset.

    Column kinds are inferred: a covariate whose observed values are all
    0/1 is binary, anything else numeric.  ``level_sets`` groups that
    actually occur among the columns are retained.
    """
    try:
        frame = pd.read_csv(
            path, na_values=["", "NA"], keep_default_na=False,
            float_precision="round_trip",
        )
    except (OSError, pd.errors.ParserError) as exc:
        raise DataError(f"cannot read centre CSV {path}: {exc}") from exc
    for required in ("id", "time", "event"):
        if required not in frame.columns:
            raise DataError(f"centre CSV {path} lacks required column {required!r}")
    if frame["time"].isna().any() or frame["event"].isna().any():
        raise DataError(f"centre CSV {path} has missing outcome cells")
    covariate_cols = [c for c in frame.columns if c not in ("id", "time", "event")]
    values = frame[covariate_cols].to_numpy(dtype=float)
    kinds = []
    for j, name in enumerate(covariate_cols):
        observed = values[~np.isnan(values[:, j]), j]
        kinds.append(BINARY if observed.size and np.isin(observed, (0.0, 1.0)).all() else NUMERIC)
    keep_sets = tuple(
        tuple(g) for g in level_sets if all(name in covariate_cols for name in g)
    )
    return RawDataset(
        times=frame["time"].to_numpy(dtype=float),
        events=frame["event"].to_numpy(dtype=np.int64),
        columns=tuple(covariate_cols),
        values=values,
        kinds=tuple(kinds),
        level_sets=keep_sets,
    )
