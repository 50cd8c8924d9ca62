"""Risk-factor registry, adjustment plans and the per-industry study loop.

Every registered risk factor belongs to one of three groups. Model tiers:

1. the factor's own terms only;
2. plus the common adjusters (residential variables and lagged log rates,
   with MSOA mobility class for factors outside the workplace group);
3. plus every term of every group that precedes the factor's group in the
   causal order.

A factor is never adjusted for a variable of its own group.
"""
from __future__ import annotations

import datetime as dt
import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .clusters import apply_education_exclusion
from .exceptions import (
    CrpError,
    EmptyModelFrame,
    UnknownRiskFactor,
    VaccinationPeriodRule,
)
from .exposure import DEFAULT_EPSILON, LAG_COLUMNS, RESIDENT_COLUMNS
from .nbglm import ModelMatrix, fit_nb, pct_change, wald_ci
from .taxonomy import DEFAULT_PERIODS, SECTOR_NAMES, MobilityClass, Sector, StudyPeriod, World


class RiskFactorGroup(str, enum.Enum):
    WORKPLACE = "WorkplaceCharacteristics"
    COMMUTER = "CommuterCharacteristics"
    TRAVEL = "MethodOfTravel"


# Short names used by DagConfig.order
GROUP_KEYS = {"workplace": RiskFactorGroup.WORKPLACE, "commuter": RiskFactorGroup.COMMUTER,
              "travel": RiskFactorGroup.TRAVEL}
MOBILITY_BASELINE = MobilityClass.SUBURBAN.value
MOBILITY_TERMS = tuple(f"mobility_{c.value}" for c in MobilityClass if c.value != MOBILITY_BASELINE)


@dataclass(frozen=True)
class RiskFactor:
    name: str
    group: RiskFactorGroup
    section: str
    rows: tuple  # (term, label) in display order; the baseline term appears here too
    baseline: str | None = None
    periods: tuple | None = None  # None: the main period only
    restricted: bool = False  # only fitted for the eligible industries

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.rows if t != self.baseline)


_P = "Proportion of commuters"
RISK_FACTORS: tuple[RiskFactor, ...] = (
    RiskFactor("proximity", RiskFactorGroup.WORKPLACE, "Workplace - proximity",
               (("proximity", "Physical proximity in the workplace"),), restricted=True),
    RiskFactor("permanence", RiskFactorGroup.WORKPLACE, "Workplace - permanence",
               (("permanence", "Proportion of workers on permanent contracts"),), restricted=True),
    RiskFactor("mobility_class", RiskFactorGroup.WORKPLACE, "Workplace - mobility class",
               (("mobility_Exurban", "Mobility class - Exurban"),
                ("mobility_Metropolitan", "Mobility class - Metropolitan"),
                ("mobility_Rural", "Mobility class - Rural"),
                ("mobility_Suburban", "Mobility class - Suburban")),
               baseline="mobility_Suburban"),
    RiskFactor("vaccination", RiskFactorGroup.COMMUTER, "Commuter - vaccination",
               (("vacc_two_doses", f"{_P} with 2 or more vaccination doses"),), periods=("Delta", "Omicron")),
    RiskFactor("age", RiskFactorGroup.COMMUTER, "Commuter - age",
               (("age_18_29", f"{_P} aged 18-29"), ("age_30_44", f"{_P} aged 30-44"),
                ("age_45_59", f"{_P} aged 45-59"), ("age_60_64", f"{_P} aged 60-64")),
               baseline="age_30_44"),
    RiskFactor("ethnicity", RiskFactorGroup.COMMUTER, "Commuter - ethnicity",
               (("eth_asian", f"{_P} with an asian ethnicity"),
                ("eth_black", f"{_P} with a black/african/caribbean ethnicity"),
                ("eth_mixed_other", f"{_P} with a mixed/multiple/other ethnicity"),
                ("eth_white", f"{_P} with a white ethnicity")),
               baseline="eth_white"),
    RiskFactor("sex", RiskFactorGroup.COMMUTER, "Commuter - sex",
               (("sex_female", f"{_P} who identify as Female"), ("sex_male", f"{_P} who identify as Male")),
               baseline="sex_male"),
    RiskFactor("commuter_imd", RiskFactorGroup.COMMUTER, "Commuter - IMD",
               (("commuter_imd", "Commuter IMD quintile"),)),
    RiskFactor("travel_mode", RiskFactorGroup.TRAVEL, "Method of travel to work",
               (("travel_bus_metro_tram", f"{_P} using bus/metro/tram"),
                ("travel_other", f"{_P} using other transport"),
                ("travel_single_occupancy", f"{_P} using single occupancy"),
                ("travel_taxi_passenger", f"{_P} using taxi/vehicle passenger"),
                ("travel_train", f"{_P} using train")),
               baseline="travel_single_occupancy"),
)
REGISTRY: dict[str, RiskFactor] = {rf.name: rf for rf in RISK_FACTORS}


def get_risk_factor(name: str) -> RiskFactor:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownRiskFactor(name) from None


class Tier(enum.IntEnum):
    UNADJUSTED = 1
    MINIMAL = 2
    FULLY_ADJUSTED = 3


@dataclass(frozen=True)
class DagConfig:
    """Causal precedence over the residential block and the three risk-factor groups.

    ``unobserved`` nodes are documentation only and never become covariates.
    """

    order: tuple = ("residential", "commuter", "travel", "workplace")
    common: tuple = tuple(RESIDENT_COLUMNS) + tuple(LAG_COLUMNS)
    minimal_mobility: bool = True
    unobserved: tuple = ("workplace ascertainment rate",)

    def __post_init__(self):
        order = tuple(self.order)
        object.__setattr__(self, "order", order)
        if len(set(order)) != len(order):
            raise ValueError("causal order lists a group twice (cycle)")
        missing = set(GROUP_KEYS) - set(order)
        if missing:
            raise ValueError(f"causal order must rank every group; missing {sorted(missing)}")
        unknown = set(order) - set(GROUP_KEYS) - {"residential"}
        if unknown:
            raise ValueError(f"unknown groups in causal order: {sorted(unknown)}")

    def prior_groups(self, group: RiskFactorGroup) -> list[RiskFactorGroup]:
        keys = [k for k in self.order if k != "residential"]
        pos = [GROUP_KEYS[k] for k in keys].index(group)
        return [GROUP_KEYS[k] for k in keys[:pos]]


DEFAULT_DAG = DagConfig()


@dataclass(frozen=True)
class AdjustmentPlan:
    risk_factor: str
    tier: Tier
    focal: tuple
    adjusters: tuple

    @property
    def columns(self) -> tuple:
        return self.focal + self.adjusters


def build_plan(risk_factor: str, dag: DagConfig = DEFAULT_DAG, tier: int | Tier = Tier.FULLY_ADJUSTED) -> AdjustmentPlan:
    rf = get_risk_factor(risk_factor)
    tier = Tier(tier)
    adj: list[str] = []
    if tier >= Tier.MINIMAL:
        adj.extend(dag.common)
        if dag.minimal_mobility and rf.group is not RiskFactorGroup.WORKPLACE:
            adj.extend(MOBILITY_TERMS)
    if tier >= Tier.FULLY_ADJUSTED:
        for g in dag.prior_groups(rf.group):
            for other in RISK_FACTORS:
                if other.group is g:
                    adj.extend(t for t in other.terms if t not in adj)
    return AdjustmentPlan(rf.name, tier, rf.terms, tuple(dict.fromkeys(adj)))


def term_group(term: str) -> RiskFactorGroup | None:
    for rf in RISK_FACTORS:
        if term in (t for t, _ in rf.rows):
            return rf.group
    return None


ELIGIBLE_DEFAULT = (
    Sector.SERVICES.value,
    Sector.UTILITIES.value,
    Sector.TRANSPORT.value,
    Sector.MANUFACTURING.value,
    Sector.CONSTRUCTION.value,
)


@dataclass
class StudyConfig:
    periods: tuple = ("Delta", "Omicron", "Overall")
    main_period: str = "Overall"
    industries: tuple | None = None  # None: every industry present in the data
    risk_factors: tuple | None = None  # None: every registered factor
    tiers: tuple = (1, 2, 3)
    eligible_industries: tuple = ELIGIBLE_DEFAULT
    education_exclusion: bool = True
    epsilon: float = DEFAULT_EPSILON
    ci_level: float = 0.90
    dag: DagConfig = field(default_factory=DagConfig)
    nb_controls: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.risk_factors or ():
            get_risk_factor(name)
        for t in self.tiers:
            Tier(t)
        if not 0 < self.ci_level < 1:
            raise ValueError("ci_level must lie in (0, 1)")

    def factor_periods(self, rf: RiskFactor) -> list[str]:
        wanted = rf.periods if rf.periods is not None else (self.main_period,)
        return [p for p in wanted if p in self.periods]


def period_mask(week_start: pd.Series, period: StudyPeriod) -> np.ndarray:
    """Weeks ``[start, start + 6]`` that overlap the period."""
    ws = pd.to_datetime(week_start).dt.date
    we = ws + dt.timedelta(days=6)
    return ((ws <= period.end) & (we >= period.start)).to_numpy()


def mobility_dummies(classes: pd.Series) -> pd.DataFrame:
    return pd.DataFrame({t: (classes == t.split("_", 1)[1]).astype(float).to_numpy() for t in MOBILITY_TERMS},
                        index=classes.index)


def assemble(covariates: pd.DataFrame, series: pd.DataFrame, plan: AdjustmentPlan, industry: str,
             period: str | StudyPeriod = "Overall", education_exclusion: bool = True,
             periods: dict | None = None, notes: list | None = None) -> ModelMatrix:
    """Model matrix for one (industry, period) under ``plan``.

    Rows with a missing value in any used column are dropped; columns with no
    variation are dropped with a message naming them, appended to ``notes``
    when given and issued as a warning otherwise.
    """
    periods = periods or DEFAULT_PERIODS
    per = period if isinstance(period, StudyPeriod) else periods[period]
    rf = get_risk_factor(plan.risk_factor)
    if rf.periods is not None and per.name not in rf.periods:
        raise VaccinationPeriodRule(f"{rf.name} is only estimated within {', '.join(rf.periods)}; got {per.name}")

    s = series[(series["industry"] == industry) & (series["week_index"] >= 0)]
    s = s[period_mask(s["week_start"], per)]
    if education_exclusion and industry == Sector.EDUCATION.value:
        s = apply_education_exclusion(s)
    keys = ["msoa", "industry", "week_index"]
    df = s[keys + ["week_start", "active_clusters", "n_workplaces"]].merge(
        covariates.drop(columns=["week_start"], errors="ignore"), on=keys, how="inner")
    df = df[df["n_workplaces"] > 0]
    if any(c in MOBILITY_TERMS for c in plan.columns):
        df = pd.concat([df, mobility_dummies(df["mobility_class"])], axis=1)
    cols = list(plan.columns)
    if df.empty:
        raise EmptyModelFrame(f"no rows for {industry!r} in {per.name}")
    df = df.dropna(subset=cols)
    if df.empty:
        raise EmptyModelFrame(f"no complete rows for {industry!r} in {per.name}")
    X = df[cols].astype(float).reset_index(drop=True)
    flat = [c for c in cols if np.ptp(X[c].to_numpy()) == 0]
    if flat:
        msg = f"dropping columns with no variation for {industry!r}: {flat}"
        if notes is None:
            warnings.warn(msg, stacklevel=2)
        else:
            notes.append(msg)
        X = X.drop(columns=flat)
    return ModelMatrix(y=df["active_clusters"].to_numpy(dtype=float),
                       offset=np.log(df["n_workplaces"].to_numpy(dtype=float)),
                       X=X, keys=df[keys].reset_index(drop=True))


FIT_COLUMNS = ["industry", "risk_factor", "tier", "period", "term", "beta", "se", "ci_lo", "ci_hi",
               "pct", "pct_lo", "pct_hi", "converged", "theta", "n_obs", "status"]


@dataclass(frozen=True)
class Cell:
    risk_factor: str
    industry: str
    tier: int
    period: str


def study_cells(config: StudyConfig, industries: Iterable[str]) -> list[Cell]:
    names = config.risk_factors if config.risk_factors is not None else tuple(REGISTRY)
    present = list(industries)
    order = [s for s in SECTOR_NAMES if s in present]
    cells = []
    for name in names:
        rf = get_risk_factor(name)
        for ind in order:
            for tier in sorted(config.tiers):
                for period in config.factor_periods(rf):
                    cells.append(Cell(name, ind, int(tier), period))
    return cells


def _rows_for(cell: Cell, rf: RiskFactor, status: str, fit=None, n_obs=0, level=0.9, dropped=()) -> list[dict]:
    base = {"industry": cell.industry, "risk_factor": cell.risk_factor, "tier": cell.tier, "period": cell.period}
    out = []
    for term, _ in rf.rows:
        row = dict(base, term=term, beta=np.nan, se=np.nan, ci_lo=np.nan, ci_hi=np.nan, pct=np.nan,
                   pct_lo=np.nan, pct_hi=np.nan, converged="", theta=np.nan, n_obs=n_obs, status=status)
        if term == rf.baseline:
            row["status"] = "baseline" if status == "ok" else status
        elif fit is not None and term in fit.names:
            i = fit.names.index(term)
            b, se = float(fit.params[i]), float(fit.se[i])
            lo, hi = wald_ci(b, se, level)
            p, plo, phi = pct_change(b, lo, hi)
            row.update(beta=b, se=se, ci_lo=float(lo), ci_hi=float(hi), pct=float(p), pct_lo=float(plo),
                       pct_hi=float(phi), converged=bool(fit.converged), theta=fit.theta)
            if not fit.converged:
                row["status"] = "nonconverged"
        elif fit is not None:
            row["status"] = "dropped" if term in dropped else "failed"
        out.append(row)
    return out


def fit_cell(cell: Cell, covariates: pd.DataFrame, series: pd.DataFrame, config: StudyConfig,
             periods: dict | None = None) -> tuple[list[dict], list[str]]:
    """Fit one cell; failures are caught and reported in the ``status`` column."""
    rf = get_risk_factor(cell.risk_factor)
    if rf.restricted and cell.industry not in config.eligible_industries:
        return _rows_for(cell, rf, "ineligible"), []
    plan = build_plan(cell.risk_factor, config.dag, cell.tier)
    # messages are collected explicitly: warning filters are process-global and cells run in threads
    notes: list[str] = []
    try:
        mm = assemble(covariates, series, plan, cell.industry, cell.period,
                      education_exclusion=config.education_exclusion, periods=periods, notes=notes)
        fit = fit_nb(mm, warn=False, **config.nb_controls)
    except (CrpError, ValueError, np.linalg.LinAlgError) as exc:
        return _rows_for(cell, rf, f"failed:{type(exc).__name__}"), [f"{cell}: {m}" for m in notes] + [f"{cell}: {exc}"]
    if not fit.converged:
        notes.append(f"negative binomial fit did not converge in {fit.n_iter} outer iterations")
    dropped = set(plan.columns) - set(mm.X.columns)
    return (_rows_for(cell, rf, "ok", fit, n_obs=mm.n, level=config.ci_level, dropped=dropped),
            [f"{cell}: {m}" for m in notes])


@dataclass
class StudyResults:
    fits: pd.DataFrame
    descriptives: pd.DataFrame
    warnings: list

    @property
    def any_nonconverged(self) -> bool:
        return bool((self.fits["status"] == "nonconverged").any())


def run_study(config: StudyConfig, covariates: pd.DataFrame, series: pd.DataFrame, world: World | None = None,
              threads: int = 1) -> StudyResults:
    """Fit every (risk factor, industry, tier, period) cell.

    Cells run concurrently but results are collected in a fixed order, so
    the output does not depend on ``threads``.
    """
    present = sorted(set(series["industry"]))
    industries = [i for i in present if config.industries is None or i in config.industries]
    cells = study_cells(config, industries)
    periods = dict(world.periods) if world is not None else dict(DEFAULT_PERIODS)

    def run(cell):
        return fit_cell(cell, covariates, series, config, periods)

    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, cells))
    else:
        outs = [run(c) for c in cells]
    rows = [r for rs, _ in outs for r in rs]
    msgs = [m for _, ms in outs for m in ms]
    fits = pd.DataFrame(rows, columns=FIT_COLUMNS)
    desc = descriptives(series, covariates, world, industries) if industries else pd.DataFrame()
    return StudyResults(fits=fits, descriptives=desc, warnings=msgs)


def _wmean(values: pd.Series, weights: pd.Series) -> float:
    ok = values.notna()
    w = weights[ok].to_numpy(dtype=float)
    return float(np.dot(values[ok].to_numpy(dtype=float), w) / w.sum()) if w.sum() > 0 else float("nan")


def _wmode(values: pd.Series, weights: pd.Series, order: Sequence | None = None):
    tot = weights.groupby(values.to_numpy()).sum()
    if tot.empty:
        return ""
    best = tot.max()
    winners = [v for v in tot.index if tot[v] == best]
    if order is not None:
        winners.sort(key=lambda v: list(order).index(v) if v in order else len(order))
    else:
        winners.sort()
    return winners[0]


DESCRIPTIVE_ROWS: tuple = (
    ("section", "Workplace characteristics"),
    ("n_workplaces", "Total number of workplaces included"),
    ("proximity", "Mean physical proximity in the workplace"),
    ("permanence", "Mean proportion of workers on permanent contracts"),
    ("mobility_class", "Most common mobility class"),
    ("section", "Case and cluster rates"),
    ("active_clusters", "Mean number of active clusters"),
    ("log_commuter_case_rate_lag", "Mean log(commuter_case_rate_lag_7day)"),
    ("log_cluster_rate_other_lag", "Mean log(cluster_rate_other)"),
    ("log_cluster_rate_lag", "Mean log(cluster_rate_lag_7day)"),
    ("section", "Commuter characteristics"),
    ("vacc_two_doses", "Mean proportion of commuters with 2 or more vaccination doses"),
    ("age_18_29", "Mean proportion of commuters aged 18-29"),
    ("age_30_44", "Mean proportion of commuters aged 30-44"),
    ("age_45_59", "Mean proportion of commuters aged 45-59"),
    ("age_60_64", "Mean proportion of commuters aged 60-64"),
    ("eth_asian", "Mean proportion of commuters with an asian ethnicity"),
    ("eth_black", "Mean proportion of commuters with a black/african/caribbean ethnicity"),
    ("eth_mixed_other", "Mean proportion of commuters with a mixed/multiple/other ethnicity"),
    ("eth_white", "Mean proportion of commuters with a white ethnicity"),
    ("travel_bus_metro_tram", "Mean proportion of commuters using bus/metro/tram"),
    ("travel_taxi_passenger", "Mean proportion of commuters using taxi/vehicle passenger"),
    ("travel_other", "Mean proportion of commuters using other transport"),
    ("travel_train", "Mean proportion of commuters using train"),
    ("travel_single_occupancy", "Mean proportion of commuters using single occupancy"),
    ("sex_female", "Mean proportion of commuters who identify as Female"),
    ("sex_male", "Mean proportion of commuters who identify as Male"),
    ("commuter_imd_mode", "Most common IMD quintile among commuters"),
    ("section", "Residential characteristics"),
    ("resident_dose2", "Mean proportion of residents with 2 or more vaccination doses"),
    ("resident_imd", "Most common IMD quintile among residents"),
)
_PCT_ROWS = {"permanence", "vacc_two_doses", "resident_dose2"} | {
    k for k, _ in DESCRIPTIVE_ROWS if k.startswith(("age_", "eth_", "travel_", "sex_"))}


def descriptives(series: pd.DataFrame, covariates: pd.DataFrame, world: World | None = None,
                 industries: Iterable[str] | None = None) -> pd.DataFrame:
    """Per-industry summary: workplace totals, workplace-weighted covariate means and modal classes.

    Returns numeric values (rows keyed by variable, one column per industry);
    formatting is left to the report.
    """
    present = set(series["industry"]) if industries is None else set(industries)
    cols = [s for s in SECTOR_NAMES if s in present]
    s = series[series["week_index"] >= 0]
    keys = ["msoa", "industry", "week_index"]
    df = s[keys + ["active_clusters", "n_workplaces"]].merge(
        covariates.drop(columns=["week_start"], errors="ignore"), on=keys, how="left")
    if world is not None:
        totals = world.workplace_counts().groupby("industry")["n_workplaces"].sum()
    else:
        totals = s.drop_duplicates(["msoa", "industry"]).groupby("industry")["n_workplaces"].sum()
    out = {}
    for ind in cols:
        d = df[df["industry"] == ind]
        w = d["n_workplaces"].astype(float)
        col = {}
        for key, _ in DESCRIPTIVE_ROWS:
            if key == "section":
                continue
            if key == "n_workplaces":
                col[key] = int(totals.get(ind, 0))
            elif key == "mobility_class":
                col[key] = _wmode(d[key], w, [c.value for c in MobilityClass])
            elif key in ("commuter_imd_mode", "resident_imd"):
                v = d[key].dropna()
                col[key] = int(_wmode(v.astype(int), w[v.index])) if len(v) else ""
            elif key == "active_clusters":
                col[key] = float(d[key].mean())
            else:
                col[key] = _wmean(d[key], w)
        out[ind] = col
    rows = [k for k, _ in DESCRIPTIVE_ROWS if k != "section"]
    return pd.DataFrame(out, index=rows, columns=cols)
