"""Commuter-side covariates pushed through the flow-to-work network.

Residential shares are converted into expected commuter counts per workzone
(share x flow), split across industries by the workzone industry mix, summed
up to the workplace MSOA and divided by the industry-MSOA commuter total.
The same construction carries smoothed home-area case rates (giving the
commuter case rate) and weekly vaccination coverage.
"""
from __future__ import annotations

import datetime as dt
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .exceptions import NoCommuters, NoEmployees, SchemaViolation
from .taxonomy import World, parse_sector, read_table

DEFAULT_EPSILON = 1e-10

AGE_COLUMNS = ["age_18_29", "age_30_44", "age_45_59", "age_60_64"]
SEX_COLUMNS = ["sex_female", "sex_male"]
ETHNICITY_COLUMNS = ["eth_white", "eth_asian", "eth_black", "eth_mixed_other"]
TRAVEL_COLUMNS = [
    "travel_train",
    "travel_taxi_passenger",
    "travel_single_occupancy",
    "travel_bus_metro_tram",
    "travel_other",
]
IMD_COLUMNS = [f"imd_q{q}" for q in range(1, 6)]

PROFILE_FAMILIES: dict[str, list[str]] = {
    "age": AGE_COLUMNS,
    "sex": SEX_COLUMNS,
    "ethnicity": ETHNICITY_COLUMNS,
    "travel": TRAVEL_COLUMNS,
    "imd": IMD_COLUMNS,
}
PROFILE_COLUMNS = [c for cols in PROFILE_FAMILIES.values() for c in cols]

LAG_COLUMNS = ["log_cluster_rate_lag", "log_cluster_rate_other_lag", "log_commuter_case_rate_lag"]
RESIDENT_COLUMNS = ["resident_imd", "resident_dose1", "resident_dose2", "log_resident_case_rate_lag"]

COVARIATE_COLUMNS = (
    ["proximity", "permanence", "mobility_class", "vacc_two_doses"]
    + AGE_COLUMNS + ETHNICITY_COLUMNS + SEX_COLUMNS
    + ["commuter_imd", "commuter_imd_mode"]
    + TRAVEL_COLUMNS + LAG_COLUMNS + RESIDENT_COLUMNS
)
KEY_COLUMNS = ["msoa", "industry", "week_index", "week_start"]


@dataclass(frozen=True)
class ExposureInputs:
    flows: pd.DataFrame  # home_msoa, workzone, n_commuters
    mix: pd.DataFrame  # workzone, sector, share
    profiles: pd.DataFrame  # msoa + PROFILE_COLUMNS (fractions)
    vaccination: pd.DataFrame  # msoa, week_start, prop_two_doses
    residential_weekly: pd.DataFrame  # msoa, week_start, resident_case_rate, resident_dose1, resident_dose2


EXPOSURE_FILES = {
    "flows": "flows.csv",
    "mix": "industry_mix.csv",
    "profiles": "residential_profiles.csv",
    "vaccination": "vaccination.csv",
    "residential_weekly": "residential_weekly.csv",
}


def _frame(path: Path, columns: list[str]) -> pd.DataFrame:
    rows = read_table(path, columns)
    return pd.DataFrame(rows, columns=list(rows[0].keys()) if rows else columns)


def _numeric(df: pd.DataFrame, col: str, file: str, lo=None, hi=None) -> pd.Series:
    vals = pd.to_numeric(df[col], errors="coerce")
    bad = vals.isna() | ~np.isfinite(vals)
    if lo is not None:
        bad |= vals < lo
    if hi is not None:
        bad |= vals > hi
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaViolation(file, f"invalid value {df[col].iloc[i]!r}", row=i + 2, column=col)
    return vals.astype(float)


def _dates(df: pd.DataFrame, col: str, file: str) -> pd.Series:
    out = pd.to_datetime(df[col], format="%Y-%m-%d", errors="coerce")
    if out.isna().any():
        i = int(np.flatnonzero(out.isna().to_numpy())[0])
        raise SchemaViolation(file, f"expected an ISO-8601 date, got {df[col].iloc[i]!r}", row=i + 2, column=col)
    return out.dt.date


def load_exposure_inputs(directory: str | Path, world: World | None = None) -> ExposureInputs:
    d = Path(directory)
    flows = _frame(d / EXPOSURE_FILES["flows"], ["home_msoa", "workzone", "n_commuters"])
    flows["n_commuters"] = _numeric(flows, "n_commuters", "flows.csv", lo=0)
    if flows.duplicated(["home_msoa", "workzone"]).any():
        raise SchemaViolation("flows.csv", "more than one edge for a (home_msoa, workzone) pair")

    mix = _frame(d / EXPOSURE_FILES["mix"], ["workzone", "sector", "share"])
    mix["share"] = _numeric(mix, "share", "industry_mix.csv", 0.0, 1.0)
    try:
        mix["sector"] = [parse_sector(s).value for s in mix["sector"]]
    except ValueError as exc:
        raise SchemaViolation("industry_mix.csv", str(exc), column="sector") from None
    sums = mix.groupby("workzone")["share"].sum()
    if (np.abs(sums - 1.0) > 1e-9).any():
        raise SchemaViolation("industry_mix.csv", f"shares do not sum to 1 for workzones {list(sums[np.abs(sums - 1) > 1e-9].index[:5])}")

    profiles = _frame(d / EXPOSURE_FILES["profiles"], ["msoa"] + PROFILE_COLUMNS)
    for c in PROFILE_COLUMNS:
        profiles[c] = _numeric(profiles, c, "residential_profiles.csv", 0.0, 1.0)
    for fam, cols in PROFILE_FAMILIES.items():
        s = profiles[cols].sum(axis=1)
        if (np.abs(s - 1.0) > 1e-9).any():
            raise SchemaViolation("residential_profiles.csv", f"{fam} shares do not sum to 1",
                                  row=int(np.flatnonzero((np.abs(s - 1) > 1e-9).to_numpy())[0]) + 2)

    vacc = _frame(d / EXPOSURE_FILES["vaccination"], ["msoa", "week_start", "prop_two_doses"])
    vacc["week_start"] = _dates(vacc, "week_start", "vaccination.csv")
    vacc["prop_two_doses"] = _numeric(vacc, "prop_two_doses", "vaccination.csv", 0.0, 1.0)
    v = vacc.sort_values(["msoa", "week_start"])
    if (v.groupby("msoa")["prop_two_doses"].diff() < -1e-12).any():
        raise SchemaViolation("vaccination.csv", "prop_two_doses decreases over time", column="prop_two_doses")

    res = _frame(d / EXPOSURE_FILES["residential_weekly"],
                 ["msoa", "week_start", "resident_case_rate", "resident_dose1", "resident_dose2"])
    res["week_start"] = _dates(res, "week_start", "residential_weekly.csv")
    res["resident_case_rate"] = _numeric(res, "resident_case_rate", "residential_weekly.csv", lo=0.0)
    for c in ("resident_dose1", "resident_dose2"):
        res[c] = _numeric(res, c, "residential_weekly.csv", 0.0, 1.0)

    if world is not None:
        from .exceptions import DanglingReference

        msoas = set(world.msoa_ids)
        wzs = set(world.workzones["workzone"])
        for name, frame, col, known in (
            ("flows.csv", flows, "home_msoa", msoas),
            ("flows.csv", flows, "workzone", wzs),
            ("industry_mix.csv", mix, "workzone", wzs),
            ("residential_profiles.csv", profiles, "msoa", msoas),
        ):
            bad = sorted(set(frame[col]) - known)
            if bad:
                raise DanglingReference(col, bad[0], bad[0], name)
    return ExposureInputs(flows, mix, profiles, vacc, res)


def commuter_case_rate(n_commuters: Sequence[float], rates: Sequence[float], workzone: str | None = None) -> float:
    """Flow-weighted mean home-area case rate of a workzone's commuters."""
    n = np.asarray(n_commuters, dtype=float)
    r = np.asarray(rates, dtype=float)
    total = n.sum()
    if total <= 0:
        raise NoCommuters(f"workzone {workzone!r} has no inbound commuters")
    # clamp to the hull of contributing rates; r*n/n can be off by one ulp
    pos = r[n > 0]
    return float(np.clip(np.dot(r, n) / total, pos.min(), pos.max()))


def industry_rate(c_w, share):
    """Per-industry, per-workzone rate: the commuter case rate scaled by the industry share."""
    return c_w * share


def workzone_case_rates(flows: pd.DataFrame, smoothed: pd.DataFrame) -> tuple[pd.DataFrame, list[str]]:
    """C_w per (workzone, week_start) from smoothed home-MSOA rates.

    Returns the table and the workzones excluded for having no inbound commuters.
    """
    f = flows[flows["n_commuters"] > 0]
    empty = sorted(set(flows["workzone"]) - set(f["workzone"]))
    if empty:
        warnings.warn(f"{len(empty)} workzone(s) have no inbound commuters and are excluded", stacklevel=2)
    e = f.merge(smoothed[["msoa", "week_start", "lambda_bar"]], left_on="home_msoa", right_on="msoa")
    e["wr"] = e["lambda_bar"] * e["n_commuters"]
    g = e.groupby(["workzone", "week_start"], sort=True).agg(
        wr=("wr", "sum"), n=("n_commuters", "sum"), lo=("lambda_bar", "min"), hi=("lambda_bar", "max")
    ).reset_index()
    g["c_w"] = (g["wr"] / g["n"]).clip(g["lo"], g["hi"])
    return g[["workzone", "week_start", "c_w", "n"]].rename(columns={"n": "commuters"}), empty


def _push(values: pd.DataFrame, cols: list[str], flows: pd.DataFrame, mix: pd.DataFrame,
          world: World, by: list[str] | None = None) -> pd.DataFrame:
    """Expected commuter-weighted fraction of each value column per (msoa, industry[, by])."""
    by = by or []
    e = flows[flows["n_commuters"] > 0].merge(values[["msoa"] + by + cols], left_on="home_msoa", right_on="msoa")
    e = e.drop(columns="msoa")
    wz = e[["workzone"] + by].copy()
    wz["_total"] = e["n_commuters"].to_numpy()
    for c in cols:
        wz[c] = e[c].to_numpy() * e["n_commuters"].to_numpy()
    wz = wz.groupby(["workzone"] + by, sort=False).sum().reset_index()
    m = wz.merge(mix, on="workzone").merge(world.workzones, on="workzone")
    for c in cols + ["_total"]:
        m[c] = m[c] * m["share"]
    agg = m.groupby(["msoa", "sector"] + by, sort=True)[cols + ["_total"]].sum().reset_index()
    agg = agg.rename(columns={"sector": "industry"})
    zero = agg["_total"] <= 0
    agg = agg.loc[~zero].reset_index(drop=True)
    for c in cols:
        agg[c] = agg[c] / agg["_total"]
    return agg.rename(columns={"_total": "commuters"})


def push_profile(profiles: pd.DataFrame, flows: pd.DataFrame, mix: pd.DataFrame, world: World) -> pd.DataFrame:
    """Commuter demographic, travel-mode and IMD percentages per (msoa, industry).

    Industry-MSOA pairs without any commuters are omitted rather than zero-filled.
    """
    out = _push(profiles, PROFILE_COLUMNS, flows, mix, world)
    q = np.arange(1, 6)
    imd = out[IMD_COLUMNS].to_numpy()
    out["commuter_imd"] = imd @ q
    out["commuter_imd_mode"] = np.argmax(imd, axis=1) + 1
    for c in PROFILE_COLUMNS:
        out[c] = 100.0 * out[c]
    return out


def sic_weighted_workplace_vars(msoa: str, industry: str, world: World) -> tuple[float, float]:
    """Employee-weighted mean SIC proximity (0-100) and permanence (0-1) of one industry in one MSOA."""
    wp = world.linked_workplaces
    wp = wp[(wp["msoa"] == msoa) & (wp["sector"] == industry)]
    sic = world.sic.set_index("sic_division")
    emp = wp["employees"].to_numpy(dtype=float)
    if emp.sum() <= 0:
        raise NoEmployees(f"no employees for {industry!r} in {msoa!r}")
    div = wp["sic_division"].astype(int).to_numpy()
    prox = sic.loc[div, "proximity"].to_numpy()
    perm = sic.loc[div, "permanence"].to_numpy()
    return float(emp @ prox / emp.sum()), float(emp @ perm / emp.sum())


def workplace_vars(world: World) -> pd.DataFrame:
    """Vectorised :func:`sic_weighted_workplace_vars` for every (msoa, industry); permanence as a percentage.

    Pairs with zero employees get NaN and are dropped later by any model that uses them.
    """
    wp = world.linked_workplaces.merge(world.sic[["sic_division", "proximity", "permanence"]].astype({"sic_division": "Int64"}),
                                       on="sic_division")
    wp = wp.assign(px=wp["employees"] * wp["proximity"], pm=wp["employees"] * wp["permanence"])
    g = wp.groupby(["msoa", "sector"], sort=True)[["employees", "px", "pm"]].sum().reset_index()
    emp = g["employees"].where(g["employees"] > 0)
    return pd.DataFrame({
        "msoa": g["msoa"],
        "industry": g["sector"],
        "proximity": g["px"] / emp,
        "permanence": 100.0 * g["pm"] / emp,
    })


def commuter_industry_rates(flows: pd.DataFrame, mix: pd.DataFrame, smoothed: pd.DataFrame,
                            world: World) -> pd.DataFrame:
    """Commuter case rate per (msoa, industry, week_start).

    Each workzone contributes ``industry_rate(C_w, rho) * N_w`` infected commuters
    out of ``rho * N_w`` commuters to its MSOA-industry total.
    """
    cw, _ = workzone_case_rates(flows, smoothed)
    m = cw.merge(mix, on="workzone").merge(world.workzones, on="workzone")
    m["infected"] = industry_rate(m["c_w"], m["share"]) * m["commuters"]
    m["attending"] = m["share"] * m["commuters"]
    g = m.groupby(["msoa", "sector", "week_start"], sort=True)[["infected", "attending"]].sum().reset_index()
    g = g[g["attending"] > 0]
    g["commuter_case_rate"] = g["infected"] / g["attending"]
    return g.rename(columns={"sector": "industry"})[["msoa", "industry", "week_start", "commuter_case_rate"]]


def cluster_rates(series: pd.DataFrame) -> pd.DataFrame:
    """Own-industry and other-industries cluster rates per (msoa, industry, week_index)."""
    s = series[["msoa", "industry", "week_index", "active_clusters", "n_workplaces"]].copy()
    tot = s.groupby(["msoa", "week_index"])[["active_clusters", "n_workplaces"]].sum()
    tot = tot.rename(columns={"active_clusters": "all_clusters", "n_workplaces": "all_workplaces"}).reset_index()
    s = s.merge(tot, on=["msoa", "week_index"])
    s["cluster_rate"] = s["active_clusters"] / s["n_workplaces"]
    other_wp = s["all_workplaces"] - s["n_workplaces"]
    other_cl = s["all_clusters"] - s["active_clusters"]
    s["cluster_rate_other"] = np.where(other_wp > 0, other_cl / other_wp.where(other_wp > 0, 1), 0.0)
    return s[["msoa", "industry", "week_index", "cluster_rate", "cluster_rate_other"]]


def lagged_log_columns(series: pd.DataFrame, commuter_rates: pd.DataFrame | None = None,
                       eps: float = DEFAULT_EPSILON, lag_weeks: int = 1) -> pd.DataFrame:
    """``log(eps + rate)`` of each rate one week earlier, keyed by (msoa, industry, week_index).

    ``commuter_rates`` is keyed by ``week_start``; rows whose lagged week is
    missing from the inputs get NaN.
    """
    cr = cluster_rates(series)
    lag = cr.copy()
    lag["week_index"] = lag["week_index"] + lag_weeks
    out = series[["msoa", "industry", "week_index", "week_start"]].merge(lag, on=["msoa", "industry", "week_index"], how="left")
    out["log_cluster_rate_lag"] = np.log(eps + out["cluster_rate"])
    out["log_cluster_rate_other_lag"] = np.log(eps + out["cluster_rate_other"])
    if commuter_rates is not None:
        c = commuter_rates.copy()
        c["week_start"] = [d + dt.timedelta(days=7 * lag_weeks) for d in c["week_start"]]
        out = out.merge(c, on=["msoa", "industry", "week_start"], how="left")
        out["log_commuter_case_rate_lag"] = np.log(eps + out["commuter_case_rate"])
    else:
        out["log_commuter_case_rate_lag"] = np.nan
    return out[["msoa", "industry", "week_index"] + LAG_COLUMNS]


def build_covariates(world: World, series: pd.DataFrame, smoothed: pd.DataFrame, inputs: ExposureInputs,
                     eps: float = DEFAULT_EPSILON) -> pd.DataFrame:
    """Assemble the covariate frame for every study week (``week_index >= 0``) in ``series``."""
    keys = series.loc[series["week_index"] >= 0, KEY_COLUMNS].reset_index(drop=True)

    prof = push_profile(inputs.profiles, inputs.flows, inputs.mix, world)
    prof = prof.drop(columns=IMD_COLUMNS + ["commuters"])
    frame = keys.merge(prof, on=["msoa", "industry"], how="inner")

    frame = frame.merge(workplace_vars(world), on=["msoa", "industry"], how="left")
    frame = frame.merge(world.msoas[["msoa", "mobility_class", "imd_quintile"]], on="msoa", how="left")
    frame = frame.rename(columns={"imd_quintile": "resident_imd"})

    vacc = _push(inputs.vaccination, ["prop_two_doses"], inputs.flows, inputs.mix, world, by=["week_start"])
    vacc["vacc_two_doses"] = 100.0 * vacc["prop_two_doses"]
    frame = frame.merge(vacc[["msoa", "industry", "week_start", "vacc_two_doses"]],
                        on=["msoa", "industry", "week_start"], how="left")

    rates = commuter_industry_rates(inputs.flows, inputs.mix, smoothed, world)
    lags = lagged_log_columns(series, rates, eps=eps)
    frame = frame.merge(lags, on=["msoa", "industry", "week_index"], how="left")

    res = inputs.residential_weekly.copy()
    res["resident_dose1"] = 100.0 * res["resident_dose1"]
    res["resident_dose2"] = 100.0 * res["resident_dose2"]
    frame = frame.merge(res[["msoa", "week_start", "resident_dose1", "resident_dose2"]], on=["msoa", "week_start"], how="left")
    lagged = res[["msoa", "week_start", "resident_case_rate"]].copy()
    lagged["week_start"] = [d + dt.timedelta(days=7) for d in lagged["week_start"]]
    frame = frame.merge(lagged, on=["msoa", "week_start"], how="left")
    frame["log_resident_case_rate_lag"] = np.log(eps + frame.pop("resident_case_rate"))

    frame = frame.sort_values(["msoa", "industry", "week_index"], kind="mergesort").reset_index(drop=True)
    return frame[KEY_COLUMNS + COVARIATE_COLUMNS]
