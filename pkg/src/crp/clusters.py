"""Workplace cluster detection and weekly active-cluster counts.

Events at one UPRN are chained in date order; a chain breaks whenever the gap
to the previous event exceeds ``EPISODE_DAYS``. Chains with at least two
events are clusters, and a cluster is active on every day from its first to
its last event inclusive.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .exceptions import SchemaViolation
from .taxonomy import Sector, World, read_table

EPISODE_DAYS = 6
MIN_CLUSTER_EVENTS = 2

EDUCATION_HOLIDAYS: tuple[tuple[dt.date, dt.date], ...] = (
    (dt.date(2021, 7, 18), dt.date(2021, 9, 12)),
    (dt.date(2021, 10, 24), dt.date(2021, 10, 31)),
    (dt.date(2021, 12, 19), dt.date(2022, 1, 9)),
)

SERIES_COLUMNS = ["msoa", "industry", "week_index", "week_start", "active_clusters", "n_workplaces"]
CLUSTER_COLUMNS = ["cluster_id", "uprn", "msoa", "industry", "first_date", "last_date", "n_events"]


@dataclass(frozen=True, order=True)
class CaseEvent:
    event_date: dt.date
    uprn: str
    case_id: str


@dataclass(frozen=True)
class Cluster:
    uprn: str
    events: tuple[CaseEvent, ...]

    def __post_init__(self):
        if len(self.events) < MIN_CLUSTER_EVENTS:
            raise ValueError("a cluster needs at least two events")

    @property
    def first_date(self) -> dt.date:
        return self.events[0].event_date

    @property
    def last_date(self) -> dt.date:
        return self.events[-1].event_date


def chain_events(events: Iterable[CaseEvent], episode_days: int = EPISODE_DAYS) -> list[Cluster]:
    """Split the events of a single UPRN into clusters.

    Consecutive events (after sorting by date) stay in the same chain while
    their date gap is at most ``episode_days``; chains of one event are
    discarded.
    """
    evs = sorted(events)
    if not evs:
        return []
    uprns = {e.uprn for e in evs}
    if len(uprns) > 1:
        raise ValueError(f"chain_events expects events from one UPRN, got {sorted(uprns)}")
    chains: list[list[CaseEvent]] = [[evs[0]]]
    for prev, cur in zip(evs, evs[1:]):
        if (cur.event_date - prev.event_date).days > episode_days:
            chains.append([cur])
        else:
            chains[-1].append(cur)
    return [Cluster(c[0].uprn, tuple(c)) for c in chains if len(c) >= MIN_CLUSTER_EVENTS]


def is_active(cluster: Cluster, date: dt.date) -> bool:
    return cluster.first_date <= date <= cluster.last_date


def load_events(path: str | Path) -> tuple[pd.DataFrame, int]:
    """Read ``events.csv``; returns the de-duplicated frame and the number of duplicates dropped."""
    path = Path(path)
    rows = read_table(path, ["case_id", "uprn", "event_date"])
    recs = []
    for i, r in enumerate(rows, start=2):
        case_id = (r["case_id"] or "").strip()
        uprn = (r["uprn"] or "").strip()
        if not case_id:
            raise SchemaViolation(path.name, "empty identifier", i, "case_id")
        if not uprn:
            raise SchemaViolation(path.name, "empty identifier", i, "uprn")
        try:
            day = dt.date.fromisoformat((r["event_date"] or "").strip())
        except ValueError:
            raise SchemaViolation(path.name, f"expected an ISO-8601 date, got {r['event_date']!r}", i, "event_date") from None
        recs.append((case_id, uprn, day))
    df = pd.DataFrame(recs, columns=["case_id", "uprn", "event_date"])
    return dedup_events(df)


def dedup_events(df: pd.DataFrame) -> tuple[pd.DataFrame, int]:
    before = len(df)
    out = df.drop_duplicates(["case_id", "uprn", "event_date"]).reset_index(drop=True)
    return out, before - len(out)


def _day_numbers(dates) -> np.ndarray:
    return pd.to_datetime(pd.Series(dates)).to_numpy(dtype="datetime64[D]").astype(np.int64)


def detect_clusters(events: pd.DataFrame, episode_days: int = EPISODE_DAYS) -> pd.DataFrame:
    """Vectorised :func:`chain_events` over every UPRN at once.

    Returns one row per cluster with ``cluster_id, uprn, first_date, last_date, n_events``.
    """
    cols = ["cluster_id", "uprn", "first_date", "last_date", "n_events"]
    if events.empty:
        return pd.DataFrame(columns=cols)
    df = pd.DataFrame({"uprn": events["uprn"].astype(str).to_numpy(), "day": _day_numbers(events["event_date"])})
    df = df.sort_values(["uprn", "day"], kind="mergesort").reset_index(drop=True)
    new_uprn = df["uprn"].ne(df["uprn"].shift())
    gap = df["day"].diff()
    df["chain"] = (new_uprn | (gap > episode_days)).cumsum()
    g = df.groupby("chain", sort=True).agg(uprn=("uprn", "first"), first=("day", "min"), last=("day", "max"), n_events=("day", "size"))
    g = g[g["n_events"] >= MIN_CLUSTER_EVENTS]
    first = g["first"].to_numpy().astype("datetime64[D]")
    last = g["last"].to_numpy().astype("datetime64[D]")
    out = pd.DataFrame({
        "uprn": g["uprn"].to_numpy(),
        "first_date": [d.item() for d in first],
        "last_date": [d.item() for d in last],
        "n_events": g["n_events"].to_numpy(dtype=np.int64),
    })
    out.insert(0, "cluster_id", [f"{u}@{d.isoformat()}" for u, d in zip(out["uprn"], out["first_date"])])
    return out.reset_index(drop=True)


def attach_workplaces(clusters: pd.DataFrame, world: World) -> tuple[pd.DataFrame, dict]:
    """Join MSOA and industry onto clusters; split off clusters that cannot be modelled."""
    wp = world.workplaces[["uprn", "msoa", "sector"]].rename(columns={"sector": "industry"})
    merged = clusters.merge(wp, on="uprn", how="left")
    unknown = merged["msoa"].isna()
    unlinked = merged["industry"].isna() & ~unknown
    report = {
        "n_clusters": int(len(merged)),
        "unknown_uprn": int(unknown.sum()),
        "unlinked_uprn": int(unlinked.sum()),
    }
    report["dropped_fraction"] = (report["unknown_uprn"] + report["unlinked_uprn"]) / len(merged) if len(merged) else 0.0
    return merged[CLUSTER_COLUMNS], report


def week_starts(start: dt.date, n_weeks: int, warmup_weeks: int = 0) -> list[dt.date]:
    return [start + dt.timedelta(days=7 * k) for k in range(-warmup_weeks, n_weeks)]


def weekly_series(clusters: pd.DataFrame, world: World, start: dt.date, n_weeks: int,
                  warmup_weeks: int = 0) -> tuple[pd.DataFrame, dict]:
    """Count clusters active on at least one day of each 7-day block from ``start``.

    Every (msoa, industry) with at least one linked workplace gets a row for
    every week, zero-filled. ``warmup_weeks`` extra weeks before ``start``
    carry negative ``week_index`` and exist only to feed lagged covariates.
    """
    if "industry" not in clusters.columns:
        clusters, report = attach_workplaces(clusters, world)
    else:
        report = {"n_clusters": int(len(clusters)),
                  "unknown_uprn": int(clusters["msoa"].isna().sum()),
                  "unlinked_uprn": int((clusters["industry"].isna() & clusters["msoa"].notna()).sum())}
    usable = clusters[clusters["industry"].notna() & clusters["msoa"].notna()]

    counts = world.workplace_counts()
    weeks = np.arange(-warmup_weeks, n_weeks)
    grid = counts.loc[counts.index.repeat(len(weeks))].reset_index(drop=True)
    grid["week_index"] = np.tile(weeks, len(counts))

    if len(usable):
        origin = np.datetime64(start, "D").astype(np.int64)
        first = _day_numbers(usable["first_date"]) - origin
        last = _day_numbers(usable["last_date"]) - origin
        w0 = np.maximum(np.floor_divide(first, 7), -warmup_weeks)
        w1 = np.minimum(np.floor_divide(last, 7), n_weeks - 1)
        keep = w1 >= w0
        span = (w1 - w0 + 1)[keep]
        rep = np.repeat(np.flatnonzero(keep), span)
        offsets = np.arange(span.sum()) - np.repeat(np.cumsum(span) - span, span)
        act = pd.DataFrame({
            "msoa": usable["msoa"].to_numpy()[rep],
            "industry": usable["industry"].to_numpy()[rep],
            "week_index": np.repeat(w0[keep], span) + offsets,
        })
        active = act.groupby(["msoa", "industry", "week_index"]).size().rename("active_clusters").reset_index()
        grid = grid.merge(active, on=["msoa", "industry", "week_index"], how="left")
        grid["active_clusters"] = grid["active_clusters"].fillna(0).astype(np.int64)
    else:
        grid["active_clusters"] = np.zeros(len(grid), dtype=np.int64)

    grid["week_start"] = [start + dt.timedelta(days=7 * int(k)) for k in grid["week_index"]]
    grid["n_workplaces"] = grid["n_workplaces"].astype(np.int64)
    grid = grid.sort_values(["msoa", "industry", "week_index"], kind="mergesort").reset_index(drop=True)
    return grid[SERIES_COLUMNS], report


def apply_education_exclusion(series: pd.DataFrame,
                              holidays: Sequence[tuple[dt.date, dt.date]] = EDUCATION_HOLIDAYS) -> pd.DataFrame:
    """Drop Education rows whose week overlaps a listed holiday range (both ends inclusive)."""
    ws = pd.to_datetime(series["week_start"]).dt.date
    we = ws + dt.timedelta(days=6)
    hit = np.zeros(len(series), dtype=bool)
    for lo, hi in holidays:
        hit |= ((ws <= hi) & (we >= lo)).to_numpy()
    drop = hit & (series["industry"] == Sector.EDUCATION.value).to_numpy()
    return series.loc[~drop].reset_index(drop=True)
