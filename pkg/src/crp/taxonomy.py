"""Identifiers, static classification tables and validated loading of the world files.

A *world* is the set of static inputs every stage shares: MSOAs, workzones,
workplaces (UPRNs), SIC divisions, the MSOA adjacency graph and the study
periods. It is loaded once, validated for referential integrity and then
treated as read-only.
"""
from __future__ import annotations

import csv
import datetime as dt
import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .exceptions import (
    DanglingReference,
    EmptyInput,
    MissingFile,
    OutOfRange,
    SchemaViolation,
)


class Sector(str, enum.Enum):
    SERVICES = "Services"
    UTILITIES = "Utilities"
    EDUCATION = "Education"
    TRANSPORT = "Transport, distribution and warehousing"
    MINING = "Mining and Quarrying"
    MANUFACTURING = "Manufacturing"
    PUBLIC_SERVICE = "Public service activities"
    CONSTRUCTION = "Construction"
    HEALTH = "Human health and social work"
    WASTE = "Waste management and remediation"
    AGRICULTURE = "Agriculture, forestry and fishing"

    def __str__(self) -> str:
        return self.value


# Column order used by every rendered table.
SECTORS: tuple[Sector, ...] = tuple(Sector)
SECTOR_NAMES: tuple[str, ...] = tuple(s.value for s in SECTORS)


def parse_sector(name: str) -> Sector:
    try:
        return Sector(name)
    except ValueError:
        folded = name.strip().casefold()
        for s in SECTORS:
            if s.value.casefold() == folded or s.name.casefold() == folded:
                return s
        raise


class MobilityClass(str, enum.Enum):
    # Declaration order doubles as the modal tie-break order.
    METROPOLITAN = "Metropolitan"
    EXURBAN = "Exurban"
    SUBURBAN = "Suburban"
    RURAL = "Rural"

    def __str__(self) -> str:
        return self.value


MOBILITY_ORDER: tuple[MobilityClass, ...] = tuple(MobilityClass)


def regroup_mobility(level: int) -> MobilityClass:
    """Map an LSOA mobility level (1 = fully metropolitan .. 8 = fully rural) to its class."""
    if isinstance(level, (bool, np.bool_)) or int(level) != level or not 1 <= level <= 8:
        raise OutOfRange(f"mobility level must be an integer in 1..8, got {level!r}")
    return MOBILITY_ORDER[(int(level) - 1) // 2]


def msoa_mobility(lsoa_levels: Iterable[int], msoa: str | None = None) -> MobilityClass:
    """Most common regrouped class among an MSOA's LSOAs.

    Ties go to the class that comes first in Metropolitan < Exurban < Suburban < Rural.
    """
    levels = list(lsoa_levels)
    if not levels:
        raise EmptyInput(f"no LSOA mobility levels for MSOA {msoa!r}")
    counts = Counter(regroup_mobility(lv) for lv in levels)
    best = max(counts.values())
    return next(c for c in MOBILITY_ORDER if counts.get(c, 0) == best)


@dataclass(frozen=True)
class StudyPeriod:
    name: str
    start: dt.date
    end: dt.date

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"period {self.name} ends before it starts")

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    @property
    def n_weeks(self) -> int:
        return -(-self.n_days // 7)

    def overlaps(self, start: dt.date, end: dt.date) -> bool:
        return start <= self.end and end >= self.start


STUDY_START = dt.date(2021, 6, 20)

DEFAULT_PERIODS: dict[str, StudyPeriod] = {
    "Delta": StudyPeriod("Delta", dt.date(2021, 6, 20), dt.date(2021, 9, 30)),
    "Omicron": StudyPeriod("Omicron", dt.date(2021, 12, 7), dt.date(2022, 2, 20)),
    "Overall": StudyPeriod("Overall", dt.date(2021, 6, 20), dt.date(2022, 2, 20)),
}


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected shared-border graph over MSOAs; edges stored as sorted pairs."""

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]] = frozenset()

    @classmethod
    def from_pairs(cls, nodes: Iterable[str], pairs: Iterable[tuple[str, str]]) -> "AdjacencyGraph":
        edges = set()
        for a, b in pairs:
            if a == b:
                raise ValueError(f"self-loop on {a!r}")
            edges.add((a, b) if a < b else (b, a))
        return cls(tuple(nodes), frozenset(edges))

    def has_edge(self, a: str, b: str) -> bool:
        return ((a, b) if a < b else (b, a)) in self.edges

    def neighbours(self, node: str) -> list[str]:
        out = [b for a, b in self.edges if a == node] + [a for a, b in self.edges if b == node]
        return sorted(out)

    def subgraph(self, nodes: Iterable[str]) -> "AdjacencyGraph":
        keep = list(dict.fromkeys(nodes))
        ks = set(keep)
        return AdjacencyGraph(tuple(keep), frozenset(e for e in self.edges if e[0] in ks and e[1] in ks))

    def laplacian(self, order: Iterable[str] | None = None) -> np.ndarray:
        order = list(self.nodes if order is None else order)
        pos = {m: i for i, m in enumerate(order)}
        L = np.zeros((len(order), len(order)))
        for a, b in self.edges:
            if a in pos and b in pos:
                i, j = pos[a], pos[b]
                L[i, j] -= 1.0
                L[j, i] -= 1.0
                L[i, i] += 1.0
                L[j, j] += 1.0
        return L

    def components(self) -> list[list[str]]:
        """Connected components, each in breadth-first order from its first node."""
        adj: dict[str, list[str]] = {m: [] for m in self.nodes}
        for a, b in sorted(self.edges):
            adj[a].append(b)
            adj[b].append(a)
        seen: set[str] = set()
        comps = []
        for start in self.nodes:
            if start in seen:
                continue
            comp, queue = [], [start]
            seen.add(start)
            while queue:
                node = queue.pop(0)
                comp.append(node)
                for nb in adj[node]:
                    if nb not in seen:
                        seen.add(nb)
                        queue.append(nb)
            comps.append(comp)
        return comps


@dataclass(frozen=True)
class World:
    """Validated static tables. Treat every frame as read-only."""

    msoas: pd.DataFrame
    workzones: pd.DataFrame
    workplaces: pd.DataFrame
    sic: pd.DataFrame
    adjacency: AdjacencyGraph
    periods: Mapping[str, StudyPeriod] = field(default_factory=lambda: dict(DEFAULT_PERIODS))

    @property
    def msoa_ids(self) -> tuple[str, ...]:
        return tuple(self.msoas["msoa"])

    @property
    def linked_workplaces(self) -> pd.DataFrame:
        return self.workplaces[self.workplaces["sector"].notna()]

    def linkage_report(self) -> dict:
        n = len(self.workplaces)
        linked = int(self.workplaces["sector"].notna().sum())
        return {
            "n_workplaces": n,
            "n_linked": linked,
            "n_unlinked": n - linked,
            "dropped_fraction": (n - linked) / n if n else 0.0,
        }

    def workplace_counts(self) -> pd.DataFrame:
        """Number of industry-linked UPRNs per (msoa, industry)."""
        wp = self.linked_workplaces
        out = wp.groupby(["msoa", "sector"], observed=True).size().rename("n_workplaces").reset_index()
        return out.rename(columns={"sector": "industry"})


WORLD_FILES = {
    "msoas": "msoas.csv",
    "workzones": "workzones.csv",
    "workplaces": "workplaces.csv",
    "sic": "sic.csv",
    "adjacency": "adjacency.csv",
}
OPTIONAL_WORLD_FILES = {"periods": "periods.csv"}

_COLUMNS = {
    "msoas": ["msoa", "population_18_64", "imd_quintile", "mobility_levels"],
    "workzones": ["workzone", "msoa"],
    "workplaces": ["uprn", "msoa", "workzone", "sic_division", "employees"],
    "sic": ["sic_division", "sector", "proximity", "permanence"],
    "adjacency": ["msoa_a", "msoa_b"],
    "periods": ["name", "start", "end"],
}


def read_table(path: Path, columns: list[str]) -> list[dict[str, str]]:
    """Read a UTF-8 CSV into row dicts after checking the header carries ``columns``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaViolation(path.name, f"missing columns {missing}", row=1)
        return [dict(r) for r in reader]


def _int(value: str, file: str, row: int, column: str, lo=None, hi=None) -> int:
    try:
        f = float(value)
        if not f.is_integer():
            raise ValueError
        out = int(f)
    except (TypeError, ValueError):
        raise SchemaViolation(file, f"expected an integer, got {value!r}", row, column) from None
    if (lo is not None and out < lo) or (hi is not None and out > hi):
        raise SchemaViolation(file, f"value {out} outside [{lo}, {hi}]", row, column)
    return out


def _float(value: str, file: str, row: int, column: str, lo=None, hi=None) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise SchemaViolation(file, f"expected a number, got {value!r}", row, column) from None
    if not np.isfinite(out) or (lo is not None and out < lo) or (hi is not None and out > hi):
        raise SchemaViolation(file, f"value {value} outside [{lo}, {hi}]", row, column)
    return out


def _nonempty(value: str, file: str, row: int, column: str) -> str:
    value = (value or "").strip()
    if not value:
        raise SchemaViolation(file, "empty identifier", row, column)
    return value


def _date(value: str, file: str, row: int, column: str) -> dt.date:
    try:
        return dt.date.fromisoformat(value.strip())
    except (AttributeError, ValueError):
        raise SchemaViolation(file, f"expected an ISO-8601 date, got {value!r}", row, column) from None


def resolve_paths(paths: str | Path | Mapping[str, str | Path]) -> dict[str, Path]:
    """Accept a directory or an explicit ``{table: path}`` mapping."""
    if isinstance(paths, Mapping):
        out = {k: Path(v) for k, v in paths.items()}
    else:
        base = Path(paths)
        out = {k: base / v for k, v in WORLD_FILES.items()}
        for k, v in OPTIONAL_WORLD_FILES.items():
            if (base / v).is_file():
                out[k] = base / v
    return out


def load_world(paths: str | Path | Mapping[str, str | Path]) -> World:
    files = resolve_paths(paths)
    for key in WORLD_FILES:
        if key not in files:
            raise MissingFile(WORLD_FILES[key])
        if not files[key].is_file():
            raise MissingFile(files[key])

    # msoas.csv; rows are numbered from the header (row 1)
    fname = files["msoas"].name
    msoa_rows = []
    for i, r in enumerate(read_table(files["msoas"], _COLUMNS["msoas"]), start=2):
        code = _nonempty(r["msoa"], fname, i, "msoa")
        levels_raw = (r["mobility_levels"] or "").strip()
        if not levels_raw:
            raise SchemaViolation(fname, "no mobility levels", i, "mobility_levels")
        levels = [_int(x, fname, i, "mobility_levels", 1, 8) for x in levels_raw.split(";")]
        msoa_rows.append({
            "msoa": code,
            "population_18_64": _int(r["population_18_64"], fname, i, "population_18_64", lo=1),
            "imd_quintile": _int(r["imd_quintile"], fname, i, "imd_quintile", 1, 5),
            "mobility_levels": tuple(levels),
            "mobility_class": msoa_mobility(levels, code).value,
        })
    codes = [r["msoa"] for r in msoa_rows]
    dup = [c for c, n in Counter(codes).items() if n > 1]
    if dup:
        raise SchemaViolation(fname, f"duplicate MSOA ids {dup}", column="msoa")
    known_msoas = set(codes)

    fname = files["workzones"].name
    wz_rows = []
    for i, r in enumerate(read_table(files["workzones"], _COLUMNS["workzones"]), start=2):
        wz = _nonempty(r["workzone"], fname, i, "workzone")
        parent = _nonempty(r["msoa"], fname, i, "msoa")
        if parent not in known_msoas:
            raise DanglingReference("workzone", wz, parent, fname)
        wz_rows.append({"workzone": wz, "msoa": parent})
    dup = [c for c, n in Counter(r["workzone"] for r in wz_rows).items() if n > 1]
    if dup:
        raise SchemaViolation(fname, f"workzone listed more than once {dup}", column="workzone")
    wz_parent = {r["workzone"]: r["msoa"] for r in wz_rows}

    fname = files["sic"].name
    sic_rows = []
    for i, r in enumerate(read_table(files["sic"], _COLUMNS["sic"]), start=2):
        try:
            sector = parse_sector(r["sector"])
        except ValueError:
            raise DanglingReference("SIC division", r["sic_division"], r["sector"], fname) from None
        sic_rows.append({
            "sic_division": _int(r["sic_division"], fname, i, "sic_division", 1, 99),
            "sector": sector.value,
            "proximity": _float(r["proximity"], fname, i, "proximity", 0.0, 100.0),
            "permanence": _float(r["permanence"], fname, i, "permanence", 0.0, 1.0),
        })
    dup = [c for c, n in Counter(r["sic_division"] for r in sic_rows).items() if n > 1]
    if dup:
        raise SchemaViolation(fname, f"SIC division listed more than once {dup}", column="sic_division")
    sic_sector = {r["sic_division"]: r["sector"] for r in sic_rows}

    fname = files["workplaces"].name
    wp_rows = []
    for i, r in enumerate(read_table(files["workplaces"], _COLUMNS["workplaces"]), start=2):
        uprn = _nonempty(r["uprn"], fname, i, "uprn")
        msoa = _nonempty(r["msoa"], fname, i, "msoa")
        wz = _nonempty(r["workzone"], fname, i, "workzone")
        if msoa not in known_msoas:
            raise DanglingReference("UPRN", uprn, msoa, fname)
        if wz not in wz_parent:
            raise DanglingReference("UPRN", uprn, wz, fname)
        if wz_parent[wz] != msoa:
            raise SchemaViolation(fname, f"workzone {wz} belongs to {wz_parent[wz]}, not {msoa}", i, "workzone")
        raw_div = (r["sic_division"] or "").strip()
        if raw_div:
            div = _int(raw_div, fname, i, "sic_division", 1, 99)
            if div not in sic_sector:
                raise DanglingReference("UPRN", uprn, f"SIC {div}", fname)
            sector = sic_sector[div]
        else:
            div, sector = None, None
        wp_rows.append({
            "uprn": uprn,
            "msoa": msoa,
            "workzone": wz,
            "sic_division": div,
            "employees": _int(r["employees"], fname, i, "employees", lo=0),
            "sector": sector,
        })
    dup = [c for c, n in Counter(r["uprn"] for r in wp_rows).items() if n > 1]
    if dup:
        raise SchemaViolation(fname, f"duplicate UPRNs {dup[:5]}", column="uprn")

    fname = files["adjacency"].name
    pairs = []
    for i, r in enumerate(read_table(files["adjacency"], _COLUMNS["adjacency"]), start=2):
        a = _nonempty(r["msoa_a"], fname, i, "msoa_a")
        b = _nonempty(r["msoa_b"], fname, i, "msoa_b")
        for code, col in ((a, "msoa_a"), (b, "msoa_b")):
            if code not in known_msoas:
                raise DanglingReference("adjacency edge", f"{a}-{b}", code, fname)
        if a == b:
            raise SchemaViolation(fname, "self-loop", i, "msoa_b")
        pairs.append((a, b))
    graph = AdjacencyGraph.from_pairs(codes, pairs)

    periods = dict(DEFAULT_PERIODS)
    if "periods" in files:
        fname = files["periods"].name
        for i, r in enumerate(read_table(files["periods"], _COLUMNS["periods"]), start=2):
            name = _nonempty(r["name"], fname, i, "name")
            try:
                periods[name] = StudyPeriod(name, _date(r["start"], fname, i, "start"), _date(r["end"], fname, i, "end"))
            except ValueError as exc:
                raise SchemaViolation(fname, str(exc), i, "end") from None

    workplaces = pd.DataFrame(wp_rows, columns=["uprn", "msoa", "workzone", "sic_division", "employees", "sector"])
    workplaces["sic_division"] = workplaces["sic_division"].astype("Int64")
    return World(
        msoas=pd.DataFrame(msoa_rows),
        workzones=pd.DataFrame(wz_rows, columns=["workzone", "msoa"]),
        workplaces=workplaces,
        sic=pd.DataFrame(sic_rows, columns=["sic_division", "sector", "proximity", "permanence"]),
        adjacency=graph,
        periods=periods,
    )
