"""Render fit results and descriptives as the published-style tables.

Estimate cells read ``point (lo,hi)`` with every number at two significant
figures in general format, so 100 prints as ``1e+02``. Ineligible
(industry, variable) pairs print ``NA``; cells whose fit failed print
``NA*``.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pandas as pd

from .study import DESCRIPTIVE_ROWS, RISK_FACTORS, _PCT_ROWS
from .taxonomy import SECTOR_NAMES

NA = "NA"
NA_FAILED = "NA*"
BASELINE = "baseline"
TABLE_FILES = {"table3.csv": 3, "tableS1.csv": 1, "tableS2.csv": 2}
TABLE_TITLES = {
    1: "Unadjusted model, percentage change in risk by industry",
    2: "Minimal adjusted model, percentage change in risk by industry",
    3: "Fully adjusted model, percentage change in risk by industry",
}
FOOTNOTE = "NA: variable not modelled for this industry. NA*: model failed to fit. Confidence intervals are 90%."


def sig2(x: float) -> str:
    return format(float(x), ".2g")


def format_cell(pct: float, lo: float, hi: float) -> str:
    return f"{sig2(pct)} ({sig2(lo)},{sig2(hi)})"


def _cell_text(row) -> str:
    status = str(row["status"])
    if status == "baseline":
        return BASELINE
    if status == "ineligible":
        return NA
    vals = [row["pct"], row["pct_lo"], row["pct_hi"]]
    if status in ("ok", "nonconverged") and all(v == v and math.isfinite(float(v)) for v in vals):
        return format_cell(*map(float, vals))
    return NA_FAILED


def estimate_table(fits: pd.DataFrame, tier: int, main_period: str = "Overall") -> pd.DataFrame:
    """One results table (rows: section headers and terms, columns: industries)."""
    f = fits[fits["tier"].astype(int) == int(tier)]
    present = set(fits["industry"])
    industries = [s for s in SECTOR_NAMES if s in present]
    lookup = {(r["risk_factor"], r["period"], r["term"], r["industry"]): _cell_text(r) for _, r in f.iterrows()}
    names = list(dict.fromkeys(fits["risk_factor"]))
    rows = []
    for rf in RISK_FACTORS:
        if rf.name not in names:
            continue
        rows.append([rf.section] + [""] * len(industries))
        periods = rf.periods if rf.periods is not None else (main_period,)
        for term, label in rf.rows:
            for period in periods:
                text = label if rf.periods is None else f"{label} - {period}"
                cells = [lookup.get((rf.name, period, term, ind), NA) for ind in industries]
                rows.append([text] + cells)
    return pd.DataFrame(rows, columns=["Variable"] + industries)


def _fmt_desc(key: str, value) -> str:
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return NA
    if key == "n_workplaces":
        return f"{int(value):,}"
    if key in ("commuter_imd_mode", "resident_imd", "mobility_class"):
        return str(value)
    if key == "proximity":
        return f"{value:.0f}"
    if key == "permanence":
        return f"{value:.0f}%"
    if key in _PCT_ROWS:
        return f"{value:.1f}%"
    return f"{value:.2f}"


def descriptive_table(desc: pd.DataFrame) -> pd.DataFrame:
    industries = list(desc.columns)
    rows = []
    for key, label in DESCRIPTIVE_ROWS:
        if key == "section":
            rows.append([label] + [""] * len(industries))
        else:
            rows.append([label] + [_fmt_desc(key, desc.at[key, ind]) for ind in industries])
    return pd.DataFrame(rows, columns=["Variable"] + industries)


def to_markdown(table: pd.DataFrame, title: str | None = None) -> str:
    def esc(s):
        return str(s).replace("|", "\\|")

    lines = []
    if title:
        lines += [f"### {title}", ""]
    lines.append("| " + " | ".join(esc(c) for c in table.columns) + " |")
    lines.append("|" + "|".join("---" for _ in table.columns) + "|")
    for row in table.itertuples(index=False):
        lines.append("| " + " | ".join(esc(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def read_fits(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, na_values=[""], dtype={"period": str, "term": str})


def render_tables(fits: pd.DataFrame, desc: pd.DataFrame | None = None,
                  main_period: str = "Overall") -> dict[str, pd.DataFrame]:
    tables = {}
    if desc is not None:
        tables["table2.csv"] = descriptive_table(desc)
    for name, tier in TABLE_FILES.items():
        tables[name] = estimate_table(fits, tier, main_period)
    return tables


def markdown_report(tables: dict[str, pd.DataFrame]) -> str:
    parts = []
    if "table2.csv" in tables:
        parts.append(to_markdown(tables["table2.csv"], "Descriptive summary by industry"))
    for name, tier in TABLE_FILES.items():
        if name in tables:
            parts.append(to_markdown(tables[name], TABLE_TITLES[tier]))
    parts.append(FOOTNOTE + "\n")
    return "\n".join(parts)

