from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crp.report import (
    FOOTNOTE,
    descriptive_table,
    estimate_table,
    format_cell,
    markdown_report,
    read_fits,
    render_tables,
    sig2,
    to_markdown,
)
from crp.study import DESCRIPTIVE_ROWS, FIT_COLUMNS

GOLDEN = Path(__file__).parent / "fixtures" / "golden_table3.csv"
NAN = np.nan


def fit_row(rf, term, industry, status, pct=NAN, lo=NAN, hi=NAN, period="Overall", tier=3):
    row = dict.fromkeys(FIT_COLUMNS, NAN)
    row.update(industry=industry, risk_factor=rf, tier=tier, period=period, term=term, status=status,
               pct=pct, pct_lo=lo, pct_hi=hi)
    return row


def golden_fits() -> pd.DataFrame:
    S, M = "Services", "Mining and Quarrying"
    rows = [
        fit_row("proximity", "proximity", S, "ok", 5.2987, 5.1234, 5.4961),
        fit_row("proximity", "proximity", M, "ineligible"),
        fit_row("permanence", "permanence", S, "ok", -0.01234, -0.02, -0.0049),
        fit_row("permanence", "permanence", M, "ineligible"),
        fit_row("vaccination", "vacc_two_doses", S, "ok", -2.96, -4.49, -1.449, period="Delta"),
        fit_row("vaccination", "vacc_two_doses", M, "ok", 0.0, -1.0, 1.0, period="Delta"),
        fit_row("vaccination", "vacc_two_doses", M, "failed:EmptyModelFrame", period="Omicron"),
        fit_row("sex", "sex_female", S, "ok", 123.4, 98.76, 150.1),
        fit_row("sex", "sex_male", S, "baseline"),
        fit_row("sex", "sex_female", M, "failed:RankDeficient"),
        fit_row("sex", "sex_male", M, "failed:RankDeficient"),
        # other tiers must not leak into the tier-3 table
        fit_row("proximity", "proximity", S, "ok", 99.0, 98.0, 100.0, tier=1),
    ]
    return pd.DataFrame(rows, columns=FIT_COLUMNS)


def test_golden_table():
    got = estimate_table(golden_fits(), 3)
    want = pd.read_csv(GOLDEN, keep_default_na=False, dtype=str)
    assert list(got.columns) == list(want.columns)
    pd.testing.assert_frame_equal(got.astype(str).reset_index(drop=True), want)


def test_golden_table_round_trips_through_csv(tmp_path):
    p = tmp_path / "fits.csv"
    golden_fits().to_csv(p, index=False)
    got = estimate_table(read_fits(p), 3)
    want = pd.read_csv(GOLDEN, keep_default_na=False, dtype=str)
    pd.testing.assert_frame_equal(got.astype(str), want)


def test_sig2_examples():
    assert format_cell(5.2987, 5.1234, 5.4961) == "5.3 (5.1,5.5)"
    assert sig2(0.0) == "0"
    assert sig2(100) == "1e+02"
    assert sig2(-0.000123) == "-0.00012"


@given(st.floats(-1e6, 1e6, allow_nan=False).filter(lambda x: x != 0))
def test_sig2_has_two_significant_figures(x):
    s = sig2(x)
    assert float(s) == pytest.approx(x, rel=0.051)
    mantissa = s.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
    assert 1 <= len(mantissa) <= 2


def test_markdown_rendering():
    table = estimate_table(golden_fits(), 3)
    md = to_markdown(table, "Title")
    lines = md.splitlines()
    assert lines[0] == "### Title"
    assert lines[2] == "| Variable | Services | Mining and Quarrying |"
    assert lines[3] == "|---|---|---|"
    assert "| Physical proximity in the workplace | 5.3 (5.1,5.5) | NA |" in lines
    escaped = to_markdown(pd.DataFrame({"a": ["x|y"]}))
    assert "x\\|y" in escaped
    full = markdown_report(render_tables(golden_fits()))
    assert full.rstrip().endswith(FOOTNOTE)
    assert full.count("### ") == 3


def test_descriptive_table_formatting():
    keys = [k for k, _ in DESCRIPTIVE_ROWS if k != "section"]
    values = {k: 12.345 for k in keys}
    values.update(n_workplaces=1149007, proximity=54.6, permanence=91.2, mobility_class="Suburban",
                  commuter_imd_mode=3, resident_imd=2, vacc_two_doses=float("nan"))
    desc = pd.DataFrame({"Services": values}).loc[keys]
    t = descriptive_table(desc).set_index("Variable")["Services"]
    assert t["Total number of workplaces included"] == "1,149,007"
    assert t["Mean physical proximity in the workplace"] == "55"
    assert t["Mean proportion of workers on permanent contracts"] == "91%"
    assert t["Most common mobility class"] == "Suburban"
    assert t["Mean proportion of commuters aged 18-29"] == "12.3%"
    assert t["Mean number of active clusters"] == "12.35"
    assert t["Mean proportion of commuters with 2 or more vaccination doses"] == "NA"
    assert t["Workplace characteristics"] == ""
