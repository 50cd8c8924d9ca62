"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines are printed in the
terminal summary) or as a script, ``python tests/test_acceptance.py``.
Tolerances are the pinned acceptance tolerances; nothing is loosened here.
"""
from __future__ import annotations

import datetime as dt
import math
import random
import shutil
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crp.cli import main as crp_main  # noqa: E402
from crp.clusters import CaseEvent, chain_events, detect_clusters, load_events, week_starts, weekly_series  # noqa: E402
from crp.exposure import build_covariates, commuter_case_rate, load_exposure_inputs  # noqa: E402
from crp.gam import (  # noqa: E402
    CubicRegressionSpline,
    GamSpec,
    build_design,
    complete_counts,
    fit_gam,
    load_tests,
    pirls,
    smooth_case_rates,
    weekly_rates,
)
from crp.nbglm import NegativeBinomialGLM, fit_nb, wald_ci  # noqa: E402
from crp.report import estimate_table  # noqa: E402
from crp.study import RISK_FACTORS, DagConfig, Tier, assemble, build_plan, term_group  # noqa: E402
from crp.synthgen import GenSpec, synthesize  # noqa: E402
from crp.taxonomy import AdjacencyGraph, load_world  # noqa: E402

from oracles import chain_oracle, penalized_ls, poisson_irls  # noqa: E402

START = dt.date(2021, 6, 20)
RESULTS: dict[int, str] = {}


def _events(days):
    return [CaseEvent(START + dt.timedelta(days=int(d)), "U1", f"c{i}") for i, d in enumerate(days)]


def _spans(clusters):
    return sorted(((c.first_date - START).days, (c.last_date - START).days, len(c.events)) for c in clusters)


def criterion_1():
    rng = random.Random(20210620)
    streams = []
    for _ in range(10_000):
        n = rng.randint(0, 50)
        days = list(np.cumsum([rng.randint(0, 14) for _ in range(n)])) if n else []
        rng.shuffle(days)
        streams.append(days)
    t0 = time.perf_counter()
    got = [_spans(chain_events(_events(d))) for d in streams]
    engine_s = time.perf_counter() - t0
    mismatches = sum(g != chain_oracle(d) for g, d in zip(got, streams))
    total_s = time.perf_counter() - t0
    ok = mismatches == 0 and total_s < 10.0
    return ok, f"10000 streams, {mismatches} mismatches, engine {engine_s:.2f}s, with oracle {total_s:.2f}s (< 10s)"


def criterion_2():
    six = _spans(chain_events(_events([0, 6])))
    seven = _spans(chain_events(_events([0, 7])))
    ok = six == [(0, 6, 2)] and seven == []
    return ok, f"gap 6 -> {six}; gap 7 -> {seven}"


def criterion_3():
    rng = np.random.default_rng(3)
    bound_fail = scale_fail = 0
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 21))
        n = rng.integers(0, 1000, k).astype(float)
        n[rng.integers(k)] += 1
        rates = rng.uniform(0, 1, k)
        c = commuter_case_rate(n, rates)
        pos = rates[n > 0]
        bound_fail += not (pos.min() <= c <= pos.max())
        s = float(rng.uniform(0.01, 100))
        cs = commuter_case_rate(n * s, rates)
        rel = abs(cs - c) / abs(c) if c else abs(cs)
        worst = max(worst, rel)
        scale_fail += rel > 1e-9
    hand = commuter_case_rate([100, 300], [0.1, 0.2])
    ok = bound_fail == 0 and scale_fail == 0 and hand == 0.175
    return ok, f"1000 fixtures: bound violations {bound_fail}, scale rel err max {worst:.1e} (<= 1e-9); hand case {hand!r}"


def criterion_4():
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0, 1, 20))
    spl = CubicRegressionSpline(np.linspace(0, 1, 6))
    X = spl.basis(x)
    y = np.sin(3 * x) + rng.normal(0, 0.1, 20)
    S = 0.5 * spl.penalty + 1e-3 * np.eye(6)
    err = np.max(np.abs(pirls(X, y, None, S, family="gaussian", tol=1e-12).beta - penalized_ls(X, y, S)))
    return err <= 1e-8, f"20x6 instance, max-abs diff {err:.1e} (<= 1e-8)"


def criterion_5():
    rng = np.random.default_rng(5)
    names = ["A", "B", "C"]
    g = AdjacencyGraph.from_pairs(names, [("A", "B"), ("B", "C")])
    t = np.arange(84) / 83
    rows = []
    for i, m in enumerate(names):
        y = rng.poisson(20 * np.exp(np.sin(4 * t) + 0.2 * (i - 1)))
        rows += [(m, START + dt.timedelta(days=d), int(v), 10_000) for d, v in enumerate(y)]
    df = pd.DataFrame(rows, columns=["msoa", "date", "n_positive", "population_18_64"])
    spec = GamSpec(k=6)
    f1 = fit_gam(build_design(df, spec, g), spec)
    f2 = fit_gam(build_design(df.assign(population_18_64=20_000), spec, g), spec)
    shift = np.max(np.abs(f2.alpha - f1.alpha + np.log(2)))
    weeks = [START + dt.timedelta(days=7 * k) for k in range(12)]
    ratio = weekly_rates(f2, weeks)["lambda_bar"].to_numpy() / weekly_rates(f1, weeks)["lambda_bar"].to_numpy()
    rel = np.max(np.abs(ratio / 0.5 - 1))
    ok = shift <= 1e-6 and rel <= 1e-6
    return ok, f"alpha shift error {shift:.1e} (<= 1e-6); lambda_bar ratio rel error {rel:.1e} (<= 1e-6)"


def criterion_6():
    rng = np.random.default_rng(6)
    closed = 0.0
    for _ in range(20):
        y = rng.negative_binomial(2.0, 0.4, int(rng.integers(5, 500))).astype(float)
        if y.sum() == 0:
            y[0] = 1
        m = NegativeBinomialGLM().fit(np.empty((len(y), 0)), y)
        closed = max(closed, abs(m.intercept_ - math.log(y.mean())))
    n, diffs, limit = 2000, [], 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(100):
            X = rng.normal(size=(n, 2))
            off = np.log(rng.integers(1, 20, n))
            y = rng.poisson(np.exp(-2 + X @ [0.3, -0.2] + off)).astype(float)
            m = NegativeBinomialGLM().fit(X, y, offset=off)
            ref = poisson_irls(np.column_stack([np.ones(n), X]), y, off)
            diffs.append(float(np.max(np.abs(m.params_ - ref))))
            limit += bool(m.poisson_limit_)
    diffs = np.array(diffs)
    agree = int((diffs <= 1e-4).sum())
    ok = closed <= 1e-8 and agree == 100 and limit >= 80
    return ok, (f"intercept-only max err {closed:.1e} (<= 1e-8); Poisson data: {agree}/100 within 1e-4 of Poisson IRLS "
                f"(max {diffs.max():.1e}), theta-divergence path {limit}/100 (>= 80)")


def criterion_7():
    rng = np.random.default_rng(7)
    beta, theta, n = np.array([-2.0, 0.05]), 1.5, 5000
    cover = np.zeros(2, dtype=int)
    t0 = time.perf_counter()
    for _ in range(500):
        x = rng.uniform(0, 20, n)
        off = np.log(rng.integers(1, 20, n))
        mu = np.exp(beta[0] + beta[1] * x + off)
        y = rng.negative_binomial(theta, theta / (theta + mu))
        m = NegativeBinomialGLM().fit(x[:, None], y, offset=off)
        lo, hi = wald_ci(m.params_, np.sqrt(np.diag(m.cov_params_)))
        cover += (lo <= beta) & (beta <= hi)
    secs = time.perf_counter() - t0
    pct = 100 * cover / 500
    ok = bool(np.all((pct >= 86) & (pct <= 94))) and secs < 300
    return ok, f"500 replicates: coverage intercept {pct[0]:.1f}%, slope {pct[1]:.1f}% (86-94%), {secs:.0f}s (< 300s)"


def _pipeline_replicate(seed: int, root: Path) -> dict[str, bool]:
    d = root / f"w{seed}"
    spec = GenSpec(n_msoas=100, n_weeks=36, seed=seed)
    synthesize(spec, d)
    world = load_world(d)
    ev, _ = load_events(d / "events.csv")
    series, _ = weekly_series(detect_clusters(ev), world, spec.start, spec.n_weeks, spec.warmup_weeks)
    first = spec.start - dt.timedelta(days=7 * spec.warmup_weeks)
    last = spec.start + dt.timedelta(days=7 * spec.n_weeks - 1)
    counts = complete_counts(load_tests(d / "tests.csv"), world, first, last)
    rates, _ = smooth_case_rates(counts, world.adjacency, week_starts(spec.start, spec.n_weeks, spec.warmup_weeks),
                                 GamSpec())
    cov = build_covariates(world, series, rates, load_exposure_inputs(d, world))
    plan = build_plan("proximity", tier=Tier.FULLY_ADJUSTED)
    truth = math.log(1.05)
    out = {}
    for ind in spec.industries:
        f = fit_nb(assemble(cov, series, plan, ind, "Overall"), warn=False)
        i = f.names.index("proximity")
        lo, hi = wald_ci(f.params[i], f.se[i])
        out[ind] = bool(lo <= truth <= hi)
    shutil.rmtree(d)
    return out


def criterion_8():
    t0 = time.perf_counter()
    hits: dict[str, int] = {}
    with tempfile.TemporaryDirectory() as tmp, warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in range(200):
            for ind, ok in _pipeline_replicate(5000 + r, Path(tmp)).items():
                hits[ind] = hits.get(ind, 0) + ok
    secs = time.perf_counter() - t0
    pooled = 100 * sum(hits.values()) / (200 * len(hits))
    per = ", ".join(f"{k.split(',')[0]} {100 * v / 200:.1f}%" for k, v in hits.items())
    ok = pooled >= 86 and secs < 1800
    return ok, f"200 replicates x {len(hits)} industries, tier-3 proximity CI covers +5%: pooled {pooled:.1f}% (>= 86%) [{per}], {secs:.0f}s (< 1800s)"


def criterion_9():
    checked = 0
    import itertools
    for order in itertools.permutations(["commuter", "travel", "workplace"]):
        dag = DagConfig(order=("residential", *order))
        for rf in RISK_FACTORS:
            sets = [set(build_plan(rf.name, dag, t).columns) for t in Tier]
            if not (sets[0] < sets[1] <= sets[2]):
                return False, f"tier chain broken for {rf.name} under {order}"
            for t in Tier:
                if any(term_group(c) is rf.group for c in build_plan(rf.name, dag, t).adjusters):
                    return False, f"same-group adjuster for {rf.name} tier {int(t)} under {order}"
            checked += 3
    return True, f"{checked} plans ({len(RISK_FACTORS)} factors x 3 tiers x 6 orders): nested, no same-group adjusters"


def criterion_10():
    from test_report import GOLDEN, golden_fits

    got = estimate_table(golden_fits(), 3).astype(str)
    want = pd.read_csv(GOLDEN, keep_default_na=False, dtype=str)
    diff = 0 if list(got.columns) != list(want.columns) else int((got.to_numpy() != want.to_numpy()).sum())
    ok = list(got.columns) == list(want.columns) and diff == 0
    return ok, f"golden table with Mining and Quarrying NA pattern: {diff} differing cells, columns match {list(got.columns) == list(want.columns)}"


def criterion_11():
    from test_cli import CHAIN, write_config

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        gen = write_config(tmp / "gen.yaml")
        if crp_main(["synth", "--config", str(gen), "--out", str(tmp / "g"), "--seed", "11", "--quiet"]):
            return False, "synth failed"
        cfg = write_config(tmp / "c.yaml", tmp / "g" / "synth")
        runs = []
        for label, threads in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp / label
            codes = [crp_main([s, "--config", str(cfg), "--out", str(out), "--threads", str(threads), "--quiet"])
                     for s in CHAIN + ("report",)]
            if any(codes):
                return False, f"pipeline exit codes {codes}"
            runs.append({p.relative_to(out): p.read_bytes() for p in out.rglob("*")
                         if p.is_file() and p.parent.name != "manifests"})
        same_runs = runs[0] == runs[1]
        same_threads = runs[0] == runs[2]
    return same_runs and same_threads, (f"{len(runs[0])} output files: repeat run identical {same_runs}, "
                                        f"threads 1 vs 4 identical {same_threads}")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 12)}


@pytest.fixture(scope="module", autouse=True)
def _summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    if tr is not None and RESULTS:
        tr.write_line("")
        tr.write_line("acceptance criteria:")
        for i in sorted(RESULTS):
            tr.write_line(RESULTS[i])


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail = CRITERIA[number]()
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS[number] = line
    print(line)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for i, fn in CRITERIA.items():
        ok, detail = fn()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {i}: {detail}", flush=True)
    sys.exit(1 if failed else 0)
