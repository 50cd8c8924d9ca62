import datetime as dt
import warnings
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from sklearn.base import clone

from crp.exceptions import InsufficientData
from crp.gam import (
    DEFAULT_GRID,
    CaseRateGAM,
    CubicRegressionSpline,
    GamSpec,
    build_design,
    complete_counts,
    fit_gam,
    load_tests,
    make_batches,
    pirls,
    select_penalties,
    smooth_case_rates,
    weekly_rates,
)
from crp.taxonomy import AdjacencyGraph

from conftest import START, write_csv
from oracles import penalized_ls


def counts_frame(y_by_msoa: dict, pop: dict | None = None, start=START) -> pd.DataFrame:
    rows = []
    for m, ys in y_by_msoa.items():
        for d, y in enumerate(ys):
            rows.append((m, start + dt.timedelta(days=d), int(y), (pop or {}).get(m, 10_000)))
    return pd.DataFrame(rows, columns=["msoa", "date", "n_positive", "population_18_64"])


def simulate(rng, msoas=("A",), n_days=84, rate=2e-3, curve=None, field=None, pop=10_000, dow=None):
    t = np.arange(n_days) / (n_days - 1)
    data = {}
    for i, m in enumerate(msoas):
        eta = np.log(rate * pop) + (curve(t) if curve is not None else 0 * t)
        if field is not None:
            eta = eta + field[i]
        if dow is not None:
            eta = eta + dow[[(START + dt.timedelta(days=int(d))).weekday() for d in range(n_days)]]
        data[m] = rng.poisson(np.exp(eta))
    return counts_frame(data, {m: pop for m in msoas})


def test_spline_interpolates_natural_cubic():
    knots = np.array([0.0, 0.1, 0.35, 0.5, 0.8, 1.0])
    spl = CubicRegressionSpline(knots)
    rng = np.random.default_rng(0)
    v = rng.normal(size=len(knots))
    x = np.linspace(0, 1, 201)
    ref = CubicSpline(knots, v, bc_type="natural")
    np.testing.assert_allclose(spl.basis(x) @ v, ref(x), atol=1e-12)
    np.testing.assert_allclose(spl.basis(knots), np.eye(len(knots)), atol=1e-12)
    # penalty is the integrated squared second derivative
    integral = sum(quad(lambda s: ref(s, 2) ** 2, a, b)[0] for a, b in zip(knots, knots[1:]))
    assert v @ spl.penalty @ v == pytest.approx(integral, rel=1e-9)
    # linear functions lie in the penalty null space and continue linearly outside the knots
    lin = 2.0 + 3.0 * knots
    assert abs(lin @ spl.penalty @ lin) < 1e-9
    np.testing.assert_allclose(spl.basis([-0.5, 1.5]) @ lin, [0.5, 6.5], atol=1e-12)


def test_spline_rejects_bad_knots():
    with pytest.raises(ValueError):
        CubicRegressionSpline([0.0, 0.0, 1.0])


def test_gamspec_validation():
    with pytest.raises(ValueError):
        GamSpec(k=3)
    with pytest.raises(ValueError):
        GamSpec(lam_time=-1)
    with pytest.raises(ValueError):
        GamSpec(tol=0)


def test_build_design_single_msoa():
    df = counts_frame({"A": np.ones(30)})
    des = build_design(df, GamSpec(k=4), AdjacencyGraph(("A",)))
    assert des.raw_spline_blocks[0].shape == (30, 4)
    np.testing.assert_array_equal(des.laplacian, [[0.0]])
    assert des.X.shape == (30, 1 + 1 + 1 + 3 + 6)
    np.testing.assert_allclose(des.offset, np.log(10_000))


def test_build_design_two_neighbours_and_path():
    df = counts_frame({"A": np.ones(20), "B": np.ones(20)})
    des = build_design(df, GamSpec(k=4), AdjacencyGraph.from_pairs(["A", "B"], [("A", "B")]))
    np.testing.assert_array_equal(des.laplacian, [[1, -1], [-1, 1]])
    names = list("ABCDE")
    g = AdjacencyGraph.from_pairs(names, list(zip(names, names[1:])))
    des = build_design(counts_frame({m: np.ones(20) for m in names}), GamSpec(k=4), g)
    np.testing.assert_array_equal(des.laplacian.sum(axis=1), 0)


def test_build_design_insufficient_and_isolated():
    with pytest.raises(InsufficientData):
        build_design(counts_frame({"A": np.ones(5)}), GamSpec(k=10), AdjacencyGraph(("A",)))
    with pytest.warns(UserWarning, match="isolated"):
        build_design(counts_frame({"A": np.ones(20), "B": np.ones(20)}), GamSpec(k=4), AdjacencyGraph(("A",)))


def test_gaussian_analogue_matches_dense_solve():
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0, 1, 20))
    spl = CubicRegressionSpline(np.linspace(0, 1, 6))
    X = spl.basis(x)
    assert X.shape == (20, 6)
    y = np.sin(3 * x) + rng.normal(0, 0.1, 20)
    S = 0.5 * spl.penalty + 1e-3 * np.eye(6)
    res = pirls(X, y, None, S, family="gaussian", tol=1e-12)
    np.testing.assert_allclose(res.beta, penalized_ls(X, y, S), atol=1e-8, rtol=0)


def test_gaussian_family_design_matches_dense_solve():
    rng = np.random.default_rng(5)
    df = counts_frame({"A": rng.integers(0, 20, 20)})
    spec = GamSpec(k=4, family="gaussian", lam_time=0.3, lam_dow=0.7)
    des = build_design(df, spec, AdjacencyGraph(("A",)))
    fit = fit_gam(des, spec)
    X = des.X.toarray()
    want = penalized_ls(X, des.y - des.offset, des.penalty(spec))
    np.testing.assert_allclose(fit.coef, want, atol=1e-8, rtol=0)


def test_heavy_penalty_limit():
    c, P = 12, 10_000
    df = counts_frame({"A": np.full(60, c)}, {"A": P})
    spec = GamSpec(k=6, lam_time=1e8, lam_dow=1e8, lam_alpha=1e-8)
    fit = fit_gam(build_design(df, spec, AdjacencyGraph(("A",))), spec)
    assert fit.alpha[0] + fit.g[0] == pytest.approx(np.log(c / P), abs=1e-6)
    np.testing.assert_allclose(fit.dow, 0, atol=1e-6)


def _two_fits(df, adjacency, spec):
    des = build_design(df, spec, adjacency)
    return des, fit_gam(des, spec)


def test_offset_law():
    rng = np.random.default_rng(6)
    names = ["A", "B", "C"]
    g = AdjacencyGraph.from_pairs(names, [("A", "B"), ("B", "C")])
    df = simulate(rng, names, curve=lambda t: np.sin(4 * t), field=[0.2, -0.1, -0.1])
    spec = GamSpec(k=6)
    _, f1 = _two_fits(df, g, spec)
    _, f2 = _two_fits(df.assign(population_18_64=2 * df["population_18_64"]), g, spec)
    np.testing.assert_allclose(f2.alpha - f1.alpha, -np.log(2), atol=1e-6)
    np.testing.assert_allclose(f2.g, f1.g, atol=1e-6)
    weeks = [START + dt.timedelta(days=7 * k) for k in range(12)]
    r1, r2 = weekly_rates(f1, weeks), weekly_rates(f2, weeks)
    np.testing.assert_allclose(r2["lambda_bar"] / r1["lambda_bar"], 0.5, rtol=1e-6)


def test_constraints_and_identifiability():
    rng = np.random.default_rng(7)
    names = ["A", "B", "C", "D"]
    g = AdjacencyGraph.from_pairs(names, [("A", "B"), ("B", "C"), ("C", "D")])
    df = simulate(rng, names, curve=lambda t: np.cos(3 * t), field=[0.3, 0.1, -0.1, -0.3],
                  dow=np.array([0.1, 0.05, 0, 0, -0.05, -0.05, -0.05]))
    spec = GamSpec(k=6)
    des = build_design(df, spec, g)
    f1 = fit_gam(des, spec)
    f2 = fit_gam(des, spec, beta0=rng.normal(0, 0.5, des.n_coef) + f1.coef)
    assert abs(f1.g.sum()) < 1e-8
    assert abs(f1.dow.sum()) < 1e-12
    for a, b in [(f1.alpha, f2.alpha), (f1.g, f2.g), (f1.dow, f2.dow)]:
        np.testing.assert_allclose(a, b, atol=1e-6)
    # each MSOA's smooth is centred over its own data
    for m in range(len(names)):
        assert abs(f1.smooth(m, des.day[des.msoa_index == m]).sum()) < 1e-8
    # penalised deviance never increases across accepted steps
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(f1.trace, f1.trace[1:]))


def test_mrf_monotone_shrinkage():
    rng = np.random.default_rng(8)
    names = [f"M{i}" for i in range(6)]
    edges = list(zip(names, names[1:])) + [("M0", "M5")]
    g = AdjacencyGraph.from_pairs(names, edges)
    df = simulate(rng, names, field=rng.normal(0, 0.4, 6), n_days=42)
    des = build_design(df, GamSpec(k=5), g)
    E = [(names.index(a), names.index(b)) for a, b in g.edges]
    rough = []
    for lam in DEFAULT_GRID:
        fit = fit_gam(des, GamSpec(k=5, lam_mrf=lam, lam_alpha=10.0))
        rough.append(sum((fit.g[a] - fit.g[b]) ** 2 for a, b in E))
    assert all(b <= a + 1e-10 for a, b in zip(rough, rough[1:]))


def test_quasipoisson_equals_poisson_point_estimates():
    rng = np.random.default_rng(9)
    df = simulate(rng, ("A", "B"), curve=lambda t: 0.5 * t)
    g = AdjacencyGraph.from_pairs(["A", "B"], [("A", "B")])
    des = build_design(df, GamSpec(k=5), g)
    fq = fit_gam(des, GamSpec(k=5, family="quasipoisson"))
    fp = fit_gam(des, GamSpec(k=5, family="poisson"))
    np.testing.assert_allclose(fq.coef, fp.coef, atol=1e-10, rtol=0)
    assert fp.dispersion == 1.0
    np.testing.assert_allclose(fq.cov, fp.cov * fq.dispersion, rtol=1e-12)


def _fit_with(fit, alpha, g, coef_fn, dow=None):
    coefs = [coef_fn(spl.knots) for spl in fit.splines]
    return replace(fit, alpha=np.array(alpha, float), g=np.array(g, float), spline_coef=coefs,
                   dow=np.zeros(7) if dow is None else np.asarray(dow, float))


def test_weekly_rates_examples():
    des = build_design(counts_frame({"A": np.ones(28)}), GamSpec(k=4), AdjacencyGraph(("A",)))
    base = fit_gam(des, GamSpec(k=4))
    weeks = [START + dt.timedelta(days=7 * k) for k in range(4)]
    r = 3e-4
    flat = _fit_with(base, [np.log(r)], [0.0], lambda kn: np.zeros_like(kn))
    np.testing.assert_allclose(weekly_rates(flat, weeks)["lambda_bar"], r, rtol=1e-12)
    with_dow = _fit_with(base, [np.log(r)], [0.0], lambda kn: np.zeros_like(kn), dow=[1, -1, 2, -2, 0.5, -0.5, 0])
    np.testing.assert_allclose(weekly_rates(with_dow, weeks)["lambda_bar"], r, rtol=1e-12)
    # linear in time: mean of exp over the week has a closed form
    a, b = np.log(r), 0.9
    lin = _fit_with(base, [a], [0.0], lambda kn: b * kn)
    got = weekly_rates(lin, weeks)["lambda_bar"].to_numpy()
    q = np.exp(b / base.span)
    want = [np.exp(a + b * 7 * k / base.span) * (q ** 7 - 1) / (7 * (q - 1)) for k in range(4)]
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_select_penalties_singleton_grid():
    rng = np.random.default_rng(10)
    des = build_design(simulate(rng), GamSpec(k=6), AdjacencyGraph(("A",)))
    chosen, fit = select_penalties(des, GamSpec(k=6), {"lam_time": [42.0]})
    assert chosen.lam_time == 42.0
    assert fit.spec == chosen


def _selection_rate(curve, n_rep=100, seed=0):
    rng = np.random.default_rng(seed)
    top = 0
    for _ in range(n_rep):
        des = build_design(simulate(rng, n_days=252, curve=curve), GamSpec(k=10), AdjacencyGraph(("A",)))
        chosen, _ = select_penalties(des, GamSpec(k=10), {"lam_time": DEFAULT_GRID})
        top += chosen.lam_time == max(DEFAULT_GRID)
    return top / n_rep


def test_select_penalties_pure_noise_prefers_smoothest():
    assert _selection_rate(None) >= 0.90


def test_select_penalties_curved_signal_not_smoothest():
    assert _selection_rate(lambda t: 1.5 * np.sin(3 * np.pi * t)) <= 0.10


def test_band_coverage_simulation():
    """Truth within three Bayesian standard errors at >= 95% of points over 200 replicates."""
    rng = np.random.default_rng(12)
    curve = lambda t: 0.8 * np.sin(2 * np.pi * t) + 0.5 * t
    n_days, rate, pop = 56, 2e-3, 10_000
    t = np.arange(n_days) / (n_days - 1)
    covered = total = 0
    spec = GamSpec(k=8, lam_time=0.1)
    for _ in range(200):
        df = simulate(rng, n_days=n_days, curve=curve, rate=rate, pop=pop)
        des = build_design(df, spec, AdjacencyGraph(("A",)))
        fit = fit_gam(des, spec)
        X = des.X.toarray()
        Xc = X.copy()
        Xc[:, des.blocks["dow"]] = 0.0
        est = Xc @ fit.coef
        se = np.sqrt(np.einsum("ij,jk,ik->i", Xc, fit.cov, Xc))
        truth = np.log(rate) + curve(t)
        covered += int(np.sum(np.abs(est - truth) <= 3 * se))
        total += n_days
    assert covered / total >= 0.95


def test_case_rate_gam_estimator():
    rng = np.random.default_rng(13)
    df = simulate(rng, ("A", "B"))
    g = AdjacencyGraph.from_pairs(["A", "B"], [("A", "B")])
    est = CaseRateGAM(k=5, lam_time=2.0)
    assert clone(est).get_params()["lam_time"] == 2.0
    est.fit(df, adjacency=g)
    mu = est.predict()
    assert mu.shape == (len(df),) and np.all(mu > 0)
    rates = est.weekly_rates([START])
    assert set(rates["msoa"]) == {"A", "B"}
    sel = CaseRateGAM(k=5, select=True, grid={"lam_time": [0.1, 10.0]}).fit(df, adjacency=g)
    assert sel.spec_.lam_time in (0.1, 10.0)


def test_make_batches():
    names = [f"M{i}" for i in range(7)]
    g = AdjacencyGraph.from_pairs(names, [("M0", "M1"), ("M1", "M2"), ("M2", "M3"), ("M5", "M6")])
    batches = make_batches(g, names, max_batch=3)
    assert sorted(m for b in batches for m in b) == sorted(names)
    assert max(len(b) for b in batches) <= 3
    assert ["M5", "M6"] in batches and ["M4"] in batches


def test_load_tests_and_complete(tmp_path, tiny_world):
    p = write_csv(tmp_path / "tests.csv", ["msoa", "date", "n_positive", "symptomatic_flag"],
                  [["M1", "2021-06-20", 3, 1], ["M1", "2021-06-20", 2, 1], ["M1", "2021-06-21", 9, 0],
                   ["M2", "2021-06-22", 1, "true"]])
    sym = load_tests(p)
    assert sym.set_index(["msoa", "date"])["n_positive"].to_dict() == {
        ("M1", dt.date(2021, 6, 20)): 5, ("M2", dt.date(2021, 6, 22)): 1}
    assert load_tests(p, symptomatic_only=False)["n_positive"].sum() == 15
    full = complete_counts(sym, tiny_world, START, START + dt.timedelta(days=2))
    assert len(full) == 6 and full["n_positive"].sum() == 6
    assert set(full["population_18_64"]) == {1000, 2000}


def test_smooth_case_rates_recovers_level(small_synth, small_world):
    synth, d = small_synth
    spec = synth.spec
    tests = load_tests(d / "tests.csv")
    first = spec.start - dt.timedelta(days=7 * spec.warmup_weeks)
    counts = complete_counts(tests, small_world, first, first + dt.timedelta(days=7 * (spec.n_weeks + 1) - 1))
    weeks = [first + dt.timedelta(days=7 * k) for k in range(spec.n_weeks + 1)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rates, diag = smooth_case_rates(counts, small_world.adjacency, weeks, GamSpec(k=8))
    assert diag["converged"].all()
    truth = synth.residential_weekly.assign(week_start=lambda x: [dt.date.fromisoformat(v) for v in x["week_start"]])
    merged = rates.merge(truth, on=["msoa", "week_start"])
    ratio = merged["lambda_bar"] / merged["resident_case_rate"]
    assert abs(np.median(np.log(ratio))) < 0.1
    rates2, _ = smooth_case_rates(counts, small_world.adjacency, weeks, GamSpec(k=8), max_batch=5, threads=2)
    assert len(rates2) == len(rates)
