"""Synthetic worlds with planted ground truth.

The generator writes the same file set the pipeline ingests, plus
``truth_ledger.json`` holding every planted quantity: outcome coefficients,
the NB dispersion, the spatial field and time curve behind the test counts,
realised weekly cluster counts and bookkeeping totals.

Every planted covariate is computed here with dense array code that shares
nothing with the exposure module, so the two can check each other.
"""
from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .exposure import IMD_COLUMNS, PROFILE_COLUMNS, PROFILE_FAMILIES
from .io import atomic_write_csv, atomic_write_text
from .taxonomy import SECTOR_NAMES, STUDY_START, Sector, parse_sector

SCHEMA_VERSION = 1
DEFAULT_INDUSTRIES = (
    Sector.SERVICES.value,
    Sector.UTILITIES.value,
    Sector.TRANSPORT.value,
    Sector.MANUFACTURING.value,
    Sector.CONSTRUCTION.value,
)
# Covariates that may carry a planted effect; all are constant over time.
PLANTABLE = ("proximity", "permanence", "resident_imd", "commuter_imd", *PROFILE_COLUMNS)
DIVISIONS_PER_SECTOR = 3
_STREAMS = ("geography", "workplaces", "flows", "profiles", "tests", "vaccination", "outcomes", "events", "noise")
# Monday..Sunday multipliers on the log scale; they sum to zero.
_DOW = np.array([0.10, 0.05, 0.02, 0.0, -0.02, -0.08, -0.07])


@dataclass
class GenSpec:
    n_msoas: int = 50
    n_workzones: int = 2
    industries: tuple = DEFAULT_INDUSTRIES
    n_weeks: int = 36
    warmup_weeks: int = 1
    start: dt.date = STUDY_START
    seed: int = 1
    effects: dict = field(default_factory=lambda: {"proximity": math.log(1.05)})
    baseline_rate: float = 0.05
    theta: float = 1.5
    workplaces_per_cell: float = 5.0
    fixed_workplaces: int | None = None
    unlinked_fraction: float = 0.1
    noise_rate: float = 0.0
    confounding: float = 0.0
    population: tuple = (5000, 10000)
    case_rate: float = 5e-4
    commute_fraction: float = 0.5
    commute_decay: float = 1.0

    def __post_init__(self):
        if self.n_msoas < 1 or self.n_workzones < 1:
            raise ValueError("need at least one MSOA and one workzone per MSOA")
        if self.n_weeks < 1 or self.warmup_weeks < 0:
            raise ValueError("n_weeks must be positive and warmup_weeks non-negative")
        self.industries = tuple(parse_sector(s).value for s in self.industries)
        if len(set(self.industries)) != len(self.industries) or not self.industries:
            raise ValueError("industries must be a non-empty list of distinct sectors")
        if isinstance(self.start, str):
            self.start = dt.date.fromisoformat(self.start)
        for name in self.effects:
            if name not in PLANTABLE:
                raise ValueError(f"cannot plant an effect on {name!r}; choose from {PLANTABLE}")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.baseline_rate <= 0:
            raise ValueError("baseline_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = self.start.isoformat()
        d["industries"] = list(self.industries)
        d["theta"] = _jsonable(self.theta)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "theta" in d:
            d["theta"] = float(d["theta"])
        for key in ("industries", "population"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def beta(self, covariate: str, industry: str) -> float:
        v = self.effects.get(covariate, 0.0)
        return float(v.get(industry, 0.0)) if isinstance(v, dict) else float(v)


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf"
    return x


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    """One independent PCG64 stream per generation step, all spawned from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(_STREAMS, children)}


@dataclass
class SynthWorld:
    spec: GenSpec
    msoas: pd.DataFrame
    workzones: pd.DataFrame
    workplaces: pd.DataFrame
    sic: pd.DataFrame
    adjacency: pd.DataFrame
    flows: pd.DataFrame
    industry_mix: pd.DataFrame
    profiles: pd.DataFrame
    vaccination: pd.DataFrame
    residential_weekly: pd.DataFrame
    tests: pd.DataFrame
    ledger: dict
    events: pd.DataFrame | None = None

    FILES = {
        "msoas": "msoas.csv",
        "workzones": "workzones.csv",
        "workplaces": "workplaces.csv",
        "sic": "sic.csv",
        "adjacency": "adjacency.csv",
        "flows": "flows.csv",
        "industry_mix": "industry_mix.csv",
        "profiles": "residential_profiles.csv",
        "vaccination": "vaccination.csv",
        "residential_weekly": "residential_weekly.csv",
        "tests": "tests.csv",
        "events": "events.csv",
    }

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for attr, name in self.FILES.items():
            frame = getattr(self, attr)
            if frame is None:
                continue
            paths[attr] = atomic_write_csv(frame, out / name)
        paths["ledger"] = atomic_write_text(out / "truth_ledger.json", json.dumps(self.ledger, sort_keys=True, indent=1) + "\n")
        return paths

    def planted_counts(self) -> pd.DataFrame:
        rows = self.ledger["weekly_counts"]
        return pd.DataFrame(rows, columns=["msoa", "industry", "week_index", "count"])

    def planted_covariates(self) -> pd.DataFrame:
        return pd.DataFrame(self.ledger["covariates"])


def _grid(n: int) -> np.ndarray:
    rows = max(1, int(math.floor(math.sqrt(n))))
    cols = int(math.ceil(n / rows))
    idx = np.arange(n)
    return np.column_stack([idx // cols, idx % cols]).astype(float)


def _rook_edges(pos: np.ndarray) -> list[tuple[int, int]]:
    lookup = {(int(r), int(c)): i for i, (r, c) in enumerate(pos)}
    edges = []
    for i, (r, c) in enumerate(pos):
        for dr, dc in ((0, 1), (1, 0)):
            j = lookup.get((int(r) + dr, int(c) + dc))
            if j is not None:
                edges.append((i, j))
    return edges


def _time_curve(days: np.ndarray) -> np.ndarray:
    """Log multiplier of the daily case rate: a summer wave and a larger winter peak."""
    return np.log(1.0 + 2.0 * np.exp(-((days - 45.0) / 25.0) ** 2) + 5.0 * np.exp(-((days - 195.0) / 18.0) ** 2))


def gen_world(spec: GenSpec) -> SynthWorld:
    """Draw geography, workplaces, flows, demographics, test counts and planted covariates."""
    rng = make_rngs(spec.seed)
    n = spec.n_msoas
    msoa_ids = [f"E02{i:06d}" for i in range(n)]

    # geography
    g = rng["geography"]
    pos = _grid(n)
    centre = pos.mean(axis=0)
    radial = np.hypot(*(pos - centre).T)
    radial = radial / radial.max() if radial.max() > 0 else radial
    levels = np.clip(np.rint(1 + 7 * radial[:, None] + g.normal(0, 1.0, (n, 4))), 1, 8).astype(int)
    population = g.integers(spec.population[0], spec.population[1] + 1, n)
    imd = g.integers(1, 6, n)
    msoas = pd.DataFrame({
        "msoa": msoa_ids,
        "population_18_64": population,
        "imd_quintile": imd,
        "mobility_levels": [";".join(map(str, lv)) for lv in levels],
    })
    edges = _rook_edges(pos)
    adjacency = pd.DataFrame({"msoa_a": [msoa_ids[a] for a, _ in edges], "msoa_b": [msoa_ids[b] for _, b in edges]},
                             columns=["msoa_a", "msoa_b"])
    spatial = 0.4 * np.sin(pos[:, 0] / 2.0) + 0.3 * np.cos(pos[:, 1] / 3.0)
    spatial = spatial - spatial.mean()

    n_wz = spec.n_workzones
    wz_ids = [f"{m}W{j}" for m in msoa_ids for j in range(n_wz)]
    wz_parent = np.repeat(np.arange(n), n_wz)
    workzones = pd.DataFrame({"workzone": wz_ids, "msoa": [msoa_ids[p] for p in wz_parent]})

    # SIC divisions: three per sector for every sector
    sic_rows = []
    for s_idx, name in enumerate(SECTOR_NAMES):
        for k in range(DIVISIONS_PER_SECTOR):
            sic_rows.append((DIVISIONS_PER_SECTOR * s_idx + k + 1, name))
    sic = pd.DataFrame(sic_rows, columns=["sic_division", "sector"])
    sic["proximity"] = np.round(g.uniform(10.0, 90.0, len(sic)), 2)
    sic["permanence"] = np.round(g.uniform(0.6, 0.98, len(sic)), 4)

    # workplaces
    w = rng["workplaces"]
    n_ind = len(spec.industries)
    if spec.fixed_workplaces is not None:
        per = np.zeros((len(wz_ids), n_ind), dtype=int)
        for m in range(n):
            share = np.full(n_wz, spec.fixed_workplaces // n_wz)
            share[: spec.fixed_workplaces % n_wz] += 1
            per[m * n_wz:(m + 1) * n_wz, :] = share[:, None]
    else:
        per = w.poisson(spec.workplaces_per_cell, (len(wz_ids), n_ind))
    z_imd = (imd - 3) / 2.0
    codes_by_ind = {ind: sic[sic["sector"] == ind].sort_values("proximity")["sic_division"].to_numpy()
                    for ind in spec.industries}
    wp_rows = []
    for wzi, wz in enumerate(wz_ids):
        m = wz_parent[wzi]
        for ii, ind in enumerate(spec.industries):
            codes = codes_by_ind[ind]
            tilt = np.exp(spec.confounding * z_imd[m] * np.array([-1.0, 0.0, 1.0]))
            p = tilt / tilt.sum()
            for _ in range(per[wzi, ii]):
                wp_rows.append((wz, msoa_ids[m], int(w.choice(codes, p=p)), int(1 + w.poisson(20))))
        n_unlinked = w.poisson(spec.unlinked_fraction * spec.workplaces_per_cell * n_ind) if spec.unlinked_fraction > 0 else 0
        for _ in range(n_unlinked):
            wp_rows.append((wz, msoa_ids[m], None, int(1 + w.poisson(20))))
    workplaces = pd.DataFrame(wp_rows, columns=["workzone", "msoa", "sic_division", "employees"])
    workplaces.insert(0, "uprn", [f"U{i:08d}" for i in range(len(workplaces))])
    workplaces["sic_division"] = workplaces["sic_division"].astype("Int64")
    sector_of = dict(zip(sic["sic_division"], sic["sector"]))
    wp_sector = workplaces["sic_division"].map(lambda d: None if pd.isna(d) else sector_of[int(d)])

    # industry mix: share of linked workplaces per workzone
    linked = workplaces[wp_sector.notna()].assign(sector=wp_sector[wp_sector.notna()])
    cnt = linked.groupby(["workzone", "sector"]).size().rename("n").reset_index()
    cnt["share"] = cnt["n"] / cnt.groupby("workzone")["n"].transform("sum")
    industry_mix = cnt[["workzone", "sector", "share"]].sort_values(["workzone", "sector"]).reset_index(drop=True)
    rho = np.zeros((len(wz_ids), n_ind))
    wz_index = {wz: i for i, wz in enumerate(wz_ids)}
    ind_index = {s: i for i, s in enumerate(spec.industries)}
    for wz, s, sh in industry_mix.itertuples(index=False):
        rho[wz_index[wz], ind_index[s]] = sh

    # flows with distance decay
    f = rng["flows"]
    dist = np.hypot(pos[:, None, 0] - pos[None, wz_parent, 0], pos[:, None, 1] - pos[None, wz_parent, 1])
    attract = 1.0 + workplaces["workzone"].value_counts().reindex(wz_ids, fill_value=0).to_numpy(dtype=float)
    weight = np.exp(-dist / spec.commute_decay) * attract[None, :]
    weight /= weight.sum(axis=1, keepdims=True)
    totals = np.rint(spec.commute_fraction * population).astype(int)
    F = np.vstack([f.multinomial(totals[h], weight[h]) for h in range(n)])
    hh, ww = np.nonzero(F)
    flows = pd.DataFrame({"home_msoa": [msoa_ids[h] for h in hh], "workzone": [wz_ids[j] for j in ww],
                          "n_commuters": F[hh, ww]})

    # residential profiles (fractions per family)
    pr = rng["profiles"]
    prof = {}
    for fam, cols in PROFILE_FAMILIES.items():
        if fam == "imd":
            alpha = np.ones((n, 5))
            alpha[np.arange(n), imd - 1] += 6.0
            draw = np.vstack([pr.dirichlet(a) for a in alpha])
        else:
            draw = pr.dirichlet(np.full(len(cols), 4.0), n)
        draw = draw / draw.sum(axis=1, keepdims=True)
        for j, c in enumerate(cols):
            prof[c] = draw[:, j]
    profiles = pd.DataFrame({"msoa": msoa_ids, **prof})

    # daily test counts from a planted log-rate surface
    t = rng["tests"]
    first_day = -7 * spec.warmup_weeks
    n_days = 7 * (spec.warmup_weeks + spec.n_weeks)
    days = np.arange(first_day, first_day + n_days)
    dates = [spec.start + dt.timedelta(days=int(d)) for d in days]
    weekday = np.array([d.weekday() for d in dates])
    curve = _time_curve(days.astype(float))
    central = spec.case_rate * np.exp(spatial[:, None] + curve[None, :])
    lam = central * np.exp(_DOW[weekday])[None, :]
    counts = t.poisson(population[:, None] * lam)
    mi, di = np.nonzero(counts)
    tests = pd.DataFrame({"msoa": [msoa_ids[i] for i in mi], "date": [dates[j].isoformat() for j in di],
                          "n_positive": counts[mi, di], "symptomatic_flag": 1})
    # a few asymptomatic rows that the smoother must ignore
    asym = t.random(len(tests)) < 0.02
    extra = tests[asym].assign(n_positive=lambda x: 1 + t.poisson(2.0, len(x)), symptomatic_flag=0)
    tests = pd.concat([tests, extra], ignore_index=True).sort_values(["msoa", "date", "symptomatic_flag"]).reset_index(drop=True)

    # weekly residential series and vaccination
    v = rng["vaccination"]
    n_w = spec.warmup_weeks + spec.n_weeks
    week_index = np.arange(-spec.warmup_weeks, spec.n_weeks)
    wk_start = [spec.start + dt.timedelta(days=7 * int(k)) for k in week_index]
    weekly_rate = central.reshape(n, n_w, 7).mean(axis=2)
    mid = 7.0 * week_index + 3.0
    d1_half = v.uniform(-20.0, 40.0, n)
    dose1 = 0.9 / (1.0 + np.exp(-(mid[None, :] - d1_half[:, None]) / 25.0))
    dose2 = 0.85 / (1.0 + np.exp(-(mid[None, :] - d1_half[:, None] - 60.0) / 25.0))
    rows_m = np.repeat(np.arange(n), n_w)
    rows_w = np.tile(np.arange(n_w), n)
    residential_weekly = pd.DataFrame({
        "msoa": [msoa_ids[i] for i in rows_m],
        "week_start": [wk_start[j].isoformat() for j in rows_w],
        "resident_case_rate": weekly_rate[rows_m, rows_w],
        "resident_dose1": dose1[rows_m, rows_w],
        "resident_dose2": dose2[rows_m, rows_w],
    })
    vaccination = residential_weekly[["msoa", "week_start"]].assign(prop_two_doses=dose2[rows_m, rows_w])

    # planted covariates per (msoa, industry), dense
    P = np.zeros((len(wz_ids), n))
    P[np.arange(len(wz_ids)), wz_parent] = 1.0
    prof_mat = profiles[PROFILE_COLUMNS].to_numpy()
    num = np.einsum("hw,wi,wm,hc->mic", F, rho, P, prof_mat, optimize=True)
    den = np.einsum("hw,wi,wm->mi", F, rho, P, optimize=True)
    emp = np.zeros((n, n_ind))
    px = np.zeros((n, n_ind))
    pm = np.zeros((n, n_ind))
    nwp = np.zeros((n, n_ind), dtype=int)
    sic_prox = dict(zip(sic["sic_division"], sic["proximity"]))
    sic_perm = dict(zip(sic["sic_division"], sic["permanence"]))
    msoa_pos = {m: i for i, m in enumerate(msoa_ids)}
    for r in linked.itertuples(index=False):
        i, j = msoa_pos[r.msoa], ind_index[r.sector]
        e = float(r.employees)
        emp[i, j] += e
        px[i, j] += e * sic_prox[int(r.sic_division)]
        pm[i, j] += e * sic_perm[int(r.sic_division)]
        nwp[i, j] += 1

    cov_rows = []
    for i in range(n):
        for j, ind in enumerate(spec.industries):
            if nwp[i, j] == 0:
                continue
            rec = {"msoa": msoa_ids[i], "industry": ind, "n_workplaces": int(nwp[i, j]),
                   "proximity": px[i, j] / emp[i, j], "permanence": 100.0 * pm[i, j] / emp[i, j],
                   "resident_imd": float(imd[i])}
            if den[i, j] > 0:
                shares = num[i, j] / den[i, j]
                for c, s in zip(PROFILE_COLUMNS, shares):
                    rec[c] = 100.0 * s
                rec["commuter_imd"] = float(shares[[PROFILE_COLUMNS.index(c) for c in IMD_COLUMNS]] @ np.arange(1, 6))
            cov_rows.append(rec)
    cov = pd.DataFrame(cov_rows)

    intercepts, betas = {}, {}
    for ind in spec.industries:
        sub = cov[cov["industry"] == ind]
        shift = 0.0
        for name in spec.effects:
            b = spec.beta(name, ind)
            betas.setdefault(name, {})[ind] = b
            if b != 0.0 and len(sub):
                shift += b * float(sub[name].mean())
        intercepts[ind] = math.log(spec.baseline_rate) - shift

    ledger = {
        "schema_version": SCHEMA_VERSION,
        "generator": {
            "rng": "numpy.random.Generator",
            "bit_generator": "PCG64",
            "seeding": "SeedSequence(seed).spawn",
            "streams": list(_STREAMS),
            "numpy_version": np.__version__,
            "seed": spec.seed,
        },
        "spec": spec.to_dict(),
        "planted": {
            "theta": _jsonable(float(spec.theta)),
            "intercept": intercepts,
            "beta": betas,
            "spatial_field": dict(zip(msoa_ids, spatial.tolist())),
            "time_curve": {"first_date": dates[0].isoformat(), "log_multiplier": curve.tolist()},
            "dow_log_effect": dict(zip(["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"], _DOW.tolist())),
            "case_rate": spec.case_rate,
        },
        "covariates": json.loads(cov.to_json(orient="records", double_precision=15)),
        "totals": {
            "msoas": n,
            "workzones": len(wz_ids),
            "workplaces": int(len(workplaces)),
            "linked_workplaces": int(len(linked)),
            "workplaces_by_industry": {ind: int(nwp[:, j].sum()) for j, ind in enumerate(spec.industries)},
            "commuters": int(F.sum()),
            "positive_tests": int(counts.sum()),
        },
    }
    return SynthWorld(spec=spec, msoas=msoas, workzones=workzones, workplaces=workplaces, sic=sic,
                      adjacency=adjacency, flows=flows, industry_mix=industry_mix, profiles=profiles,
                      vaccination=vaccination, residential_weekly=residential_weekly, tests=tests, ledger=ledger)


def expected_counts(world: SynthWorld) -> pd.DataFrame:
    """Planted NB mean per (msoa, industry): ``n_workplaces * exp(intercept + x'beta)``."""
    cov = world.planted_covariates()
    planted = world.ledger["planted"]
    eta = cov["industry"].map(planted["intercept"]).astype(float)
    for name, per_ind in planted["beta"].items():
        b = cov["industry"].map(per_ind).fillna(0.0).astype(float)
        eta = eta + b * cov[name].fillna(cov.groupby("industry")[name].transform("mean"))
    return cov[["msoa", "industry", "n_workplaces"]].assign(mean=cov["n_workplaces"] * np.exp(eta))


def gen_events(world: SynthWorld, ledger: dict | None = None, spec: GenSpec | None = None) -> pd.DataFrame:
    """Draw weekly cluster counts and realise them as case events.

    Each planted cluster gets 2-6 events inside one week at a UPRN that had
    no cluster the week before, so clusters never merge and each one is
    active in exactly its own week. Counts above the number of free UPRNs
    are truncated and the truncation is recorded. Noise singletons are only
    placed where no other event at that UPRN lies within six days.
    """
    ledger = world.ledger if ledger is None else ledger
    spec = world.spec if spec is None else spec
    rng = make_rngs(spec.seed)
    r_out, r_ev, r_noise = rng["outcomes"], rng["events"], rng["noise"]

    mean = expected_counts(world)
    week_index = np.arange(-spec.warmup_weeks, spec.n_weeks)
    mu = np.repeat(mean["mean"].to_numpy()[:, None], len(week_index), axis=1)
    if math.isfinite(spec.theta) and spec.theta < 1e12:
        drawn = r_out.negative_binomial(spec.theta, spec.theta / (spec.theta + mu))
    else:
        drawn = r_out.poisson(mu)

    wp = world.workplaces
    sector_of = dict(zip(world.sic["sic_division"], world.sic["sector"]))
    linked = wp[wp["sic_division"].notna()]
    uprns_by_cell = {}
    for (m, d), grp in linked.groupby(["msoa", "sic_division"], sort=False):
        uprns_by_cell.setdefault((m, sector_of[int(d)]), []).extend(grp["uprn"].tolist())
    for key in uprns_by_cell:
        uprns_by_cell[key].sort()

    ev_uprn, ev_day, counts_rows = [], [], []
    truncated = 0
    for c, (m, ind) in enumerate(zip(mean["msoa"], mean["industry"])):
        pool = np.array(uprns_by_cell[(m, ind)])
        prev: set = set()
        for k_pos, k in enumerate(week_index):
            want = int(drawn[c, k_pos])
            if want == 0:
                prev = set()
                continue
            free = np.array([u for u in pool if u not in prev])
            got = min(want, len(free))
            truncated += want - got
            if got == 0:
                prev = set()
                continue
            chosen = r_ev.choice(free, size=got, replace=False)
            sizes = r_ev.integers(2, 7, got)
            for u, s in zip(chosen, sizes):
                days = np.sort(r_ev.integers(0, 7, s)) + 7 * int(k)
                ev_uprn.extend([u] * s)
                ev_day.extend(days.tolist())
            counts_rows.append([m, ind, int(k), got])
            prev = set(chosen.tolist())

    n_clusters = sum(r[3] for r in counts_rows)
    n_planted_events = len(ev_day)
    n_noise = 0
    if spec.noise_rate > 0 and len(wp):
        by_uprn: dict[str, list[int]] = {}
        for u, d in zip(ev_uprn, ev_day):
            by_uprn.setdefault(u, []).append(d)
        cand = r_noise.poisson(spec.noise_rate * max(n_clusters, 1))
        lo, hi = int(week_index[0]) * 7, (int(week_index[-1]) + 1) * 7
        all_uprns = wp["uprn"].to_numpy()
        for _ in range(cand):
            u = str(all_uprns[r_noise.integers(len(all_uprns))])
            d = int(r_noise.integers(lo, hi))
            if any(abs(d - x) <= 6 for x in by_uprn.get(u, ())):
                continue
            by_uprn.setdefault(u, []).append(d)
            ev_uprn.append(u)
            ev_day.append(d)
            n_noise += 1

    events = pd.DataFrame({"uprn": ev_uprn, "day": np.asarray(ev_day, dtype=int)})
    events = events.sort_values(["day", "uprn"], kind="mergesort").reset_index(drop=True)
    events["event_date"] = [(spec.start + dt.timedelta(days=int(d))).isoformat() for d in events["day"]]
    events.insert(0, "case_id", [f"C{i:08d}" for i in range(len(events))])
    events = events[["case_id", "uprn", "event_date"]]

    ledger["weekly_counts"] = counts_rows
    ledger["totals"].update({
        "clusters": int(n_clusters),
        "cluster_events": int(n_planted_events),
        "noise_events": int(n_noise),
        "events": int(len(events)),
        "truncated_clusters": int(truncated),
    })
    world.events = events
    return events


def synthesize(spec: GenSpec, out_dir: str | Path | None = None) -> SynthWorld:
    """:func:`gen_world` then :func:`gen_events`; writes the file set when ``out_dir`` is given."""
    world = gen_world(spec)
    gen_events(world)
    if out_dir is not None:
        world.write(out_dir)
    return world
