"""Staged pipeline: ingest, clusters, smooth, exposure, fit, report and synth.

Each stage reads the input directory named in the config plus the outputs
of its upstream stages, writes its own files atomically under
``<out>/<stage>/`` and records a manifest under ``<out>/manifests/``. A
stage refuses to run (``StaleUpstream``) when an upstream manifest is
missing or when any file it recorded has changed since, unless forced.
"""
from __future__ import annotations

import datetime as dt
import json
import os
import platform
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .clusters import attach_workplaces, detect_clusters, load_events, week_starts, weekly_series
from .exceptions import InputError, MissingFile, NonConvergence, SchemaViolation, StaleUpstream
from .exposure import EXPOSURE_FILES, build_covariates, load_exposure_inputs
from .gam import GamSpec, complete_counts, load_tests, smooth_case_rates
from .io import atomic_write_csv, atomic_write_json, atomic_write_text, sha256_file, sha256_text
from .report import markdown_report, read_fits, render_tables
from .study import DagConfig, StudyConfig, descriptives, run_study
from .synthgen import GenSpec, synthesize
from .taxonomy import OPTIONAL_WORLD_FILES, STUDY_START, WORLD_FILES, World, load_world

STAGES = ("ingest", "clusters", "smooth", "exposure", "fit", "report", "synth")
UPSTREAM = {
    "ingest": (),
    "clusters": ("ingest",),
    "smooth": ("ingest",),
    "exposure": ("ingest", "clusters", "smooth"),
    "fit": ("ingest", "clusters", "exposure"),
    "report": ("fit",),
    "synth": (),
}
EVENT_FILE = "events.csv"
TEST_FILE = "tests.csv"


@dataclass
class PipelineConfig:
    inputs: Path | None = None
    start: dt.date = STUDY_START
    n_weeks: int = 36
    warmup_weeks: int = 1
    study: StudyConfig = field(default_factory=StudyConfig)
    gam: GamSpec = field(default_factory=GamSpec)
    select_penalties: bool = False
    penalty_grid: list | None = None
    max_batch: int = 200
    symptomatic_only: bool = True
    synth: GenSpec = field(default_factory=GenSpec)
    raw_text: str = ""

    @property
    def digest(self) -> str:
        return sha256_text(self.raw_text)


def _subset(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SchemaViolation("config", f"unknown keys in [{section}]: {sorted(unknown)}")
    return d


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read the YAML config; relative input paths resolve against the config file."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise MissingFile(path)
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise SchemaViolation(path.name, f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise SchemaViolation(path.name, "top level must be a mapping")
    known = {"inputs", "timeline", "study", "dag", "smooth", "nb", "synth"}
    unknown = set(raw) - known
    if unknown:
        raise SchemaViolation(path.name, f"unknown sections {sorted(unknown)}")
    try:
        cfg = PipelineConfig(raw_text=text)
        if raw.get("inputs") is not None:
            p = Path(str(raw["inputs"]))
            cfg.inputs = p if p.is_absolute() else (path.parent / p)
        tl = raw.get("timeline") or {}
        if "start" in tl:
            cfg.start = tl["start"] if isinstance(tl["start"], dt.date) else dt.date.fromisoformat(str(tl["start"]))
        cfg.n_weeks = int(tl.get("n_weeks", cfg.n_weeks))
        cfg.warmup_weeks = int(tl.get("warmup_weeks", cfg.warmup_weeks))

        st = dict(raw.get("study") or {})
        _subset(StudyConfig, st, "study")
        for key in ("periods", "industries", "risk_factors", "tiers", "eligible_industries"):
            if st.get(key) is not None:
                st[key] = tuple(st[key])
        dag = DagConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in (raw.get("dag") or {}).items()})
        cfg.study = StudyConfig(**st, dag=dag, nb_controls=dict(raw.get("nb") or {}))

        sm = dict(raw.get("smooth") or {})
        cfg.select_penalties = bool(sm.pop("select", False))
        cfg.penalty_grid = sm.pop("grid", None)
        cfg.max_batch = int(sm.pop("max_batch", cfg.max_batch))
        cfg.symptomatic_only = bool(sm.pop("symptomatic_only", True))
        cfg.gam = GamSpec(**_subset(GamSpec, sm, "smooth"))
        syn = dict(raw.get("synth") or {})
        _subset(GenSpec, syn, "synth")
        cfg.synth = GenSpec.from_dict(syn)
    except (TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, InputError):
            raise
        raise SchemaViolation(path.name, str(exc)) from None
    return cfg


class Stage:
    """Bookkeeping for one stage run: upstream checks, outputs and the manifest."""

    def __init__(self, name: str, cfg: PipelineConfig, out: Path, force: bool = False, threads: int = 1):
        self.name = name
        self.cfg = cfg
        self.out = Path(out)
        self.dir = self.out / name
        self.force = force
        self.threads = threads
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.warnings: list[str] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def manifest_path(self, stage: str | None = None) -> Path:
        return self.out / "manifests" / f"{stage or self.name}.json"

    def check_upstream(self):
        for up in UPSTREAM[self.name]:
            mp = self.manifest_path(up)
            if not mp.exists():
                raise StaleUpstream(f"stage {up!r} has not been run (no {mp}); run `crp {up}` first")
            man = json.loads(mp.read_text())
            if self.force:
                continue
            for group in ("inputs", "outputs"):
                for p, digest in man.get(group, {}).items():
                    fp = Path(p)
                    if not fp.exists() or sha256_file(fp) != digest:
                        raise StaleUpstream(f"{p} changed since stage {up!r} ran; re-run it or pass --force")

    def input(self, path: Path) -> Path:
        if not path.exists():
            raise MissingFile(path)
        self.inputs[str(Path(path).resolve())] = sha256_file(path)
        return path

    def write_csv(self, df: pd.DataFrame, name: str) -> Path:
        p = atomic_write_csv(df, self.dir / name)
        self.outputs[str(p.resolve())] = sha256_file(p)
        return p

    def write_text(self, text: str, name: str) -> Path:
        p = atomic_write_text(self.dir / name, text)
        self.outputs[str(p.resolve())] = sha256_file(p)
        return p

    def write_json(self, obj, name: str) -> Path:
        p = atomic_write_json(obj, self.dir / name)
        self.outputs[str(p.resolve())] = sha256_file(p)
        return p

    def mark(self, label: str):
        self.timings[label] = round(time.perf_counter() - self._t0, 4)

    def finish(self) -> Path:
        self.mark("total")
        manifest = {
            "stage": self.name,
            "config_sha256": self.cfg.digest,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "timings_s": self.timings,
            "versions": {"crp": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "pandas": pd.__version__},
            "warnings": self.warnings,
        }
        return atomic_write_json(manifest, self.manifest_path())


def _inputs_dir(cfg: PipelineConfig) -> Path:
    if cfg.inputs is None:
        raise MissingFile("inputs (set `inputs:` in the config or pass --inputs)")
    if not cfg.inputs.is_dir():
        raise MissingFile(cfg.inputs)
    return cfg.inputs


def _world(stage: Stage) -> World:
    d = _inputs_dir(stage.cfg)
    paths = {k: stage.input(d / v) for k, v in WORLD_FILES.items()}
    for k, v in OPTIONAL_WORLD_FILES.items():
        if (d / v).exists():
            paths[k] = stage.input(d / v)
    return load_world(paths)


def _read_csv(path: Path, stage: Stage | None = None, **kw) -> pd.DataFrame:
    if not path.exists():
        raise StaleUpstream(f"missing upstream output {path}")
    if stage is not None:
        stage.inputs[str(Path(path).resolve())] = sha256_file(path)
    return pd.read_csv(path, keep_default_na=False, na_values=[""], **kw)


def _dates(s: pd.Series) -> list:
    return [dt.date.fromisoformat(str(x)) for x in s]


def run_ingest(stage: Stage) -> dict:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        world = _world(stage)
        d = _inputs_dir(stage.cfg)
        for name in [EVENT_FILE, TEST_FILE, *EXPOSURE_FILES.values()]:
            stage.input(d / name)
        load_exposure_inputs(d, world)
        ev, n_dup = load_events(d / EVENT_FILE)
        load_tests(d / TEST_FILE)
    stage.warnings += [str(w.message) for w in caught]
    report = world.linkage_report()
    snapshot = {
        "n_msoas": int(len(world.msoas)),
        "n_workzones": int(len(world.workzones)),
        "n_workplaces": report["n_workplaces"],
        "n_linked_workplaces": report["n_linked"],
        "unlinked_fraction": report["dropped_fraction"],
        "n_sic_divisions": int(len(world.sic)),
        "n_adjacency_edges": int(len(world.adjacency.edges)),
        "n_events": int(len(ev)),
        "duplicate_events_dropped": int(n_dup),
        "periods": {k: [p.start.isoformat(), p.end.isoformat()] for k, p in world.periods.items()},
    }
    if n_dup:
        stage.warnings.append(f"{n_dup} duplicate event rows dropped")
    stage.write_json(snapshot, "world_snapshot.json")
    stage.write_csv(world.msoas.assign(mobility_levels=[";".join(map(str, v)) for v in world.msoas["mobility_levels"]]),
                    "msoas.csv")
    stage.write_csv(world.workplaces, "workplaces.csv")
    return snapshot


def run_clusters(stage: Stage) -> dict:
    cfg = stage.cfg
    world = _world(stage)
    events, n_dup = load_events(stage.input(_inputs_dir(cfg) / EVENT_FILE))
    clusters = detect_clusters(events)
    clusters, rep = attach_workplaces(clusters, world)
    series, _ = weekly_series(clusters, world, cfg.start, cfg.n_weeks, cfg.warmup_weeks)
    stage.mark("detect")
    if rep["unknown_uprn"] or rep["unlinked_uprn"]:
        stage.warnings.append(f"{rep['unknown_uprn']} cluster(s) at unknown UPRNs and {rep['unlinked_uprn']} at "
                              f"UPRNs without an industry were dropped")
    stage.write_csv(clusters.sort_values(["uprn", "first_date"], kind="mergesort"), "clusters.csv")
    stage.write_csv(series, "cluster_series.csv")
    # national cluster rate by industry and week, ready for plotting
    nat = series[series["week_index"] >= 0].groupby(["industry", "week_start"], sort=True)[
        ["active_clusters", "n_workplaces"]].sum().reset_index()
    nat["cluster_rate"] = nat["active_clusters"] / nat["n_workplaces"]
    stage.write_csv(nat, "cluster_rate_by_week.csv")
    rep["duplicate_events_dropped"] = int(n_dup)
    stage.write_json(rep, "cluster_report.json")
    return rep


def run_smooth(stage: Stage, strict: bool = False) -> dict:
    cfg = stage.cfg
    world = _world(stage)
    tests = load_tests(stage.input(_inputs_dir(cfg) / TEST_FILE), symptomatic_only=cfg.symptomatic_only)
    first = cfg.start - dt.timedelta(days=7 * cfg.warmup_weeks)
    last = cfg.start + dt.timedelta(days=7 * cfg.n_weeks - 1)
    tests = tests[(tests["date"] >= first) & (tests["date"] <= last)]
    counts = complete_counts(tests, world, first, last)
    weeks = week_starts(cfg.start, cfg.n_weeks, cfg.warmup_weeks)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rates, diag = smooth_case_rates(counts, world.adjacency, weeks, cfg.gam, select=cfg.select_penalties,
                                        grid=cfg.penalty_grid, max_batch=cfg.max_batch, threads=stage.threads,
                                        strict=strict)
    stage.warnings += [str(w.message) for w in caught]
    stage.mark("fit")
    stage.write_csv(rates, "smoothed_rates.csv")
    stage.write_csv(diag, "gam_diagnostics.csv")
    return {"batches": int(len(diag)), "converged": bool(diag["converged"].all())}


def run_exposure(stage: Stage) -> dict:
    cfg = stage.cfg
    world = _world(stage)
    d = _inputs_dir(cfg)
    for name in EXPOSURE_FILES.values():
        stage.input(d / name)
    inputs = load_exposure_inputs(d, world)
    series = load_series(stage.out, stage)
    rates = _read_csv(stage.out / "smooth" / "smoothed_rates.csv", stage)
    rates["week_start"] = _dates(rates["week_start"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cov = build_covariates(world, series, rates, inputs, eps=cfg.study.epsilon)
    stage.warnings += [str(w.message) for w in caught]
    stage.write_csv(cov, "covariates.csv")
    return {"rows": int(len(cov))}


def load_series(out: Path, stage: Stage | None = None) -> pd.DataFrame:
    s = _read_csv(Path(out) / "clusters" / "cluster_series.csv", stage)
    s["week_start"] = _dates(s["week_start"])
    return s


def load_covariates(out: Path, stage: Stage | None = None) -> pd.DataFrame:
    c = _read_csv(Path(out) / "exposure" / "covariates.csv", stage, dtype={"mobility_class": str})
    c["week_start"] = _dates(c["week_start"])
    return c


def run_fit(stage: Stage, strict: bool = False) -> dict:
    world = _world(stage)
    series = load_series(stage.out, stage)
    cov = load_covariates(stage.out, stage)
    res = run_study(stage.cfg.study, cov, series, world, threads=stage.threads)
    stage.warnings += res.warnings
    stage.mark("fit")
    stage.write_csv(res.fits, "fits.csv")
    desc = res.descriptives
    stage.write_csv(desc.reset_index(names="variable") if len(desc.columns) else pd.DataFrame(columns=["variable"]),
                    "descriptives.csv")
    if strict and res.any_nonconverged:
        bad = res.fits[res.fits["status"] == "nonconverged"][["industry", "risk_factor", "tier", "period"]]
        raise NonConvergence(f"{len(bad.drop_duplicates())} model(s) did not converge")
    return {"cells": int(len(res.fits)), "status": res.fits["status"].value_counts().sort_index().to_dict()}


def run_report(stage: Stage, fmt: str = "csv") -> dict:
    fits_path = stage.out / "fit" / "fits.csv"
    stage.input(fits_path)
    fits = read_fits(fits_path)
    desc = _read_csv(stage.out / "fit" / "descriptives.csv", stage).set_index("variable")
    desc = desc.apply(lambda col: col.map(_coerce))
    tables = render_tables(fits, desc if len(desc.columns) else None, stage.cfg.study.main_period)
    for name, table in tables.items():
        stage.write_csv(table, name)
    out = {"tables": sorted(tables)}
    if fmt == "md":
        md = markdown_report(tables)
        stage.write_text(md, "report.md")
        out["markdown"] = md
    return out


def _coerce(v):
    if isinstance(v, str):
        try:
            f = float(v)
        except ValueError:
            return v
        return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f
    return v


def run_synth(stage: Stage, seed: int | None = None) -> dict:
    spec = stage.cfg.synth
    if seed is not None:
        spec = GenSpec.from_dict({**spec.to_dict(), "seed": seed})
    world = synthesize(spec)
    paths = world.write(stage.dir)
    for p in paths.values():
        stage.outputs[str(Path(p).resolve())] = sha256_file(p)
    return {"dir": str(stage.dir), "totals": world.ledger["totals"]}


def default_threads() -> int:
    return os.cpu_count() or 1
