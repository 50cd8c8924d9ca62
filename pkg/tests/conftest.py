from __future__ import annotations

import datetime as dt
from pathlib import Path

import pytest

from crp.synthgen import GenSpec, synthesize
from crp.taxonomy import load_world


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = [",".join(header)] + [",".join("" if v is None else str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def tiny_world_files(d: Path) -> Path:
    """Two MSOAs, one workzone each, three SIC divisions; small enough to check by hand."""
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "msoas.csv", ["msoa", "population_18_64", "imd_quintile", "mobility_levels"],
              [["M1", 1000, 1, "1;1;7"], ["M2", 2000, 5, "7;7;8"]])
    write_csv(d / "workzones.csv", ["workzone", "msoa"], [["W1", "M1"], ["W2", "M2"]])
    write_csv(d / "sic.csv", ["sic_division", "sector", "proximity", "permanence"],
              [[10, "Manufacturing", 50, 0.9], [11, "Manufacturing", 100, 0.5], [41, "Construction", 75, 0.8]])
    write_csv(d / "workplaces.csv", ["uprn", "msoa", "workzone", "sic_division", "employees"],
              [["U1", "M1", "W1", 10, 100], ["U2", "M1", "W1", 11, 100], ["U3", "M2", "W2", 41, 5],
               ["U4", "M2", "W2", None, 3]])
    write_csv(d / "adjacency.csv", ["msoa_a", "msoa_b"], [["M1", "M2"]])
    return d


@pytest.fixture
def tiny_dir(tmp_path) -> Path:
    return tiny_world_files(tmp_path / "world")


@pytest.fixture
def tiny_world(tiny_dir):
    return load_world(tiny_dir)


@pytest.fixture(scope="session")
def shared_tiny_world(tmp_path_factory):
    """Read-only tiny world for property tests that cannot take function-scoped fixtures."""
    return load_world(tiny_world_files(tmp_path_factory.mktemp("tiny")))


SMALL_SPEC = dict(n_msoas=12, n_weeks=10, warmup_weeks=1, seed=3, workplaces_per_cell=6.0)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 12-MSOA, 10-week synthetic world written to disk once per session."""
    d = tmp_path_factory.mktemp("small_synth")
    world = synthesize(GenSpec(**SMALL_SPEC), d)
    return world, d


@pytest.fixture(scope="session")
def small_world(small_synth):
    return load_world(small_synth[1])


START = dt.date(2021, 6, 20)


def analysis_frames(synth, d: Path):
    """(world, cluster series, covariates) for a synthetic world, with the planted case rates as the smoothed rates."""
    from crp.clusters import detect_clusters, weekly_series
    from crp.exposure import build_covariates, load_exposure_inputs

    world = load_world(d)
    spec = synth.spec
    series, _ = weekly_series(detect_clusters(synth.events), world, spec.start, spec.n_weeks, spec.warmup_weeks)
    smoothed = synth.residential_weekly.rename(columns={"resident_case_rate": "lambda_bar"})
    smoothed = smoothed[["msoa", "week_start", "lambda_bar"]].assign(
        week_start=lambda x: [dt.date.fromisoformat(v) for v in x["week_start"]])
    cov = build_covariates(world, series, smoothed, load_exposure_inputs(d, world))
    return world, series, cov


@pytest.fixture(scope="session")
def small_frames(small_synth):
    return analysis_frames(*small_synth)
