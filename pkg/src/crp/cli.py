"""``crp`` command line.

Exit codes: 0 success, 1 unexpected error, 2 missing or malformed input,
3 missing or stale upstream stage, 4 non-convergence under ``--strict``.
"""
from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import pipeline
from .exceptions import CrpError, InputError, NonConvergence, StaleUpstream

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_STALE, EXIT_NONCONVERGED = 0, 1, 2, 3, 4


def _common(f):
    @click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                  help="YAML config file.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), envvar="CRP_OUT",
                  required=True, help="Output directory (default: $CRP_OUT).")
    @click.option("--inputs", "inputs_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
                  help="Input directory; overrides `inputs` in the config.")
    @click.option("--threads", type=click.IntRange(min=1), default=None, help="Worker threads (default: all cores).")
    @click.option("--seed", type=int, default=None, help="Random seed (synth only).")
    @click.option("--strict", is_flag=True, help="Fail with exit code 4 when a model does not converge.")
    @click.option("--force", is_flag=True, help="Run even when upstream outputs changed.")
    @click.option("--quiet", is_flag=True, help="No progress messages on stderr.")
    @functools.wraps(f)
    def wrapper(**kw):
        return f(**kw)

    return wrapper


def _progress(quiet: bool, msg: str):
    if not quiet:
        click.echo(msg, err=True)


def _run(name: str, kw: dict, body):
    cfg = pipeline.load_config(kw["config_path"])
    if kw["inputs_dir"] is not None:
        cfg.inputs = kw["inputs_dir"]
    threads = kw["threads"] or pipeline.default_threads()
    stage = pipeline.Stage(name, cfg, kw["out_dir"], force=kw["force"], threads=threads)
    stage.check_upstream()
    _progress(kw["quiet"], f"[{name}] running")
    summary = body(stage)
    manifest = stage.finish()
    for w in stage.warnings:
        _progress(kw["quiet"], f"[{name}] warning: {w}")
    _progress(kw["quiet"], f"[{name}] done; manifest {manifest}")
    return summary


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(package_name="artifact")
def cli():
    """Workplace cluster risk-factor pipeline."""


@cli.command()
@_common
def ingest(**kw):
    """Validate the input file set and write a world snapshot."""
    _run("ingest", kw, pipeline.run_ingest)


@cli.command()
@_common
def clusters(**kw):
    """Detect clusters and count active clusters per MSOA, industry and week."""
    _run("clusters", kw, pipeline.run_clusters)


@cli.command()
@_common
def smooth(**kw):
    """Fit the spatial case-rate GAM and write weekly smoothed rates."""
    _run("smooth", kw, lambda st: pipeline.run_smooth(st, strict=kw["strict"]))


@cli.command()
@_common
def exposure(**kw):
    """Build the covariate frame from flows, profiles and smoothed rates."""
    _run("exposure", kw, pipeline.run_exposure)


@cli.command()
@_common
def fit(**kw):
    """Fit every risk factor, industry, tier and period."""
    _run("fit", kw, lambda st: pipeline.run_fit(st, strict=kw["strict"]))


@cli.command()
@_common
@click.option("--format", "fmt", type=click.Choice(["csv", "md"]), default="csv",
              help="`md` also renders the tables as markdown.")
def report(fmt, **kw):
    """Render the descriptive and results tables."""
    out = _run("report", kw, lambda st: pipeline.run_report(st, fmt))
    if fmt == "md":
        click.echo(out["markdown"], nl=False)


@cli.command()
@_common
def synth(**kw):
    """Generate a synthetic input file set with its truth ledger."""
    out = _run("synth", kw, lambda st: pipeline.run_synth(st, kw["seed"]))
    if not kw["quiet"]:
        click.echo(json.dumps(out["totals"], sort_keys=True), err=True)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="crp", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_ERROR
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    except StaleUpstream as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_STALE
    except NonConvergence as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NONCONVERGED
    except CrpError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
