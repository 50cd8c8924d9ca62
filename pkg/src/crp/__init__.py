"""Workplace cluster risk-factor pipeline.

Cluster detection from case events, commuter exposure covariates, spatial
GAM smoothing of case rates and per-industry negative-binomial models.
"""
__version__ = "0.1.0"

from .exceptions import CrpError  # noqa: E402
from .gam import CaseRateGAM, GamSpec  # noqa: E402
from .nbglm import NegativeBinomialGLM, PoissonGLM, fit_nb, pct_change, wald_ci  # noqa: E402
from .study import StudyConfig, build_plan, run_study  # noqa: E402
from .synthgen import GenSpec, gen_events, gen_world, synthesize  # noqa: E402
from .taxonomy import load_world  # noqa: E402

__all__ = [
    "CaseRateGAM",
    "CrpError",
    "GamSpec",
    "GenSpec",
    "NegativeBinomialGLM",
    "PoissonGLM",
    "StudyConfig",
    "build_plan",
    "fit_nb",
    "gen_events",
    "gen_world",
    "load_world",
    "pct_change",
    "run_study",
    "synthesize",
    "wald_ci",
]
