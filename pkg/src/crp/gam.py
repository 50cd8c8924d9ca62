"""Penalised quasi-Poisson smoother for daily MSOA case counts.

The linear predictor for MSOA ``m`` on day ``t`` (weekday ``d``) is::

    log E[n] = alpha_m + beta_d + g(m) + f(t, m) + log(P_m)

* ``alpha_m = mu + a_m``: global intercept plus a ridge-shrunk MSOA deviation.
* ``beta_d``: weekday effects, sum-to-zero, ridge-shrunk.
* ``g``: spatial field penalised by the adjacency Laplacian, sum-to-zero.
* ``f(., m)``: one cubic regression spline per MSOA, centred over its data.

Coefficients come from penalised IRLS with step halving; smoothing weights
are either fixed or picked from a grid by GCV.
"""
from __future__ import annotations

import datetime as dt
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InsufficientData, NonConvergence, SchemaViolation, SingularSystem
from .taxonomy import AdjacencyGraph, World, read_table

# Weight on (sum g)^2; any positive value pins sum(g) = 0 exactly because mu is unpenalised.
SUM_TO_ZERO_WEIGHT = 1.0
PENALTY_NAMES = ("lam_time", "lam_mrf", "lam_dow")
DEFAULT_GRID = tuple(float(x) for x in np.logspace(-4, 4, 9))
# Edf inflation in the selection score; plain GCV undersmooths noise too often.
GCV_GAMMA = 2.0


class CubicRegressionSpline:
    """Natural cubic spline parameterised by its values at the knots.

    ``basis(x) @ beta`` interpolates ``beta`` at the knots; ``penalty`` is the
    matrix of the integrated squared second derivative. Outside the knot
    range the spline continues linearly.
    """

    def __init__(self, knots: Sequence[float]):
        x = np.asarray(knots, dtype=float)
        if x.ndim != 1 or len(x) < 3 or np.any(np.diff(x) <= 0):
            raise ValueError("knots must be strictly increasing with at least 3 values")
        self.knots = x
        k = len(x)
        h = np.diff(x)
        D = np.zeros((k - 2, k))
        B = np.zeros((k - 2, k - 2))
        for i in range(k - 2):
            D[i, i] = 1.0 / h[i]
            D[i, i + 1] = -1.0 / h[i] - 1.0 / h[i + 1]
            D[i, i + 2] = 1.0 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3.0
            if i < k - 3:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6.0
        Binv_D = np.linalg.solve(B, D)
        self.h = h
        # second derivatives at the knots, zero at both ends
        self.F = np.vstack([np.zeros(k), Binv_D, np.zeros(k)])
        self.penalty = D.T @ Binv_D
        self.penalty = 0.5 * (self.penalty + self.penalty.T)

    @property
    def k(self) -> int:
        return len(self.knots)

    def _rows(self, x: np.ndarray, j: np.ndarray, deriv: bool) -> np.ndarray:
        xk, h, F = self.knots, self.h[j], self.F
        lo = x - xk[j]
        hi = xk[j + 1] - x
        n = len(x)
        out = np.zeros((n, self.k))
        idx = np.arange(n)
        if deriv:
            am, ap = -1.0 / h, 1.0 / h
            cm = (-3.0 * hi ** 2 / h + h) / 6.0
            cp = (3.0 * lo ** 2 / h - h) / 6.0
        else:
            am, ap = hi / h, lo / h
            cm = (hi ** 3 / h - h * hi) / 6.0
            cp = (lo ** 3 / h - h * lo) / 6.0
        out[idx, j] += am
        out[idx, j + 1] += ap
        out += cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        return out

    def basis(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xk = self.knots
        inside = np.clip(x, xk[0], xk[-1])
        j = np.clip(np.searchsorted(xk, inside, side="right") - 1, 0, self.k - 2)
        out = self._rows(inside, j, deriv=False)
        below, above = x < xk[0], x > xk[-1]
        if below.any():
            jb = np.zeros(below.sum(), dtype=int)
            out[below] += (x[below] - xk[0])[:, None] * self._rows(np.full(below.sum(), xk[0]), jb, deriv=True)
        if above.any():
            ja = np.full(above.sum(), self.k - 2)
            out[above] += (x[above] - xk[-1])[:, None] * self._rows(np.full(above.sum(), xk[-1]), ja, deriv=True)
        return out


def sum_to_zero_basis(constraint: np.ndarray) -> np.ndarray:
    """Orthonormal basis (k x k-1) of the null space of one linear constraint."""
    c = np.asarray(constraint, dtype=float).reshape(-1, 1)
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


def dow_contrast() -> np.ndarray:
    """7 x 6 sum-to-zero contrast; the last weekday is minus the sum of the others."""
    return np.vstack([np.eye(6), -np.ones((1, 6))])


@dataclass(frozen=True)
class GamSpec:
    k: int = 10
    lam_time: float = 1.0
    lam_mrf: float = 1.0
    lam_dow: float = 1.0
    lam_alpha: float = 1.0
    max_iter: int = 100
    tol: float = 1e-8
    family: str = "quasipoisson"

    def __post_init__(self):
        if self.k < 4:
            raise ValueError("spline basis size k must be at least 4")
        if min(self.lam_time, self.lam_mrf, self.lam_dow, self.lam_alpha) < 0:
            raise ValueError("penalty weights must be non-negative")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.family not in ("quasipoisson", "poisson", "gaussian"):
            raise ValueError(f"unknown family {self.family!r}")


@dataclass
class GamDesign:
    msoas: list[str]
    X: sp.csr_matrix
    y: np.ndarray
    offset: np.ndarray
    day: np.ndarray  # day number relative to ``origin``
    msoa_index: np.ndarray
    splines: list[CubicRegressionSpline]
    centering: list[np.ndarray]
    raw_spline_blocks: list[np.ndarray]
    laplacian: np.ndarray
    blocks: dict
    origin: dt.date
    span: float  # days mapped onto the unit interval
    population: np.ndarray

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    def scale_time(self, day) -> np.ndarray:
        return np.asarray(day, dtype=float) / self.span

    def penalty(self, spec: GamSpec) -> np.ndarray:
        p = self.n_coef
        S = np.zeros((p, p))
        b = self.blocks
        a = b["alpha"]
        S[a, a] = spec.lam_alpha * np.eye(a.stop - a.start)
        g = b["g"]
        n = g.stop - g.start
        S[g, g] = spec.lam_mrf * self.laplacian + SUM_TO_ZERO_WEIGHT * np.ones((n, n))
        for sl, spl, Z in zip(b["spline"], self.splines, self.centering):
            S[sl, sl] = spec.lam_time * (Z.T @ spl.penalty @ Z)
        d = b["dow"]
        C = dow_contrast()
        S[d, d] = spec.lam_dow * (C.T @ C)
        return S


def build_design(counts: pd.DataFrame, spec: GamSpec, adjacency: AdjacencyGraph,
                 origin: dt.date | None = None, span: float | None = None) -> GamDesign:
    """Design matrix and penalty layout for one batch of MSOAs.

    ``counts`` needs columns ``msoa, date, n_positive, population_18_64``.
    Knots sit at quantiles of each MSOA's distinct observation days.
    """
    df = counts.sort_values(["msoa", "date"], kind="mergesort").reset_index(drop=True)
    msoas = list(dict.fromkeys(df["msoa"]))
    n_m = len(msoas)
    dates = pd.to_datetime(df["date"])
    origin = origin or dates.min().date()
    day = (dates - pd.Timestamp(origin)).dt.days.to_numpy()
    span = float(span or max(day.max(), 1))
    t = day / span
    weekday = dates.dt.weekday.to_numpy()
    m_idx = pd.Categorical(df["msoa"], categories=msoas).codes.astype(int)
    pop = df.groupby("msoa", sort=False)["population_18_64"].first().reindex(msoas).to_numpy(dtype=float)
    if np.any(pop <= 0):
        raise SchemaViolation("tests", "population must be positive")

    missing = [m for m in msoas if m not in set(adjacency.nodes)]
    if n_m > 1:
        isolated = [m for m in msoas if m in missing or not any(adjacency.has_edge(m, o) for o in msoas if o != m)]
        if isolated:
            warnings.warn(f"MSOA(s) without neighbours in batch treated as isolated: {isolated[:5]}", stacklevel=2)
    L = adjacency.subgraph([m for m in msoas if m not in missing]).laplacian([m for m in msoas if m not in missing])
    if missing:
        full = np.zeros((n_m, n_m))
        keep = [i for i, m in enumerate(msoas) if m not in missing]
        full[np.ix_(keep, keep)] = L
        L = full

    rows, cols, vals = [], [], []
    n = len(df)
    all_rows = np.arange(n)
    # mu
    rows.append(all_rows); cols.append(np.zeros(n, int)); vals.append(np.ones(n))
    a0 = 1
    rows.append(all_rows); cols.append(a0 + m_idx); vals.append(np.ones(n))
    g0 = a0 + n_m
    rows.append(all_rows); cols.append(g0 + m_idx); vals.append(np.ones(n))
    s0 = g0 + n_m
    splines, centering, raw_blocks, spline_slices = [], [], [], []
    col = s0
    for i, m in enumerate(msoas):
        r = np.flatnonzero(m_idx == i)
        ux = np.unique(t[r])
        if len(ux) < spec.k:
            raise InsufficientData(f"MSOA {m!r} has {len(ux)} distinct dates, fewer than k={spec.k} knots")
        knots = np.quantile(ux, np.linspace(0.0, 1.0, spec.k))
        if np.any(np.diff(knots) <= 0):
            raise InsufficientData(f"MSOA {m!r} has too few distinct dates for {spec.k} distinct knots")
        spl = CubicRegressionSpline(knots)
        Xm = spl.basis(t[r])
        Z = sum_to_zero_basis(Xm.sum(axis=0))
        XZ = Xm @ Z
        kk = XZ.shape[1]
        rows.append(np.repeat(r, kk)); cols.append(np.tile(np.arange(col, col + kk), len(r))); vals.append(XZ.ravel())
        splines.append(spl); centering.append(Z); raw_blocks.append(Xm)
        spline_slices.append(slice(col, col + kk))
        col += kk
    d0 = col
    C = dow_contrast()
    Crows = C[weekday]
    rows.append(np.repeat(all_rows, 6)); cols.append(np.tile(np.arange(d0, d0 + 6), n)); vals.append(Crows.ravel())
    p = d0 + 6
    r_ = np.concatenate(rows); c_ = np.concatenate(cols); v_ = np.concatenate(vals)
    nz = v_ != 0
    X = sp.csr_matrix((v_[nz], (r_[nz], c_[nz])), shape=(n, p))
    blocks = {
        "mu": slice(0, 1),
        "alpha": slice(a0, a0 + n_m),
        "g": slice(g0, g0 + n_m),
        "spline": spline_slices,
        "dow": slice(d0, d0 + 6),
    }
    return GamDesign(
        msoas=msoas, X=X, y=df["n_positive"].to_numpy(dtype=float),
        offset=np.log(pop[m_idx]), day=day, msoa_index=m_idx,
        splines=splines, centering=centering, raw_spline_blocks=raw_blocks,
        laplacian=L, blocks=blocks, origin=origin, span=span, population=pop,
    )


@dataclass
class PirlsResult:
    beta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    A: np.ndarray  # X'WX + S at the solution
    XtWX: np.ndarray
    deviance: float
    penalized_deviance: float
    converged: bool
    n_iter: int
    trace: list = field(default_factory=list)


def _deviance(y, mu, family):
    if family == "gaussian":
        return float(np.sum((y - mu) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(t - (y - mu)))


def _gram(X, w):
    if sp.issparse(X):
        return np.asarray((X.T @ X.multiply(w[:, None])).todense())
    return X.T @ (X * w[:, None])


def pirls(X, y, offset, S, family: str = "poisson", beta0=None, tol: float = 1e-8,
          max_iter: int = 100) -> PirlsResult:
    """Penalised iteratively re-weighted least squares for log-link Poisson or identity Gaussian.

    Minimises ``deviance(beta) + beta' S beta``. Steps that raise the
    penalised deviance are halved. Converged when the largest absolute
    coefficient change falls below ``tol``.
    """
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    offset = np.zeros(n) if offset is None else np.broadcast_to(np.asarray(offset, dtype=float), (n,))
    poisson = family != "gaussian"
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)

    def linpred(b):
        return X @ b + offset

    def pen_dev(b):
        eta = linpred(b)
        mu = np.exp(np.minimum(eta, 700)) if poisson else eta
        return _deviance(y, mu, family) + float(b @ S @ b), eta, mu

    pd_old, eta, mu = pen_dev(beta)
    trace = [pd_old]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if poisson:
            w = mu
            z = eta - offset + (y - mu) / mu
        else:
            w = np.ones(n)
            z = y - offset
        XtWX = _gram(X, w)
        A = XtWX + S
        rhs = X.T @ (w * z)
        try:
            cf = sla.cho_factor(A, lower=True, check_finite=True)
            beta_new = sla.cho_solve(cf, rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(f"penalised normal equations are singular: {exc}") from None
        pd_new, eta_new, mu_new = pen_dev(beta_new)
        halvings = 0
        while not (pd_new <= pd_old + 1e-10 * abs(pd_old)) and halvings < 40:
            beta_new = 0.5 * (beta + beta_new)
            pd_new, eta_new, mu_new = pen_dev(beta_new)
            halvings += 1
        step = np.max(np.abs(beta_new - beta)) if p else 0.0
        beta, eta, mu, pd_old = beta_new, eta_new, mu_new, pd_new
        trace.append(pd_new)
        if step < tol:
            converged = True
            break
    w = mu if poisson else np.ones(n)
    XtWX = _gram(X, w)
    return PirlsResult(beta=beta, eta=eta, mu=mu, A=XtWX + S, XtWX=XtWX,
                       deviance=_deviance(y, mu, family), penalized_deviance=pd_old,
                       converged=converged, n_iter=it, trace=trace)


@dataclass
class GamFit:
    msoas: list[str]
    alpha: np.ndarray  # mu + a_m
    dow: np.ndarray  # 7 weekday effects, Monday first, summing to zero
    g: np.ndarray
    spline_coef: list[np.ndarray]  # raw knot-value coefficients per MSOA
    splines: list[CubicRegressionSpline]
    eta: np.ndarray
    coef: np.ndarray
    cov: np.ndarray  # Bayesian covariance of ``coef`` scaled by the dispersion
    dispersion: float
    edf: float
    deviance: float
    gcv: float
    converged: bool
    iterations: int
    spec: GamSpec
    origin: dt.date
    span: float
    trace: list = field(default_factory=list)

    def smooth(self, m: int, day) -> np.ndarray:
        """f(t, m) at the given day numbers."""
        t = np.asarray(day, dtype=float) / self.span
        return self.splines[m].basis(t) @ self.spline_coef[m]

    def central_log_rate(self, m: int, day) -> np.ndarray:
        """Per-capita log rate without the weekday effect."""
        return self.alpha[m] + self.g[m] + self.smooth(m, day)


def fit_gam(design: GamDesign, spec: GamSpec, beta0=None) -> GamFit:
    S = design.penalty(spec)
    family = "gaussian" if spec.family == "gaussian" else "poisson"
    if beta0 is None:
        beta0 = np.zeros(design.n_coef)
        if family == "poisson":
            beta0[0] = np.log((design.y.sum() + 0.5) / np.exp(design.offset).sum())
        else:
            beta0[0] = float(np.mean(design.y - design.offset))
    res = pirls(design.X, design.y, design.offset, S, family=family, beta0=beta0,
                tol=spec.tol, max_iter=spec.max_iter)
    if not res.converged:
        warnings.warn(f"GAM did not converge in {spec.max_iter} iterations", stacklevel=2)
    n = len(design.y)
    Ainv = sla.cho_solve(sla.cho_factor(res.A, lower=True), np.eye(design.n_coef))
    edf = float(np.sum(Ainv * res.XtWX.T))
    resid_df = max(n - edf, 1e-8)
    if family == "poisson":
        pearson = float(np.sum((design.y - res.mu) ** 2 / res.mu))
    else:
        pearson = float(np.sum((design.y - res.mu) ** 2))
    dispersion = 1.0 if spec.family == "poisson" else pearson / resid_df
    b = design.blocks
    beta = res.beta
    spline_coef = [Z @ beta[sl] for sl, Z in zip(b["spline"], design.centering)]
    return GamFit(
        msoas=list(design.msoas),
        alpha=beta[0] + beta[b["alpha"]],
        dow=dow_contrast() @ beta[b["dow"]],
        g=beta[b["g"]].copy(),
        spline_coef=spline_coef,
        splines=design.splines,
        eta=res.eta,
        coef=beta,
        cov=Ainv * dispersion,
        dispersion=dispersion,
        edf=edf,
        deviance=res.deviance,
        gcv=n * res.deviance / resid_df ** 2,
        converged=res.converged,
        iterations=res.n_iter,
        spec=spec,
        origin=design.origin,
        span=design.span,
        trace=res.trace,
    )


def gcv_score(fit: GamFit, n: int, gamma: float = 1.0) -> float:
    """``n * D / (n - gamma * edf)**2``; ``gamma > 1`` charges extra for each effective degree of freedom."""
    return n * fit.deviance / max(n - gamma * fit.edf, 1e-8) ** 2


def select_penalties(design: GamDesign, spec: GamSpec, grid: dict | Sequence[float] | None = None,
                     sweeps: int = 1, gamma: float = GCV_GAMMA) -> tuple[GamSpec, GamFit]:
    """Coordinate-wise grid search minimising GCV over the smoothing weights.

    ``grid`` is either one sequence used for every weight or a mapping from
    weight name to its own sequence; weights absent from the mapping stay
    fixed. Scores within ``1/n`` (relative) of the best, about one effective
    degree of freedom, count as ties and go to the heaviest penalty.
    """
    if grid is None:
        grid = {name: DEFAULT_GRID for name in PENALTY_NAMES}
    elif not isinstance(grid, dict):
        grid = {name: tuple(grid) for name in PENALTY_NAMES}
    if len(design.msoas) == 1:
        grid = {k: v for k, v in grid.items() if k != "lam_mrf"}
    n = len(design.y)
    cache: dict[GamSpec, GamFit] = {}

    def run(s: GamSpec, start=None) -> GamFit:
        if s not in cache:
            cache[s] = fit_gam(design, s, beta0=start)
        return cache[s]

    best_spec = spec
    best_fit = run(best_spec)
    for _ in range(sweeps):
        for name, values in grid.items():
            values = sorted(float(v) for v in values)
            if not values:
                continue
            cands = [replace(best_spec, **{name: v}) for v in values]
            fits = [run(c, best_fit.coef) for c in cands]
            scores = np.array([gcv_score(f, n, gamma) for f in fits])
            ok = np.flatnonzero(scores <= scores.min() + abs(scores.min()) / n)
            best_spec, best_fit = cands[ok.max()], fits[ok.max()]
    return best_spec, best_fit


def weekly_rates(fit: GamFit, week_starts: Sequence[dt.date]) -> pd.DataFrame:
    """Mean over each week's seven days of ``exp(alpha_m + g(m) + f(t, m))``.

    The weekday effect and the population offset are left out, so the
    result is a per-capita daily rate of the central trend.
    """
    rows = []
    offsets = np.array([(ws - fit.origin).days for ws in week_starts], dtype=float)
    days = (offsets[:, None] + np.arange(7)[None, :]).ravel()
    for m, code in enumerate(fit.msoas):
        lam = np.exp(fit.central_log_rate(m, days)).reshape(len(week_starts), 7).mean(axis=1)
        rows.extend(zip([code] * len(week_starts), week_starts, lam))
    return pd.DataFrame(rows, columns=["msoa", "week_start", "lambda_bar"])


def load_tests(path: str | Path, symptomatic_only: bool = True) -> pd.DataFrame:
    """Read ``tests.csv`` and total positives per (msoa, date)."""
    path = Path(path)
    rows = read_table(path, ["msoa", "date", "n_positive", "symptomatic_flag"])
    df = pd.DataFrame(rows, columns=["msoa", "date", "n_positive", "symptomatic_flag"])
    n = pd.to_numeric(df["n_positive"], errors="coerce")
    bad = n.isna() | (n < 0) | (n != np.floor(n))
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaViolation(path.name, f"invalid count {df['n_positive'].iloc[i]!r}", i + 2, "n_positive")
    d = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    if d.isna().any():
        i = int(np.flatnonzero(d.isna().to_numpy())[0])
        raise SchemaViolation(path.name, f"expected an ISO-8601 date, got {df['date'].iloc[i]!r}", i + 2, "date")
    flag = df["symptomatic_flag"].astype(str).str.strip().str.lower().isin(["1", "true", "yes", "y", "t"])
    df = pd.DataFrame({"msoa": df["msoa"].str.strip(), "date": d.dt.date, "n_positive": n.astype(np.int64), "symptomatic": flag})
    if symptomatic_only:
        df = df[df["symptomatic"]]
    return df.groupby(["msoa", "date"], sort=True)["n_positive"].sum().reset_index()


def complete_counts(tests: pd.DataFrame, world: World, start: dt.date | None = None,
                    end: dt.date | None = None) -> pd.DataFrame:
    """Zero-fill missing (msoa, date) cells over the date range and attach populations."""
    start = start or min(tests["date"])
    end = end or max(tests["date"])
    days = pd.date_range(start, end, freq="D").date
    msoas = sorted(set(tests["msoa"]))
    grid = pd.MultiIndex.from_product([msoas, days], names=["msoa", "date"]).to_frame(index=False)
    out = grid.merge(tests, on=["msoa", "date"], how="left")
    out["n_positive"] = out["n_positive"].fillna(0).astype(np.int64)
    pop = world.msoas.set_index("msoa")["population_18_64"]
    unknown = sorted(set(msoas) - set(pop.index))
    if unknown:
        from .exceptions import DanglingReference

        raise DanglingReference("test count", unknown[0], unknown[0], "tests.csv")
    out["population_18_64"] = pop.reindex(out["msoa"]).to_numpy()
    return out


def make_batches(adjacency: AdjacencyGraph, msoas: Sequence[str], max_batch: int = 200) -> list[list[str]]:
    """One batch per connected component, split into breadth-first chunks of at most ``max_batch``."""
    present = set(msoas)
    sub = adjacency.subgraph([m for m in adjacency.nodes if m in present] + sorted(present - set(adjacency.nodes)))
    batches = []
    for comp in sub.components():
        for i in range(0, len(comp), max_batch):
            batches.append(comp[i:i + max_batch])
    return batches


class CaseRateGAM(BaseEstimator):
    """Estimator wrapper around :func:`build_design` / :func:`fit_gam` for one batch."""

    def __init__(self, k=10, lam_time=1.0, lam_mrf=1.0, lam_dow=1.0, lam_alpha=1.0,
                 max_iter=100, tol=1e-8, family="quasipoisson", select=False, grid=None):
        self.k = k
        self.lam_time = lam_time
        self.lam_mrf = lam_mrf
        self.lam_dow = lam_dow
        self.lam_alpha = lam_alpha
        self.max_iter = max_iter
        self.tol = tol
        self.family = family
        self.select = select
        self.grid = grid

    def _spec(self) -> GamSpec:
        return GamSpec(k=self.k, lam_time=self.lam_time, lam_mrf=self.lam_mrf, lam_dow=self.lam_dow,
                       lam_alpha=self.lam_alpha, max_iter=self.max_iter, tol=self.tol, family=self.family)

    def fit(self, X: pd.DataFrame, y=None, adjacency: AdjacencyGraph | None = None, origin=None, span=None):
        X = X.copy()
        if y is not None:
            X["n_positive"] = np.asarray(y)
        missing = {"msoa", "date", "n_positive", "population_18_64"} - set(X.columns)
        if missing:
            raise ValueError(f"missing columns {sorted(missing)}")
        if adjacency is None:
            adjacency = AdjacencyGraph(tuple(dict.fromkeys(X["msoa"])))
        self.design_ = build_design(X, self._spec(), adjacency, origin=origin, span=span)
        if self.select:
            self.spec_, self.fit_ = select_penalties(self.design_, self._spec(), self.grid)
        else:
            self.spec_ = self._spec()
            self.fit_ = fit_gam(self.design_, self.spec_)
        return self

    def predict(self, X: pd.DataFrame | None = None) -> np.ndarray:
        """Expected daily counts (weekday effect and offset included) at the training rows."""
        check_is_fitted(self, "fit_")
        if X is not None:
            raise NotImplementedError("prediction is only defined at the training rows")
        eta = self.fit_.eta
        return eta if self.spec_.family == "gaussian" else np.exp(eta)

    def weekly_rates(self, week_starts: Sequence[dt.date]) -> pd.DataFrame:
        check_is_fitted(self, "fit_")
        return weekly_rates(self.fit_, week_starts)


def smooth_case_rates(counts: pd.DataFrame, adjacency: AdjacencyGraph, week_starts: Sequence[dt.date],
                      spec: GamSpec | None = None, select: bool = False, grid=None,
                      max_batch: int = 200, threads: int = 1, strict: bool = False) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Fit every batch and return ``(smoothed_rates, diagnostics)``."""
    spec = spec or GamSpec()
    origin = min(counts["date"])
    span = max(float((max(counts["date"]) - origin).days), 1.0)
    batches = make_batches(adjacency, sorted(set(counts["msoa"])), max_batch=max_batch)
    by_msoa = {m: g for m, g in counts.groupby("msoa", sort=False)}

    def run(batch):
        data = pd.concat([by_msoa[m] for m in batch], ignore_index=True)
        design = build_design(data, spec, adjacency, origin=origin, span=span)
        if select:
            chosen, fit = select_penalties(design, spec, grid)
        else:
            chosen, fit = spec, fit_gam(design, spec)
        return fit

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(run, batches))
    else:
        fits = [run(b) for b in batches]
    rates, diag = [], []
    for i, fit in enumerate(fits):
        if strict and not fit.converged:
            raise NonConvergence(f"GAM batch {i} did not converge")
        rates.append(weekly_rates(fit, week_starts))
        diag.append({"batch": i, "edf": fit.edf, "dispersion": fit.dispersion, "converged": fit.converged,
                     "iterations": fit.iterations, "gcv": fit.gcv, "lam_time": fit.spec.lam_time,
                     "lam_mrf": fit.spec.lam_mrf, "lam_dow": fit.spec.lam_dow, "n_msoas": len(fit.msoas)})
    out = pd.concat(rates, ignore_index=True).sort_values(["msoa", "week_start"], kind="mergesort").reset_index(drop=True)
    return out, pd.DataFrame(diag)
