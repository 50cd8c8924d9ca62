"""Negative-binomial GLM with log link and offset.

Coefficients are fitted by IRLS at fixed dispersion ``theta`` (variance
``mu + mu**2 / theta``); ``theta`` is then re-estimated by Newton steps on
the profile log-likelihood, and the two updates alternate until both settle.
If ``theta`` runs past ``theta_max`` the data carry no extra-Poisson
variation and the Poisson fit is returned with ``poisson_limit_`` set.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.special import digamma, gammaln, polygamma
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import RankDeficient

THETA_MAX = 1e8
_LARGE_THETA = 1e5


@dataclass
class ModelMatrix:
    y: np.ndarray
    offset: np.ndarray
    X: pd.DataFrame  # named covariate columns, no intercept
    keys: pd.DataFrame | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        if np.any(self.y < 0) or np.any(self.y != np.floor(self.y)):
            raise ValueError("response must be non-negative integer counts")
        if not np.all(np.isfinite(self.offset)):
            raise ValueError("offset must be finite")
        if self.X.isna().to_numpy().any():
            raise ValueError("covariates contain missing values")

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass
class NbFit:
    names: list[str]
    params: np.ndarray
    cov: np.ndarray
    theta: float
    loglik: float
    converged: bool
    n_iter: int
    poisson_limit: bool = False
    loglik_trace: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def table(self, level: float = 0.90) -> pd.DataFrame:
        lo, hi = wald_ci(self.params, self.se, level)
        return pd.DataFrame({"beta": self.params, "se": self.se, "ci_lo": lo, "ci_hi": hi}, index=self.names)


_MAX_TABLE = 1_000_000


def _counts(y):
    """Integer view of ``y`` when it holds modest non-negative counts, else ``None``."""
    y = np.asarray(y)
    if y.size == 0:
        return y.astype(np.int64)
    top = float(np.max(y))
    if top > _MAX_TABLE or np.any(y != np.floor(y)):
        return None
    return y.astype(np.int64)


def _cumulative(f, yi, theta):
    """``sum_{k < y} f(theta + k)`` for each integer ``y`` via one cumulative table."""
    k = np.arange(int(yi.max()) if yi.size else 0, dtype=float)
    table = np.concatenate([[0.0], np.cumsum(f(theta + k))])
    return table[yi]


# The differences below are exact finite sums for integer counts. Taking them
# as gamma-function differences loses about log(theta) digits to cancellation,
# enough to stall the theta update once theta reaches the hundreds.
def _digamma_diff(y, theta):
    """psi(y + theta) - psi(theta)."""
    yi = _counts(y)
    if yi is not None:
        return _cumulative(lambda t: 1.0 / t, yi, theta)
    if theta < _LARGE_THETA:
        return digamma(y + theta) - digamma(theta)
    a = theta + y
    return np.log1p(y / theta) - 0.5 / a + 0.5 / theta - 1.0 / (12 * a * a) + 1.0 / (12 * theta * theta)


def _trigamma_diff(y, theta):
    """psi'(y + theta) - psi'(theta)."""
    yi = _counts(y)
    if yi is not None:
        return -_cumulative(lambda t: 1.0 / (t * t), yi, theta)
    if theta < _LARGE_THETA:
        return polygamma(1, y + theta) - polygamma(1, theta)
    return -y / (theta * (theta + y)) - 0.5 * y / (theta * theta * (theta + y)) * (2 * theta + y) / (theta + y)


def _lgamma_diff(y, theta):
    """log Gamma(y + theta) - log Gamma(theta)."""
    yi = _counts(y)
    if yi is not None:
        return _cumulative(np.log, yi, theta)
    if theta < _LARGE_THETA:
        return gammaln(y + theta) - gammaln(theta)
    a = theta + y
    return (theta - 0.5) * np.log1p(y / theta) + y * np.log(a) - y + 1.0 / (12 * a) - 1.0 / (12 * theta)


def nb_loglik(y, mu, theta) -> float:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if not np.isfinite(theta):
        return poisson_loglik(y, mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * (np.log(mu) - np.log(theta + mu)), 0.0)
    ll = _lgamma_diff(y, theta) - gammaln(y + 1) - theta * np.log1p(mu / theta) + ylog
    return float(np.sum(ll))


def poisson_loglik(y, mu) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(mu), 0.0)
    return float(np.sum(ylog - mu - gammaln(y + 1)))


def theta_score(y, mu, theta) -> float:
    return float(np.sum(_digamma_diff(y, theta) - np.log1p(mu / theta) + (mu - y) / (theta + mu)))


def theta_hessian(y, mu, theta) -> float:
    return float(np.sum(_trigamma_diff(y, theta) + 1.0 / theta - 2.0 / (theta + mu) + (y + theta) / (theta + mu) ** 2))


def theta_ml(y, mu, theta0: float = 1.0, theta_max: float = THETA_MAX, tol: float = 1e-10,
             max_iter: int = 200) -> float:
    """Maximise the NB log-likelihood over theta at fixed means; ``inf`` when it diverges past ``theta_max``."""
    s = np.log(min(max(theta0, 1e-8), theta_max))
    ll = nb_loglik(y, mu, np.exp(s))
    for _ in range(max_iter):
        th = np.exp(s)
        g1 = theta_score(y, mu, th) * th
        g2 = theta_hessian(y, mu, th) * th * th + g1
        step = -g1 / g2 if g2 < 0 else np.sign(g1)
        step = float(np.clip(step, -3.0, 3.0))
        for _ in range(60):
            cand = s + step
            if cand > np.log(theta_max):
                break
            ll_new = nb_loglik(y, mu, np.exp(cand))
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        s += step
        if s > np.log(theta_max):
            return np.inf
        ll = nb_loglik(y, mu, np.exp(s))
        if abs(step) < tol:
            break
    return float(np.exp(s))


def _weights(mu, theta):
    return mu if not np.isfinite(theta) else mu / (1.0 + mu / theta)


def _irls(D, y, offset, theta, beta, tol, max_iter):
    """IRLS for beta at fixed theta with step halving on the log-likelihood."""
    def state(b):
        eta = D @ b + offset
        mu = np.exp(np.minimum(eta, 700.0))
        return eta, mu, nb_loglik(y, mu, theta)

    eta, mu, ll = state(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = _weights(mu, theta)
        z = eta - offset + (y - mu) / mu
        A = D.T @ (D * w[:, None])
        try:
            new = sla.cho_solve(sla.cho_factor(A, lower=True), D.T @ (w * z))
        except np.linalg.LinAlgError:
            new = np.linalg.lstsq(D * np.sqrt(w)[:, None], np.sqrt(w) * z, rcond=None)[0]
        eta_n, mu_n, ll_n = state(new)
        halvings = 0
        while not (ll_n >= ll - 1e-10 * abs(ll)) and halvings < 40:
            new = 0.5 * (beta + new)
            eta_n, mu_n, ll_n = state(new)
            halvings += 1
        step = float(np.max(np.abs(new - beta)))
        beta, eta, mu, ll = new, eta_n, mu_n, ll_n
        if step < tol:
            converged = True
            break
    return beta, mu, ll, converged, it


def _design(X, fit_intercept: bool):
    if isinstance(X, pd.DataFrame):
        names = [str(c) for c in X.columns]
    else:
        names = None
    arr = check_array(X, ensure_2d=True, dtype=float, ensure_min_features=0, ensure_all_finite=True)
    if names is None:
        names = [f"x{i}" for i in range(arr.shape[1])]
    if fit_intercept:
        arr = np.column_stack([np.ones(len(arr)), arr])
        names = ["intercept"] + names
    return arr, names


def _standardize(D, fit_intercept: bool):
    """Centre and scale the non-intercept columns; returns ``(Z, T)`` with ``beta = T @ gamma``."""
    p = D.shape[1]
    T = np.eye(p)
    if p == 0:
        return D, T
    j0 = 1 if fit_intercept else 0
    mean = D[:, j0:].mean(axis=0) if fit_intercept else np.zeros(p - j0)
    scale = D[:, j0:].std(axis=0) if fit_intercept else np.sqrt((D[:, j0:] ** 2).mean(axis=0))
    scale = np.where(scale > 0, scale, 1.0)
    Z = D.copy()
    Z[:, j0:] = (D[:, j0:] - mean) / scale
    T[j0:, j0:] = np.diag(1.0 / scale)
    if fit_intercept:
        T[0, 1:] = -mean / scale
    return Z, T


def _check_rank(D, names):
    if D.shape[1] == 0:
        return
    rank = np.linalg.matrix_rank(D)
    if rank < D.shape[1]:
        _, _, piv = sla.qr(D, mode="economic", pivoting=True)
        raise RankDeficient([names[i] for i in sorted(piv[rank:])])


def _check_target(y, offset, n):
    y = np.asarray(y, dtype=float).ravel()
    if len(y) != n:
        raise ValueError("X and y have different numbers of rows")
    if np.any(y < 0) or np.any(~np.isfinite(y)):
        raise ValueError("response must be non-negative and finite")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).ravel()
    if len(offset) != n or not np.all(np.isfinite(offset)):
        raise ValueError("offset must be finite with one value per row")
    return y, offset


def _sym(a):
    return 0.5 * (a + a.T)


class PoissonGLM(BaseEstimator, RegressorMixin):
    """Plain Poisson log-link GLM fitted by IRLS."""

    def __init__(self, fit_intercept=True, max_iter=100, tol=1e-10):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, offset=None):
        D, names = _design(X, self.fit_intercept)
        y, offset = _check_target(y, offset, len(D))
        if D.shape[0] <= D.shape[1]:
            raise ValueError("need more rows than columns")
        _check_rank(D, names)
        Z, T = _standardize(D, self.fit_intercept)
        gamma = np.zeros(D.shape[1])
        if self.fit_intercept:
            gamma[0] = np.log((y.sum() + 0.1) / np.exp(offset).sum())
        gamma, mu, ll, conv, it = _irls(Z, y, offset, np.inf, gamma, self.tol, self.max_iter)
        A = Z.T @ (Z * mu[:, None])
        self.names_ = names
        self.params_ = T @ gamma
        self.cov_params_ = _sym(T @ np.linalg.inv(A) @ T.T)
        self.loglik_ = ll
        self.converged_ = conv
        self.n_iter_ = it
        self._set_public()
        return self

    def _set_public(self):
        if self.fit_intercept:
            self.intercept_, self.coef_ = float(self.params_[0]), self.params_[1:]
        else:
            self.intercept_, self.coef_ = 0.0, self.params_

    def predict(self, X, offset=None):
        check_is_fitted(self, "params_")
        D, _ = _design(X, self.fit_intercept)
        offset = 0.0 if offset is None else np.asarray(offset, dtype=float)
        return np.exp(D @ self.params_ + offset)


class NegativeBinomialGLM(PoissonGLM):
    """NB2 GLM; ``theta`` estimated by maximum likelihood alternating with IRLS."""

    def __init__(self, fit_intercept=True, max_iter=100, tol=1e-8, max_outer=200,
                 init_theta=1.0, theta_max=THETA_MAX):
        super().__init__(fit_intercept=fit_intercept, max_iter=max_iter, tol=tol)
        self.max_outer = max_outer
        self.init_theta = init_theta
        self.theta_max = theta_max

    def fit(self, X, y, offset=None, warn: bool = True):
        D, names = _design(X, self.fit_intercept)
        y, offset = _check_target(y, offset, len(D))
        if D.shape[0] <= D.shape[1]:
            raise ValueError("need more rows than columns")
        _check_rank(D, names)
        # work on standardised columns; converted back after the fit
        D, T = _standardize(D, self.fit_intercept)
        beta = np.zeros(D.shape[1])
        if self.fit_intercept:
            beta[0] = np.log((y.sum() + 0.1) / np.exp(offset).sum())
        # Poisson start, then theta = init_theta
        beta, mu, _, _, _ = _irls(D, y, offset, np.inf, beta, self.tol, self.max_iter)
        theta = float(self.init_theta)
        trace = []
        converged = poisson_limit = False
        n_outer = 0
        for n_outer in range(1, self.max_outer + 1):
            beta_new, mu, ll, inner_ok, _ = _irls(D, y, offset, theta, beta, self.tol, self.max_iter)
            theta_new = theta_ml(y, mu, theta, theta_max=self.theta_max)
            if not np.isfinite(theta_new):
                poisson_limit = True
                beta, mu, ll, converged, _ = _irls(D, y, offset, np.inf, beta_new, self.tol, self.max_iter)
                theta = np.inf
                trace.append(ll)
                break
            trace.append(nb_loglik(y, mu, theta_new))
            db = float(np.max(np.abs(beta_new - beta)))
            dt_rel = abs(theta_new - theta) / theta
            beta, theta = beta_new, theta_new
            if db < self.tol and dt_rel < self.tol and inner_ok:
                converged = True
                break
        eta = D @ beta + offset
        mu = np.exp(eta)
        w = _weights(mu, theta)
        A = D.T @ (D * w[:, None])
        if not converged and warn:
            warnings.warn(f"negative binomial fit did not converge in {self.max_outer} outer iterations", stacklevel=2)
        self.names_ = names
        self.params_ = T @ beta
        self.cov_params_ = _sym(T @ np.linalg.inv(A) @ T.T)
        self.theta_ = float(theta)
        self.loglik_ = nb_loglik(y, mu, theta)
        self.converged_ = converged
        self.n_iter_ = n_outer
        self.poisson_limit_ = poisson_limit
        self.loglik_trace_ = trace
        self._set_public()
        return self

    def result(self) -> NbFit:
        check_is_fitted(self, "params_")
        return NbFit(names=list(self.names_), params=self.params_.copy(), cov=self.cov_params_.copy(),
                     theta=self.theta_, loglik=self.loglik_, converged=self.converged_, n_iter=self.n_iter_,
                     poisson_limit=self.poisson_limit_, loglik_trace=list(self.loglik_trace_))


def fit_nb(mm: ModelMatrix, warn: bool = True, **controls) -> NbFit:
    """Fit an NB GLM (with intercept) to a :class:`ModelMatrix`; ``warn=False`` leaves non-convergence to the caller."""
    return NegativeBinomialGLM(**controls).fit(mm.X, mm.y, offset=mm.offset, warn=warn).result()


def z_value(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2.0))


def wald_ci(beta, se, level: float = 0.90):
    """Symmetric Wald interval ``beta -/+ z * se``."""
    z = z_value(level)
    beta = np.asarray(beta, dtype=float)
    se = np.asarray(se, dtype=float)
    return beta - z * se, beta + z * se


def pct_change(beta, lo=None, hi=None, unit: float = 1.0):
    """Percentage change in risk ``100 * (exp(beta * unit) - 1)`` for a point and optional interval ends."""
    if unit <= 0:
        raise ValueError("unit must be positive")

    def f(b):
        # separated fits can overflow; the infinite change is reported as such
        with np.errstate(over="ignore"):
            return 100.0 * np.expm1(np.asarray(b, dtype=float) * unit)

    if lo is None and hi is None:
        return f(beta)
    return f(beta), f(lo), f(hi)
