"""Posterior-predictive machinery: imputation, kriging, forecasting,
spatiotemporal prediction, and period-average (AADB-style) estimation.

Every operation follows composition sampling: for each kept posterior draw a
log-rate is assembled for the target, one Poisson count is drawn from it, and
the ensemble of counts is summarized with equal-tailed credible intervals.
Dense-path kriging conditions the intercept on the data sites through the
Matern correlation; the sparse path projects mesh-node weights through
barycentric rows, which needs no extra conditional noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    Dataset,
    SpatialLocation,
    build_dense_correlation,
    chol_spd,
    matern_correlation,
)
from .spde import build_precision, build_projector

# exp(30) ~ 1e13 daily counts is far beyond any data this model targets, and
# capping there keeps Poisson sampling inside integer range.
_LAM_CAP = 30.0


@dataclass
class PredictiveSummary:
    """Posterior-predictive summaries for a list of targets."""

    labels: list[str]
    mean: np.ndarray
    sd: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    count_draws: np.ndarray | None = None   # (K, n_targets) when retained

    @property
    def n_targets(self) -> int:
        return self.mean.shape[0]


@dataclass
class AadbEstimate:
    """Posterior summary of a per-site daily average over a period."""

    site: str
    period: str
    mean: float
    sd: float
    median: float
    lower: float
    upper: float
    level: float
    draws: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.mean < 0 or self.lower < 0:
            raise ValueError("period-average counts cannot be negative")


def _summarize(count_draws: np.ndarray, labels: list[str], level: float,
               keep_draws: bool) -> PredictiveSummary:
    if not (0.0 < level < 1.0):
        raise ValueError("credible level must be in (0, 1)")
    alpha = (1.0 - level) / 2.0
    K = count_draws.shape[0]
    lower, median, upper = np.quantile(count_draws,
                                       [alpha, 0.5, 1.0 - alpha], axis=0)
    sd = count_draws.std(axis=0, ddof=1) if K > 1 \
        else np.zeros(count_draws.shape[1])
    mean = count_draws.mean(axis=0)
    # a constant sample summarizes to itself; pairwise summation can otherwise
    # wobble the mean and sd by an ulp, which matters for exact identities
    const = np.all(count_draws == count_draws[0], axis=0)
    mean = np.where(const, count_draws[0], mean)
    sd = np.where(const, 0.0, sd)
    return PredictiveSummary(labels=labels, mean=mean,
                             sd=sd, median=median, lower=lower, upper=upper,
                             level=level,
                             count_draws=count_draws if keep_draws else None)


def _poisson_counts(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.poisson(np.exp(np.minimum(lam, _LAM_CAP))).astype(float)


def _site_coords(new_site) -> np.ndarray:
    if isinstance(new_site, SpatialLocation):
        return new_site.as_array()
    arr = np.asarray(new_site, dtype=float).ravel()
    if arr.size != 2 or not np.all(np.isfinite(arr)):
        raise ValueError("a prediction site must be two finite coordinates")
    return arr


def _seasonal_series(F: np.ndarray, theta_k: np.ndarray) -> np.ndarray:
    if F.shape[1] == 0:
        return np.zeros(F.shape[0])
    return np.einsum("tp,tp->t", F, theta_k)


class _DenseKrige:
    """Per-range cache of the kriging weights for one new site."""

    def __init__(self, dataset: Dataset, coords: np.ndarray, nu: float):
        self.sites = dataset.sites
        self.dists = np.linalg.norm(dataset.sites - coords[None, :], axis=1)
        self.nu = nu
        self._cache: dict[float, tuple[np.ndarray, float]] = {}

    def weights(self, kappa: float) -> tuple[np.ndarray, float]:
        """(solve vector s = Omega^-1 Upsilon*, base variance 1 - Upsilon*'s)."""
        hit = self._cache.get(kappa)
        if hit is not None:
            return hit
        omega = build_dense_correlation(self.sites, kappa, self.nu)
        upsilon = matern_correlation(self.dists, kappa, self.nu)
        upsilon = np.atleast_1d(upsilon)
        L, _ = chol_spd(omega)
        s = scipy.linalg.cho_solve((L, True), upsilon)
        base = max(1.0 - float(upsilon @ s), 0.0)
        self._cache[kappa] = (s, base)
        return s, base


class _SparsePropagator:
    """Per-range cache of the GMRF precision for forward propagation."""

    def __init__(self, ctx):
        self.ctx = ctx
        self._cache = {}

    def get(self, kappa: float):
        hit = self._cache.get(kappa)
        if hit is None:
            hit = build_precision(self.ctx.fem, kappa)
            self._cache[kappa] = hit
        return hit


# ---------------------------------------------------------------------------
# imputation

def impute(draws, dataset: Dataset, cells=None, level: float = 0.95,
           keep_draws: bool = False, seed: int = 0) -> PredictiveSummary:
    """Posterior-predictive counts for unobserved cells.

    cells defaults to every masked cell; explicit (t, i) requests must be
    unobserved.  Requires the fit to have retained log-rate draws at masked
    cells.
    """
    if draws.lam_missing is None:
        raise ValueError("imputation requires retained log-rate draws at "
                         "masked cells; refit before imputing")
    index = {(int(t), int(i)): c
             for c, (t, i) in enumerate(draws.missing_cells)}
    if cells is None:
        cols = np.arange(len(index))
        targets = [tuple(map(int, ti)) for ti in draws.missing_cells]
    else:
        targets = [(int(t), int(i)) for t, i in cells]
        bad = [ti for ti in targets if ti not in index]
        if bad:
            raise ValueError(f"cells {bad} are observed (or out of range); "
                             "imputation targets unobserved cells only")
        cols = np.array([index[ti] for ti in targets], dtype=int)
    if cols.size == 0:
        raise ValueError("dataset has no unobserved cells to impute")
    lam = draws.lam_missing[:, cols]
    counts = _poisson_counts(lam, np.random.default_rng(seed))
    labels = [f"t{t}_{dataset.site_ids[i]}" for t, i in targets]
    return _summarize(counts, labels, level, keep_draws)


# ---------------------------------------------------------------------------
# kriging

def _check_new_covariates(dataset: Dataset, x_new) -> np.ndarray | None:
    T, q = dataset.T, dataset.q
    if q == 0:
        return None
    if x_new is None:
        raise ValueError("kriging needs covariates for the new site "
                         f"(shape ({T}, {q})) because the model uses them")
    x_new = np.asarray(x_new, dtype=float)
    if x_new.shape != (T, q):
        raise ValueError(f"x_new must have shape ({T}, {q}), "
                         f"got {x_new.shape}")
    return x_new


def _krige_lambda(draws, dataset: Dataset, coords: np.ndarray, x_new,
                  rng: np.random.Generator) -> np.ndarray:
    """Per-draw log-rates at a new site over t = 1..T, (K, T)."""
    ctx = draws.context
    T = dataset.T
    K = draws.n_draws
    lam = np.empty((K, T))
    if ctx.path == "sparse":
        proj = build_projector(ctx.mesh, coords[None, :])
        a_vec = proj.a.toarray().ravel()
        for k in range(K):
            lam[k] = draws.weights[k] @ a_vec
    else:
        cache = _DenseKrige(dataset, coords, ctx.nu)
        for k in range(K):
            s, base = cache.weights(float(draws.kappa[k]))
            noise_sd = np.sqrt(draws.sigma2[k] * base)
            lam[k] = draws.intercepts[k] @ s \
                + noise_sd * rng.standard_normal(T)
    for k in range(K):
        lam[k] += _seasonal_series(dataset.F, draws.theta[k])
        if x_new is not None:
            lam[k] += x_new @ draws.beta[k]
        lam[k] += np.sqrt(draws.tau2[k]) * rng.standard_normal(T)
    return lam


def krige(draws, dataset: Dataset, new_site, x_new=None, level: float = 0.95,
          keep_draws: bool = False, seed: int = 0) -> PredictiveSummary:
    """Predictive count series at a new site over the observed window.

    x_new carries the new site's covariates, shape (T, q); required whenever
    the model has covariates.  On the sparse path the site must fall inside
    the mesh hull.
    """
    coords = _site_coords(new_site)
    x_new = _check_new_covariates(dataset, x_new)
    rng = np.random.default_rng(seed)
    lam = _krige_lambda(draws, dataset, coords, x_new, rng)
    counts = _poisson_counts(lam, rng)
    labels = [f"t{t}" for t in range(dataset.T)]
    return _summarize(counts, labels, level, keep_draws)


# ---------------------------------------------------------------------------
# forecasting at the data sites

def _check_future_designs(dataset: Dataset, steps: int, x_future, f_future,
                          per_site: bool, what: str):
    """Validate/default F and X over future steps; returns (F, X) arrays."""
    p, q = dataset.p, dataset.q
    if f_future is None:
        f_future = np.tile(dataset.F[-1], (steps, 1)) if p \
            else np.zeros((steps, 0))
    f_future = np.asarray(f_future, dtype=float)
    if f_future.shape != (steps, p):
        raise ValueError(f"f_future must have shape ({steps}, {p}), "
                         f"got {f_future.shape}")
    if q == 0:
        shape = (steps, dataset.n_sites, 0) if per_site else (steps, 0)
        return f_future, np.zeros(shape)
    if x_future is None:
        raise ValueError(f"{what} needs future covariates for every "
                         "requested step because the model uses them")
    x_future = np.asarray(x_future, dtype=float)
    want = (steps, dataset.n_sites, q) if per_site else (steps, q)
    if x_future.shape != want:
        raise ValueError(f"x_future must have shape {want}, "
                         f"got {x_future.shape}")
    return f_future, x_future


def _forecast_lambda(draws, dataset: Dataset, horizons: int, x_future,
                     f_future, rng: np.random.Generator) -> np.ndarray:
    """Per-draw forward-propagated log-rates at the data sites, (K, H, n)."""
    ctx = draws.context
    H = horizons
    n, p = dataset.n_sites, dataset.p
    K = draws.n_draws
    lam = np.empty((K, H, n))
    G = dataset.G
    sparse = ctx.path == "sparse"
    prop = _SparsePropagator(ctx) if sparse else None
    dense_cache: dict[float, np.ndarray] = {}
    a_mat = ctx.projector.a if sparse else None
    for k in range(K):
        sigma2 = float(draws.sigma2[k])
        tau2 = float(draws.tau2[k])
        w_sd = np.sqrt(draws.w[k])
        theta = draws.theta[k, -1].copy() if p else np.zeros(0)
        if sparse:
            spatial = prop.get(float(draws.kappa[k]))
            field = draws.weights[k, -1].copy()
        else:
            kap = float(draws.kappa[k])
            L = dense_cache.get(kap)
            if L is None:
                L, _ = chol_spd(build_dense_correlation(dataset.sites, kap,
                                                        ctx.nu))
                dense_cache[kap] = L
            field = draws.intercepts[k, -1].copy()
        for h in range(H):
            if sparse:
                field = field + spatial.sample(sigma2, rng)
                mu_sites = a_mat @ field
            else:
                field = field + np.sqrt(sigma2) * (L @ rng.standard_normal(n))
                mu_sites = field
            if p:
                theta = G @ theta + w_sd * rng.standard_normal(p)
            lam[k, h] = mu_sites + float(f_future[h] @ theta) \
                + x_future[h] @ draws.beta[k] \
                + np.sqrt(tau2) * rng.standard_normal(n)
    return lam


def forecast(draws, dataset: Dataset, horizons: int, x_future=None,
             f_future=None, level: float = 0.95, keep_draws: bool = False,
             seed: int = 0) -> PredictiveSummary:
    """Predictive counts at the data sites for h = 1..horizons.

    x_future has shape (horizons, n, q); f_future (horizons, p) defaults to
    repeating the last in-sample design row (harmonic designs are constant).
    """
    H = int(horizons)
    if H < 1:
        raise ValueError("forecast needs at least one horizon step")
    f_future, x_future = _check_future_designs(dataset, H, x_future, f_future,
                                               per_site=True, what="forecast")
    rng = np.random.default_rng(seed)
    lam = _forecast_lambda(draws, dataset, H, x_future, f_future, rng)
    K = draws.n_draws
    counts = _poisson_counts(lam.reshape(K, -1), rng)
    labels = [f"h{h}_{sid}" for h in range(1, H + 1)
              for sid in dataset.site_ids]
    return _summarize(counts, labels, level, keep_draws)


# ---------------------------------------------------------------------------
# new site and future time jointly

def _spacetime_lambda(draws, dataset: Dataset, coords: np.ndarray, steps: int,
                      x_future, f_future,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-draw log-rates at a new site for h = 0..steps-1, (K, steps)."""
    ctx = draws.context
    K = draws.n_draws
    p = dataset.p
    G = dataset.G
    lam = np.empty((K, steps))
    sparse = ctx.path == "sparse"
    if sparse:
        proj = build_projector(ctx.mesh, coords[None, :])
        a_vec = proj.a.toarray().ravel()
        prop = _SparsePropagator(ctx)
    else:
        cache = _DenseKrige(dataset, coords, ctx.nu)
    for k in range(K):
        sigma2 = float(draws.sigma2[k])
        tau2 = float(draws.tau2[k])
        w_sd = np.sqrt(draws.w[k])
        theta = draws.theta[k, -1].copy() if p else np.zeros(0)
        if sparse:
            spatial = prop.get(float(draws.kappa[k]))
            field = draws.weights[k, -1].copy()
            mu_p = float(a_vec @ field)
        else:
            s, base = cache.weights(float(draws.kappa[k]))
            step_sd = np.sqrt(sigma2 * base)
            mu_p = float(draws.intercepts[k, -1] @ s) \
                + step_sd * rng.standard_normal()
        for h in range(steps):
            if h > 0:
                if sparse:
                    field = field + spatial.sample(sigma2, rng)
                    mu_p = float(a_vec @ field)
                else:
                    mu_p = mu_p + step_sd * rng.standard_normal()
                if p:
                    theta = G @ theta + w_sd * rng.standard_normal(p)
            lam[k, h] = mu_p + float(f_future[h] @ theta) \
                + float(x_future[h] @ draws.beta[k]) \
                + np.sqrt(tau2) * rng.standard_normal()
    return lam


def spacetime_predict(draws, dataset: Dataset, new_site, horizons: int,
                      x_future=None, f_future=None, level: float = 0.95,
                      keep_draws: bool = False,
                      seed: int = 0) -> PredictiveSummary:
    """Predictive counts at a new site for h = 0..horizons.

    Row h = 0 is the kriged prediction at the last observed time; rows h >= 1
    propagate forward.  x_future has shape (horizons + 1, q) with row 0
    holding the new site's covariates at time T.  The sparse path propagates
    the full node field and projects it; the dense path propagates the kriged
    scalar with the per-step conditional variance.
    """
    coords = _site_coords(new_site)
    H = int(horizons)
    if H < 0:
        raise ValueError("horizons must be nonnegative")
    steps = H + 1
    f_future, x_future = _check_future_designs(dataset, steps, x_future,
                                               f_future, per_site=False,
                                               what="spacetime_predict")
    rng = np.random.default_rng(seed)
    lam = _spacetime_lambda(draws, dataset, coords, steps, x_future, f_future,
                            rng)
    counts = _poisson_counts(lam, rng)
    labels = [f"h{h}" for h in range(steps)]
    return _summarize(counts, labels, level, keep_draws)


# ---------------------------------------------------------------------------
# period averages

def estimate_aadb(draws, dataset: Dataset, site: int | None = None,
                  new_site=None, x_new=None, period=None,
                  period_label: str = "all", level: float = 0.95,
                  keep_draws: bool = False, seed: int = 0) -> AadbEstimate:
    """Average daily count over a period for one site.

    Exactly one of `site` (index into the data sites) or `new_site` must be
    given.  Observed cells contribute their counts verbatim, masked cells get
    imputed per draw, and new sites are kriged; the per-draw average over the
    period is then summarized.
    """
    if (site is None) == (new_site is None):
        raise ValueError("give exactly one of site index or new_site")
    T = dataset.T
    if period is None:
        times = np.arange(T)
    else:
        times = np.unique(np.asarray(list(period), dtype=int))
        if times.size == 0:
            raise ValueError("period is empty; nothing to average")
        if times.min() < 0 or times.max() >= T:
            raise ValueError(f"period times must lie in [0, {T - 1}]")
    K = draws.n_draws
    rng = np.random.default_rng(seed)
    if site is not None:
        site = int(site)
        if not (0 <= site < dataset.n_sites):
            raise ValueError(f"site index {site} out of range")
        obs = dataset.mask[times, site]
        obs_sum = float(dataset.counts[times[obs], site].sum())
        vals = np.full(K, obs_sum)
        if not obs.all():
            if draws.lam_missing is None:
                raise ValueError("the period covers unobserved cells but the "
                                 "fit retained no log-rate draws for them")
            want = {(int(t), site) for t in times[~obs]}
            cols = [c for c, (t, i) in enumerate(draws.missing_cells)
                    if (int(t), int(i)) in want]
            if len(cols) != len(want):
                raise ValueError("draws and dataset disagree on which cells "
                                 "are unobserved")
            lam = draws.lam_missing[:, cols]
            vals = vals + _poisson_counts(lam, rng).sum(axis=1)
        vals /= times.size
        label = dataset.site_ids[site]
    else:
        series = krige(draws, dataset, new_site, x_new=x_new, level=level,
                       keep_draws=True, seed=seed)
        vals = series.count_draws[:, times].mean(axis=1)
        c = _site_coords(new_site)
        label = f"({c[0]:g}, {c[1]:g})"
    alpha = (1.0 - level) / 2.0
    if np.all(vals == vals[0]):
        # fully observed periods carry no posterior spread; keep the plain
        # average exact instead of letting pairwise summation wobble it
        mean = lower = median = upper = float(vals[0])
        sd = 0.0
    else:
        lower, median, upper = np.quantile(vals, [alpha, 0.5, 1.0 - alpha])
        sd = float(vals.std(ddof=1)) if K > 1 else 0.0
        mean = float(vals.mean())
    return AadbEstimate(site=label, period=period_label,
                        mean=mean, sd=sd, median=float(median),
                        lower=float(lower), upper=float(upper), level=level,
                        draws=vals if keep_draws else None)
