"""Core model types and spatial correlation primitives.

The observation model is a Poisson dynamic GLM on a log link: counts at site s,
time t have rate exp(lambda_t(s)), and lambda_t(s) is Gaussian around a mean
built from a spatial random-walk intercept, a harmonic seasonal term F_t'theta_t
and fixed covariate effects X_t(s)'beta.  Everything downstream (samplers,
predictions) works off the containers defined here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, kv


@dataclass(frozen=True)
class SpatialLocation:
    """A point in the planar analysis frame (same units as site coordinates)."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass
class MaternParams:
    """Parameters of the Matern correlation: marginal variance, range, smoothness."""

    sigma2: float
    kappa: float
    nu: float = 1.0

    def __post_init__(self) -> None:
        if not (self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (self.kappa > 0):
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not (self.nu > 0):
            raise ValueError(f"nu must be positive, got {self.nu}")


@dataclass
class PriorConfig:
    """Hyperprior settings for the hierarchy.

    Variances get InvGamma(a, b) priors, beta gets N(0, beta_var * I), kappa a
    uniform prior on (0, kappa_max] where kappa_max defaults to twice the
    largest pairwise distance between data sites, and theta_0 gets
    N(m0 * 1, c0 * I).
    """

    a_sigma2: float = 2.0
    b_sigma2: float = 0.1
    a_tau2: float = 2.0
    b_tau2: float = 0.1
    a_w: float = 2.0
    b_w: float = 0.1
    beta_var: float = 10.0
    kappa_max: float | None = None  # None -> 2 * max pairwise site distance
    m0: float = 0.0
    c0: float = 100.0

    def __post_init__(self) -> None:
        for name in ("a_sigma2", "b_sigma2", "a_tau2", "b_tau2", "a_w", "b_w",
                     "beta_var", "c0"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"{name} must be positive")
        if self.kappa_max is not None and not (self.kappa_max > 0):
            raise ValueError("kappa_max must be positive when given")


@dataclass
class HyperState:
    """Current values of the scalar/vector hyperparameters."""

    kappa: float
    sigma2: float
    tau2: float
    w: np.ndarray     # (p,) evolution variances of the seasonal state
    beta: np.ndarray  # (q,) covariate effects

    def copy(self) -> "HyperState":
        return HyperState(self.kappa, self.sigma2, self.tau2,
                          self.w.copy(), self.beta.copy())


@dataclass
class LatentState:
    """Latent fields of one chain.

    ``mu`` always holds the intercept evaluated at the data sites.  On the
    dense path it is the state itself; on the sparse path it is the projection
    A @ weights and is kept in sync by the intercept sweep.
    """

    lam: np.ndarray            # (T, n) log-rate field
    mu: np.ndarray             # (T, n) intercept at data sites
    theta: np.ndarray          # (T, p) seasonal state, t = 1..T
    theta0: np.ndarray         # (p,) seasonal state at t = 0
    weights: np.ndarray | None = None  # (T, N) mesh-node weights, sparse path only

    def copy(self) -> "LatentState":
        return LatentState(self.lam.copy(), self.mu.copy(), self.theta.copy(),
                           self.theta0.copy(),
                           None if self.weights is None else self.weights.copy())


@dataclass
class Dataset:
    """Spatiotemporal count data on a fixed site set.

    Parameters
    ----------
    counts : ndarray, shape (T, n)
        Observed counts; entries at unobserved cells are ignored (use NaN).
    mask : ndarray of bool, shape (T, n)
        True where the count was observed.
    sites : ndarray, shape (n, 2)
        Planar site coordinates.
    X : ndarray, shape (T, n, q)
        Covariates, known at every cell (q may be 0).
    F : ndarray, shape (T, p)
        Seasonal design vectors (p may be 0).
    G : ndarray, shape (p, p)
        Seasonal evolution matrix.
    site_ids : list of str, optional
        Identifiers used in data files; defaults to s0..s{n-1}.
    """

    counts: np.ndarray
    mask: np.ndarray
    sites: np.ndarray
    X: np.ndarray
    F: np.ndarray
    G: np.ndarray
    site_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.sites = np.asarray(self.sites, dtype=float)
        self.X = np.asarray(self.X, dtype=float)
        self.F = np.asarray(self.F, dtype=float)
        self.G = np.asarray(self.G, dtype=float)
        if not self.site_ids:
            self.site_ids = [f"s{i}" for i in range(self.sites.shape[0])]
        self.validate()

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def n_sites(self) -> int:
        return self.counts.shape[1]

    @property
    def p(self) -> int:
        return self.F.shape[1]

    @property
    def q(self) -> int:
        return self.X.shape[2]

    def validate(self) -> None:
        T, n = self.counts.shape
        if self.mask.shape != (T, n):
            raise ValueError(f"mask shape {self.mask.shape} != counts shape {(T, n)}")
        if self.sites.ndim != 2 or self.sites.shape != (n, 2):
            raise ValueError(f"sites must have shape ({n}, 2), got {self.sites.shape}")
        if not np.all(np.isfinite(self.sites)):
            raise ValueError("site coordinates must be finite")
        if self.X.shape[:2] != (T, n):
            raise ValueError(f"X must have shape ({T}, {n}, q), got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("covariates must be finite at every cell")
        if self.F.ndim != 2 or self.F.shape[0] != T:
            raise ValueError(f"F must have shape ({T}, p), got {self.F.shape}")
        p = self.F.shape[1]
        if self.G.shape != (p, p):
            raise ValueError(f"G must have shape ({p}, {p}), got {self.G.shape}")
        if len(self.site_ids) != n:
            raise ValueError(f"expected {n} site ids, got {len(self.site_ids)}")
        obs = self.counts[self.mask]
        if not np.all(np.isfinite(obs)):
            raise ValueError("observed counts must be finite")
        if obs.size and (np.any(obs < 0) or np.any(obs != np.round(obs))):
            raise ValueError("observed counts must be nonnegative integers")

    def max_site_distance(self) -> float:
        """Largest pairwise distance between data sites."""
        from scipy.spatial.distance import pdist

        if self.sites.shape[0] < 2:
            return 1.0
        return float(pdist(self.sites).max())


def matern_correlation(d, kappa: float, nu: float):
    """Matern correlation at distance(s) ``d``.

    Uses the range parameterisation: corr(d) = (d/kappa)^nu K_nu(d/kappa)
    / (Gamma(nu) 2^(nu-1)), which equals 1 at d = 0 and exp(-d/kappa) at
    nu = 1/2.

    Parameters
    ----------
    d : float or ndarray
        Nonnegative distances.
    kappa : float
        Range parameter, > 0.
    nu : float
        Smoothness, > 0.

    Returns
    -------
    float or ndarray
        Correlations in (0, 1].
    """
    if not (kappa > 0):
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not (nu > 0):
        raise ValueError(f"nu must be positive, got {nu}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = d / kappa
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    # x^nu K_nu(x) -> Gamma(nu) 2^(nu-1) as x -> 0, so the ratio stays in (0, 1].
    norm = math.gamma(nu) * 2.0 ** (nu - 1.0)
    out[pos] = np.power(xp, nu) * kv(nu, xp) / norm
    if out.ndim == 0:
        return float(out)
    return out


# Jitter ladder used whenever a dense correlation matrix gets factorised.
_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


def chol_spd(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``mat``, escalating diagonal jitter on failure.

    Jitter starts at 1e-10 and multiplies by 10 up to 1e-6; past that the
    matrix is reported as numerically indefinite.

    Returns
    -------
    (L, jitter) : lower-triangular factor of mat + jitter * I, jitter used.
    """
    try:
        return np.linalg.cholesky(mat), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_START
    eye = np.eye(mat.shape[0])
    while jitter <= _JITTER_MAX:
        try:
            return np.linalg.cholesky(mat + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        "matrix is not positive definite even with jitter 1e-6; "
        "check for duplicate sites or a degenerate range")


def build_dense_correlation(sites: np.ndarray, kappa: float, nu: float) -> np.ndarray:
    """Dense Matern correlation matrix over the given sites.

    The returned matrix carries any diagonal jitter needed to make it
    factorizable (see ``chol_spd``), so callers may Cholesky it directly.
    """
    from scipy.spatial.distance import cdist

    sites = np.asarray(sites, dtype=float)
    dmat = cdist(sites, sites)
    omega = matern_correlation(dmat, kappa, nu)
    np.fill_diagonal(omega, 1.0)
    omega = 0.5 * (omega + omega.T)
    _, jitter = chol_spd(omega)
    if jitter > 0:
        omega = omega + jitter * np.eye(omega.shape[0])
    return omega


def log_poisson_lik(count, lam):
    """Poisson log-likelihood at log-rate ``lam``: y*lam - exp(lam) - log(y!)."""
    count = np.asarray(count, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(count < 0) or np.any(count != np.round(count)):
        raise ValueError("counts must be nonnegative integers")
    out = count * lam - np.exp(lam) - gammaln(count + 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def mean_field(state: LatentState, hypers: HyperState, dataset: Dataset) -> np.ndarray:
    """Gaussian-layer mean at every cell: mu + F'theta + X beta, shape (T, n)."""
    seasonal = np.einsum("tp,tp->t", dataset.F, state.theta)
    m = state.mu + seasonal[:, None]
    if dataset.q:
        m = m + dataset.X @ hypers.beta
    return m


def conditional_mean_lambda(t: int, i: int, state: LatentState,
                            hypers: HyperState, dataset: Dataset) -> float:
    """Mean of the Gaussian layer for cell (t, i)."""
    m = state.mu[t, i] + float(dataset.F[t] @ state.theta[t])
    if dataset.q:
        m += float(dataset.X[t, i] @ hypers.beta)
    return float(m)
