"""MCMC transition kernels for the count-field model.

One sampler iteration applies, in order: random-walk MH for the spatial range
kappa, conjugate inverse-gamma draws for tau2 / sigma2 / w, the sequential
per-time Gibbs sweep for the intercept field, preconditioned MALA for the
log-rates, FFBS for the seasonal states, and a conjugate Gaussian draw for
beta.  Kernels mutate LatentState / HyperState in place; the spatial cache
object (sparse precision or dense correlation bundle) is returned where the
kappa move may replace it.

Alongside each sampling kernel there is a deterministic helper exposing the
full-conditional moments or parameters; the test suite checks those against
brute-force conditioning, and the jitted sweep kernels are cross-validated
against the helpers by running them with zeroed noise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _lowlevel as ll
from .core import (
    Dataset,
    HyperState,
    LatentState,
    PriorConfig,
    build_dense_correlation,
    chol_spd,
    mean_field,
)
from .spde import (
    FemMatrices,
    Mesh,
    Projector,
    SparsePrecision,
    _to_band,
    assemble_fem,
    auto_mesh,
    build_precision,
    build_projector,
)


@dataclass
class ModelConfig:
    """Which spatial path to run and with what mesh/priors."""

    path: str = "sparse"             # "sparse" | "dense"
    nu: float = 1.0                  # dense-path smoothness (sparse is nu = 1)
    mesh: Mesh | None = None         # sparse path; None -> auto regular mesh
    target_nodes: int = 150
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self) -> None:
        if self.path not in ("sparse", "dense"):
            raise ValueError(f"path must be 'sparse' or 'dense', got {self.path!r}")
        if not (self.nu > 0):
            raise ValueError("nu must be positive")


@dataclass
class DenseSpatialCache:
    """Dense-path per-kappa bundle: correlation, factor, inverse, logdet."""

    kappa: float
    omega: np.ndarray
    chol: np.ndarray
    inv: np.ndarray
    log_det: float


def build_dense_cache(sites: np.ndarray, kappa: float, nu: float) -> DenseSpatialCache:
    omega = build_dense_correlation(sites, kappa, nu)
    L, _ = chol_spd(omega)
    inv = scipy.linalg.cho_solve((L, True), np.eye(omega.shape[0]))
    inv = 0.5 * (inv + inv.T)
    log_det = 2.0 * float(np.log(np.diag(L)).sum())
    return DenseSpatialCache(kappa=float(kappa), omega=omega, chol=L,
                             inv=inv, log_det=log_det)


@dataclass
class ModelContext:
    """Immutable per-fit bundle shared by every kernel."""

    dataset: Dataset
    priors: PriorConfig
    path: str
    nu: float
    kappa_max: float
    xtx: np.ndarray                     # (q, q) sum of x x' over all cells
    mesh: Mesh | None = None
    fem: FemMatrices | None = None
    projector: Projector | None = None
    at: sp.csr_matrix | None = None     # A', (N, n)
    ata_band: np.ndarray | None = None  # band of A'A in mesh node order

    @property
    def n_nodes(self) -> int:
        return self.fem.n_nodes if self.fem is not None else self.dataset.n_sites


def build_context(dataset: Dataset, config: ModelConfig) -> ModelContext:
    """Resolve mesh/projector/prior bounds for a fit."""
    priors = config.priors
    kappa_max = priors.kappa_max
    if kappa_max is None:
        kappa_max = 2.0 * dataset.max_site_distance()
    X = dataset.X
    xtx = np.einsum("tiq,tir->qr", X, X) if dataset.q else np.zeros((0, 0))
    if config.path == "dense":
        return ModelContext(dataset=dataset, priors=priors, path="dense",
                            nu=config.nu, kappa_max=kappa_max, xtx=xtx)
    mesh = config.mesh if config.mesh is not None else auto_mesh(
        dataset.sites, config.target_nodes)
    mesh, fem = _reorder_for_banding(mesh)
    projector = build_projector(mesh, dataset.sites)
    at = projector.a.T.tocsr()
    ata = (at @ projector.a).tocsr()
    ata_band = _to_band(ata, fem.bandwidth)
    return ModelContext(dataset=dataset, priors=priors, path="sparse",
                        nu=1.0, kappa_max=kappa_max, xtx=xtx, mesh=mesh,
                        fem=fem, projector=projector, at=at, ata_band=ata_band)


def _natural_bandwidth(fem: FemMatrices) -> int:
    coo = fem.g2.tocoo()
    return int(np.abs(coo.row - coo.col).max()) if coo.nnz else 0


def _reorder_for_banding(mesh: Mesh) -> tuple[Mesh, FemMatrices]:
    """Permute mesh nodes by RCM so the natural ordering is already banded.

    Kept only when it strictly shrinks the bandwidth, so a mesh whose nodes
    are already well ordered (in particular one saved from a previous fit)
    passes through unchanged and node-weight draws stay aligned with it.
    """
    fem = assemble_fem(mesh)
    order = fem.perm
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    mesh2 = Mesh(vertices=mesh.vertices[order], triangles=inv[mesh.triangles])
    fem2 = assemble_fem(mesh2)
    bw2 = _natural_bandwidth(fem2)
    if bw2 >= _natural_bandwidth(fem):
        mesh2, fem2, bw2 = mesh, fem, _natural_bandwidth(fem)
    return mesh2, FemMatrices(c=fem2.c, g1=fem2.g1, g2=fem2.g2,
                              perm=np.arange(mesh2.n_vertices), bandwidth=bw2)


def build_spatial(ctx: ModelContext, kappa: float):
    """Spatial cache for the given range: SparsePrecision or DenseSpatialCache."""
    if ctx.path == "sparse":
        return build_precision(ctx.fem, kappa)
    return build_dense_cache(ctx.dataset.sites, kappa, ctx.nu)


# ---------------------------------------------------------------------------
# residual helpers

def _seasonal_term(state: LatentState, ds: Dataset) -> np.ndarray:
    if ds.p == 0:
        return np.zeros(ds.T)
    return np.einsum("tp,tp->t", ds.F, state.theta)


def _covariate_term(hypers: HyperState, ds: Dataset) -> np.ndarray:
    if ds.q == 0:
        return np.zeros((ds.T, ds.n_sites))
    return ds.X @ hypers.beta


def intercept_residual(state: LatentState, hypers: HyperState,
                       ds: Dataset) -> np.ndarray:
    """lambda minus seasonal and covariate terms, (T, n); what the intercept sees."""
    return state.lam - _seasonal_term(state, ds)[:, None] - _covariate_term(hypers, ds)


def _increments(field_ts: np.ndarray) -> np.ndarray:
    """First differences over time with the implicit zero state at t = 0."""
    out = field_ts.copy()
    out[1:] -= field_ts[:-1]
    return out


def _quad_form_sparse(q: sp.csr_matrix, diffs: np.ndarray) -> float:
    return float(np.sum(diffs.T * (q @ diffs.T)))


def _quad_form_dense(inv: np.ndarray, diffs: np.ndarray) -> float:
    return float(np.sum(diffs * (diffs @ inv)))


def _invgamma_draw(shape: float, rate: float, rng: np.random.Generator) -> float:
    if not (np.isfinite(rate) and rate > 0):
        raise ValueError(f"inverse-gamma rate must be positive and finite, got {rate}")
    return rate / rng.gamma(shape)


def _band_chol_jittered(band: np.ndarray) -> np.ndarray:
    try:
        return ll.band_cholesky(band)
    except ValueError:
        jitter = 1e-10
        while jitter <= 1e-6:
            try:
                banded = band.copy()
                banded[0] += jitter
                return ll.band_cholesky(banded)
            except ValueError:
                jitter *= 10.0
    raise ValueError("per-time precision factorization failed; "
                     "matrix not positive definite")


# ---------------------------------------------------------------------------
# lambda: preconditioned MALA

def pmala_grad_curv(lam, count, m, tau2):
    """Gradient and curvature of l(lam) = Y lam - e^lam - (lam - m)^2 / (2 tau2)."""
    e = np.exp(lam)
    g = count - e - (lam - m) / tau2
    h = e + 1.0 / tau2
    return g, h


def update_lambda_pmala(state: LatentState, hypers: HyperState,
                        ctx: ModelContext, step: float,
                        rng: np.random.Generator) -> float:
    """One vectorized MALA sweep over observed cells; exact refresh elsewhere.

    Returns the mean acceptance probability across observed cells.
    """
    ds = ctx.dataset
    m = mean_field(state, hypers, ds)
    tau2 = hypers.tau2
    lam = state.lam
    miss = ~ds.mask
    if miss.any():
        lam[miss] = m[miss] + math.sqrt(tau2) * rng.standard_normal(int(miss.sum()))
    obs = ds.mask
    if not obs.any():
        return 1.0
    lo = lam[obs]
    mo = m[obs]
    yo = ds.counts[obs]
    g, h = pmala_grad_curv(lo, yo, mo, tau2)
    if not np.all(np.isfinite(g)):
        t_idx, i_idx = np.nonzero(obs)
        bad = int(np.nonzero(~np.isfinite(g))[0][0])
        raise FloatingPointError(
            f"nonfinite pMALA gradient at cell (t={t_idx[bad]}, i={i_idx[bad]})")
    eps2 = step * step
    fwd_mean = lo + 0.5 * eps2 * g / h
    prop = fwd_mean + step / np.sqrt(h) * rng.standard_normal(lo.size)
    with np.errstate(over="ignore", invalid="ignore"):
        gp, hp = pmala_grad_curv(prop, yo, mo, tau2)
        rev_mean = prop + 0.5 * eps2 * gp / hp
        log_q_fwd = 0.5 * np.log(h) - h * (prop - fwd_mean) ** 2 / (2.0 * eps2)
        log_q_rev = 0.5 * np.log(hp) - hp * (lo - rev_mean) ** 2 / (2.0 * eps2)
        ll_new = yo * prop - np.exp(prop) - (prop - mo) ** 2 / (2.0 * tau2)
        ll_old = yo * lo - np.exp(lo) - (lo - mo) ** 2 / (2.0 * tau2)
        log_alpha = ll_new - ll_old + log_q_rev - log_q_fwd
    # Nonfinite ratios come from absurd proposals (|lam| beyond any count
    # scale); rejecting them outright never touches legitimate dynamics.
    log_alpha = np.where(np.isfinite(log_alpha) & (np.abs(prop) <= 50.0),
                         log_alpha, -np.inf)
    accept = np.log(rng.uniform(size=lo.size)) < log_alpha
    lo[accept] = prop[accept]
    lam[obs] = lo
    return float(np.mean(np.exp(np.minimum(log_alpha, 0.0))))


# ---------------------------------------------------------------------------
# intercept field: sequential per-time Gibbs sweep

def update_weights_gibbs(state: LatentState, hypers: HyperState,
                         ctx: ModelContext, precision: SparsePrecision,
                         rng: np.random.Generator) -> None:
    """Sparse path: sweep the node weights for t = 1..T, then sync mu = A R."""
    ds = ctx.dataset
    resid = intercept_residual(state, hypers, ds)
    sigma2, tau2 = hypers.sigma2, hypers.tau2
    band_mid = 2.0 * precision.band / sigma2 + ctx.ata_band / tau2
    band_last = precision.band / sigma2 + ctx.ata_band / tau2
    L_mid = _band_chol_jittered(band_mid)
    L_last = _band_chol_jittered(band_last)
    z = rng.standard_normal(state.weights.shape)
    q = precision.q
    at = ctx.at
    ll.sweep_weights(L_mid, L_last, q.data, q.indices, q.indptr,
                     at.data, at.indices, at.indptr,
                     resid, state.weights, sigma2, tau2, z)
    state.mu = np.ascontiguousarray((ctx.projector.a @ state.weights.T).T)


def update_mu_gibbs(state: LatentState, hypers: HyperState,
                    ctx: ModelContext, cache: DenseSpatialCache,
                    rng: np.random.Generator) -> None:
    """Dense path: same sweep with Q replaced by Omega^-1 and A by identity."""
    ds = ctx.dataset
    resid = intercept_residual(state, hypers, ds)
    sigma2, tau2 = hypers.sigma2, hypers.tau2
    n = ds.n_sites
    eye = np.eye(n)
    L_mid, _ = chol_spd(2.0 * cache.inv / sigma2 + eye / tau2)
    L_last, _ = chol_spd(cache.inv / sigma2 + eye / tau2)
    z = rng.standard_normal(state.mu.shape)
    ll.sweep_mu(L_mid, L_last, cache.inv, resid, state.mu, sigma2, tau2, z)


def weight_conditional_moments(state: LatentState, hypers: HyperState,
                               ctx: ModelContext, precision: SparsePrecision,
                               t: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean/covariance of R_t given everything else (t = 1..T)."""
    ds = ctx.dataset
    T = ds.T
    N = ctx.n_nodes
    resid = intercept_residual(state, hypers, ds)
    q = precision.q.toarray()
    a = ctx.projector.a.toarray()
    c_t = 2.0 if t < T else 1.0
    P = c_t * q / hypers.sigma2 + a.T @ a / hypers.tau2
    neighbor = np.zeros(N)
    if t > 1:
        neighbor += state.weights[t - 2]
    if t < T:
        neighbor += state.weights[t]
    rhs = q @ neighbor / hypers.sigma2 + a.T @ resid[t - 1] / hypers.tau2
    cov = np.linalg.inv(P)
    return cov @ rhs, cov


def mu_conditional_moments(state: LatentState, hypers: HyperState,
                           ctx: ModelContext, cache: DenseSpatialCache,
                           t: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense-path analogue of weight_conditional_moments."""
    ds = ctx.dataset
    T, n = ds.T, ds.n_sites
    resid = intercept_residual(state, hypers, ds)
    c_t = 2.0 if t < T else 1.0
    P = c_t * cache.inv / hypers.sigma2 + np.eye(n) / hypers.tau2
    neighbor = np.zeros(n)
    if t > 1:
        neighbor += state.mu[t - 2]
    if t < T:
        neighbor += state.mu[t]
    rhs = cache.inv @ neighbor / hypers.sigma2 + resid[t - 1] / hypers.tau2
    cov = np.linalg.inv(P)
    return cov @ rhs, cov


# ---------------------------------------------------------------------------
# seasonal states: forward filter, backward sample

def seasonal_pseudo_obs(state: LatentState, hypers: HyperState,
                        ctx: ModelContext) -> tuple[np.ndarray, float]:
    """Scalar pseudo-observations z_t and their variance tau2/n."""
    ds = ctx.dataset
    resid = state.lam - state.mu - _covariate_term(hypers, ds)
    return resid.mean(axis=1), hypers.tau2 / ds.n_sites


def update_theta_ffbs(state: LatentState, hypers: HyperState,
                      ctx: ModelContext, rng: np.random.Generator) -> None:
    ds = ctx.dataset
    p = ds.p
    if p == 0:
        return
    z, v = seasonal_pseudo_obs(state, hypers, ctx)
    m0 = np.full(p, ctx.priors.m0)
    znorm = rng.standard_normal((ds.T + 1, p))
    theta0, theta = ll.ffbs_draw(ds.F, ds.G, hypers.w, z, v, m0,
                                 ctx.priors.c0, znorm)
    state.theta0 = theta0
    state.theta = theta


def seasonal_smoothing_moments(F: np.ndarray, G: np.ndarray, w: np.ndarray,
                               z: np.ndarray, v: float, m0: np.ndarray,
                               c0: float):
    """Kalman filter + RTS smoother moments for the seasonal block.

    Returns (smoothed_means, smoothed_covs) over t = 0..T, where index 0 is
    the pre-sample state.
    """
    T, p = F.shape
    fm = np.zeros((T + 1, p))
    fC = np.zeros((T + 1, p, p))
    pm = np.zeros((T + 1, p))
    pR = np.zeros((T + 1, p, p))
    fm[0] = m0
    fC[0] = c0 * np.eye(p)
    for t in range(1, T + 1):
        a = G @ fm[t - 1]
        R = G @ fC[t - 1] @ G.T + np.diag(w)
        Ft = F[t - 1]
        RF = R @ Ft
        Qt = float(Ft @ RF) + v
        fm[t] = a + RF * ((z[t - 1] - Ft @ a) / Qt)
        C = R - np.outer(RF, RF) / Qt
        fC[t] = 0.5 * (C + C.T)
        pm[t] = a
        pR[t] = R
    sm = fm.copy()
    sC = fC.copy()
    for t in range(T - 1, -1, -1):
        B = fC[t] @ G.T @ np.linalg.inv(pR[t + 1])
        sm[t] = fm[t] + B @ (sm[t + 1] - pm[t + 1])
        Cs = fC[t] + B @ (sC[t + 1] - pR[t + 1]) @ B.T
        sC[t] = 0.5 * (Cs + Cs.T)
    return sm, sC


# ---------------------------------------------------------------------------
# kappa: random-walk Metropolis-Hastings

def kappa_log_accept(state: LatentState, hypers: HyperState, ctx: ModelContext,
                     spatial, kappa_new: float):
    """Log MH ratio for kappa -> kappa_new, plus the candidate spatial cache."""
    T = ctx.dataset.T
    if ctx.path == "sparse":
        cand = build_precision(ctx.fem, kappa_new)
        diffs = _increments(state.weights)
        quad_new = _quad_form_sparse(cand.q, diffs)
        quad_old = _quad_form_sparse(spatial.q, diffs)
        log_r = 0.5 * T * (cand.log_det - spatial.log_det) \
            - 0.5 * (quad_new - quad_old) / hypers.sigma2
    else:
        cand = build_dense_cache(ctx.dataset.sites, kappa_new, ctx.nu)
        diffs = _increments(state.mu)
        quad_new = _quad_form_dense(cand.inv, diffs)
        quad_old = _quad_form_dense(spatial.inv, diffs)
        log_r = -0.5 * T * (cand.log_det - spatial.log_det) \
            - 0.5 * (quad_new - quad_old) / hypers.sigma2
    return log_r, cand


def update_kappa_mh(state: LatentState, hypers: HyperState, ctx: ModelContext,
                    spatial, step: float, rng: np.random.Generator):
    """Random-walk move on kappa under its uniform prior.

    Returns (spatial cache to use onward, acceptance probability).
    """
    kappa_new = hypers.kappa + step * rng.standard_normal()
    if not (0.0 < kappa_new <= ctx.kappa_max):
        return spatial, 0.0
    try:
        log_r, cand = kappa_log_accept(state, hypers, ctx, spatial, kappa_new)
    except (ValueError, np.linalg.LinAlgError) as err:
        warnings.warn(f"kappa proposal {kappa_new:.4g} rejected: "
                      f"factorization failed ({err})", RuntimeWarning)
        return spatial, 0.0
    accept_prob = float(np.exp(min(log_r, 0.0)))
    if np.log(rng.uniform()) < log_r:
        hypers.kappa = float(kappa_new)
        return cand, accept_prob
    return spatial, accept_prob


# ---------------------------------------------------------------------------
# variances: conjugate inverse-gamma draws

def variance_conditional_params(state: LatentState, hypers: HyperState,
                                ctx: ModelContext, spatial) -> dict:
    """Posterior (shape, rate) for tau2, sigma2, and each w_l."""
    ds = ctx.dataset
    pr = ctx.priors
    T, n = ds.T, ds.n_sites
    resid = state.lam - mean_field(state, hypers, ds)
    tau_shape = pr.a_tau2 + T * n / 2.0
    tau_rate = pr.b_tau2 + 0.5 * float(np.sum(resid ** 2))
    if ctx.path == "sparse":
        diffs = _increments(state.weights)
        quad = _quad_form_sparse(spatial.q, diffs)
        n_field = ctx.n_nodes
    else:
        diffs = _increments(state.mu)
        quad = _quad_form_dense(spatial.inv, diffs)
        n_field = n
    sig_shape = pr.a_sigma2 + n_field * T / 2.0
    sig_rate = pr.b_sigma2 + 0.5 * quad
    p = ds.p
    if p:
        prev = np.vstack([state.theta0[None, :], state.theta[:-1]])
        inc = state.theta - prev @ ds.G.T
        w_rate = pr.b_w + 0.5 * np.sum(inc ** 2, axis=0)
    else:
        w_rate = np.zeros(0)
    w_shape = pr.a_w + T / 2.0
    return {"tau2": (tau_shape, tau_rate), "sigma2": (sig_shape, sig_rate),
            "w": (w_shape, w_rate)}


def update_variances(state: LatentState, hypers: HyperState, ctx: ModelContext,
                     spatial, rng: np.random.Generator) -> None:
    """Draw tau2, sigma2, and w from their inverse-gamma full conditionals."""
    params = variance_conditional_params(state, hypers, ctx, spatial)
    hypers.tau2 = _invgamma_draw(*params["tau2"], rng)
    hypers.sigma2 = _invgamma_draw(*params["sigma2"], rng)
    w_shape, w_rate = params["w"]
    hypers.w = np.array([_invgamma_draw(w_shape, r, rng) for r in w_rate])


# ---------------------------------------------------------------------------
# beta: conjugate Gaussian draw

def beta_conditional_moments(state: LatentState, hypers: HyperState,
                             ctx: ModelContext) -> tuple[np.ndarray, np.ndarray]:
    ds = ctx.dataset
    q = ds.q
    resid = state.lam - state.mu - _seasonal_term(state, ds)[:, None]
    prec = np.eye(q) / ctx.priors.beta_var + ctx.xtx / hypers.tau2
    rhs = np.einsum("tiq,ti->q", ds.X, resid) / hypers.tau2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return cov @ rhs, cov


def update_beta_gibbs(state: LatentState, hypers: HyperState,
                      ctx: ModelContext, rng: np.random.Generator) -> None:
    ds = ctx.dataset
    if ds.q == 0:
        return
    resid = state.lam - state.mu - _seasonal_term(state, ds)[:, None]
    prec = np.eye(ds.q) / ctx.priors.beta_var + ctx.xtx / hypers.tau2
    rhs = np.einsum("tiq,ti->q", ds.X, resid) / hypers.tau2
    L, _ = chol_spd(prec)
    mean = scipy.linalg.cho_solve((L, True), rhs)
    noise = scipy.linalg.solve_triangular(L.T, rng.standard_normal(ds.q),
                                          lower=False)
    hypers.beta = mean + noise
