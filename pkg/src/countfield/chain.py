"""Chain orchestration: initialization, adaptation, and the sampling loop.

Each iteration applies the kernels in a fixed order (range, variances,
intercept field, log-rates, seasonal states, covariate effects).  Step sizes
for the two Metropolis kernels are tuned by dual averaging during burn-in and
frozen afterward so the recorded draws come from a fixed transition kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, HyperState, LatentState
from .kernels import (
    ModelConfig,
    ModelContext,
    build_context,
    build_spatial,
    update_beta_gibbs,
    update_kappa_mh,
    update_lambda_pmala,
    update_mu_gibbs,
    update_theta_ffbs,
    update_variances,
    update_weights_gibbs,
)


class SamplerError(RuntimeError):
    """A kernel failed mid-run; the message carries the iteration index."""


@dataclass
class ChainConfig:
    """Length, seeding, and step-size settings for one or more chains."""

    iterations: int = 20000
    burn_in: int = 15000
    thinning: int = 1
    n_chains: int = 1
    seed: int = 0
    step_lambda: float = 0.8
    step_kappa: float | None = None   # None -> 0.05 * max site distance
    adapt_window: int | None = None   # None -> burn_in
    keep_lambda: bool = False
    workers: int = 1                  # >1 runs chains in separate processes

    def __post_init__(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not (self.step_lambda > 0):
            raise ValueError("step_lambda must be positive")
        if self.step_kappa is not None and not (self.step_kappa > 0):
            raise ValueError("step_kappa must be positive when given")
        if self.adapt_window is not None and self.adapt_window < 0:
            raise ValueError("adapt_window must be nonnegative")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thinning


class DualAveraging:
    """Dual averaging of a log step size toward a target acceptance rate."""

    def __init__(self, step0: float, target: float, gamma: float = 0.05,
                 t0: float = 10.0, power: float = 0.75):
        self.mu = np.log(10.0 * step0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.power = power
        self.log_step = np.log(step0)
        self.log_step_avg = np.log(step0)
        self.hbar = 0.0
        self.count = 0

    def update(self, accept_prob: float) -> float:
        """Feed one acceptance probability; returns the next step size."""
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.hbar = (1.0 - frac) * self.hbar + frac * (self.target - accept_prob)
        self.log_step = self.mu - np.sqrt(self.count) / self.gamma * self.hbar
        eta = self.count ** (-self.power)
        self.log_step_avg = eta * self.log_step + (1.0 - eta) * self.log_step_avg
        return float(np.exp(self.log_step))

    @property
    def frozen_step(self) -> float:
        """The averaged step used after adaptation ends."""
        return float(np.exp(self.log_step_avg))


@dataclass
class PosteriorDraws:
    """Kept draws of one chain plus the context needed for prediction."""

    kappa: np.ndarray          # (K,)
    sigma2: np.ndarray         # (K,)
    tau2: np.ndarray           # (K,)
    w: np.ndarray              # (K, p)
    beta: np.ndarray           # (K, q)
    theta0: np.ndarray         # (K, p)
    theta: np.ndarray          # (K, T, p)
    intercepts: np.ndarray     # (K, T, n) intercept field at the data sites
    weights: np.ndarray | None         # (K, T, N) node weights, sparse path
    lam_missing: np.ndarray            # (K, M) log-rates at masked cells
    missing_cells: np.ndarray          # (M, 2) int (t, i) of masked cells
    lam: np.ndarray | None             # (K, T, n) kept only on request
    accept_lambda: float
    accept_kappa: float
    step_lambda: float
    step_kappa: float
    monitored_cells: np.ndarray        # (3, 2) int (t, i) diagnostic cells
    chain_id: int
    config: ChainConfig
    context: ModelContext = field(repr=False)

    @property
    def n_draws(self) -> int:
        return self.kappa.shape[0]

    def hyper_state(self, k: int) -> HyperState:
        return HyperState(kappa=float(self.kappa[k]),
                          sigma2=float(self.sigma2[k]),
                          tau2=float(self.tau2[k]),
                          w=self.w[k].copy(), beta=self.beta[k].copy())

    def monitored_scalars(self) -> dict[str, np.ndarray]:
        """Named scalar chains for summaries and convergence checks."""
        out = {"kappa": self.kappa, "sigma2": self.sigma2, "tau2": self.tau2}
        for l in range(self.w.shape[1]):
            out[f"w{l + 1}"] = self.w[:, l]
        for j in range(self.beta.shape[1]):
            out[f"beta{j + 1}"] = self.beta[:, j]
        for t, i in self.monitored_cells:
            out[f"intercept_t{t}_s{i}"] = self.intercepts[:, t, i]
        return out


def init_state(dataset: Dataset, ctx: ModelContext) -> tuple[LatentState, HyperState]:
    """Deterministic starting point.

    Log-rates start at log(count + 0.5) where observed and at the site's mean
    initialized value elsewhere; fields and states start at zero; variances at
    their prior means; kappa at a quarter of the prior range bound.
    """
    T, n = dataset.T, dataset.n_sites
    lam = np.zeros((T, n))
    obs = dataset.mask
    lam[obs] = np.log(dataset.counts[obs] + 0.5)
    col_cnt = obs.sum(axis=0)
    col_sum = np.where(obs, lam, 0.0).sum(axis=0)
    grand = lam[obs].mean() if obs.any() else 0.0
    col_mean = np.where(col_cnt > 0, col_sum / np.maximum(col_cnt, 1), grand)
    lam = np.where(obs, lam, col_mean[None, :])
    p = dataset.p
    state = LatentState(
        lam=lam,
        mu=np.zeros((T, n)),
        theta=np.zeros((T, p)),
        theta0=np.zeros(p),
        weights=np.zeros((T, ctx.n_nodes)) if ctx.path == "sparse" else None,
    )
    delta = dataset.max_site_distance()
    hypers = HyperState(
        kappa=min(delta / 2.0, ctx.kappa_max),
        sigma2=ctx.priors.b_sigma2 / (ctx.priors.a_sigma2 - 1.0),
        tau2=ctx.priors.b_tau2 / (ctx.priors.a_tau2 - 1.0),
        w=np.full(p, ctx.priors.b_w / (ctx.priors.a_w - 1.0)),
        beta=np.zeros(dataset.q),
    )
    return state, hypers


def _overdisperse(state: LatentState, hypers: HyperState, ctx: ModelContext,
                  rng: np.random.Generator) -> None:
    """Jitter a chain's starting point so parallel chains start apart."""
    hypers.kappa = float(np.clip(hypers.kappa * np.exp(0.2 * rng.standard_normal()),
                                 1e-6, ctx.kappa_max))
    hypers.sigma2 *= float(np.exp(0.2 * rng.standard_normal()))
    hypers.tau2 *= float(np.exp(0.2 * rng.standard_normal()))
    hypers.w = hypers.w * np.exp(0.2 * rng.standard_normal(hypers.w.size))
    hypers.beta = hypers.beta + 0.1 * rng.standard_normal(hypers.beta.size)
    state.lam += 0.05 * rng.standard_normal(state.lam.shape)
    state.theta += 0.05 * rng.standard_normal(state.theta.shape)
    state.theta0 += 0.05 * rng.standard_normal(state.theta0.shape)


def _choose_monitored_cells(dataset: Dataset, seed: int) -> np.ndarray:
    """Three (t, i) cells tracked for diagnostics, shared across chains."""
    rng = np.random.default_rng(seed)
    T, n = dataset.T, dataset.n_sites
    flat = rng.choice(T * n, size=min(3, T * n), replace=False)
    return np.column_stack(np.unravel_index(flat, (T, n))).astype(int)


def run_chain(dataset: Dataset, model: ModelConfig, config: ChainConfig,
              chain_id: int = 0, context: ModelContext | None = None) -> PosteriorDraws:
    """Run one chain to completion and return its kept draws.

    Deterministic given (config.seed, chain_id).  Kernel failures abort with
    the iteration index attached.
    """
    ctx = context if context is not None else build_context(dataset, model)
    seq = np.random.SeedSequence(config.seed).spawn(max(config.n_chains,
                                                        chain_id + 1))
    rng = np.random.default_rng(seq[chain_id])
    state, hypers = init_state(dataset, ctx)
    if chain_id > 0:
        _overdisperse(state, hypers, ctx, rng)
    spatial = build_spatial(ctx, hypers.kappa)
    delta = dataset.max_site_distance()
    step_kappa0 = config.step_kappa if config.step_kappa is not None \
        else 0.05 * delta
    da_lam = DualAveraging(config.step_lambda, target=0.57)
    da_kap = DualAveraging(step_kappa0, target=0.30)
    step_lam, step_kap = config.step_lambda, step_kappa0
    adapt_end = config.burn_in if config.adapt_window is None \
        else min(config.adapt_window, config.burn_in)

    T, n, p, q = dataset.T, dataset.n_sites, dataset.p, dataset.q
    K = config.n_draws
    miss_t, miss_i = np.nonzero(~dataset.mask)
    missing_cells = np.column_stack([miss_t, miss_i]).astype(int)
    draws = PosteriorDraws(
        kappa=np.empty(K), sigma2=np.empty(K), tau2=np.empty(K),
        w=np.empty((K, p)), beta=np.empty((K, q)),
        theta0=np.empty((K, p)), theta=np.empty((K, T, p)),
        intercepts=np.empty((K, T, n)),
        weights=np.empty((K, T, ctx.n_nodes)) if ctx.path == "sparse" else None,
        lam_missing=np.empty((K, missing_cells.shape[0])),
        missing_cells=missing_cells,
        lam=np.empty((K, T, n)) if config.keep_lambda else None,
        accept_lambda=0.0, accept_kappa=0.0,
        step_lambda=step_lam, step_kappa=step_kap,
        monitored_cells=_choose_monitored_cells(dataset, config.seed),
        chain_id=chain_id, config=config, context=ctx)

    kept = 0
    acc_lam_sum = 0.0
    acc_kap_sum = 0.0
    post_iters = 0
    for it in range(1, config.iterations + 1):
        try:
            spatial, acc_k = update_kappa_mh(state, hypers, ctx, spatial,
                                             step_kap, rng)
            update_variances(state, hypers, ctx, spatial, rng)
            if ctx.path == "sparse":
                update_weights_gibbs(state, hypers, ctx, spatial, rng)
            else:
                update_mu_gibbs(state, hypers, ctx, spatial, rng)
            acc_l = update_lambda_pmala(state, hypers, ctx, step_lam, rng)
            update_theta_ffbs(state, hypers, ctx, rng)
            update_beta_gibbs(state, hypers, ctx, rng)
        except Exception as err:
            raise SamplerError(f"chain {chain_id} failed at iteration {it}: "
                               f"{err}") from err
        if it <= adapt_end:
            step_lam = da_lam.update(acc_l)
            step_kap = da_kap.update(acc_k)
            if it == adapt_end:
                step_lam = da_lam.frozen_step
                step_kap = da_kap.frozen_step
        if it > config.burn_in:
            post_iters += 1
            acc_lam_sum += acc_l
            acc_kap_sum += acc_k
            if (it - config.burn_in) % config.thinning == 0:
                draws.kappa[kept] = hypers.kappa
                draws.sigma2[kept] = hypers.sigma2
                draws.tau2[kept] = hypers.tau2
                draws.w[kept] = hypers.w
                draws.beta[kept] = hypers.beta
                draws.theta0[kept] = state.theta0
                draws.theta[kept] = state.theta
                draws.intercepts[kept] = state.mu
                if draws.weights is not None:
                    draws.weights[kept] = state.weights
                draws.lam_missing[kept] = state.lam[miss_t, miss_i]
                if draws.lam is not None:
                    draws.lam[kept] = state.lam
                kept += 1
    draws.accept_lambda = acc_lam_sum / max(post_iters, 1)
    draws.accept_kappa = acc_kap_sum / max(post_iters, 1)
    draws.step_lambda = step_lam
    draws.step_kappa = step_kap
    return draws


def _run_chain_job(args) -> PosteriorDraws:
    dataset, model, config, chain_id = args
    return run_chain(dataset, model, config, chain_id=chain_id)


def run_chains(dataset: Dataset, model: ModelConfig,
               config: ChainConfig) -> list[PosteriorDraws]:
    """Run config.n_chains chains; sequential unless workers > 1.

    Chain starting points are dispersed (chain 0 keeps the deterministic
    initialization) and seeds are spawned from one root, so results do not
    depend on whether chains run sequentially or in parallel.
    """
    if config.n_chains == 1 or config.workers == 1:
        ctx = build_context(dataset, model)
        return [run_chain(dataset, model, config, chain_id=c, context=ctx)
                for c in range(config.n_chains)]
    from concurrent.futures import ProcessPoolExecutor

    jobs = [(dataset, model, config, c) for c in range(config.n_chains)]
    with ProcessPoolExecutor(max_workers=min(config.workers,
                                             config.n_chains)) as pool:
        return list(pool.map(_run_chain_job, jobs))


def pool_draws(chains: list[PosteriorDraws]) -> PosteriorDraws:
    """Concatenate several chains into one draw set for prediction.

    Chains must come from the same fit: identical masked cells and, on the
    sparse path, the same mesh.  Acceptance rates are averaged; chain_id is
    set to -1 to mark the pool.
    """
    if not chains:
        raise ValueError("need at least one chain to pool")
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    for c in chains[1:]:
        if not np.array_equal(c.missing_cells, first.missing_cells):
            raise ValueError("chains disagree on which cells are masked; "
                             "pooling needs chains from one fit")
        if (c.weights is None) != (first.weights is None):
            raise ValueError("chains mix sparse and dense paths")

    def cat(name):
        return np.concatenate([getattr(c, name) for c in chains])

    return PosteriorDraws(
        kappa=cat("kappa"), sigma2=cat("sigma2"), tau2=cat("tau2"),
        w=cat("w"), beta=cat("beta"), theta0=cat("theta0"),
        theta=cat("theta"), intercepts=cat("intercepts"),
        weights=cat("weights") if first.weights is not None else None,
        lam_missing=cat("lam_missing"),
        missing_cells=first.missing_cells,
        lam=cat("lam") if all(c.lam is not None for c in chains) else None,
        accept_lambda=float(np.mean([c.accept_lambda for c in chains])),
        accept_kappa=float(np.mean([c.accept_kappa for c in chains])),
        step_lambda=first.step_lambda, step_kappa=first.step_kappa,
        monitored_cells=first.monitored_cells, chain_id=-1,
        config=first.config, context=first.context)
