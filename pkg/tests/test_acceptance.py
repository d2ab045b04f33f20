"""End-to-end acceptance checks for the advertised statistical behavior.

Each test prints one pass/fail line (run with -s or -rA to see them on
success).  The heavyweight fits are shared module-scoped fixtures: one
four-chain sparse benchmark fit, one dense fit of the same data, and two
short fits for the missing-data and holdout studies.  Total runtime is a
few minutes on one core; the stated budgets are asserted explicitly.
"""

import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from countfield import (
    ChainConfig,
    MissingnessScenario,
    ModelConfig,
    SimulationSpec,
    apply_missingness,
    diagnose,
    estimate_aadb,
    impute,
    krige,
    pool_draws,
    preset,
    run_chain,
    simulate_dataset,
)
from countfield.core import Dataset, matern_correlation
from countfield.kernels import (
    beta_conditional_moments,
    build_context,
    build_spatial,
    mu_conditional_moments,
    pmala_grad_curv,
    seasonal_pseudo_obs,
    seasonal_smoothing_moments,
    variance_conditional_params,
    weight_conditional_moments,
)
from countfield.spde import assemble_fem, build_precision, gmrf_sample, regular_mesh

from test_kernels import (
    brute_log_joint,
    fd_gaussian_conditional,
    fd_invgamma_params,
    generic_state,
)

DATA_SEED = 42
SPARSE_MODEL = ModelConfig(path="sparse", target_nodes=120)
DENSE_MODEL = ModelConfig(path="dense", target_nodes=120)
BENCH_CFG = ChainConfig(iterations=6000, burn_in=4000, thinning=4,
                        n_chains=4, seed=1)
SHORT_CFG = ChainConfig(iterations=3000, burn_in=2000, thinning=2, seed=7)


def _verdict(num, name, ok, detail):
    line = f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} [{detail}]"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared fits


@pytest.fixture(scope="module")
def bench():
    truth = simulate_dataset(preset("appendix-c-small", seed=DATA_SEED))
    return SimpleNamespace(truth=truth, ds=truth.dataset)


@pytest.fixture(scope="module")
def warm(bench):
    # compile / load every jitted kernel before anything is timed
    tiny = ChainConfig(iterations=12, burn_in=6, seed=0)
    for model in (SPARSE_MODEL, DENSE_MODEL):
        run_chain(bench.ds, model, tiny)


@pytest.fixture(scope="module")
def sparse_fit(bench, warm):
    ctx = build_context(bench.ds, SPARSE_MODEL)
    chains, seconds = [], []
    for c in range(BENCH_CFG.n_chains):
        t0 = time.perf_counter()
        chains.append(run_chain(bench.ds, SPARSE_MODEL, BENCH_CFG,
                                chain_id=c, context=ctx))
        seconds.append(time.perf_counter() - t0)
    return SimpleNamespace(chains=chains, pooled=pool_draws(chains),
                           chain0_seconds=seconds[0],
                           total_seconds=sum(seconds))


@pytest.fixture(scope="module")
def dense_fit(bench, warm):
    t0 = time.perf_counter()
    draws = run_chain(bench.ds, DENSE_MODEL, BENCH_CFG)
    return SimpleNamespace(draws=draws, seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# 1: coefficient recovery on the benchmark preset


def test_criterion_01_coefficient_recovery(bench, sparse_fit):
    truth = bench.truth.hypers
    pooled = sparse_fit.pooled
    beta_mean = pooled.beta.mean(axis=0)
    beta_err = np.abs(beta_mean - truth.beta)
    lo, hi = np.quantile(pooled.beta, [0.025, 0.975], axis=0)
    covered = (lo <= truth.beta) & (truth.beta <= hi)
    kappa_rel = abs(pooled.kappa.mean() - truth.kappa) / truth.kappa
    ok = (beta_err.max() <= 0.02 and covered.all() and kappa_rel <= 0.15
          and sparse_fit.total_seconds <= 20 * 60)
    _verdict(1, "coefficient recovery", ok,
             f"max beta err {beta_err.max():.4f} (<=0.02), CI cover "
             f"{covered.tolist()}, kappa rel err {kappa_rel:.3f} (<=0.15), "
             f"{sparse_fit.total_seconds:.0f}s (<=1200s)")


# ---------------------------------------------------------------------------
# 2: sparse path accuracy and speed against the dense path


def test_criterion_02_sparse_vs_dense(bench, sparse_fit, dense_fit):
    mu_true = bench.truth.mu
    rmse = {}
    rmse["sparse"] = float(np.sqrt(np.mean(
        (sparse_fit.chains[0].intercepts.mean(axis=0) - mu_true) ** 2)))
    rmse["dense"] = float(np.sqrt(np.mean(
        (dense_fit.draws.intercepts.mean(axis=0) - mu_true) ** 2)))
    gain = dense_fit.seconds / sparse_fit.chain0_seconds
    total = dense_fit.seconds + sparse_fit.chain0_seconds
    ok = (rmse["sparse"] <= 1.15 * rmse["dense"] and gain >= 1.5
          and total <= 45 * 60)
    _verdict(2, "sparse vs dense", ok,
             f"rmse sparse {rmse['sparse']:.4f} vs dense {rmse['dense']:.4f} "
             f"(ratio {rmse['sparse'] / rmse['dense']:.3f} <= 1.15), "
             f"speed gain {gain:.2f}x (>=1.5), {total:.0f}s total")


# ---------------------------------------------------------------------------
# 3: Gibbs full conditionals against brute-force oracles on a tiny instance


def _tiny_setup(path):
    sites = np.array([[0.2, 0.3], [0.7, 0.2], [0.5, 0.6],
                      [0.3, 0.8], [0.8, 0.7]])
    spec = SimulationSpec(n_sites=5, T=3, kappa=0.4, sigma2=0.3, tau2=0.2,
                          w=(0.05, 0.08), beta=(0.2, -0.1), period=7,
                          order=1, sites=sites, seed=3)
    ds = simulate_dataset(spec).dataset
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), 1.0)   # 4 nodes
    model = ModelConfig(path=path, mesh=mesh if path == "sparse" else None)
    ctx = build_context(ds, model)
    state, hypers = generic_state(ds, ctx)
    return ds, ctx, state, hypers, build_spatial(ctx, hypers.kappa)


def test_criterion_03_gibbs_conditional_oracles():
    ds, ctx, state, hypers, spatial = _tiny_setup("sparse")
    assert ctx.n_nodes <= 6 and ds.n_sites <= 5 and ds.T <= 3
    worst = 0.0

    for t in range(1, ds.T + 1):
        def f(x, t=t):
            st = state.copy()
            st.weights[t - 1] = x
            return brute_log_joint(ds, st, hypers, ctx)

        mean_fd, cov_fd = fd_gaussian_conditional(f, state.weights[t - 1].copy())
        mean, cov = weight_conditional_moments(state, hypers, ctx, spatial, t)
        worst = max(worst, np.abs(mean - mean_fd).max(),
                    np.abs(cov - cov_fd).max())

    def f_beta(b):
        h = hypers.copy()
        h.beta = b.copy()
        return brute_log_joint(ds, state, h, ctx)

    mean_fd, cov_fd = fd_gaussian_conditional(f_beta, hypers.beta.copy())
    mean, cov = beta_conditional_moments(state, hypers, ctx)
    worst = max(worst, np.abs(mean - mean_fd).max(), np.abs(cov - cov_fd).max())

    params = variance_conditional_params(state, hypers, ctx, spatial)

    def scalar_posterior(setter):
        def f(x):
            h = hypers.copy()
            setter(h, x)
            return brute_log_joint(ds, state, h, ctx)
        return f

    def set_w(l):
        def setter(h, x):
            h.w = hypers.w.copy()
            h.w[l] = x
        return setter

    checks = [(params["sigma2"], scalar_posterior(
                  lambda h, x: setattr(h, "sigma2", x)), hypers.sigma2),
              (params["tau2"], scalar_posterior(
                  lambda h, x: setattr(h, "tau2", x)), hypers.tau2)]
    for l in range(ds.p):
        checks.append(((params["w"][0], params["w"][1][l]),
                       scalar_posterior(set_w(l)), hypers.w[l]))
    for (shape, rate), f, x0 in checks:
        shape_fd, rate_fd = fd_invgamma_params(f, x0)
        worst = max(worst, abs(shape - shape_fd) / shape_fd,
                    abs(rate - rate_fd) / rate_fd)

    # dense path analog of the intercept-block conditional
    ds2, ctx2, state2, hypers2, spatial2 = _tiny_setup("dense")
    for t in range(1, ds2.T + 1):
        def f_mu(x, t=t):
            st = state2.copy()
            st.mu[t - 1] = x
            return brute_log_joint(ds2, st, hypers2, ctx2)

        mean_fd, cov_fd = fd_gaussian_conditional(f_mu, state2.mu[t - 1].copy())
        mean, cov = mu_conditional_moments(state2, hypers2, ctx2, spatial2, t)
        worst = max(worst, np.abs(mean - mean_fd).max(),
                    np.abs(cov - cov_fd).max())

    _verdict(3, "Gibbs conditional oracles", worst < 1e-8,
             f"worst deviation {worst:.2e} (<1e-8)")


# ---------------------------------------------------------------------------
# 4: FFBS smoothing moments against a stacked joint-Gaussian oracle


def test_criterion_04_ffbs_matches_joint_gaussian():
    spec = SimulationSpec(n_sites=4, T=20, kappa=0.4, sigma2=0.3, tau2=0.2,
                          w=(0.05, 0.08), beta=(0.2, -0.1), period=7,
                          order=1, seed=9)
    ds = simulate_dataset(spec).dataset
    ctx = build_context(ds, ModelConfig(path="dense"))
    state, hypers = generic_state(ds, ctx)
    z, v = seasonal_pseudo_obs(state, hypers, ctx)
    p, T = ds.p, ds.T
    assert (p, T) == (2, 20)
    m0 = np.full(p, ctx.priors.m0)

    dim = (T + 1) * p
    P = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    winv = np.diag(1.0 / hypers.w)
    P[:p, :p] += np.eye(p) / ctx.priors.c0
    rhs[:p] += m0 / ctx.priors.c0
    for t in range(1, T + 1):
        a, b = (t - 1) * p, t * p
        P[a:a + p, a:a + p] += ds.G.T @ winv @ ds.G
        P[a:a + p, b:b + p] -= ds.G.T @ winv
        P[b:b + p, a:a + p] -= winv @ ds.G
        P[b:b + p, b:b + p] += winv
        Ft = ds.F[t - 1]
        P[b:b + p, b:b + p] += np.outer(Ft, Ft) / v
        rhs[b:b + p] += Ft * z[t - 1] / v
    cov = np.linalg.inv(P)
    mean = cov @ rhs

    sm, sC = seasonal_smoothing_moments(ds.F, ds.G, hypers.w, z, v, m0,
                                        ctx.priors.c0)
    worst = 0.0
    for t in range(T + 1):
        worst = max(worst, np.abs(sm[t] - mean[t * p:(t + 1) * p]).max(),
                    np.abs(sC[t] - cov[t * p:(t + 1) * p,
                                       t * p:(t + 1) * p]).max())
    _verdict(4, "FFBS joint-Gaussian oracle", worst < 1e-8,
             f"worst moment deviation {worst:.2e} (<1e-8), p=2, T=20")


# ---------------------------------------------------------------------------
# 5: log-rate update derivatives against high-order finite differences


def test_criterion_05_pmala_derivative_check():
    h = 1e-3
    worst = 0.0
    for lam in np.linspace(-3.0, 5.0, 17):
        for y in (0.0, 1.0, 5.0, 50.0):
            for m in (-1.0, 0.7):
                for tau2 in (0.3, 2.0):
                    def f(x):
                        return y * x - np.exp(x) - (x - m) ** 2 / (2.0 * tau2)

                    g, c = pmala_grad_curv(np.array([lam]), np.array([y]),
                                           np.array([m]), tau2)
                    g_fd = (-f(lam + 2 * h) + 8 * f(lam + h)
                            - 8 * f(lam - h) + f(lam - 2 * h)) / (12 * h)
                    cur_fd = -(-f(lam + 2 * h) + 16 * f(lam + h) - 30 * f(lam)
                               + 16 * f(lam - h) - f(lam - 2 * h)) / (12 * h * h)
                    worst = max(worst, abs(g[0] - g_fd) / abs(g_fd),
                                abs(c[0] - cur_fd) / abs(cur_fd))
    _verdict(5, "pMALA derivative check", worst < 1e-6,
             f"worst relative error {worst:.2e} (<1e-6)")


# ---------------------------------------------------------------------------
# 6: GMRF approximation of the smoothness-1 Matern correlation


def test_criterion_06_spde_matches_matern():
    t0 = time.perf_counter()
    kappa = 1.0
    mesh = regular_mesh((0.0, 0.0, 1.0, 1.0), kappa / 5.0, padding=2.0 * kappa)
    prec = build_precision(assemble_fem(mesh), kappa)
    cov = np.linalg.inv(prec.q.toarray())
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    inner = np.nonzero(np.all((mesh.vertices >= -1e-9)
                              & (mesh.vertices <= 1.0 + 1e-9), axis=1))[0]
    worst = 0.0
    for a in inner:
        d = np.linalg.norm(mesh.vertices[inner] - mesh.vertices[a], axis=1)
        worst = max(worst, np.abs(corr[a, inner]
                                  - matern_correlation(d, kappa, 1.0)).max())
    dt = time.perf_counter() - t0
    _verdict(6, "SPDE vs Matern correlation", worst < 0.05 and dt < 60,
             f"max abs error {worst:.4f} (<0.05) over {inner.size} interior "
             f"nodes, {dt:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 7: GMRF sampler covariance on a 12-node mesh


def test_criterion_07_gmrf_sampler_covariance():
    t0 = time.perf_counter()
    mesh = regular_mesh((0.0, 0.0, 1.5, 1.0), 0.5)
    assert mesh.n_vertices == 12
    prec = build_precision(assemble_fem(mesh), 0.7)
    sigma2, K = 0.4, 50000
    draws = gmrf_sample(prec, sigma2, np.random.default_rng(5), size=K)
    emp = draws.T @ draws / K
    target = sigma2 * np.linalg.inv(prec.q.toarray())
    dd = np.diag(target)
    se = np.sqrt((np.outer(dd, dd) + target ** 2) / K)
    worst = float(np.max(np.abs(emp - target) / se))
    dt = time.perf_counter() - t0
    _verdict(7, "GMRF sampler covariance", worst < 3.0 and dt < 60,
             f"worst |emp-target| = {worst:.2f} MC standard errors (<3), "
             f"{K} draws, {dt:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# 8: posterior-predictive coverage of blocked-out counts


def test_criterion_08_imputation_coverage(bench, warm):
    masked = apply_missingness(bench.truth, MissingnessScenario.blocks(0.5),
                               np.random.default_rng(11))
    frac = float((~masked.mask).mean())
    draws = run_chain(masked, SPARSE_MODEL, SHORT_CFG)
    summary = impute(draws, masked, seed=3)
    tt, ii = draws.missing_cells[:, 0], draws.missing_cells[:, 1]
    y_true = bench.ds.counts[tt, ii]
    cover = float(np.mean((summary.lower <= y_true)
                          & (y_true <= summary.upper)))
    _verdict(8, "imputation coverage", cover >= 0.90,
             f"{cover:.3f} of {y_true.size} blocked-out counts in 95% "
             f"intervals (>=0.90), {frac:.0%} cells masked")


# ---------------------------------------------------------------------------
# 9: kriging coverage at held-out sites


def test_criterion_09_kriging_holdout_coverage(bench, warm):
    full = bench.ds
    inner = np.nonzero(np.all((full.sites >= 0.15) & (full.sites <= 0.85),
                              axis=1))[0]
    hold = np.sort(np.random.default_rng(5).choice(inner, size=5,
                                                   replace=False))
    keep = np.setdiff1d(np.arange(full.n_sites), hold)
    reduced = Dataset(counts=full.counts[:, keep], mask=full.mask[:, keep],
                      sites=full.sites[keep], X=full.X[:, keep, :],
                      F=full.F, G=full.G)
    draws = run_chain(reduced, SPARSE_MODEL, SHORT_CFG)
    hits = total = 0
    for j in hold:
        series = krige(draws, reduced, full.sites[j], x_new=full.X[:, j, :],
                       seed=int(j))
        y = full.counts[:, j]
        hits += int(np.sum((series.lower <= y) & (y <= series.upper)))
        total += y.size
    cover = hits / total
    _verdict(9, "kriging holdout coverage", cover >= 0.90,
             f"{cover:.3f} of {total} counts at 5 held-out sites in 95% "
             f"intervals (>=0.90)")


# ---------------------------------------------------------------------------
# 10: the period average of a fully observed site is recovered exactly


def test_criterion_10_aadb_identity(bench, sparse_fit):
    ds = bench.ds
    worst_site = None
    for site in range(ds.n_sites):
        est = estimate_aadb(sparse_fit.pooled, ds, site=site, keep_draws=True)
        expected = float(np.mean(ds.counts[:, site]))
        exact = (est.mean == expected and est.sd == 0.0
                 and est.lower == est.upper == est.median == expected
                 and bool(np.all(est.draws == expected)))
        if not exact:
            worst_site = site
            break
    _verdict(10, "period-average identity", worst_site is None,
             "exact mean and zero spread at every fully observed site"
             if worst_site is None else f"site {worst_site} deviates")


# ---------------------------------------------------------------------------
# 11: determinism, and convergence diagnostics across four chains


def test_criterion_11a_same_seed_determinism(bench, sparse_fit):
    again = run_chain(bench.ds, SPARSE_MODEL, BENCH_CFG, chain_id=0)
    ref = sparse_fit.chains[0]
    same = (np.array_equal(again.kappa, ref.kappa)
            and np.array_equal(again.sigma2, ref.sigma2)
            and np.array_equal(again.tau2, ref.tau2)
            and np.array_equal(again.w, ref.w)
            and np.array_equal(again.beta, ref.beta)
            and np.array_equal(again.theta0, ref.theta0)
            and np.array_equal(again.theta, ref.theta)
            and np.array_equal(again.intercepts, ref.intercepts)
            and np.array_equal(again.weights, ref.weights)
            and np.array_equal(again.lam_missing, ref.lam_missing)
            and again.accept_lambda == ref.accept_lambda
            and again.accept_kappa == ref.accept_kappa
            and again.step_lambda == ref.step_lambda
            and again.step_kappa == ref.step_kappa)
    _verdict("11a", "same-seed bit-identical", same,
             "independent rerun reproduced every draw bit for bit")


def test_criterion_11b_four_chain_rhat(sparse_fit):
    """Split R-hat of every hyperparameter across the four benchmark chains.

    Known to fail for kappa, sigma2 and tau2 at this chain length: their full
    conditionals are two orders of magnitude tighter than their marginals
    (the increments of a 13200-cell latent field pin them far harder than the
    Poisson data do), so the one-block-at-a-time sampler moves them in tiny
    steps.  Measured at stationarity the kappa walk carries an integrated
    autocorrelation time of a few thousand iterations, leaving 2000 post-burn
    iterations with a handful of effective draws per chain.  R-hat does fall
    steadily with length (kappa 1.57 here, 1.12 at 40000 iterations, every
    other scalar under 1.05 by then) but reaching 1.05 on kappa needs chains
    tens of times longer than this budget; see the README's known-limitations
    note.
    """
    diag = diagnose(sparse_fit.chains)
    names = [k for k in diag.rhat
             if not k.startswith("intercept_")]
    vals = {k: diag.rhat[k] for k in names}
    worst = max(vals, key=lambda k: vals[k])
    ok = all(v <= 1.05 for v in vals.values())
    _verdict("11b", "four-chain R-hat", ok,
             ", ".join(f"{k} {v:.3f}" for k, v in vals.items())
             + f"; worst {worst} (threshold 1.05)")
