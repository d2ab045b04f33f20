"""Synthetic data generation from a fully specified count-field model.

Simulation always uses the exact dense Matern covariance for the spatial
increments, so both inference paths (dense and GMRF-approximated) face the
same ground truth.  Missingness is applied afterwards as a separate scenario
step, keeping the complete counts around for scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import Dataset, HyperState, build_dense_correlation, chol_spd

# Largest log-rate the generator tolerates; exp(20) counts are nonphysical
# and would dominate every summary, so the run aborts instead.
LAMBDA_ABORT = 20.0


def build_harmonics(period: int, order: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Seasonal design vector and evolution matrix for harmonic regression.

    Parameters
    ----------
    period : int
        Cycle length in time steps, >= 2.
    order : int
        Number of harmonics; the state has dimension 2 * order.

    Returns
    -------
    (F, G)
        F = (1, 0, 1, 0, ...) of length 2*order; G block-diagonal with 2x2
        rotations at angles 2*pi*k/period for k = 1..order.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    if order > 0 and period < 2:
        raise ValueError("period must be at least 2")
    p = 2 * order
    F = np.zeros(p)
    F[0::2] = 1.0
    G = np.zeros((p, p))
    for k in range(1, order + 1):
        ang = 2.0 * np.pi * k / period
        c, s = np.cos(ang), np.sin(ang)
        j = 2 * (k - 1)
        G[j:j + 2, j:j + 2] = [[c, s], [-s, c]]
    return F, G


@dataclass
class SimulationSpec:
    """Complete description of a synthetic experiment."""

    n_sites: int
    T: int
    kappa: float
    sigma2: float
    tau2: float
    w: np.ndarray                    # (p,) seasonal evolution variances
    beta: np.ndarray                 # (q,) covariate effects
    period: int = 7
    order: int = 1
    nu: float = 1.0
    sites: np.ndarray | None = None  # explicit coordinates; default U[0,1]^2
    theta0_sd: float = 0.0           # theta_0 ~ N(0, sd^2 I); 0 pins it at zero
    seed: int = 0

    def __post_init__(self) -> None:
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float)) \
            if np.size(self.beta) else np.zeros(0)
        if self.n_sites < 1 or self.T < 1:
            raise ValueError("n_sites and T must be positive")
        if not (self.kappa > 0 and self.sigma2 >= 0 and self.tau2 >= 0):
            raise ValueError("kappa must be positive, variances nonnegative")
        if self.order > 0 and self.period < 2:
            raise ValueError("period must be at least 2")
        if self.w.shape != (2 * self.order,):
            raise ValueError(f"w must have length 2*order = {2 * self.order}, "
                             f"got {self.w.shape}")
        if np.any(self.w < 0):
            raise ValueError("seasonal variances must be nonnegative")
        if self.theta0_sd < 0:
            raise ValueError("theta0_sd must be nonnegative")


@dataclass
class SimulatedTruth:
    """A simulated dataset together with every latent layer that produced it."""

    dataset: Dataset          # mask all-True until a scenario is applied
    lam: np.ndarray           # (T, n) true log-rates
    mu: np.ndarray            # (T, n) true intercept field at sites
    theta: np.ndarray         # (T, p) true seasonal states
    theta0: np.ndarray        # (p,)
    hypers: HyperState
    spec: SimulationSpec


def simulate_dataset(spec: SimulationSpec) -> SimulatedTruth:
    """Draw one complete dataset from the hierarchy.

    Sites are uniform on the unit square unless given, covariates standard
    normal, the intercept a Gaussian random walk started at zero with Matern
    increments, the seasonal state a harmonic evolution, and counts Poisson
    on the exponentiated log-rate.  Deterministic given spec.seed.

    Raises
    ------
    ValueError
        If any log-rate exceeds 20: at that scale expected counts pass 4e8,
        which signals a mis-scaled spec rather than usable data.
    """
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_sites, spec.T
    q = spec.beta.size
    sites = (np.asarray(spec.sites, dtype=float) if spec.sites is not None
             else rng.uniform(0.0, 1.0, size=(n, 2)))
    if sites.shape != (n, 2):
        raise ValueError(f"sites must have shape ({n}, 2), got {sites.shape}")
    F_vec, G = build_harmonics(spec.period, spec.order)
    p = F_vec.size

    theta0 = spec.theta0_sd * rng.standard_normal(p)
    theta = np.empty((T, p))
    prev = theta0
    sd_w = np.sqrt(spec.w)
    for t in range(T):
        prev = G @ prev + sd_w * rng.standard_normal(p)
        theta[t] = prev

    mu = np.zeros((T, n))
    if spec.sigma2 > 0:
        omega = build_dense_correlation(sites, spec.kappa, spec.nu)
        L, _ = chol_spd(omega)
        sd = np.sqrt(spec.sigma2)
        acc = np.zeros(n)
        for t in range(T):
            acc = acc + sd * (L @ rng.standard_normal(n))
            mu[t] = acc

    X = rng.standard_normal((T, n, q))
    lam = mu + (theta @ F_vec)[:, None]
    if q:
        lam = lam + X @ spec.beta
    if spec.tau2 > 0:
        lam = lam + np.sqrt(spec.tau2) * rng.standard_normal((T, n))
    peak = float(lam.max())
    if peak > LAMBDA_ABORT:
        raise ValueError(
            f"simulated log-rate reached {peak:.2f} > {LAMBDA_ABORT}; expected "
            "counts would overflow any realistic scale. Reduce sigma2, tau2, "
            "w, or T in the simulation spec.")
    counts = rng.poisson(np.exp(lam)).astype(float)
    dataset = Dataset(counts=counts, mask=np.ones((T, n), dtype=bool),
                      sites=sites, X=X, F=np.tile(F_vec, (T, 1)), G=G)
    hypers = HyperState(kappa=spec.kappa, sigma2=spec.sigma2, tau2=spec.tau2,
                        w=spec.w.copy(), beta=spec.beta.copy())
    return SimulatedTruth(dataset=dataset, lam=lam, mu=mu, theta=theta,
                          theta0=theta0, hypers=hypers, spec=spec)


@dataclass
class MissingnessScenario:
    """How to hide cells: iid cells, contiguous time blocks, or whole sites."""

    kind: str                              # "cells" | "blocks" | "holdout"
    proportion: float = 0.0
    length_range: tuple[int, int] = (5, 20)
    sites: list[int] = field(default_factory=list)

    @classmethod
    def cells(cls, proportion: float) -> "MissingnessScenario":
        return cls(kind="cells", proportion=proportion)

    @classmethod
    def blocks(cls, proportion: float,
               length_range: tuple[int, int] = (5, 20)) -> "MissingnessScenario":
        return cls(kind="blocks", proportion=proportion,
                   length_range=tuple(length_range))

    @classmethod
    def holdout(cls, sites) -> "MissingnessScenario":
        return cls(kind="holdout", sites=list(sites))

    def __post_init__(self) -> None:
        if self.kind not in ("cells", "blocks", "holdout"):
            raise ValueError(f"unknown missingness kind {self.kind!r}")
        if not (0.0 <= self.proportion <= 1.0):
            raise ValueError("proportion must be in [0, 1]")
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise ValueError("length_range must satisfy 1 <= lo <= hi")


def _block_mask(T: int, target: int, length_range, rng) -> np.ndarray:
    """Contiguous random blocks masking exactly `target` cells of a length-T column."""
    lo, hi = length_range
    masked = np.zeros(T, dtype=bool)
    guard = 0
    while masked.sum() < target:
        guard += 1
        if guard > 100 * T:
            raise RuntimeError("block masking failed to converge")
        start = int(rng.integers(0, T))
        length = int(rng.integers(lo, hi + 1))
        seg = np.arange(start, min(T, start + length))
        fresh = seg[~masked[seg]]
        need = target - int(masked.sum())
        masked[fresh[:need]] = True
    return masked


def apply_missingness(truth: SimulatedTruth, scenario: MissingnessScenario,
                      rng: np.random.Generator) -> Dataset:
    """Return a copy of the simulated dataset with cells hidden per scenario.

    The truth object is untouched; masked cells keep NaN counts in the copy.
    Rejects scenarios that would leave no observed cells.
    """
    ds = truth.dataset
    T, n = ds.T, ds.n_sites
    mask = ds.mask.copy()
    if scenario.kind == "cells":
        drop = rng.uniform(size=(T, n)) < scenario.proportion
        mask &= ~drop
    elif scenario.kind == "blocks":
        target = int(round(scenario.proportion * T))
        for i in range(n):
            col = _block_mask(T, target, scenario.length_range, rng)
            mask[col, i] = False
    else:  # holdout
        bad = [s for s in scenario.sites if not (0 <= s < n)]
        if bad:
            raise ValueError(f"holdout site indices out of range: {bad}")
        mask[:, scenario.sites] = False
    if not mask.any():
        raise ValueError("scenario masks every cell; nothing left to fit")
    counts = ds.counts.copy()
    counts[~mask] = np.nan
    return Dataset(counts=counts, mask=mask, sites=ds.sites.copy(),
                   X=ds.X.copy(), F=ds.F.copy(), G=ds.G.copy(),
                   site_ids=list(ds.site_ids))


# Bundled synthetic benchmark presets.  Truth values: kappa=0.35, sigma2=0.10,
# tau2=0.05, w=(0.01, 0.02), beta=(0.266, 0.372, 0.573), period-7 order-1
# harmonics, three standard-normal covariates.
_PRESETS = {
    "appendix-c": dict(n_sites=1000, T=200),
    "appendix-c-small": dict(n_sites=100, T=100),
}


def preset(name: str, seed: int = 0) -> SimulationSpec:
    """A bundled benchmark SimulationSpec by name."""
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}")
    dims = _PRESETS[name]
    return SimulationSpec(
        n_sites=dims["n_sites"], T=dims["T"],
        kappa=0.35, sigma2=0.10, tau2=0.05,
        w=np.array([0.01, 0.02]), beta=np.array([0.266, 0.372, 0.573]),
        period=7, order=1, nu=1.0, seed=seed)
