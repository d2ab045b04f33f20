"""Convergence diagnostics: split R-hat and autocorrelation-based ESS.

Scalars are compared across chains after splitting each chain in half, so a
single long chain still yields two sequences.  Constant chains are reported
with R-hat 1 and ESS 0 rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RHAT_FLAG_THRESHOLD = 1.05


def _split(chains: np.ndarray) -> np.ndarray:
    """Split each row in half, dropping the middle element of odd rows."""
    m, n = chains.shape
    half = n // 2
    if half < 1:
        raise ValueError("need at least 2 draws per chain to form 2 splits")
    return np.vstack([chains[:, :half], chains[:, n - half:]])


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction over half-chains.

    chains is (m, n); identical constant chains report exactly 1.0.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    parts = _split(chains)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    if n < 2:
        raise ValueError("need at least 2 draws per split")
    W = parts.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0.0:
        return 1.0 if B == 0.0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased (1/n) autocovariance sequence via FFT."""
    n = x.size
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    return np.fft.irfft(f * np.conj(f))[:n] / n


def effective_sample_size(chains: np.ndarray) -> float:
    """ESS from combined autocorrelations with Geyer's initial-monotone cutoff.

    Computed over half-chains; capped at the total draw count; constant
    chains report 0.
    """
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    parts = _split(chains)
    m, n = parts.shape
    total = chains.size
    acov = np.array([_autocovariance(row) for row in parts])
    W = (acov[:, 0] * n / (n - 1)).mean()
    means = parts.mean(axis=1)
    B = n * means.var(ddof=1) if m > 1 else 0.0
    var_plus = (n - 1) / n * W + B / n
    if var_plus == 0.0 or not np.isfinite(var_plus):
        return 0.0
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    # Geyer: sum lag pairs (rho_2k + rho_2k+1) while positive and monotone
    pair_sum = 0.0
    prev = np.inf
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair < 0.0:
            break
        pair = min(pair, prev)
        pair_sum += pair
        prev = pair
        k += 1
    tau = max(-1.0 + 2.0 * pair_sum, 1e-12)
    return float(min(total / tau, total))


@dataclass
class Diagnostics:
    """Per-scalar convergence report across chains."""

    ess: dict[str, float]
    rhat: dict[str, float]
    flagged: list[str]            # scalars with R-hat above the 1.05 threshold
    accept_lambda: list[float]
    accept_kappa: list[float]
    n_chains: int
    n_draws: int

    def max_rhat(self) -> float:
        return max(self.rhat.values()) if self.rhat else 1.0


def diagnose(draws_list) -> Diagnostics:
    """Split R-hat and ESS for every monitored scalar across chains.

    Accepts a list of PosteriorDraws of equal length.  Raises ValueError when
    chains have unequal lengths or are too short to form two splits.
    """
    if not draws_list:
        raise ValueError("diagnose needs at least one chain")
    lengths = {d.n_draws for d in draws_list}
    if len(lengths) != 1:
        raise ValueError(f"chains have unequal lengths: {sorted(lengths)}")
    n = lengths.pop()
    if n < 2:
        raise ValueError("need at least 2 draws per chain to form 2 splits")
    scalar_sets = [d.monitored_scalars() for d in draws_list]
    names = list(scalar_sets[0])
    ess = {}
    rhat = {}
    flagged = []
    for name in names:
        stacked = np.vstack([s[name] for s in scalar_sets])
        rh = split_rhat(stacked)
        ess[name] = effective_sample_size(stacked)
        rhat[name] = rh
        if rh > RHAT_FLAG_THRESHOLD:
            flagged.append(name)
    return Diagnostics(ess=ess, rhat=rhat, flagged=flagged,
                       accept_lambda=[d.accept_lambda for d in draws_list],
                       accept_kappa=[d.accept_kappa for d in draws_list],
                       n_chains=len(draws_list), n_draws=n)
