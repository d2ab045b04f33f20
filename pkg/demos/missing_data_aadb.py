"""Imputation under blocked-out stretches and period-average estimates.

Counters fail for weeks at a time, so the missingness here masks contiguous
blocks per site (half of all cells).  The fit treats masked cells as latent;
imputation then draws posterior-predictive counts for them, and the average
daily count over any period comes with honest uncertainty that vanishes
exactly where the period was fully observed.
"""

import numpy as np

from countfield import (ChainConfig, MissingnessScenario, ModelConfig,
                        apply_missingness, estimate_aadb, impute, preset,
                        run_chain, simulate_dataset)

truth = simulate_dataset(preset("appendix-c-small", seed=42))
masked = apply_missingness(truth, MissingnessScenario.blocks(0.5),
                           np.random.default_rng(11))
n_missing = int((~masked.mask).sum())
print(f"masked {n_missing} of {masked.mask.size} cells in per-site blocks")

model = ModelConfig(path="sparse", target_nodes=120)
draws = run_chain(masked, model, ChainConfig(iterations=3000, burn_in=2000,
                                             thinning=2, seed=7))

# posterior-predictive intervals for every masked cell, checked against the
# counts we actually simulated
summary = impute(draws, masked, seed=3)
tt, ii = draws.missing_cells[:, 0], draws.missing_cells[:, 1]
y_true = truth.dataset.counts[tt, ii]
inside = (summary.lower <= y_true) & (y_true <= summary.upper)
print(f"95% intervals cover {inside.mean():.1%} of the held-back counts")
width = summary.upper - summary.lower
print(f"median interval width {np.median(width):.0f} counts\n")

# average daily count over a 30-day stretch, three flavours of site: pick the
# window inside the longest gap-free run any counter managed, so one site is
# fully observed there while another saw nothing at all
run_len = run_end = clean = 0
for i in range(masked.mask.shape[1]):
    streak = 0
    for t in range(masked.mask.shape[0]):
        streak = streak + 1 if masked.mask[t, i] else 0
        if streak > run_len:
            run_len, run_end, clean = streak, t + 1, i
period = range(run_end - 30, run_end)
label = f"days {period.start}-{period.stop - 1}"
gappy = int(np.argmin(masked.mask[period.start:period.stop].sum(axis=0)))

est = estimate_aadb(draws, masked, site=clean, period=period,
                    period_label=label)
print(f"site {clean:2d} (no gaps):    {est.mean:.2f} exactly (sd {est.sd:.1f})")

est = estimate_aadb(draws, masked, site=gappy, period=period,
                    period_label=label, seed=4)
print(f"site {gappy:2d} (all masked):  {est.mean:.2f} "
      f"[{est.lower:.2f}, {est.upper:.2f}]")

new = estimate_aadb(draws, masked, new_site=(0.42, 0.58),
                    x_new=truth.dataset.X[:, 0, :], period=period,
                    period_label=label, seed=5)
print(f"unmonitored spot:   {new.mean:.2f} [{new.lower:.2f}, {new.upper:.2f}]")
