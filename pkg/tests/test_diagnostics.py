"""Diagnostics tests: R-hat and ESS behavior on synthetic chains."""

import numpy as np
import pytest

from countfield.diagnostics import (
    Diagnostics,
    diagnose,
    effective_sample_size,
    split_rhat,
)


class StubDraws:
    """Minimal stand-in exposing what diagnose() reads."""

    def __init__(self, scalars, accept=(0.5, 0.3)):
        self.scalars = scalars
        self.accept_lambda, self.accept_kappa = accept
        self.n_draws = len(next(iter(scalars.values())))

    def monitored_scalars(self):
        return self.scalars


def test_rhat_near_one_for_iid_chains():
    rng = np.random.default_rng(0)
    chains = rng.standard_normal((4, 1000))
    assert 0.99 <= split_rhat(chains) <= 1.02


def test_rhat_detects_offset_chain():
    rng = np.random.default_rng(1)
    chains = rng.standard_normal((4, 1000))
    chains[0] += 10.0
    assert split_rhat(chains) > 1.5


def test_rhat_detects_within_chain_drift():
    # split halves differ, so even a single trending chain is flagged
    trend = np.linspace(0.0, 5.0, 1000)[None, :]
    assert split_rhat(trend + 0.01 * np.random.default_rng(2)
                      .standard_normal((1, 1000))) > 1.5


def test_constant_chains_policy():
    chains = np.full((3, 100), 2.5)
    assert split_rhat(chains) == 1.0
    assert effective_sample_size(chains) == 0.0


def test_ess_capped_by_draw_count():
    rng = np.random.default_rng(3)
    chains = rng.standard_normal((4, 500))
    ess = effective_sample_size(chains)
    assert 0 < ess <= chains.size
    assert ess > 0.5 * chains.size  # iid should look nearly independent


def test_ess_shrinks_for_autocorrelated_chains():
    rng = np.random.default_rng(4)
    phi = 0.9
    m, n = 4, 4000
    chains = np.empty((m, n))
    for c in range(m):
        x = 0.0
        for t in range(n):
            x = phi * x + rng.standard_normal()
            chains[c, t] = x
    ess = effective_sample_size(chains)
    expected = chains.size * (1 - phi) / (1 + phi)  # AR(1) asymptotics
    assert 0.5 * expected < ess < 2.0 * expected


def test_diagnose_requires_enough_draws():
    with pytest.raises(ValueError, match="2 splits|2 draws"):
        diagnose([StubDraws({"x": np.array([1.0])})])
    with pytest.raises(ValueError, match="unequal"):
        diagnose([StubDraws({"x": np.zeros(10)}),
                  StubDraws({"x": np.zeros(8)})])
    with pytest.raises(ValueError, match="at least one"):
        diagnose([])


def test_diagnose_flags_disagreeing_chains():
    rng = np.random.default_rng(5)
    good = rng.standard_normal(400)
    bad = rng.standard_normal(400) + 8.0
    report = diagnose([
        StubDraws({"ok": rng.standard_normal(400), "shifted": good}),
        StubDraws({"ok": rng.standard_normal(400), "shifted": bad}),
    ])
    assert isinstance(report, Diagnostics)
    assert "shifted" in report.flagged
    assert "ok" not in report.flagged
    assert report.rhat["shifted"] > 1.5
    assert report.ess["ok"] <= 800
    assert report.max_rhat() == report.rhat["shifted"]
    assert report.accept_lambda == [0.5, 0.5]
