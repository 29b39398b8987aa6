from __future__ import annotations

import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from morephy.resgld import (
    ReplicaState,
    ResgldConfig,
    SampleStore,
    SamplerDivergence,
    estimate_sigma2,
    naive_swap_rate,
    run_resgld,
    sgld_step,
    stochastic_energy,
    swap_probability,
    write_trace,
)


class Quadratic:
    """``L = |beta|^2 / 2``: each coordinate is an independent 1-D Gaussian target."""

    n_total = 1

    def energy(self, b, rng):
        return 0.5 * float(b @ b)

    def energy_and_grad(self, b, rng):
        return 0.5 * float(b @ b), b.copy()


class DoubleWell:
    n_total = 1

    def __init__(self, tilt=0.0):
        self.tilt = tilt

    def energy(self, b, rng):
        return float((b[0] ** 2 - 1) ** 2 + self.tilt * b[0])

    def energy_and_grad(self, b, rng):
        return self.energy(b, rng), 4 * b * (b**2 - 1) + self.tilt


class NoisyMean:
    """Mean-squared energy over a data set, estimated on mini-batches."""

    def __init__(self, data, batch):
        self.data, self.batch, self.n_total = data, batch, len(data)

    def _idx(self, rng):
        if rng is None or self.batch >= self.n_total:
            return np.arange(self.n_total)
        return rng.choice(self.n_total, self.batch, replace=False)

    def energy(self, b, rng):
        d = self.data[self._idx(rng)]
        return self.n_total * float(np.mean(0.5 * (d - b[0]) ** 2))

    def energy_and_grad(self, b, rng):
        d = self.data[self._idx(rng)]
        return self.n_total * float(np.mean(0.5 * (d - b[0]) ** 2)), np.array([self.n_total * np.mean(b[0] - d)])


# --- energy estimator ---------------------------------------------------------

def test_stochastic_energy_examples():
    assert stochastic_energy(np.full(10, -0.5), 100) == 50.0
    ll = np.random.default_rng(0).standard_normal(40)
    assert stochastic_energy(ll, 40, log_prior=-1.5) == pytest.approx(1.5 - ll.sum())
    with pytest.raises(ValueError):
        stochastic_energy([], 10)
    with pytest.raises(ValueError):
        stochastic_energy(np.ones(11), 10)


def test_stochastic_energy_is_unbiased():
    rng = np.random.default_rng(1)
    ll = -rng.exponential(size=200)
    full = stochastic_energy(ll, 200)
    draws = np.array([stochastic_energy(ll[rng.choice(200, 20, replace=False)], 200) for _ in range(4000)])
    assert abs(draws.mean() - full) <= 3 * draws.std(ddof=1) / math.sqrt(len(draws))


# --- sgld step --------------------------------------------------------------

def test_sgld_step_examples():
    s = sgld_step(ReplicaState(np.zeros(1), 0.0), np.ones(1), 0.01)
    assert s.beta[0] == -0.01 and s.step == 1
    s = sgld_step(ReplicaState(np.zeros(1), 1.0), np.zeros(1), 0.01, noise=np.ones(1))
    assert s.beta[0] == pytest.approx(math.sqrt(0.02), rel=1e-15)
    assert s.beta[0] == pytest.approx(0.141421, abs=1e-6)
    with pytest.raises(SamplerDivergence):
        sgld_step(ReplicaState(np.zeros(1), 0.0), np.array([np.inf]), 0.1)
    with pytest.raises(ValueError):
        ReplicaState(np.zeros(1), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(1e-4, 1.0))
def test_zero_temperature_is_gradient_descent(vals, eta):
    beta = np.array(vals)
    grad = np.sin(beta)
    out = sgld_step(ReplicaState(beta, 0.0), grad, eta, rng=None)
    assert np.array_equal(out.beta, beta - eta * grad)


def test_stationary_variance_small_run():
    # 16 independent coordinates; both chains without swaps
    cfg = ResgldConfig(tau1=0.1, tau2=0.5, eta=1e-2, swap_interval=10**9, total_steps=20000,
                       burn_in=0.1, thinning=1)
    trace: list = []
    store, stats = run_resgld(np.zeros(16), Quadratic(), cfg, 0, trace=trace, swaps=False)
    var = store.as_array().var()
    assert stats.attempts == 0
    assert abs(var - 0.1) <= 0.1 * 0.1, var


# --- swap test --------------------------------------------------------------

def test_swap_probability_examples():
    assert swap_probability(3.0, 1.0, 1.0, 1.0 + 1e-12) == pytest.approx(1.0, abs=1e-9)
    assert swap_probability(0.0, 1.0, 1.0, 10.0) == pytest.approx(math.exp(-0.9), rel=1e-14)
    assert swap_probability(0.0, 1.0, 1.0, 10.0) == pytest.approx(0.40657, abs=1e-5)
    assert swap_probability(0.0, 1.0, 1.0, 10.0, 1.0) == pytest.approx(math.exp(-1.71), rel=1e-14)
    assert swap_probability(0.0, 1.0, 1.0, 10.0, 1.0) == pytest.approx(0.1809, abs=1e-4)
    assert swap_probability(1e6, 0.0, 1e-4, 1e-2) == 1.0
    with pytest.raises(ValueError):
        swap_probability(0.0, 1.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        swap_probability(0.0, 1.0, 1.0, 2.0, -1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 1.0), st.floats(1.01, 10.0))
def test_swap_probability_equals_naive_rate_without_noise(e1, e2, tau1, ratio):
    tau2 = tau1 * ratio
    naive = naive_swap_rate(e1, e2, tau1, tau2) if (1 / tau1 - 1 / tau2) * (e1 - e2) < 700 else math.inf
    assert swap_probability(e1, e2, tau1, tau2, 0.0) == pytest.approx(min(1.0, naive), rel=1e-12)


def test_estimate_sigma2_examples():
    assert estimate_sigma2([(2.0, 1.0)] * 5) == (0.0, True)
    assert estimate_sigma2([(2.0, 1.0)]) == (0.0, False)
    rng = np.random.default_rng(0)
    base = np.array([3.0, 1.0])
    pairs = base + rng.standard_normal((64, 2))
    s2, ok = estimate_sigma2(pairs)
    assert ok and 0.5 <= s2 <= 1.5


def test_sigma2_shrinks_with_batch_size():
    rng = np.random.default_rng(2)
    data = rng.standard_normal(400) * 3
    small, large = NoisyMean(data, 20), NoisyMean(data, 40)
    b1, b2 = np.array([0.5]), np.array([-0.5])
    est = {}
    for name, src in (("small", small), ("large", large)):
        vals = []
        for trial in range(20):
            r = np.random.default_rng(trial)
            vals.append(estimate_sigma2([(src.energy(b1, r), src.energy(b2, r)) for _ in range(8)])[0])
        est[name] = np.mean(vals)
    assert est["large"] < est["small"]


# --- full sampler -------------------------------------------------------------

def test_no_swaps_equals_independent_runs():
    cfg = ResgldConfig(tau1=0.05, tau2=1.0, eta=1e-3, swap_interval=10**6, total_steps=500, burn_in=0.0, thinning=1)
    with_flag, stats = run_resgld(np.array([1.0]), DoubleWell(), cfg, 3, swaps=True)
    without, _ = run_resgld(np.array([1.0]), DoubleWell(), cfg, 3, swaps=False)
    assert stats.attempts == 0
    np.testing.assert_array_equal(with_flag.as_array(), without.as_array())
    # the cold chain alone: replay its stream by hand
    cold_rng = np.random.default_rng(np.random.SeedSequence(3).spawn(3)[0])
    s = ReplicaState(np.array([1.0]), 0.05, deque())
    for k in range(500):
        s = sgld_step(s, DoubleWell().energy_and_grad(s.beta, None)[1], 1e-3, cold_rng)
        assert s.beta[0] == with_flag.samples[k][0]


def double_well_runs(seeds, swaps, steps):
    cfg = ResgldConfig(tau1=0.05, tau2=1.0, eta=1e-3, swap_interval=50, total_steps=steps, burn_in=0.0,
                       thinning=1, sigma_window=2)
    out = []
    for s in seeds:
        store, stats = run_resgld(np.array([1.0]), DoubleWell(), cfg, s, swaps=swaps)
        a = store.as_array()[:, 0]
        out.append((int(np.sum(np.diff(np.sign(a)) != 0)), stats))
    return out


def test_double_well_swaps_cross_barrier_small_run():
    on = double_well_runs(range(3), True, 20000)
    off = double_well_runs(range(3), False, 20000)
    assert all(c > 0 for c, _ in on)
    assert all(c == 0 for c, _ in off)
    assert all(0.0 < st_.rate < 1.0 for _, st_ in on)
    assert all(st_.acceptances <= st_.attempts for _, st_ in on)


def test_sampler_is_deterministic_and_respects_burn_in(tmp_path):
    cfg = ResgldConfig(tau1=0.05, tau2=1.0, eta=1e-3, swap_interval=7, total_steps=300, burn_in=0.5, thinning=10)
    trace: list = []
    a, sa = run_resgld(np.array([0.7]), DoubleWell(0.2), cfg, 11, trace=trace)
    b, sb = run_resgld(np.array([0.7]), DoubleWell(0.2), cfg, 11)
    np.testing.assert_array_equal(a.as_array(), b.as_array())
    assert (sa.attempts, sa.acceptances) == (sb.attempts, sb.acceptances) == (sa.attempts, sa.acceptances)
    assert a.steps == list(range(160, 301, 10)) and len(a) == 15
    assert len(trace) == 600 and sum(r[4] for r in trace) == 2 * (300 // 7)
    write_trace(trace, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,chain,energy,temperature,swap_attempted,swap_accepted" and len(lines) == 601
    with pytest.raises(ValueError):
        SampleStore(burn_in=5).add(3, np.zeros(1))


class Recorder(DoubleWell):
    """Logs the chain states seen at each gradient call."""

    def __init__(self):
        super().__init__(0.3)
        self.seen = []

    def energy_and_grad(self, b, rng):
        self.seen.append(float(b[0]))
        return super().energy_and_grad(b, rng)


def test_swaps_preserve_state_multiset():
    cfg = ResgldConfig(tau1=0.05, tau2=1.0, eta=1e-3, swap_interval=5, total_steps=400, burn_in=0.0, thinning=1)
    rec = Recorder()
    trace: list = []
    _, stats = run_resgld(np.array([1.0]), rec, cfg, 5, trace=trace)
    assert stats.acceptances > 0
    seen = np.array(rec.seen).reshape(-1, 2)  # chain states entering each step
    # replay each chain's noise stream to get the post-step, pre-swap states
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(5).spawn(3)[:2]]
    taus = (0.05, 1.0)
    for k in range(1, len(seen)):
        post = []
        for c in range(2):
            b = seen[k - 1][c]
            g = rec.energy_and_grad(np.array([b]), None)[1][0]
            rec.seen.pop()
            post.append(b - 1e-3 * g + math.sqrt(2e-3 * taus[c]) * rngs[c].standard_normal())
        assert sorted(seen[k]) == sorted(post)
        accepted = trace[2 * (k - 1)][5]
        assert list(seen[k]) == (post[::-1] if accepted else post)


class TiltedWells:
    """Independent tilted double wells, one per coordinate."""

    n_total = 1
    height, tilt = 0.5, 0.15

    def energy(self, b, rng):
        return float(np.sum(self.height * (b**2 - 1) ** 2 + self.tilt * b))

    def energy_and_grad(self, b, rng):
        return self.energy(b, rng), 4 * self.height * b * (b**2 - 1) + self.tilt


def test_well_occupancy_matches_boltzmann_ratio():
    tau1 = 0.4
    src = TiltedWells()

    def weight(x):
        return math.exp(-(src.height * (x * x - 1) ** 2 + src.tilt * x) / tau1)

    expected = quad(weight, -5, 0)[0] / quad(weight, 0, 5)[0]
    cfg = ResgldConfig(tau1=tau1, tau2=1.6, eta=2e-3, swap_interval=10, total_steps=400000, burn_in=0.05,
                       thinning=1, sigma_window=2)
    store, stats = run_resgld(np.ones(16), src, cfg, 0)
    left = np.mean(store.as_array() < 0)
    assert abs(left / (1 - left) / expected - 1) <= 0.05
    assert 0 < stats.rate < 1


def test_divergence_carries_partial_results():
    class Blowup(Quadratic):
        def energy_and_grad(self, b, rng):
            return 0.0, np.full_like(b, 1e308) * (1 + abs(b))

    cfg = ResgldConfig(tau1=0.1, tau2=1.0, eta=10.0, total_steps=10, burn_in=0.0, thinning=1)
    with pytest.raises(SamplerDivergence) as info, np.errstate(over="ignore"):
        run_resgld(np.zeros(1), Blowup(), cfg, 0)
    assert info.value.step >= 1 and info.value.store is not None


def test_config_validation():
    with pytest.raises(ValueError):
        run_resgld(np.zeros(1), Quadratic(), ResgldConfig(tau1=1.0, tau2=0.5), 0)
    with pytest.raises(ValueError):
        run_resgld(np.zeros(1), Quadratic(), ResgldConfig(swap_interval=0), 0)
