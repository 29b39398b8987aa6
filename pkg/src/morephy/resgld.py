"""Two-chain replica-exchange SGLD with a variance-corrected swap test.

The cold chain (temperature ``tau1``) is the sampler of interest; the hot
chain (``tau2 > tau1``) explores. Every ``swap_interval`` steps the chains
exchange parameter vectors with probability

    min(1, exp[(1/tau1 - 1/tau2) (E1 - E2 - (1/tau1 - 1/tau2) sigma2)])

where ``E1, E2`` are mini-batch energies and ``sigma2`` estimates the
mini-batch noise variance of a single energy evaluation.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np


class SamplerDivergence(FloatingPointError):
    """Non-finite iterate; carries whatever was collected before it happened."""

    def __init__(self, step: int, store=None, stats=None):
        super().__init__(f"SGLD diverged at step {step}")
        self.step = step
        self.store = store
        self.stats = stats


@dataclass
class ReplicaState:
    beta: np.ndarray
    tau: float
    energy_history: deque = field(default_factory=lambda: deque(maxlen=8))
    step: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("temperature must be nonnegative")


@dataclass
class SwapStats:
    attempts: int = 0
    acceptances: int = 0
    sigma2: float = 0.0

    @property
    def rate(self) -> float:
        return self.acceptances / self.attempts if self.attempts else 0.0


@dataclass
class SampleStore:
    samples: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    burn_in: int = 0

    def add(self, step: int, beta: np.ndarray):
        if step < self.burn_in:
            raise ValueError("samples before burn-in are not admitted")
        self.samples.append(np.array(beta, copy=True))
        self.steps.append(step)

    def __len__(self):
        return len(self.samples)

    def as_array(self) -> np.ndarray:
        return np.array(self.samples)


class EnergySource(Protocol):
    """What the sampler needs from a model/data pair."""

    n_total: int

    def energy(self, beta: np.ndarray, rng: np.random.Generator | None) -> float:
        """Stochastic energy on a fresh mini-batch (full batch when ``rng`` is None)."""

    def energy_and_grad(self, beta: np.ndarray, rng: np.random.Generator | None) -> tuple[float, np.ndarray]:
        ...


def stochastic_energy(batch_loglik, n_total: int, log_prior: float = 0.0) -> float:
    """``-log p(beta) - (N/n) sum_i log P(d_i | beta)`` over a mini-batch of log-likelihoods."""
    batch_loglik = np.asarray(batch_loglik, dtype=float)
    n = batch_loglik.size
    if n == 0:
        raise ValueError("empty mini-batch")
    if n > n_total:
        raise ValueError("mini-batch larger than the data set")
    return float(-log_prior - (n_total / n) * batch_loglik.sum())


def sgld_step(state: ReplicaState, grad, eta: float, rng: np.random.Generator | None = None,
              noise=None) -> ReplicaState:
    """``beta - eta grad + sqrt(2 eta tau) xi`` with standard normal ``xi``.

    At ``tau == 0`` the noise draw is skipped entirely (plain gradient
    descent). ``noise`` pins ``xi`` for testing.
    """
    grad = np.asarray(grad, dtype=float)
    beta = state.beta - eta * grad
    if state.tau > 0:
        xi = rng.standard_normal(beta.shape) if noise is None else np.asarray(noise, dtype=float)
        beta = beta + math.sqrt(2.0 * eta * state.tau) * xi
    if not np.all(np.isfinite(beta)):
        raise SamplerDivergence(state.step + 1)
    return ReplicaState(beta, state.tau, state.energy_history, state.step + 1)


def estimate_sigma2(energy_pairs) -> tuple[float, bool]:
    """Half the sample variance of ``E1 - E2`` over repeated mini-batch draws.

    ``energy_pairs`` is a sequence of ``(E1, E2)`` evaluated at one fixed
    parameter pair. Returns ``(sigma2, ok)``; with fewer than two pairs the
    estimate is 0 and ``ok`` is False, which reduces the swap test to the
    uncorrected one.
    """
    pairs = np.asarray(energy_pairs, dtype=float).reshape(-1, 2)
    if len(pairs) < 2:
        return 0.0, False
    diff = pairs[:, 0] - pairs[:, 1]
    return float(0.5 * np.var(diff, ddof=1)), True


def swap_probability(e1: float, e2: float, tau1: float, tau2: float, sigma2: float = 0.0) -> float:
    if not tau1 < tau2:
        raise ValueError("need tau1 < tau2")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    c = 1.0 / tau1 - 1.0 / tau2
    expo = c * (e1 - e2 - c * sigma2)
    if expo >= 0:
        return 1.0
    return math.exp(expo)


def naive_swap_rate(e1: float, e2: float, tau1: float, tau2: float) -> float:
    """Uncorrected rate ``exp[(1/tau1 - 1/tau2)(E1 - E2)]`` (not clamped)."""
    return math.exp((1.0 / tau1 - 1.0 / tau2) * (e1 - e2))


@dataclass
class ResgldConfig:
    tau1: float = 1e-4
    tau2: float = 1e-2
    eta: float | Callable[[int], float] = 5e-4
    swap_interval: int = 50
    total_steps: int = 2000
    burn_in: float = 0.5  # fraction of total_steps
    thinning: int = 10
    sigma_window: int = 8
    workers: int = 1

    def step_size(self, k: int) -> float:
        return self.eta(k) if callable(self.eta) else float(self.eta)


def run_resgld(init, source: EnergySource, config: ResgldConfig, seed, trace: list | None = None,
               swaps: bool = True) -> tuple[SampleStore, SwapStats]:
    """Advance cold and hot chains from ``init``; collect thinned cold-chain samples.

    Random streams are derived from ``seed``: one per chain for gradient
    noise and mini-batches, one for swap decisions and sigma estimation.
    ``swaps=False`` disables exchange (two independent SGLD runs).
    ``trace`` receives ``(step, chain, energy, temperature, attempted,
    accepted)`` rows.
    """
    cfg = config
    if not cfg.tau1 < cfg.tau2:
        raise ValueError("need tau1 < tau2")
    if cfg.swap_interval < 1:
        raise ValueError("swap_interval must be >= 1")
    beta0 = np.asarray(getattr(init, "values", init), dtype=float)
    ss = np.random.SeedSequence(seed)
    s_cold, s_hot, s_swap = ss.spawn(3)
    rngs = [np.random.default_rng(s_cold), np.random.default_rng(s_hot)]
    swap_rng = np.random.default_rng(s_swap)
    chains = [
        ReplicaState(beta0.copy(), cfg.tau1, deque(maxlen=cfg.sigma_window)),
        ReplicaState(beta0.copy(), cfg.tau2, deque(maxlen=cfg.sigma_window)),
    ]
    burn = int(math.floor(cfg.burn_in * cfg.total_steps))
    store = SampleStore(burn_in=burn)
    stats = SwapStats()
    for k in range(1, cfg.total_steps + 1):
        eta = cfg.step_size(k - 1)
        energies = []
        for c in range(2):
            try:
                e, g = source.energy_and_grad(chains[c].beta, rngs[c])
                chains[c] = sgld_step(chains[c], g, eta, rngs[c])
            except (SamplerDivergence, FloatingPointError) as exc:
                raise SamplerDivergence(k, store, stats) from exc
            chains[c].energy_history.append(e)
            energies.append(e)
        attempted = accepted = False
        if swaps and k % cfg.swap_interval == 0:
            attempted = True
            pairs = []
            for _ in range(cfg.sigma_window):
                sub = np.random.default_rng(swap_rng.integers(2**63))
                pairs.append((source.energy(chains[0].beta, sub),
                              source.energy(chains[1].beta, np.random.default_rng(sub.integers(2**63)))))
            sigma2, _ = estimate_sigma2(pairs)
            e1, e2 = pairs[-1]
            prob = swap_probability(e1, e2, cfg.tau1, cfg.tau2, sigma2)
            stats.attempts += 1
            stats.sigma2 = sigma2
            if swap_rng.random() < prob:
                accepted = True
                stats.acceptances += 1
                b0, b1 = chains[0].beta, chains[1].beta
                chains[0] = ReplicaState(b1, cfg.tau1, chains[0].energy_history, chains[0].step)
                chains[1] = ReplicaState(b0, cfg.tau2, chains[1].energy_history, chains[1].step)
        if trace is not None:
            for c in range(2):
                trace.append((k, c, energies[c], chains[c].tau, int(attempted), int(accepted)))
        if k > burn and (k - burn) % cfg.thinning == 0:
            store.add(k, chains[0].beta)
    return store, stats


def write_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "chain", "energy", "temperature", "swap_attempted", "swap_accepted"])
        for step, chain, energy, temp, att, acc in rows:
            w.writerow([step, chain, "%.17g" % energy, "%.17g" % temp, att, acc])
