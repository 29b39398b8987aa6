"""Why two temperatures: a cold Langevin chain stuck in one well, freed by swaps.

Run: python demos/02_replica_exchange.py
"""

from __future__ import annotations

import numpy as np

from morephy.resgld import ResgldConfig, run_resgld, swap_probability


class DoubleWell:
    """U(b) = (b^2 - 1)^2, minima at -1 and +1 separated by a barrier of height 1."""

    n_total = 1

    def energy(self, b, rng):
        return float((b[0] ** 2 - 1) ** 2)

    def energy_and_grad(self, b, rng):
        return self.energy(b, rng), 4 * b * (b**2 - 1)


def crossings(samples):
    return int(np.sum(np.diff(np.sign(samples[:, 0])) != 0))


def main():
    cfg = ResgldConfig(tau1=0.05, tau2=1.0, eta=1e-3, swap_interval=50, total_steps=100_000, burn_in=0.0,
                       thinning=1, sigma_window=2)
    print("cold chain tau 0.05, hot chain tau 1.0, 1e5 steps from b = 1")
    for seed in range(3):
        on, stats = run_resgld(np.array([1.0]), DoubleWell(), cfg, seed, swaps=True)
        off, _ = run_resgld(np.array([1.0]), DoubleWell(), cfg, seed, swaps=False)
        a = on.as_array()
        print(f"  seed {seed}: with swaps {crossings(a):4d} well changes, left-well share {np.mean(a < 0):.2f}, "
              f"swap rate {stats.rate:.2f}; without swaps {crossings(off.as_array())} changes")

    # the swap test on noisy energies subtracts a variance correction
    print("\nswap probability for E1 = 0, E2 = 1, tau 1 and 10:")
    for s2 in (0.0, 0.5, 1.0):
        print(f"  sigma^2 = {s2}: {swap_probability(0.0, 1.0, 1.0, 10.0, s2):.5f}")


if __name__ == "__main__":
    main()
