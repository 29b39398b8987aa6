"""Ground truth for both benchmarks, and the fractional derivative that drives one of them.

Run: python demos/01_reference_solutions.py
"""

from __future__ import annotations

import math

import numpy as np

from morephy.physics import caputo_l1, forcing_tfmdwe
from morephy.refsolve import cole_hopf_eval, exact_tfmdwe, solve_burgers_reference

NU = 0.01 / math.pi


def burgers():
    # finite differences on a refined grid, sampled back to 257 x 257 nodes
    ref = solve_burgers_reference(NU, 257, 257)
    print(f"Burgers reference: {ref.u.shape[0]} x {ref.u.shape[1]} nodes, nu = {NU:.6f}")
    worst = 0.0
    for x in np.linspace(-1, 1, 21):
        i = int(np.argmin(np.abs(ref.x - x)))
        for t in np.linspace(0.05, 1.0, 11):
            j = int(np.argmin(np.abs(ref.t - t)))
            worst = max(worst, abs(ref.u[i, j] - cole_hopf_eval(ref.x[i], ref.t[j], NU)))
    print(f"  largest gap to the Cole-Hopf integral on a 21 x 11 probe grid: {worst:.2e}")
    # the front steepens at x = 0; its slope grows roughly like 1 / nu
    j = int(np.argmin(np.abs(ref.t - 1.0)))
    slope = np.max(np.abs(np.diff(ref.u[:, j]) / np.diff(ref.x)))
    print(f"  steepest slope at t = 1: {slope:.1f}")


def caputo():
    print("\nCaputo L1 scheme")
    for alpha in (0.25, 0.5, 0.75):
        exact = 6.0 / math.gamma(4.0 - alpha)  # D^alpha t^3 at t = 1
        errs = []
        for n in (40, 80, 160, 320):
            t = np.linspace(0.0, 1.0, n + 1)
            errs.append(abs(caputo_l1(t**3, alpha, 1.0 / n) - exact))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        print(f"  alpha {alpha}: errors {['%.1e' % e for e in errs]}, observed order {orders[-1]:.2f} "
              f"(expected {2 - alpha:.2f})")


def tfmdwe():
    print("\nFractional diffusion-wave benchmark u = t^3 sin x")
    print(f"  u(pi/2, 1) = {exact_tfmdwe(math.pi / 2, 1.0):.6f}")
    print(f"  forcing at (pi/2, 1), alpha 0.5 = {forcing_tfmdwe(math.pi / 2, 1.0, 0.5):.7f}")


if __name__ == "__main__":
    burgers()
    caputo()
    tfmdwe()
