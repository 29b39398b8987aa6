"""Reference solutions and dataset assembly.

The Burgers field comes from a finite-difference solver (Crank-Nicolson
diffusion, second-order Adams-Bashforth on the conservative convective flux)
and is checked against the Cole-Hopf integral. The fractional benchmark uses
its closed-form solution ``t^3 sin x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import qmc

from morephy.data import CollocationSet, Dataset
from morephy.physics import Burgers, Tfmdwe, make_problem


class CFLError(ValueError):
    def __init__(self, message: str, suggested_nt: int):
        super().__init__(message)
        self.suggested_nt = suggested_nt


class QuadratureWarning(UserWarning):
    pass


@dataclass
class ReferenceField:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray  # (len(x), len(t))
    problem: str
    param: float

    def __post_init__(self):
        if np.any(np.diff(self.x) <= 0) or np.any(np.diff(self.t) <= 0):
            raise ValueError("reference grids must be strictly increasing")
        if self.u.shape != (self.x.size, self.t.size):
            raise ValueError(f"field shape {self.u.shape} does not match grids")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("reference field has non-finite values")

    def points(self) -> np.ndarray:
        """All grid nodes as ``(x, t)`` rows, x-major."""
        xx, tt = np.meshgrid(self.x, self.t, indexing="ij")
        return np.stack([xx.ravel(), tt.ravel()], axis=1)

    def coarsen(self, nx: int, nt: int) -> "ReferenceField":
        """Evenly strided sub-grid with about ``nx`` by ``nt`` nodes (endpoints kept)."""
        ix = np.unique(np.round(np.linspace(0, self.x.size - 1, nx)).astype(int))
        it = np.unique(np.round(np.linspace(0, self.t.size - 1, nt)).astype(int))
        return ReferenceField(self.x[ix], self.t[it], self.u[np.ix_(ix, it)], self.problem, self.param)


def solve_burgers_reference(nu: float = 0.01 / math.pi, nx: int = 257, nt: int = 257,
                            t_final: float = 1.0, min_fine_cells: int = 2000,
                            substeps: int | None = None, cfl: float = 0.5) -> ReferenceField:
    """Burgers field on ``nx`` x ``nt`` uniform nodes of ``[-1, 1] x [0, t_final]``.

    The solve runs on a refined grid with at least ``min_fine_cells`` cells
    whose nodes contain the output nodes. ``substeps`` (time steps per output
    interval) defaults to the smallest count satisfying the advective CFL
    bound; an explicit value that violates it raises :class:`CFLError`.
    """
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    refine = max(1, math.ceil(min_fine_cells / (nx - 1)))
    cells = (nx - 1) * refine
    xf = np.linspace(-1.0, 1.0, cells + 1)
    dx = xf[1] - xf[0]
    out_dt = t_final / (nt - 1)
    umax = 1.0  # max principle: |u| <= max |u0|
    dt_max = cfl * dx / umax
    needed = math.ceil(out_dt / dt_max - 1e-12)
    if substeps is None:
        substeps = needed
    elif substeps < needed:
        suggested = math.ceil(t_final / (dt_max * substeps)) + 1
        raise CFLError(
            f"time step {out_dt / substeps:.3g} exceeds the CFL limit {dt_max:.3g}; "
            f"use nt >= {suggested} or substeps >= {needed}",
            suggested,
        )
    dt = out_dt / substeps

    u = -np.sin(np.pi * xf)
    u[0] = u[-1] = 0.0
    n = cells - 1
    r = nu * dt / (2.0 * dx * dx)
    ab = np.zeros((3, n))
    ab[0, 1:] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :-1] = -r

    def flux_div(v):
        f = 0.5 * v * v
        return (f[2:] - f[:-2]) / (2.0 * dx)

    field = np.empty((nx, nt))
    field[:, 0] = u[::refine]
    prev = None
    for k in range(1, nt):
        for _ in range(substeps):
            c = flux_div(u)
            conv = c if prev is None else 1.5 * c - 0.5 * prev
            prev = c
            rhs = u[1:-1] + r * (u[2:] - 2.0 * u[1:-1] + u[:-2]) - dt * conv
            u[1:-1] = solve_banded((1, 1), ab, rhs)
        field[:, k] = u[::refine]
    return ReferenceField(np.linspace(-1.0, 1.0, nx), np.linspace(0.0, t_final, nt), field,
                          "burgers", float(nu))


def cole_hopf_eval(x: float, t: float, nu: float = 0.01 / math.pi, nodes: int = 128,
                   return_flag: bool = False):
    """Cole-Hopf solution of Burgers with ``u(x, 0) = -sin(pi x)``.

    Evaluated by Gauss-Hermite quadrature in the heat-kernel variable; the
    flag reports whether ``nodes`` and ``2 * nodes`` disagree by more than
    1e-8.
    """
    if t <= 0:
        raise ValueError("cole_hopf_eval needs t > 0")

    def quad(n):
        z, w = _hermgauss(n)
        y = x - math.sqrt(4.0 * nu * t) * z
        expo = -np.cos(np.pi * y) / (2.0 * np.pi * nu)
        weight = w * np.exp(expo - expo.max())
        return -float(np.sum(np.sin(np.pi * y) * weight) / np.sum(weight))

    val = quad(nodes)
    if not return_flag:
        return val
    converged = abs(val - quad(2 * nodes)) <= 1e-8
    return val, converged


_HG_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _hermgauss(n: int):
    if n not in _HG_CACHE:
        with np.errstate(all="ignore"):
            _HG_CACHE[n] = np.polynomial.hermite.hermgauss(n)
    return _HG_CACHE[n]


def exact_tfmdwe(x, t):
    """``t^3 sin x``, the exact solution of the fractional benchmark for every alpha."""
    return np.asarray(t, dtype=float) ** 3 * np.sin(np.asarray(x, dtype=float))


def tfmdwe_reference(alpha: float = 0.5, nx: int = 101, nt: int = 101) -> ReferenceField:
    x = np.linspace(0.0, math.pi, nx)
    t = np.linspace(0.0, 1.0, nt)
    u = exact_tfmdwe(x[:, None], t[None, :])
    u[0, :] = u[-1, :] = 0.0
    return ReferenceField(x, t, u, "tfmdwe", float(alpha))


def add_noise(values, noise_ratio: float, seed) -> np.ndarray:
    """Add i.i.d. ``N(0, (noise_ratio * std(values))^2)`` draws."""
    values = np.asarray(values, dtype=float)
    if noise_ratio < 0:
        raise ValueError("noise_ratio must be nonnegative")
    if noise_ratio == 0:
        return values.copy()
    rng = np.random.default_rng(seed)
    return values + rng.normal(0.0, noise_ratio * values.std(), size=values.shape)


def sample_collocation(problem, seed, n_interior: int = 2000, n_boundary: int = 200,
                       n_initial: int = 200) -> CollocationSet:
    """Latin-hypercube interior points plus boundary and initial points."""
    ss = _seedseq(seed)
    s_int, s_bnd, s_ini = (np.random.default_rng(s) for s in ss.spawn(3))
    lo, hi = np.asarray(problem.lower), np.asarray(problem.upper)
    lhs = qmc.LatinHypercube(d=2, seed=s_int).random(n_interior)
    interior = lo + lhs * (hi - lo)
    # keep interior points off the edges and away from t = 0
    eps = 1e-6 * (hi - lo)
    interior = np.clip(interior, lo + eps, hi - eps)
    tb = qmc.LatinHypercube(d=1, seed=s_bnd).random(n_boundary)[:, 0] * (hi[1] - lo[1]) + lo[1]
    side = np.where(np.arange(n_boundary) % 2 == 0, lo[0], hi[0])
    boundary = np.stack([side, tb], axis=1)
    xi = qmc.LatinHypercube(d=1, seed=s_ini).random(n_initial)[:, 0] * (hi[0] - lo[0]) + lo[0]
    initial = np.stack([xi, np.full(n_initial, lo[1])], axis=1)
    return CollocationSet(interior, boundary, initial)


def _seedseq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def uniform_sensors(problem, m: int = 100) -> np.ndarray:
    return np.linspace(problem.lower[0], problem.upper[0], m)


def build_dataset(field: ReferenceField, sensors, n_obs: int, seed, noise_ratio: float = 0.0,
                  train_fraction: float = 0.8, collocation: CollocationSet | None = None,
                  collocation_sizes: tuple[int, int, int] = (2000, 200, 200)) -> Dataset:
    """Draw ``n_obs`` grid nodes of ``field`` as observations.

    The branch input is the initial condition at ``sensors``. Observations
    are split train/validation ``train_fraction`` / rest, and noise is added
    when ``noise_ratio > 0``.
    """
    problem = make_problem(field.problem, field.param)
    pts = field.points()
    vals = field.u.ravel()
    if n_obs > len(vals):
        raise ValueError(f"n_obs={n_obs} exceeds the {len(vals)} grid nodes")
    ss = _seedseq(seed)
    s_pick, s_split, s_noise, s_col = ss.spawn(4)
    pick = np.sort(np.random.default_rng(s_pick).choice(len(vals), size=n_obs, replace=False))
    coords, clean = pts[pick], vals[pick]
    observed = add_noise(clean, noise_ratio, s_noise)
    perm = np.random.default_rng(s_split).permutation(n_obs)
    train = np.zeros(n_obs, dtype=bool)
    train[perm[: int(round(train_fraction * n_obs))]] = True
    sensors = np.asarray(sensors, dtype=float)
    if collocation is None:
        collocation = sample_collocation(problem, s_col, *collocation_sizes)
    return Dataset(
        problem=field.problem,
        param=float(field.param),
        noise_ratio=float(noise_ratio),
        seed=int(seed),
        grid_x=(float(field.x[0]), float(field.x[-1]), int(field.x.size)),
        grid_t=(float(field.t[0]), float(field.t[-1]), int(field.t.size)),
        sensors=sensors,
        kappa=problem.initial(sensors).reshape(1, -1),
        sample=np.zeros(n_obs, dtype=int),
        coords=coords,
        clean=clean,
        observed=observed,
        train=train,
        collocation=collocation,
    )


def reference_for(problem_name: str, param: float | None = None, nx: int | None = None,
                  nt: int | None = None) -> ReferenceField:
    problem = make_problem(problem_name, param)
    if isinstance(problem, Burgers):
        return solve_burgers_reference(problem.nu, nx or 257, nt or 257)
    assert isinstance(problem, Tfmdwe)
    return tfmdwe_reference(problem.alpha, nx or 101, nt or 101)
