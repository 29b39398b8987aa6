"""Reference-direction NSGA-III over flat parameter vectors, plus Refined
Pareto Sampling for thinning a final front to a few diverse candidates.

Objectives are minimized. Dominance is the usual Pareto relation (no worse
everywhere, strictly better somewhere), so equal objective vectors never
dominate each other and the fronts partition the population.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np

from morephy.diffkit import AdamState, ParamVector, adam_step

log = logging.getLogger(__name__)


class EvolutionError(RuntimeError):
    def __init__(self, generation: int, cause: BaseException):
        super().__init__(f"objective evaluation failed in generation {generation}: {cause!r}")
        self.generation = generation


@dataclass
class Individual:
    params: ParamVector
    objectives: np.ndarray | None = None
    rank: int | None = None
    direction: int | None = None
    niche_distance: float | None = None

    @property
    def values(self) -> np.ndarray:
        return self.params.values


@dataclass
class FrontSet:
    fronts: list[list[Individual]]

    @property
    def first(self) -> list[Individual]:
        return self.fronts[0] if self.fronts else []

    @property
    def population(self) -> list[Individual]:
        return [ind for front in self.fronts for ind in front]

    def objective_matrix(self, front: int = 0) -> np.ndarray:
        return np.array([ind.objectives for ind in self.fronts[front]])


def dominates(a, b) -> bool:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"objective vectors differ in length: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def _dominance_matrix(F: np.ndarray) -> np.ndarray:
    # D[i, j] is True when i dominates j
    le = np.all(F[:, None, :] <= F[None, :, :], axis=2)
    lt = np.any(F[:, None, :] < F[None, :, :], axis=2)
    return le & lt


def front_indices(F) -> list[list[int]]:
    """Fronts of an objective matrix as lists of row indices, each in input order."""
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or len(F) == 0:
        raise ValueError("need a nonempty (n, m) objective matrix")
    bad = np.flatnonzero(~np.all(np.isfinite(F), axis=1))
    if bad.size:
        raise ValueError(f"individual {bad[0]} has non-finite objectives {F[bad[0]]}")
    D = _dominance_matrix(F)
    n_dom = D.sum(axis=0)
    remaining = np.ones(len(F), dtype=bool)
    fronts = []
    while remaining.any():
        current = np.flatnonzero(remaining & (n_dom == 0))
        fronts.append(current.tolist())
        remaining[current] = False
        n_dom = n_dom - D[current].sum(axis=0)
        n_dom[~remaining] = -1
    return fronts


def non_dominated_sort(population: Sequence[Individual]) -> FrontSet:
    """Fast non-dominated sorting; assigns ``rank`` (1-based) in place."""
    if not population:
        raise ValueError("cannot sort an empty population")
    F = np.array([ind.objectives for ind in population], dtype=float)
    fronts = []
    for rank, idx in enumerate(front_indices(F), start=1):
        members = [population[i] for i in idx]
        for ind in members:
            ind.rank = rank
        fronts.append(members)
    return FrontSet(fronts)


def das_dennis_directions(m: int, h: int) -> np.ndarray:
    """All points of the simplex lattice with ``h`` divisions in ``m`` objectives."""
    if m < 2 or h < 1:
        raise ValueError("need m >= 2 objectives and h >= 1 divisions")

    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for first in range(total, -1, -1):
            for rest in compositions(total - first, parts - 1):
                yield (first,) + rest

    dirs = np.array(list(compositions(h, m)), dtype=float) / h
    assert len(dirs) == comb(h + m - 1, m - 1)
    return dirs


def subsample_directions(directions: np.ndarray, n: int) -> np.ndarray:
    """Keep ``n`` directions at evenly spaced indices (all of them if fewer)."""
    if len(directions) <= n:
        return directions
    idx = np.unique(np.round(np.linspace(0, len(directions) - 1, n)).astype(int))
    return directions[idx]


def normalize_objectives(F: np.ndarray, pool: np.ndarray | None = None) -> np.ndarray:
    """Min-max scale each column by the ``pool`` range; flat columns use range 1."""
    pool = F if pool is None else pool
    lo = pool.min(axis=0)
    span = pool.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    return (F - lo) / span


def associate(Fn: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest direction (by perpendicular distance) and that distance, per row."""
    unit = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    proj = Fn @ unit.T
    sq = np.sum(Fn * Fn, axis=1, keepdims=True) - proj * proj
    dist = np.sqrt(np.maximum(sq, 0.0))
    idx = np.argmin(dist, axis=1)
    return idx, dist[np.arange(len(Fn)), idx]


def niche_select(last_front: list[Individual], partial_population: list[Individual],
                 directions: np.ndarray, n_needed: int, rng: np.random.Generator) -> list[Individual]:
    """Pick ``n_needed`` members of ``last_front`` by reference-direction niching.

    Objectives are normalized by the min/max over ``partial_population`` and
    ``last_front`` together. Before niching, any last-front member holding
    the pool's best value of an objective that the partial population lacks
    is admitted, so no objective's optimum is lost.
    """
    if n_needed > len(last_front):
        raise ValueError("n_needed exceeds the size of the last front")
    if n_needed == len(last_front):
        return list(last_front)
    if n_needed <= 0:
        return []
    pool = partial_population + last_front
    P = np.array([ind.objectives for ind in pool], dtype=float)
    Pn = normalize_objectives(P)
    dir_idx, dist = associate(Pn, directions)
    for ind, d, r in zip(pool, dir_idx, dist):
        ind.direction, ind.niche_distance = int(d), float(r)
    k = len(partial_population)
    counts = np.bincount(dir_idx[:k], minlength=len(directions))
    remaining = list(range(k, len(pool)))
    chosen: list[int] = []

    def take(i):
        chosen.append(i)
        remaining.remove(i)
        counts[dir_idx[i]] += 1

    best = P.min(axis=0)
    for j in range(P.shape[1]):
        if len(chosen) >= n_needed:
            break
        if k and np.any(P[:k, j] <= best[j]):
            continue
        if any(P[i, j] <= best[j] for i in chosen):
            continue
        holders = [i for i in remaining if P[i, j] <= best[j]]
        if holders:
            take(holders[0])

    while len(chosen) < n_needed:
        live = np.unique(dir_idx[remaining])
        low = counts[live].min()
        cands = live[counts[live] == low]
        d = int(cands[rng.integers(len(cands))]) if len(cands) > 1 else int(cands[0])
        members = [i for i in remaining if dir_idx[i] == d]
        if counts[d] == 0:
            dmin = min(dist[i] for i in members)
            members = [i for i in members if dist[i] == dmin]
        pick = members[rng.integers(len(members))] if len(members) > 1 else members[0]
        take(pick)
    return [pool[i] for i in chosen]


@dataclass
class EvoConfig:
    pop_size: int = 24
    generations: int = 30
    divisions: int = 12
    eta_c: float = 15.0
    p_crossover: float = 0.9
    sigma_mut: float = 0.02
    p_mutation: float | None = None  # None -> 1 / P
    k_local: int = 5
    local_lr: float = 5e-4
    workers: int = 1


@dataclass
class Evaluator:
    """Objective function plus, optionally, the gradient used by the local polish.

    ``objectives(values, seed)`` returns the objective vector; ``gradient(values,
    seed)`` the gradient of the unit-weight composite loss.
    """

    objectives: Callable[[np.ndarray, int], np.ndarray]
    gradient: Callable[[np.ndarray, int], np.ndarray] | None = None


def sbx_pair(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """Unbounded simulated binary crossover, each gene exchanged with probability 1/2."""
    u = rng.random(a.shape)
    beta = np.where(u <= 0.5, (2 * u) ** (1 / (eta + 1)), (1 / (2 * (1 - u))) ** (1 / (eta + 1)))
    swap = rng.random(a.shape) < 0.5
    c1 = 0.5 * ((1 + beta) * a + (1 - beta) * b)
    c2 = 0.5 * ((1 - beta) * a + (1 + beta) * b)
    return np.where(swap, c1, a), np.where(swap, c2, b)


def _local_polish(values: np.ndarray, template: ParamVector, evaluator: Evaluator, cfg: EvoConfig,
                  seed: int) -> np.ndarray:
    pv = template.with_values(values)
    state = AdamState.zeros(values.size, lr=cfg.local_lr)
    for step in range(cfg.k_local):
        g = evaluator.gradient(pv.values, seed + step)
        state, pv = adam_step(state, pv, g)
    return pv.values


def vary(parents: Sequence[Individual], rng: np.random.Generator, config: EvoConfig,
         evaluator: Evaluator | None = None) -> list[Individual]:
    """One offspring per parent: SBX on random pairs, Gaussian mutation, optional polish."""
    n = len(parents)
    if n < 2:
        raise ValueError("variation needs at least two parents")
    order = rng.permutation(n)
    children: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for a, b in zip(order[0::2], order[1::2]):
        xa, xb = parents[a].values.copy(), parents[b].values.copy()
        if rng.random() < config.p_crossover:
            xa, xb = sbx_pair(xa, xb, rng, config.eta_c)
        children[a], children[b] = xa, xb
    if n % 2:
        children[order[-1]] = parents[order[-1]].values.copy()
    for i, x in enumerate(children):
        p_mut = config.p_mutation if config.p_mutation is not None else 1.0 / x.size
        if p_mut > 0:
            hit = rng.random(x.size) < p_mut
            scale = config.sigma_mut * (np.std(x) if x.size > 1 else max(abs(x[0]), 1.0))
            x[hit] += rng.normal(0.0, scale, size=int(hit.sum()))
    seeds = rng.integers(0, 2**31 - 1, size=n)
    if config.k_local > 0 and evaluator is not None and evaluator.gradient is not None:
        def polish(i):
            return _local_polish(children[i], parents[i].params, evaluator, config, int(seeds[i]))

        children = _map(polish, range(n), config.workers)
    return [Individual(parents[i].params.with_values(children[i])) for i in range(n)]


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def evaluate_population(pop: list[Individual], evaluator: Evaluator, seeds, workers: int, generation: int):
    todo = [i for i, ind in enumerate(pop) if ind.objectives is None]

    def run(i):
        return np.asarray(evaluator.objectives(pop[i].values, int(seeds[i])), dtype=float)

    try:
        results = _map(run, todo, workers)
    except Exception as exc:  # noqa: BLE001 - surfaced with the generation index
        raise EvolutionError(generation, exc) from exc
    for i, f in zip(todo, results):
        if not np.all(np.isfinite(f)):
            raise EvolutionError(generation, ValueError(f"non-finite objectives {f}"))
        pop[i].objectives = f


def survive(pool: list[Individual], n: int, directions: np.ndarray, rng: np.random.Generator) -> list[Individual]:
    """Whole fronts while they fit, then niche selection on the split front."""
    fronts = non_dominated_sort(pool).fronts
    nxt: list[Individual] = []
    i = 0
    while i < len(fronts) and len(nxt) + len(fronts[i]) <= n:
        nxt.extend(fronts[i])
        i += 1
    if len(nxt) < n:
        nxt.extend(niche_select(fronts[i], nxt, directions, n - len(nxt), rng))
    return nxt


def hypervolume(points, ref) -> float:
    """Exact dominated hypervolume (minimization) bounded by ``ref``."""
    P = np.asarray(points, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if P.size == 0:
        return 0.0
    P = P[np.all(P < ref, axis=1)]
    if len(P) == 0:
        return 0.0
    if P.shape[1] == 1:
        return float(ref[0] - P[:, 0].min())
    P = P[np.argsort(P[:, -1], kind="stable")]
    vol = 0.0
    for i in range(len(P)):
        upper = P[i + 1, -1] if i + 1 < len(P) else ref[-1]
        depth = upper - P[i, -1]
        if depth > 0:
            vol += depth * hypervolume(P[: i + 1, :-1], ref[:-1])
    return vol


def evolve(initial_population: list[Individual], generations: int, directions: np.ndarray,
           evaluator: Evaluator, rng: np.random.Generator, config: EvoConfig | None = None,
           log_rows: list | None = None, hv_ref=None) -> FrontSet:
    """Generational NSGA-III loop; returns the final population sorted into fronts.

    When ``log_rows`` is given, one row per generation is appended:
    ``(generation, best objective values..., front-1 size, hypervolume)``.
    """
    cfg = config or EvoConfig()
    pop = list(initial_population)
    n = len(pop)
    if n < 4 or n % 2:
        raise ValueError("population size must be even and at least 4")
    evaluate_population(pop, evaluator, rng.integers(0, 2**31 - 1, size=n), cfg.workers, 0)
    for gen in range(generations):
        offspring = vary(pop, rng, cfg, evaluator)
        evaluate_population(offspring, evaluator, rng.integers(0, 2**31 - 1, size=n), cfg.workers, gen + 1)
        pop = survive(pop + offspring, n, directions, rng)
        if log_rows is not None:
            fs = non_dominated_sort(pop)
            F = np.array([ind.objectives for ind in pop])
            ref = hv_ref if hv_ref is not None else F.max(axis=0) * 1.1 + 1e-12
            log_rows.append((gen + 1, *F.min(axis=0), len(fs.first), hypervolume(fs.objective_matrix(), ref)))
            log.debug("generation %d: best %s, |F1|=%d", gen + 1, F.min(axis=0), len(fs.first))
    return non_dominated_sort(pop)


def refined_pareto_sampling(front_objectives, n_sel: int, epsilon: float | None = None) -> list[int]:
    """Indices of up to ``n_sel`` diverse rows of an ``(M, K)`` front.

    Per-objective minimizers come first (lowest index on ties), then rows are
    added greedily by largest minimum Euclidean distance to the selection.
    With ``epsilon`` set, a farthest row within ``epsilon`` of the selection
    is discarded instead of added, so fewer than ``n_sel`` may come back.
    """
    P = np.asarray(front_objectives, dtype=float)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("empty front")
    M, K = P.shape
    if n_sel < K:
        raise ValueError(f"n_sel={n_sel} cannot hold the {K} per-objective minimizers")
    selected: list[int] = []
    for k in range(K):
        i = int(np.argmin(P[:, k]))
        if i not in selected:
            selected.append(i)
    remaining = [i for i in range(M) if i not in selected]
    while len(selected) < n_sel and remaining:
        S = P[selected]
        d = np.array([np.min(np.linalg.norm(S - P[r], axis=1)) for r in remaining])
        j = int(np.argmax(d))
        r_star = remaining.pop(j)
        if epsilon is None or d[j] > epsilon:
            selected.append(r_star)
    return selected


__all__ = [
    "EvoConfig",
    "EvolutionError",
    "Evaluator",
    "FrontSet",
    "Individual",
    "das_dennis_directions",
    "dominates",
    "evolve",
    "front_indices",
    "hypervolume",
    "niche_select",
    "non_dominated_sort",
    "refined_pareto_sampling",
    "sbx_pair",
    "subsample_directions",
    "survive",
    "vary",
]
