"""Loss terms and PDE residuals for the two benchmark problems.

Burgers:  u_t - nu u_xx + u u_x = 0 on [-1, 1] x [0, 1],
          u(x, 0) = -sin(pi x), u(+-1, t) = 0.

Time-fractional diffusion-wave (TFMDWE):
          D_t^alpha u = u_xx + f(x, t) on [0, pi] x [0, 1],
          u(x, 0) = 0, u(0, t) = u(pi, t) = 0,
          f(x, t) = Gamma(4)/Gamma(4 - alpha) t^(3 - alpha) sin x + t^3 sin x,

with D_t^alpha the left-sided Caputo derivative of order alpha in (0, 1).

All loss functions take an optional ``theta``. When it is a
:class:`~morephy.diffkit.Tensor` the result is a tensor on the tape;
otherwise plain floats come back.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numpy as np

from morephy import diffkit as dk
from morephy.data import CollocationSet, Dataset
from morephy.diffkit import Tensor, value_of
from morephy.opnet import OperatorModel, forward, forward_stack

# Lanczos approximation, g = 7, n = 9
_LANCZOS_G = 7.0
_LANCZOS = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def gamma_fn(z: float) -> float:
    """Gamma function for real ``z > 0`` by the Lanczos approximation."""
    z = float(z)
    if not z > 0.0:
        raise ValueError(f"gamma_fn needs z > 0, got {z}")
    if z < 0.5:
        return math.pi / (math.sin(math.pi * z) * gamma_fn(1.0 - z))
    z -= 1.0
    acc = _LANCZOS[0]
    for i, c in enumerate(_LANCZOS[1:], start=1):
        acc += c / (z + i)
    t = z + _LANCZOS_G + 0.5
    return math.sqrt(2.0 * math.pi) * t ** (z + 0.5) * math.exp(-t) * acc


@dataclass(frozen=True)
class Burgers:
    nu: float = 0.01 / math.pi
    name: str = "burgers"
    lower: tuple[float, float] = (-1.0, 0.0)
    upper: tuple[float, float] = (1.0, 1.0)

    @property
    def param(self) -> float:
        return self.nu

    @staticmethod
    def initial(x):
        return -np.sin(np.pi * np.asarray(x))


@dataclass(frozen=True)
class Tfmdwe:
    alpha: float = 0.5
    name: str = "tfmdwe"
    lower: tuple[float, float] = (0.0, 0.0)
    upper: tuple[float, float] = (math.pi, 1.0)

    @property
    def param(self) -> float:
        return self.alpha

    @staticmethod
    def initial(x):
        return np.zeros_like(np.asarray(x, dtype=float))


def make_problem(name: str, param: float | None = None):
    if name == "burgers":
        return Burgers() if param is None else Burgers(nu=float(param))
    if name == "tfmdwe":
        return Tfmdwe() if param is None else Tfmdwe(alpha=float(param))
    raise ValueError(f"unknown problem {name!r}")


@dataclass(frozen=True)
class ObjectiveVector:
    l_data: float
    l_pde: float
    l_bc: float

    def __post_init__(self):
        for v in astuple(self):
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"objective components must be finite and >= 0, got {astuple(self)}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))


@dataclass(frozen=True)
class LossWeights:
    w_data: float = 1.0
    w_pde: float = 1.0
    w_bc: float = 1.0

    def __post_init__(self):
        w = astuple(self)
        if any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ValueError(f"loss weights must be nonnegative and not all zero, got {w}")


def composite_loss(obj, w: LossWeights):
    """``w_data L_data + w_pde L_pde + w_bc L_bc``.

    ``obj`` is an :class:`ObjectiveVector` or a 3-sequence whose entries may
    be tensors; zero-weighted entries are skipped (and may be ``None``).
    """
    terms = astuple(obj) if isinstance(obj, ObjectiveVector) else tuple(obj)
    total = 0.0
    for wi, li in zip(astuple(w), terms):
        if wi != 0.0:
            total = total + wi * li
    return total


# --- fractional calculus ---------------------------------------------------

def _l1_weights(alpha, n: int):
    """``b_j = (j+1)^(1-alpha) - j^(1-alpha)`` for ``j = 0..n-1``."""
    if not isinstance(alpha, Tensor):
        j = np.arange(n + 1, dtype=float)
        pw = j ** (1.0 - alpha)
        return pw[1:] - pw[:-1]
    # tensor path: powers through exp/log so alpha stays on the tape
    pw = dk.exp((1.0 - alpha) * np.log(np.arange(1, n + 1, dtype=float)))
    diff = np.eye(n) - np.eye(n, k=1)
    return dk.matmul(pw, diff)


def caputo_l1(values, alpha, dt):
    """L1 approximation of the Caputo derivative at the last grid point.

    ``values`` holds ``u(t_0), ..., u(t_n)`` on a uniform grid along its
    last axis; ``dt`` is the step (scalar, or one per leading row).
    """
    if not isinstance(alpha, Tensor) and not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = np.shape(value_of(values))[-1] - 1
    if n < 1:
        raise ValueError("caputo_l1 needs at least two grid values")
    b = _l1_weights(alpha, n)
    b_rev = b[::-1]
    diffs = values[..., 1:] - values[..., :-1]
    acc = dk.matmul(diffs, b_rev)
    if isinstance(alpha, Tensor):
        scale = dk.exp(-alpha * np.log(dt)) / dk.gamma(2.0 - alpha)
    else:
        scale = np.asarray(dt, dtype=float) ** (-alpha) / gamma_fn(2.0 - alpha)
    return acc * scale


def caputo_l1_path(values, alpha, dt):
    """L1 Caputo derivative at every node ``t_1 .. t_n`` of each history row.

    Node ``j`` uses the first ``j + 1`` values of its row, so one evaluated
    history yields ``n`` derivatives. Returns shape ``(..., n)``.
    """
    if not isinstance(alpha, Tensor) and not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = np.shape(value_of(values))[-1] - 1
    if n < 1:
        raise ValueError("caputo_l1_path needs at least two grid values")
    b = _l1_weights(alpha, n)
    # T[i, j] = b[j - i] for i <= j: diff i contributes to node j + 1
    i, j = np.indices((n, n))
    lag = np.where(j >= i, j - i, 0)
    mask = (j >= i).astype(float)
    weights = b[lag] * mask
    diffs = values[..., 1:] - values[..., :-1]
    acc = dk.matmul(diffs, weights)
    dt = np.asarray(dt, dtype=float)
    if isinstance(alpha, Tensor):
        scale = dk.exp(-alpha * np.log(dt)) / dk.gamma(2.0 - alpha)
    else:
        scale = dt ** (-alpha) / gamma_fn(2.0 - alpha)
    if dt.ndim:
        scale = scale.reshape(-1, 1)
    return acc * scale


def _forcing(x, t, alpha):
    sx = np.sin(x)
    t = np.asarray(t, dtype=float)
    if isinstance(alpha, Tensor):
        tp = dk.exp((3.0 - alpha) * np.log(t))
        return 6.0 / dk.gamma(4.0 - alpha) * tp * sx + t**3 * sx
    with np.errstate(divide="ignore"):
        tp = np.where(t > 0, t ** (3.0 - alpha), 0.0)
    return 6.0 / gamma_fn(4.0 - alpha) * tp * sx + t**3 * sx


def forcing_tfmdwe(x, t, alpha):
    """Source term of the fractional problem (manufactured for ``u = t^3 sin x``)."""
    x_arr, t_arr = np.asarray(x, dtype=float), np.asarray(t, dtype=float)
    if np.any(x_arr < 0) or np.any(x_arr > math.pi) or np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("forcing_tfmdwe is defined on x in [0, pi], t in [0, 1]")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    out = _forcing(x_arr, t_arr, alpha)
    return float(out) if out.ndim == 0 else out


class AnalyticField:
    """A closed-form field standing in for a network in residuals and losses.

    ``u`` and the derivative callables take ``(x, t)`` arrays; missing
    derivatives are treated as zero. It has no trainable parameters.
    """

    def __init__(self, u, u_x=None, u_t=None, u_xx=None, u_tt=None):
        self.u = u
        self.derivs = {(1, 0): u_x, (1, 1): u_t, (2, 0): u_xx, (2, 1): u_tt}
        self.params = dk.ParamVector(np.zeros(0))

    def forward_stack(self, kappa, coords, theta=None, first=(), second=()):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        x, t = coords[:, 0], coords[:, 1]

        def ev(fn):
            return np.zeros_like(x) if fn is None else np.broadcast_to(np.asarray(fn(x, t), dtype=float), x.shape)

        rows = [ev(self.u)] + [ev(self.derivs[(1, d)]) for d in first] + [ev(self.derivs[(2, d)]) for d in second]
        return np.stack(rows)


# --- residuals -------------------------------------------------------------

def _components(stack):
    if not np.all(np.isfinite(value_of(stack))):
        raise dk.NonFiniteError("jet")
    return [stack[i] for i in range(np.shape(value_of(stack))[0])]


def residual_burgers(model: OperatorModel, kappa, points, nu, theta=None):
    """``u_t - nu u_xx + u u_x`` at each ``(x, t)`` row of ``points``."""
    points = np.atleast_2d(points)
    u, u_x, u_t, u_xx = _components(forward_stack(model, kappa, points, theta, (0, 1), (0,)))
    return u_t - nu * u_xx + u * u_x


def residual_tfmdwe(model: OperatorModel, kappa, points, alpha, history_steps: int = 64, theta=None):
    """``D_t^alpha u - u_xx - f`` at each interior ``(x, t)``, ``t > 0``.

    The Caputo term uses model values on ``history_steps + 1`` uniform
    times from 0 to each point's ``t``.
    """
    points = np.atleast_2d(points)
    if np.any(points[:, 1] <= 0):
        raise ValueError("fractional residual needs t > 0")
    n = len(points)
    hist_t, dt = CollocationSet(points, points[:0], points[:0]).history(history_steps)
    hist = np.stack([np.repeat(points[:, 0], history_steps + 1), hist_t.ravel()], axis=1)
    u_hist = forward(model, kappa, hist, theta)
    u_hist = u_hist.reshape(n, history_steps + 1)
    frac = caputo_l1(u_hist, alpha, dt)
    _, _, u_xx = _components(forward_stack(model, kappa, points, theta, (0,), (0,)))
    return frac - u_xx - _forcing(points[:, 0], points[:, 1], alpha)


def residual_tfmdwe_paths(model: OperatorModel, kappa, points, alpha, history_steps: int = 64, theta=None):
    """Residuals at every node of each point's time history, shape ``(n, steps)``.

    The history of ``(x, t)`` is ``(x, j t / steps)``, ``j = 0..steps``; one
    jet pass over those nodes supplies both the Caputo sums and ``u_xx``.
    """
    points = np.atleast_2d(points)
    if np.any(points[:, 1] <= 0):
        raise ValueError("fractional residual needs t > 0")
    n = len(points)
    hist_t, dt = CollocationSet(points, points[:0], points[:0]).history(history_steps)
    xs = np.repeat(points[:, 0], history_steps + 1)
    hist = np.stack([xs, hist_t.ravel()], axis=1)
    u, _, u_xx = _components(forward_stack(model, kappa, hist, theta, (0,), (0,)))
    u = u.reshape(n, history_steps + 1)
    u_xx = u_xx.reshape(n, history_steps + 1)[:, 1:]
    frac = caputo_l1_path(u, alpha, dt)
    f = _forcing(xs.reshape(n, -1)[:, 1:], hist_t[:, 1:], alpha)
    return frac - u_xx - f


# --- losses ----------------------------------------------------------------

def _mse(pred, target):
    return dk.mean(dk.square(pred - target))


def data_loss(model: OperatorModel, dataset: Dataset, theta=None, index=None):
    """Mean squared mismatch to the observed values, over all samples and points."""
    idx = np.arange(dataset.n_obs) if index is None else np.asarray(index)
    if idx.size == 0:
        raise ValueError("data_loss on an empty observation set")
    total = 0.0
    for s in np.unique(dataset.sample[idx]):
        rows = idx[dataset.sample[idx] == s]
        pred = forward(model, dataset.kappa[s], dataset.coords[rows], theta)
        total = total + dk.sum_(dk.square(pred - dataset.observed[rows]))
    return total / idx.size


def ibc_loss(model: OperatorModel, kappa, colloc: CollocationSet, problem, theta=None,
             initial_index=None, boundary_index=None):
    """Initial-condition MSE plus boundary MSE (homogeneous Dirichlet)."""
    ini = colloc.initial if initial_index is None else colloc.initial[initial_index]
    bnd = colloc.boundary if boundary_index is None else colloc.boundary[boundary_index]
    if len(ini) == 0 or len(bnd) == 0:
        raise ValueError("ibc_loss needs nonempty initial and boundary sets")
    u0 = forward(model, kappa, ini, theta)
    ub = forward(model, kappa, bnd, theta)
    return _mse(u0, problem.initial(ini[:, 0])) + dk.mean(dk.square(ub))


def pde_param(model: OperatorModel, problem, theta=None):
    """The PDE scalar: trainable inverse slot if present, else the problem's value."""
    slot = model.params.inverse_slot
    if slot is None:
        return problem.param
    theta = model.params.values if theta is None else theta
    if isinstance(theta, Tensor):
        return theta[slot]
    return float(theta[slot])


def pde_loss(model: OperatorModel, kappa, points, problem, theta=None, history_steps: int = 64,
             paths: bool = False):
    """Mean squared residual. ``paths`` scores every history node of the
    fractional problem instead of the collocation points alone."""
    param = pde_param(model, problem, theta)
    if problem.name == "burgers":
        r = residual_burgers(model, kappa, points, param, theta)
    elif paths:
        r = residual_tfmdwe_paths(model, kappa, points, param, history_steps, theta)
    else:
        r = residual_tfmdwe(model, kappa, points, param, history_steps, theta)
    return dk.mean(dk.square(r))


@dataclass(frozen=True)
class BatchSizes:
    """Mini-batch sizes; ``None`` means the full set."""

    data: int | None = None
    interior: int | None = None
    boundary: int | None = None
    initial: int | None = None


def _draw(rng, n, size):
    if rng is None or size is None or size >= n:
        return None
    return np.sort(rng.choice(n, size=size, replace=False))


def objective_terms(model: OperatorModel, dataset: Dataset, problem, theta=None,
                    weights: LossWeights | None = None, batch: BatchSizes | None = None,
                    rng: np.random.Generator | None = None, history_steps: int = 64,
                    paths: bool = False):
    """``(L_data, L_pde, L_bc)``, possibly on a seeded mini-batch.

    Terms whose weight is zero are returned as ``None`` and never evaluated.
    The data term uses the training observations of ``dataset``.
    """
    w = weights or LossWeights()
    b = batch or BatchSizes()
    col = dataset.collocation
    kappa = dataset.kappa[0]
    train_idx = np.flatnonzero(dataset.train)
    # draws happen in a fixed order so a seeded rng gives a fixed batch
    d_sel = _draw(rng, train_idx.size, b.data)
    i_sel = _draw(rng, len(col.interior), b.interior)
    b_sel = _draw(rng, len(col.boundary), b.boundary)
    n_sel = _draw(rng, len(col.initial), b.initial)
    l_data = l_pde = l_bc = None
    if w.w_data:
        l_data = data_loss(model, dataset, theta, train_idx if d_sel is None else train_idx[d_sel])
    if w.w_pde:
        pts = col.interior if i_sel is None else col.interior[i_sel]
        l_pde = pde_loss(model, kappa, pts, problem, theta, history_steps, paths)
    if w.w_bc:
        l_bc = ibc_loss(model, kappa, col, problem, theta, n_sel, b_sel)
    return l_data, l_pde, l_bc


def objective_vector(model: OperatorModel, dataset: Dataset, problem, theta=None,
                     batch: BatchSizes | None = None, seed: int | None = None,
                     history_steps: int = 64, paths: bool = False) -> ObjectiveVector:
    """All three objectives as floats; ``seed`` selects a reproducible mini-batch."""
    rng = None if seed is None else np.random.default_rng(seed)
    terms = objective_terms(model, dataset, problem, theta, LossWeights(1, 1, 1), batch, rng, history_steps, paths)
    return ObjectiveVector(*(float(value_of(t)) for t in terms))
