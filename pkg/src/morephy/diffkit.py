"""Small differentiation engine for the operator networks.

Two mechanisms live here:

* a reverse-mode tape over float64 numpy arrays (:class:`Tensor`), used for
  gradients with respect to the flat parameter vector;
* second-order forward jets (:class:`Jet2`) with respect to one scalar
  network input, used to form ``u_x``, ``u_xx`` and ``u_t`` inside PDE
  residuals.

Jet components may themselves be tape tensors, so a residual built from jets
is still differentiable with respect to the parameters.

Every tape operation is a registered primitive. Building a node from an
unknown primitive name fails immediately, and any primitive producing a
non-finite value raises :class:`NonFiniteError` naming it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "Jet2",
    "NonFiniteError",
    "ParamVector",
    "Primitive",
    "Segment",
    "Tensor",
    "UnregisteredPrimitiveError",
    "adam_step",
    "apply",
    "backward",
    "cos",
    "exp",
    "gamma",
    "grad_params",
    "input_jet2",
    "log",
    "matmul",
    "mean",
    "register",
    "seed_stack",
    "sin",
    "square",
    "stack_affine",
    "stack_tanh",
    "sum_",
    "tanh",
    "value_of",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinity."""

    def __init__(self, primitive: str):
        super().__init__(f"non-finite value produced by primitive {primitive!r}")
        self.primitive = primitive


class UnregisteredPrimitiveError(KeyError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, *input_values, **kw) -> tuple of cotangents, one per input
    vjp: Callable[..., tuple]


_REGISTRY: dict[str, Primitive] = {}


def register(name: str, forward, vjp) -> Primitive:
    prim = Primitive(name, forward, vjp)
    _REGISTRY[name] = prim
    return prim


class Tensor:
    """A node on the reverse-mode tape.

    Tensors are created by :func:`apply` (or the operator overloads) and by
    :func:`grad_params` for the parameter leaf. They are single-use: build,
    call :func:`backward` once, discard.
    """

    __slots__ = ("value", "parents", "prim", "kwargs")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), prim: Primitive | None = None, kwargs=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.prim = prim
        self.kwargs = kwargs or {}

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        op = self.prim.name if self.prim else "leaf"
        return f"Tensor(op={op}, shape={self.value.shape})"

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return apply("reshape", self, shape=shape)

    @property
    def T(self):
        return apply("transpose", self)


def value_of(x):
    """Strip the tape: return the plain numpy value of a tensor or array."""
    return x.value if isinstance(x, Tensor) else x


def apply(name: str, *inputs, **kwargs):
    try:
        prim = _REGISTRY[name]
    except KeyError:
        raise UnregisteredPrimitiveError(f"no primitive registered under {name!r}") from None
    vals = [value_of(x) for x in inputs]
    out = np.asarray(prim.forward(*vals, **kwargs), dtype=np.float64)
    if not math.isfinite(float(out.sum())) and not np.all(np.isfinite(out)):
        raise NonFiniteError(name)
    if not any(isinstance(x, Tensor) for x in inputs):
        return out
    return Tensor(out, tuple(inputs), prim, kwargs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape(x):
    return np.shape(x)


# --- primitive table -------------------------------------------------------

register(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(g, _shape(b))),
)
register(
    "sub",
    lambda a, b: a - b,
    lambda g, out, a, b: (_unbroadcast(g, _shape(a)), _unbroadcast(-g, _shape(b))),
)
register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, _shape(a)), _unbroadcast(g * a, _shape(b))),
)
register(
    "div",
    lambda a, b: a / b,
    lambda g, out, a, b: (_unbroadcast(g / b, _shape(a)), _unbroadcast(-g * out / b, _shape(b))),
)
register("neg", lambda a: -a, lambda g, out, a: (-g,))
register("square", lambda a: a * a, lambda g, out, a: (2.0 * g * a,))
register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
register("sin", np.sin, lambda g, out, a: (g * np.cos(a),))
register("cos", np.cos, lambda g, out, a: (-g * np.sin(a),))
register("exp", np.exp, lambda g, out, a: (g * out,))
register("log", np.log, lambda g, out, a: (g / a,))


def _matmul_vjp(g, out, a, b):
    if np.ndim(a) == 1 and np.ndim(b) == 1:
        return g * b, g * a
    if np.ndim(b) == 1:
        return np.multiply.outer(g, b), a.T @ g
    if np.ndim(a) == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


register("matmul", lambda a, b: a @ b, _matmul_vjp)


def _sum_fwd(a, axis=None):
    return np.sum(a, axis=axis)


def _sum_vjp(g, out, a, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(a)).copy(),)


register("sum", _sum_fwd, _sum_vjp)


def _mean_vjp(g, out, a, axis=None):
    n = np.size(a) if axis is None else np.shape(a)[axis]
    return (_sum_vjp(g, out, a, axis=axis)[0] / n,)


register("mean", lambda a, axis=None: np.mean(a, axis=axis), _mean_vjp)


def _getitem_vjp(g, out, a, index=None):
    full = np.zeros(np.shape(a))
    parts = index if isinstance(index, tuple) else (index,)
    if any(isinstance(p, (list, np.ndarray)) for p in parts):
        # fancy indices may repeat
        np.add.at(full, index, g)
    else:
        full[index] += g
    return (full,)


register("getitem", lambda a, index=None: a[index], _getitem_vjp)
register(
    "reshape",
    lambda a, shape=None: np.reshape(a, shape),
    lambda g, out, a, shape=None: (np.reshape(g, np.shape(a)),),
)
register("transpose", lambda a: np.transpose(a), lambda g, out, a: (np.transpose(g),))


def _gamma_vjp(g, out, a):
    # central difference on the scalar argument; avoids a digamma routine
    from morephy.physics import gamma_fn

    h = 1e-6
    a = np.asarray(a, dtype=float)
    d = (np.vectorize(gamma_fn)(a + h) - np.vectorize(gamma_fn)(a - h)) / (2 * h)
    return (g * d,)


def _gamma_fwd(a):
    from morephy.physics import gamma_fn

    return np.vectorize(gamma_fn, otypes=[float])(a)


register("gamma", _gamma_fwd, _gamma_vjp)


# --- stacked jets ----------------------------------------------------------
# A stacked jet is one array of shape (C, n, w): component 0 holds values,
# components 1..n1 first derivatives along n1 input directions, and the rest
# second derivatives, the j-th paired with first-derivative slot pairs[j].


def _stack_affine_fwd(s, w, b):
    out = s @ w
    out[0] += b
    return out


def _stack_affine_vjp(g, out, s, w, b):
    c, n, k = g.shape
    gs = g @ w.T
    gw = s.reshape(-1, s.shape[-1]).T @ g.reshape(-1, k)
    return gs, gw, g[0].sum(axis=0)


def _stack_tanh_fwd(s, n1=0, pairs=()):
    y = np.tanh(s[0])
    if len(s) == 1:
        return y[None]
    sech2 = 1.0 - y * y
    out = s * sech2
    out[0] = y
    for j, k in enumerate(pairs):
        out[1 + n1 + j] -= 2.0 * y * sech2 * s[1 + k] ** 2
    return out


def _stack_tanh_vjp(g, out, s, n1=0, pairs=()):
    y = out[0]
    sech2 = 1.0 - y * y
    gs = g * sech2
    if len(s) == 1:
        return (gs,)
    dsech2 = -2.0 * y * sech2  # d(sech2)/dv
    dysech2 = sech2 * (sech2 - 2.0 * y * y)  # d(y sech2)/dv
    gv = gs[0] + np.einsum("cij,cij->ij", g[1:], s[1:]) * dsech2
    for j, k in enumerate(pairs):
        g2 = g[1 + n1 + j]
        d = s[1 + k]
        gs[1 + k] -= 4.0 * g2 * y * sech2 * d
        gv -= 2.0 * g2 * d * d * dysech2
    gs[0] = gv
    return (gs,)


register("stack_affine", _stack_affine_fwd, _stack_affine_vjp)
register("stack_tanh", _stack_tanh_fwd, _stack_tanh_vjp)


def stack_affine(s, w, b):
    """``s @ w`` on every component, bias added to the values only."""
    if any(isinstance(x, Tensor) for x in (s, w, b)):
        return apply("stack_affine", s, w, b)
    return _stack_affine_fwd(s, w, b)


def stack_tanh(s, n1: int = 0, pairs: tuple = ()):
    """Componentwise chain rule of ``tanh`` through a stacked jet."""
    if isinstance(s, Tensor):
        return apply("stack_tanh", s, n1=n1, pairs=tuple(pairs))
    return _stack_tanh_fwd(s, n1, tuple(pairs))


def seed_stack(x: np.ndarray, first=(), second=(), scale=None) -> np.ndarray:
    """Stacked jet of the inputs ``x`` (n, d) along coordinate directions.

    ``first`` lists the directions carrying first derivatives; ``second``
    the directions (a subset of ``first``) that also carry second
    derivatives. ``scale`` is d(input)/d(coordinate) per direction.
    """
    x = np.asarray(x, dtype=np.float64)
    first, second = tuple(first), tuple(second)
    if not set(second) <= set(first):
        raise ValueError("second-derivative directions must also carry first derivatives")
    scale = np.ones(x.shape[-1]) if scale is None else np.asarray(scale, dtype=float)
    out = np.zeros((1 + len(first) + len(second),) + x.shape)
    out[0] = x
    for i, d in enumerate(first):
        out[1 + i, :, d] = scale[d]
    return out


# --- dispatching helpers: numpy in, numpy out; tensor in, tensor out ---------

def _unary(name, npfn):
    def fn(x):
        if isinstance(x, Tensor):
            return apply(name, x)
        return npfn(x)

    fn.__name__ = name
    return fn


tanh = _unary("tanh", np.tanh)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
exp = _unary("exp", np.exp)
log = _unary("log", np.log)
square = _unary("square", np.square)
gamma = _unary("gamma", _gamma_fwd)


def matmul(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return apply("matmul", a, b)
    return a @ b


def sum_(x, axis=None):
    if isinstance(x, Tensor):
        return apply("sum", x, axis=axis)
    return np.sum(x, axis=axis)


def mean(x, axis=None):
    if isinstance(x, Tensor):
        return apply("mean", x, axis=axis)
    return np.mean(x, axis=axis)


# --- reverse pass ----------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Cotangents of the scalar ``root`` with respect to each tensor in ``wrt``."""
    if root.value.size != 1:
        raise ValueError("backward() needs a scalar output")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    owned: set[int] = set()  # buffers created here, safe to update in place

    def accumulate(p, c):
        key = id(p)
        if key in owned:
            grads[key] += c
        elif key in grads:
            grads[key] = grads[key] + c
            owned.add(key)
        else:
            grads[key] = np.asarray(c, dtype=np.float64)

    for node in reversed(_toposort(root)):
        if node.prim is None:
            continue
        g = grads.pop(id(node), None)
        owned.discard(id(node))
        if g is None:
            continue
        if node.prim.name == "getitem" and isinstance(node.parents[0], Tensor):
            # scatter straight into the parent's buffer instead of a dense temporary
            p = node.parents[0]
            key = id(p)
            if key not in owned:
                buf = np.zeros(p.value.shape)
                if key in grads:
                    buf += grads[key]
                grads[key] = buf
                owned.add(key)
            index = node.kwargs["index"]
            parts = index if isinstance(index, tuple) else (index,)
            if any(isinstance(q, (list, np.ndarray)) for q in parts):
                np.add.at(grads[key], index, g)
            else:
                grads[key][index] += g
            continue
        vals = [value_of(p) for p in node.parents]
        cots = node.prim.vjp(g, node.value, *vals, **node.kwargs)
        for p, c in zip(node.parents, cots):
            if isinstance(p, Tensor):
                accumulate(p, c)
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


# --- parameter vectors -----------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class ParamVector:
    """Flat vector of trainable scalars plus the layout that slices it."""

    values: np.ndarray
    segments: tuple[Segment, ...] = ()
    inverse_slot: int | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        pos = 0
        for seg in self.segments:
            if seg.offset != pos:
                raise ValueError(f"segment {seg.name!r} is not contiguous with its predecessor")
            pos += seg.length
        if self.segments and pos != vals.size:
            raise ValueError(f"segments cover {pos} entries, vector has {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("ParamVector values must be finite")

    def __len__(self):
        return self.values.size

    @property
    def layout(self) -> dict[str, Segment]:
        return {s.name: s for s in self.segments}

    def with_values(self, values) -> "ParamVector":
        return replace(self, values=np.asarray(values, dtype=np.float64).copy())

    def view(self, theta, name: str):
        """Slice segment ``name`` out of ``theta`` (array or tensor) and reshape it."""
        seg = self.layout[name]
        part = theta[seg.offset:seg.offset + seg.length]
        if seg.shape == ():
            return part[0] if not isinstance(part, Tensor) else part.reshape(())
        return part.reshape(seg.shape)


def grad_params(loss_evaluator: Callable, at: ParamVector | np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of ``loss_evaluator`` at ``at``.

    ``loss_evaluator`` receives the parameter leaf as a :class:`Tensor` and
    must return a scalar built from registered primitives.
    """
    values = at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64)
    leaf = Tensor(values.copy())
    out = loss_evaluator(leaf)
    if not isinstance(out, Tensor):
        return np.zeros_like(values)
    return backward(out, [leaf])[0]


def value_and_grad(loss_evaluator: Callable, at) -> tuple[float, np.ndarray]:
    values = at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64)
    leaf = Tensor(values.copy())
    out = loss_evaluator(leaf)
    if not isinstance(out, Tensor):
        return float(out), np.zeros_like(values)
    return float(out.value), backward(out, [leaf])[0]


# --- forward jets ----------------------------------------------------------

@dataclass
class Jet2:
    """Value with first and second derivative along one scalar input.

    ``d2`` may be ``None`` when only the first derivative is tracked.
    """

    value: object
    d1: object
    d2: object = None

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.value + other.value, self.d1 + other.d1, _add2(self.d2, other.d2))
        return Jet2(self.value + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.d1, None if self.d2 is None else -self.d2)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            a, b = self, other
            d2 = None
            if a.d2 is not None and b.d2 is not None:
                d2 = a.d2 * b.value + 2.0 * (a.d1 * b.d1) + a.value * b.d2
            return Jet2(a.value * b.value, a.d1 * b.value + a.value * b.d1, d2)
        return Jet2(self.value * other, self.d1 * other, None if self.d2 is None else self.d2 * other)

    __rmul__ = __mul__

    def affine(self, weight, bias=None):
        """``x @ weight + bias`` applied componentwise (bias enters the value only)."""
        v = matmul(self.value, weight)
        if bias is not None:
            v = v + bias
        d2 = None if self.d2 is None else matmul(self.d2, weight)
        return Jet2(v, matmul(self.d1, weight), d2)

    def sum(self, axis=None):
        return Jet2(sum_(self.value, axis), sum_(self.d1, axis),
                    None if self.d2 is None else sum_(self.d2, axis))

    def tanh(self):
        y = tanh(self.value)
        s = 1.0 - y * y
        d1 = s * self.d1
        d2 = None
        if self.d2 is not None:
            d2 = s * self.d2 - 2.0 * (y * (d1 * self.d1))
        return Jet2(y, d1, d2)

    def sin(self):
        sv, cv = sin(self.value), cos(self.value)
        d2 = None if self.d2 is None else cv * self.d2 - sv * square(self.d1)
        return Jet2(sv, cv * self.d1, d2)

    def cos(self):
        sv, cv = sin(self.value), cos(self.value)
        d2 = None if self.d2 is None else -(sv * self.d2) - cv * square(self.d1)
        return Jet2(cv, -(sv * self.d1), d2)

    def exp(self):
        e = exp(self.value)
        d2 = None if self.d2 is None else e * (self.d2 + square(self.d1))
        return Jet2(e, e * self.d1, d2)


def _add2(a, b):
    if a is None or b is None:
        return None
    return a + b


def input_jet2(scalar_chain: Callable[[Jet2], Jet2], x0: float) -> Jet2:
    """Evaluate ``scalar_chain`` on a seeded jet and return ``(f, f', f'')`` at ``x0``."""
    out = scalar_chain(Jet2(float(x0), 1.0, 0.0))
    if not isinstance(out, Jet2):
        # constant chain
        return Jet2(float(out), 0.0, 0.0)
    comps = [float(value_of(c)) for c in (out.value, out.d1, out.d2)]
    if not all(math.isfinite(c) for c in comps):
        raise NonFiniteError("jet")
    return Jet2(*comps)


# --- Adam ------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def adam_step(state: AdamState, params: ParamVector, grad) -> tuple[AdamState, ParamVector]:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or state.m.shape != grad.shape:
        raise ValueError(
            f"gradient length {grad.size} does not match parameter length {params.values.size}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step_count=t), params.with_values(new_values)
