"""Branch/trunk operator network with an optional spectral mixing head.

The prediction at a query point is

    sum_k b_k(kappa) t_k(x) + b0

optionally followed by a Fourier reweighting over the latent index ``k``
(see :func:`fourier_mix`). Every forward routine accepts either the plain
parameter array or a :class:`~morephy.diffkit.Tensor` leaf, and either plain
coordinates or a coordinate jet, so the same code path serves prediction,
parameter gradients and PDE residuals.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from morephy.diffkit import (
    Jet2,
    ParamVector,
    Segment,
    Tensor,
    matmul,
    seed_stack,
    stack_affine,
    stack_tanh,
    sum_,
    tanh,
    value_of,
)

VARIANTS = ("DON", "PI-DON", "PI-FDON", "Morephy")

_CKPT_MAGIC = b"MOREPHY-CKPT 1\n"


@dataclass(frozen=True)
class OperatorSpec:
    """Architecture description.

    ``branch_layers`` runs from the sensor count ``m`` to ``latent_p`` and
    ``trunk_layers`` from the coordinate dimension to ``latent_p``.
    ``trunk_lower``/``trunk_upper`` are the domain box; trunk inputs are
    mapped affinely onto ``[-1, 1]`` before the first layer.
    """

    branch_layers: tuple[int, ...]
    trunk_layers: tuple[int, ...]
    latent_p: int
    use_fourier: bool = False
    fourier_modes: int = 8
    variant: str = "PI-DON"
    trunk_lower: tuple[float, ...] = (-1.0, 0.0)
    trunk_upper: tuple[float, ...] = (1.0, 1.0)
    inverse_prior: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "branch_layers", tuple(int(n) for n in self.branch_layers))
        object.__setattr__(self, "trunk_layers", tuple(int(n) for n in self.trunk_layers))
        object.__setattr__(self, "trunk_lower", tuple(float(v) for v in self.trunk_lower))
        object.__setattr__(self, "trunk_upper", tuple(float(v) for v in self.trunk_upper))
        if self.inverse_prior is not None:
            object.__setattr__(self, "inverse_prior", tuple(float(v) for v in self.inverse_prior))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.branch_layers[-1] != self.latent_p or self.trunk_layers[-1] != self.latent_p:
            raise ValueError("branch and trunk must both end at latent_p")
        if any(n < 1 for n in self.branch_layers + self.trunk_layers):
            raise ValueError("layer widths must be positive")
        if self.use_fourier and not 1 <= self.fourier_modes <= self.latent_p:
            raise ValueError(f"fourier_modes={self.fourier_modes} must lie in [1, latent_p={self.latent_p}]")
        if len(self.trunk_lower) != self.trunk_layers[0] or len(self.trunk_upper) != self.trunk_layers[0]:
            raise ValueError("trunk bounds must match the trunk input dimension")

    @classmethod
    def mlp(cls, sensors: int, coord_dim: int, depth: int, width: int, latent_p: int | None = None, **kw):
        """Both subnetworks with ``depth`` hidden layers of ``width`` units."""
        p = width if latent_p is None else latent_p
        return cls(
            branch_layers=(sensors,) + (width,) * depth + (p,),
            trunk_layers=(coord_dim,) + (width,) * depth + (p,),
            latent_p=p,
            **kw,
        )

    @property
    def has_inverse(self) -> bool:
        return self.inverse_prior is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorSpec":
        d = dict(d)
        if d.get("inverse_prior") is not None:
            d["inverse_prior"] = tuple(d["inverse_prior"])
        return cls(**d)


@dataclass(frozen=True)
class OperatorModel:
    spec: OperatorSpec
    params: ParamVector
    seed: int = 0

    def with_values(self, values) -> "OperatorModel":
        return OperatorModel(self.spec, self.params.with_values(values), self.seed)

    @property
    def inverse_value(self) -> float | None:
        slot = self.params.inverse_slot
        return None if slot is None else float(self.params.values[slot])


def _layout(spec: OperatorSpec) -> list[Segment]:
    segs, pos = [], 0

    def add(name, shape):
        nonlocal pos
        seg = Segment(name, pos, tuple(shape))
        segs.append(seg)
        pos += seg.length

    for net, layers in (("branch", spec.branch_layers), ("trunk", spec.trunk_layers)):
        for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            add(f"{net}.W{i}", (a, b))
            add(f"{net}.b{i}", (b,))
    add("b0", ())
    if spec.use_fourier:
        add("fourier.wc", (spec.fourier_modes,))
        add("fourier.ws", (spec.fourier_modes,))
        add("fourier.skip", ())
    if spec.has_inverse:
        add("inverse", ())
    return segs


def init_model(spec: OperatorSpec, seed: int) -> OperatorModel:
    """Random weights ``N(0, 1/fan_in)``, small random biases, ``b0 = 0``.

    The spectral head starts in its identity configuration and the inverse
    slot, if any, at the midpoint of its prior interval.
    """
    rng = np.random.default_rng(seed)
    segs = _layout(spec)
    parts = []
    for seg in segs:
        if ".W" in seg.name:
            fan_in = seg.shape[0]
            parts.append(rng.standard_normal(seg.shape).ravel() / np.sqrt(fan_in))
        elif seg.name.startswith(("branch.b", "trunk.b")):
            parts.append(0.1 * rng.standard_normal(seg.length))
        elif seg.name == "fourier.skip":
            parts.append(np.ones(1))
        elif seg.name == "inverse":
            lo, hi = spec.inverse_prior
            parts.append(np.array([0.5 * (lo + hi)]))
        else:
            parts.append(np.zeros(seg.length))
    values = np.concatenate(parts)
    inverse_slot = segs[-1].offset if spec.has_inverse else None
    return OperatorModel(spec, ParamVector(values, tuple(segs), inverse_slot), int(seed))


def combine(branch_out, trunk_out, b0):
    """Inner product of branch and trunk outputs plus the scalar bias."""
    if np.shape(branch_out)[-1] != np.shape(trunk_out)[-1]:
        raise ValueError(
            f"branch output length {np.shape(branch_out)[-1]} != trunk output length {np.shape(trunk_out)[-1]}"
        )
    return sum_(branch_out * trunk_out, axis=-1) + b0


def fourier_basis(p: int, modes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cosine/sine basis over the latent index and the real inverse-DFT scale."""
    k = np.arange(p)[:, None]
    q = np.arange(modes)[None, :]
    angle = 2.0 * np.pi * q * k / p
    scale = np.where((q[0] == 0) | (2 * q[0] == p), 1.0 / p, 2.0 / p)
    return np.cos(angle), np.sin(angle), scale


def _mix_matrix(wc, ws, p: int):
    modes = np.shape(value_of(wc))[0]
    bc, bs, scale = fourier_basis(p, modes)
    # M[j, k] = sum_q scale_q (wc_q cos_qj cos_qk + ws_q sin_qj sin_qk)
    return matmul(bc * (wc * scale), bc.T) + matmul(bs * (ws * scale), bs.T)


def fourier_mix(latent, mix_params, b0=0.0):
    """Spectral head applied to the latent products ``b_k t_k``.

    The latent vector is projected on the first ``K`` Fourier modes over the
    index ``k``; each cosine/sine coefficient is scaled by its weight and
    the filtered vector ``r`` is reconstructed. The head returns
    ``sum_k tanh(r_k) + skip * sum_k latent_k + b0``. With every spectral
    weight at zero and ``skip = 1`` it equals :func:`combine`.

    ``mix_params`` is ``(wc, ws, skip)``; ``latent`` may be an array of
    shape ``(p,)`` or ``(n, p)``, a tensor, or a :class:`Jet2`.
    """
    wc, ws, skip = mix_params
    p = np.shape(value_of(latent.value if isinstance(latent, Jet2) else latent))[-1]
    modes = np.shape(value_of(wc))[0]
    if modes > p:
        raise ValueError(f"K={modes} Fourier modes exceed latent width p={p}")
    m = _mix_matrix(wc, ws, p)
    if isinstance(latent, Jet2):
        spectral = latent.affine(m).tanh().sum(axis=-1)
        plain = latent.sum(axis=-1)
        return spectral + plain * skip + b0
    spectral = sum_(tanh(matmul(latent, m)), axis=-1)
    return spectral + skip * sum_(latent, axis=-1) + b0


def _mlp(model: OperatorModel, theta, prefix: str, layers, h, activate_last: bool):
    pv = model.params
    n = len(layers) - 1
    for i in range(n):
        w = pv.view(theta, f"{prefix}.W{i}")
        b = pv.view(theta, f"{prefix}.b{i}")
        if isinstance(h, Jet2):
            h = h.affine(w, b)
            if i < n - 1 or activate_last:
                h = h.tanh()
        else:
            h = matmul(h, w) + b
            if i < n - 1 or activate_last:
                h = tanh(h)
    return h


def branch_forward(model: OperatorModel, kappa, theta=None):
    theta = model.params.values if theta is None else theta
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.shape[-1] != model.spec.branch_layers[0]:
        raise ValueError(
            f"got {kappa.shape[-1]} sensor values, branch expects {model.spec.branch_layers[0]}"
        )
    return _mlp(model, theta, "branch", model.spec.branch_layers, kappa.reshape(1, -1), False)


def _normalized(model: OperatorModel, coords: np.ndarray):
    lo = np.asarray(model.spec.trunk_lower)
    hi = np.asarray(model.spec.trunk_upper)
    scale = 2.0 / (hi - lo)
    return (coords - lo) * scale - 1.0, scale


def forward_stack(model: OperatorModel, kappa, coords, theta=None, first=(), second=()):
    """Prediction and its coordinate derivatives as one ``(C, n)`` stack.

    Row 0 holds values, the next rows first derivatives along each
    direction in ``first`` and the last rows second derivatives along each
    direction in ``second`` (which must be a subset of ``first``).
    Objects other than :class:`OperatorModel` may supply their own
    ``forward_stack`` method with this signature.
    """
    if not isinstance(model, OperatorModel):
        return model.forward_stack(kappa, coords, theta, first, second)
    theta = model.params.values if theta is None else theta
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    d = model.spec.trunk_layers[0]
    if coords.shape[-1] != d:
        raise ValueError(f"query has {coords.shape[-1]} coordinates, trunk expects {d}")
    first, second = tuple(first), tuple(second)
    pairs = tuple(first.index(k) for k in second)
    n1 = len(first)
    z, scale = _normalized(model, coords)
    h = seed_stack(z, first, second, scale)
    pv = model.params
    layers = model.spec.trunk_layers
    for i in range(len(layers) - 1):
        h = stack_tanh(stack_affine(h, pv.view(theta, f"trunk.W{i}"), pv.view(theta, f"trunk.b{i}")), n1, pairs)
    latent = h * branch_forward(model, kappa, theta)
    b0 = pv.view(theta, "b0")
    onehot = np.zeros((h.shape[0], 1))
    onehot[0] = 1.0
    plain = sum_(latent, axis=-1)
    if not model.spec.use_fourier:
        return plain + b0 * onehot
    m = _mix_matrix(pv.view(theta, "fourier.wc"), pv.view(theta, "fourier.ws"), model.spec.latent_p)
    spectral = sum_(stack_tanh(stack_affine(latent, m, np.zeros(model.spec.latent_p)), n1, pairs), axis=-1)
    return spectral + pv.view(theta, "fourier.skip") * plain + b0 * onehot


def forward(model: OperatorModel, kappa, coords, theta=None, direction: int | None = None,
            second: bool = True):
    """Batched prediction at ``coords`` of shape ``(n, d)``.

    With ``direction=None`` returns the values (array or tensor of shape
    ``(n,)``). With an integer ``direction`` returns a :class:`Jet2` along
    that coordinate; ``second=False`` skips the second derivative.
    """
    if direction is None:
        return forward_stack(model, kappa, coords, theta)[0]
    out = forward_stack(model, kappa, coords, theta, (direction,), (direction,) if second else ())
    return Jet2(out[0], out[1], out[2] if second else None)


def predict(model: OperatorModel, kappa_at_sensors, query) -> float:
    """Scalar prediction at one coordinate ``(x,)`` or ``(x, t)``."""
    query = np.asarray(query, dtype=np.float64).reshape(1, -1)
    return float(forward(model, kappa_at_sensors, query)[0])


def predict_grid(model: OperatorModel, kappa_at_sensors, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid.reshape(-1, model.spec.trunk_layers[0])
    return np.asarray(forward(model, kappa_at_sensors, grid), dtype=np.float64)


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(model: OperatorModel, path) -> None:
    """Write the magic line, a JSON header line, then P little-endian float64s."""
    header = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "variant": model.spec.variant,
        "n_params": int(model.params.values.size),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(blob + b"\n")
        fh.write(model.params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> OperatorModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a model checkpoint")
    rest = raw[len(_CKPT_MAGIC):]
    line, _, payload = rest.partition(b"\n")
    header = json.loads(line)
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} values, found {values.size}")
    spec = OperatorSpec.from_dict(header["spec"])
    model = init_model(spec, header["seed"])
    return model.with_values(values)
