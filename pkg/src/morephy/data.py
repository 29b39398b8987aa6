"""Dataset container and its text file format.

File layout::

    # morephy-dataset 1
    # problem = burgers
    # param = 0.0031830988618379067
    ...
    [sensors]
    xi,kappa
    ...
    [observations]
    sample,x,t,clean,observed,train
    ...
    [interior]
    x,t
    ...

Floats are written with 17 significant digits so a read after a write
reproduces every value exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = "# morephy-dataset 1"
_FMT = "%.17g"


@dataclass
class CollocationSet:
    """Residual and condition evaluation sites, each an ``(n, 2)`` array of ``(x, t)``."""

    interior: np.ndarray
    boundary: np.ndarray
    initial: np.ndarray

    def history(self, steps: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Uniform time histories ``t_j = j t / steps`` ending at each interior point.

        Returns the ``(n, steps + 1)`` time grid and the per-point step.
        """
        t = self.interior[:, 1]
        grid = t[:, None] * np.arange(steps + 1)[None, :] / steps
        return grid, t / steps


@dataclass
class Dataset:
    problem: str
    param: float
    noise_ratio: float
    seed: int
    grid_x: tuple[float, float, int]
    grid_t: tuple[float, float, int]
    sensors: np.ndarray
    kappa: np.ndarray  # (n_samples, m)
    sample: np.ndarray  # (n_obs,) int, which kappa row each observation belongs to
    coords: np.ndarray  # (n_obs, 2)
    clean: np.ndarray
    observed: np.ndarray
    train: np.ndarray  # (n_obs,) bool
    collocation: CollocationSet
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kappa = np.atleast_2d(self.kappa)
        if len(self.observed) == 0:
            raise ValueError("dataset has no observations")

    @property
    def n_obs(self) -> int:
        return len(self.observed)

    def subset(self, mask) -> "Dataset":
        """Observations restricted to ``mask``; collocation sets are shared."""
        mask = np.asarray(mask)
        return Dataset(
            self.problem, self.param, self.noise_ratio, self.seed, self.grid_x, self.grid_t,
            self.sensors, self.kappa, self.sample[mask], self.coords[mask], self.clean[mask],
            self.observed[mask], self.train[mask], self.collocation, dict(self.extra),
        )

    @property
    def training(self) -> "Dataset":
        return self.subset(self.train)

    @property
    def validation(self) -> "Dataset":
        return self.subset(~self.train)


def _fmt(v) -> str:
    return _FMT % v


def _block(out, name, header, rows):
    out.write(f"[{name}]\n{header}\n")
    for row in rows:
        out.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def dumps_dataset(ds: Dataset) -> str:
    out = io.StringIO()
    out.write(_MAGIC + "\n")
    meta = {
        "problem": ds.problem,
        "param": _fmt(ds.param),
        "noise_ratio": _fmt(ds.noise_ratio),
        "seed": str(int(ds.seed)),
        "grid_x": ",".join([_fmt(ds.grid_x[0]), _fmt(ds.grid_x[1]), str(int(ds.grid_x[2]))]),
        "grid_t": ",".join([_fmt(ds.grid_t[0]), _fmt(ds.grid_t[1]), str(int(ds.grid_t[2]))]),
        "n_samples": str(ds.kappa.shape[0]),
    }
    for k, v in sorted(ds.extra.items()):
        meta[k] = str(v)
    for k, v in meta.items():
        out.write(f"# {k} = {v}\n")
    sens_rows = [[float(x)] + [float(v) for v in ds.kappa[:, i]] for i, x in enumerate(ds.sensors)]
    kap_cols = ",".join(f"kappa{j}" for j in range(ds.kappa.shape[0]))
    _block(out, "sensors", f"xi,{kap_cols}", sens_rows)
    obs_rows = [
        [int(s), float(c[0]), float(c[1]), float(a), float(b), int(tr)]
        for s, c, a, b, tr in zip(ds.sample, ds.coords, ds.clean, ds.observed, ds.train)
    ]
    _block(out, "observations", "sample,x,t,clean,observed,train", obs_rows)
    for name in ("interior", "boundary", "initial"):
        pts = getattr(ds.collocation, name)
        _block(out, name, "x,t", [[float(a), float(b)] for a, b in pts])
    return out.getvalue()


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError("not a morephy dataset file")
    meta, blocks, current = {}, {}, None
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("# "):
            key, _, val = line[2:].partition(" = ")
            meta[key] = val
        elif line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            blocks[current] = []
        elif current is not None:
            blocks[current].append(line)

    def table(name):
        rows = blocks[name][1:]
        if not rows:
            return np.zeros((0, len(blocks[name][0].split(","))))
        return np.array([[float(v) for v in r.split(",")] for r in rows])

    def grid(s):
        lo, hi, n = s.split(",")
        return (float(lo), float(hi), int(n))

    sens = table("sensors")
    obs = table("observations")
    known = {"problem", "param", "noise_ratio", "seed", "grid_x", "grid_t", "n_samples"}
    return Dataset(
        problem=meta["problem"],
        param=float(meta["param"]),
        noise_ratio=float(meta["noise_ratio"]),
        seed=int(meta["seed"]),
        grid_x=grid(meta["grid_x"]),
        grid_t=grid(meta["grid_t"]),
        sensors=sens[:, 0].copy(),
        kappa=sens[:, 1:].T.copy(),
        sample=obs[:, 0].astype(int),
        coords=obs[:, 1:3].copy(),
        clean=obs[:, 3].copy(),
        observed=obs[:, 4].copy(),
        train=obs[:, 5].astype(bool),
        collocation=CollocationSet(table("interior"), table("boundary"), table("initial")),
        extra={k: v for k, v in meta.items() if k not in known},
    )


def read_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text())
