"""Ensemble statistics, Gaussian bands and error metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm


@dataclass
class PredictiveEnsemble:
    members: np.ndarray  # (n_samples, n_grid)
    grid: np.ndarray | None = None
    provenance: list = field(default_factory=list)  # (candidate id, sample index) per member

    def __post_init__(self):
        self.members = np.atleast_2d(np.asarray(self.members, dtype=float))
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        if not np.all(np.isfinite(self.members)):
            raise ValueError("ensemble members must be finite")

    @property
    def size(self) -> int:
        return len(self.members)


def ensemble_stats(ensemble: PredictiveEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and unbiased (``n - 1``) variance."""
    m = ensemble.members
    if len(m) < 2:
        raise ValueError("need at least two members")
    return m.mean(axis=0), m.var(axis=0, ddof=1)


def z_value(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2.0))


def confidence_band(ensemble: PredictiveEnsemble, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """``mean -/+ z sigma`` with ``z`` the two-sided normal quantile for ``level``."""
    mean, var = ensemble_stats(ensemble)
    half = z_value(level) * np.sqrt(var)
    return mean - half, mean + half


def l2_relative_error(pred, ref) -> float:
    pred, ref = np.asarray(pred, dtype=float).ravel(), np.asarray(ref, dtype=float).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {ref.shape}")
    den = np.linalg.norm(ref)
    if den == 0:
        raise ValueError("reference field has zero norm")
    return float(np.linalg.norm(pred - ref) / den)


def l1_error_field(pred, ref) -> np.ndarray:
    pred, ref = np.asarray(pred, dtype=float), np.asarray(ref, dtype=float)
    if pred.shape != ref.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {ref.shape}")
    return np.abs(pred - ref)


def coverage_fraction(ensemble: PredictiveEnsemble, ref, level: float = 0.95) -> float:
    """Share of grid points whose reference value lies inside the band."""
    lo, hi = confidence_band(ensemble, level)
    ref = np.asarray(ref, dtype=float).ravel()
    return float(np.mean((ref >= lo) & (ref <= hi)))


def write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())
