"""Norm balls, box clipping and steepest-ascent directions.

Arrays with ``ndim >= 2`` are treated as a batch along axis 0 and every
norm/projection is taken per example; 0-d and 1-d arrays are one point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

DEGENERATE_NORM = 1e-12


class Norm(str, enum.Enum):
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, value) -> "Norm":
        if isinstance(value, Norm):
            return value
        key = str(value).strip().lower().replace("ℓ", "l").replace("∞", "inf")
        aliases = {"l2": cls.L2, "2": cls.L2, "linf": cls.LINF, "inf": cls.LINF, "l_inf": cls.LINF}
        if key not in aliases:
            raise ValueError(f"unknown norm {value!r}; expected l2 or linf")
        return aliases[key]


@dataclass(frozen=True)
class Budget:
    """Perturbation constraint: ``norm`` ball of radius ``epsilon``, ``steps`` steps of size ``alpha``."""

    norm: Norm
    epsilon: float
    alpha: float
    steps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm.parse(self.norm))
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a nonnegative integer, got {self.steps}")

    @classmethod
    def default(cls, norm, epsilon: float, steps: int = 40) -> "Budget":
        """Step-size convention: eps/10 for l2, 0.01 for linf."""
        norm = Norm.parse(norm)
        alpha = epsilon / 10 if norm is Norm.L2 else 0.01
        return cls(norm, epsilon, alpha if alpha > 0 else 0.01, steps)

    def with_(self, **changes) -> "Budget":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {"norm": self.norm.value, "epsilon": self.epsilon, "alpha": self.alpha, "steps": self.steps}

    @classmethod
    def from_dict(cls, d) -> "Budget":
        return cls(Norm.parse(d["norm"]), float(d["epsilon"]), float(d["alpha"]), int(d["steps"]))


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(1, -1) if x.ndim <= 1 else x.reshape(x.shape[0], -1)


def _per_row(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape one value per row so it broadcasts against ``like``."""
    if like.ndim <= 1:
        return values.reshape(())
    return values.reshape((-1,) + (1,) * (like.ndim - 1))


def batch_norms(x, norm) -> np.ndarray:
    """One norm per example (a length-1 array for a single point)."""
    rows = _rows(np.asarray(x, dtype=np.float64))
    if Norm.parse(norm) is Norm.L2:
        return np.sqrt(np.einsum("ij,ij->i", rows, rows))
    return np.abs(rows).max(axis=1) if rows.shape[1] else np.zeros(rows.shape[0])


def lp_norm(x, norm) -> float:
    """Norm of the whole array, treated as one flat vector."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    if Norm.parse(norm) is Norm.L2:
        return float(np.sqrt(flat @ flat))
    return float(np.abs(flat).max()) if flat.size else 0.0


def project_ball(center, point, budget: Budget) -> np.ndarray:
    """Nearest point to ``point`` inside the ``budget`` ball around ``center``."""
    center = np.asarray(center, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if center.shape != point.shape:
        raise ValueError(f"center {center.shape} and point {point.shape} differ in shape")
    eps = float(budget.epsilon)
    if budget.norm is Norm.LINF:
        return np.clip(point, center - eps, center + eps)
    delta = point - center
    n = batch_norms(delta, Norm.L2)
    inside = n <= eps
    scale = np.where(inside, 1.0, eps / np.where(n > 0, n, 1.0))
    projected = center + delta * _per_row(scale, delta)
    return np.where(_per_row(inside, delta), point, projected)


def clip_box(x, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise ValueError(f"empty box [{lo}, {hi}]")
    return np.clip(np.asarray(x, dtype=np.float64), lo, hi)


def steepest_direction(g, norm) -> np.ndarray:
    """Unit ascent direction in the given norm: sign(g) for linf, g/||g||_2 for l2.

    Examples whose gradient has l2 norm below 1e-12 get the zero direction.
    """
    g = np.asarray(g, dtype=np.float64)
    n2 = batch_norms(g, Norm.L2)
    live = _per_row(n2 >= DEGENERATE_NORM, g)
    if Norm.parse(norm) is Norm.LINF:
        return np.where(live, np.sign(g), 0.0)
    return np.where(live, g / _per_row(np.where(n2 > 0, n2, 1.0), g), 0.0)


def l2_normalize(g) -> np.ndarray:
    return steepest_direction(g, Norm.L2)
