"""Discrete probability measures on R^d and ground costs between their supports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point set ``sum_i weights[i] * delta(points[i])``.

    Weights are stored explicitly even when uniform so that non-uniform node
    importances need no API change.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ValueError(f"points must be an (n, d) matrix with n, d >= 1, got shape {points.shape}")
        if weights.shape != (points.shape[0],):
            raise ValueError(f"weights must have shape ({points.shape[0]},), got {weights.shape}")
        if not (np.all(np.isfinite(points)) and np.all(np.isfinite(weights))):
            raise ValueError("points and weights must be finite")
        if np.any(weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        points.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def uniform_measure(points) -> DiscreteMeasure:
    """Measure putting mass 1/n on each of the n rows of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("uniform_measure needs a non-empty (n, d) point matrix")
    n = points.shape[0]
    return DiscreteMeasure(points, np.full(n, 1.0 / n))


PairwiseFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CostSpec:
    """Ground cost ``C(x, y)``.

    ``kind="sqeuclidean"`` is ``|x - y|^2``; ``kind="metric_power"`` is
    ``D(x, y)^p`` for ``metric`` in {"euclidean", "cityblock"}.
    ``kind="custom"`` takes ``fn(X, Y) -> (n, m)`` and ``grad_fn(X, Y) -> (n, m, d)``
    (the derivative of each entry with respect to its first argument).
    """

    kind: str = "sqeuclidean"
    metric: str = "euclidean"
    p: float = 2.0
    fn: Optional[PairwiseFn] = None
    grad_fn: Optional[PairwiseFn] = None

    def __post_init__(self):
        if self.kind not in ("sqeuclidean", "metric_power", "custom"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if self.kind == "metric_power":
            if self.p <= 0:
                raise ValueError("exponent p must be > 0")
            if self.metric not in ("euclidean", "cityblock"):
                raise ValueError(f"unknown metric {self.metric!r}")
        if self.kind == "custom" and (self.fn is None or self.grad_fn is None):
            raise ValueError("custom costs need both fn and grad_fn")

    @property
    def is_sqeuclidean(self) -> bool:
        return self.kind == "sqeuclidean" or (
            self.kind == "metric_power" and self.metric == "euclidean" and self.p == 2.0
        )


SQEUCLIDEAN = CostSpec()


def _check_pair(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("point sets must be 2-d arrays")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("point sets must be finite")
    return X, Y


def _sqdist(X, Y):
    diff = X[:, None, :] - Y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def cost_matrix(X, Y, spec: CostSpec = SQEUCLIDEAN) -> np.ndarray:
    """Return the (n, m) matrix of ``C(X[i], Y[j])``."""
    X, Y = _check_pair(X, Y)
    if spec.is_sqeuclidean:
        return _sqdist(X, Y)
    if spec.kind == "custom":
        C = np.asarray(spec.fn(X, Y), dtype=np.float64)
        if C.shape != (X.shape[0], Y.shape[0]):
            raise ValueError(f"custom cost returned shape {C.shape}")
        return C
    diff = X[:, None, :] - Y[None, :, :]
    if spec.metric == "euclidean":
        D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    else:
        D = np.abs(diff).sum(axis=2)
    return D ** spec.p


def cost_gradient(X, Y, spec: CostSpec = SQEUCLIDEAN) -> np.ndarray:
    """Derivative of ``C(X[i], Y[j])`` with respect to ``X[i]``, shape (n, m, d).

    For a symmetric cost the derivative with respect to ``Y[j]`` is
    ``cost_gradient(Y, X).transpose(1, 0, 2)``.
    """
    X, Y = _check_pair(X, Y)
    diff = X[:, None, :] - Y[None, :, :]
    if spec.is_sqeuclidean:
        return 2.0 * diff
    if spec.kind == "custom":
        return np.asarray(spec.grad_fn(X, Y), dtype=np.float64)
    p = spec.p
    if spec.metric == "euclidean":
        D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        # d/dx |x-y|^p = p |x-y|^(p-2) (x-y); zero at coincident points for p > 1
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(D > 0, p * D ** (p - 2.0), 0.0)
        return scale[:, :, None] * diff
    D = np.abs(diff).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(D > 0, p * D ** (p - 1.0), 0.0)
    return scale[:, :, None] * np.sign(diff)
