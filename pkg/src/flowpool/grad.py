"""Envelope-theorem gradients of the Sinkhorn loss and divergence w.r.t. support positions.

At converged potentials the derivative of the loss with respect to each cost
entry is the coupling entry, so ``grad_X L = sum_j P_ij dC(x_i, y_j)/dx_i``.
"""

from __future__ import annotations

import numpy as np

from .measures import SQEUCLIDEAN, CostSpec, cost_gradient, cost_matrix
from .sinkhorn import DivergenceSolution, SinkhornSolution, coupling_from_potentials


def _contract(P, dC):
    return np.einsum("ij,ijk->ik", P, dC)


def grad_x_loss(X, Y, sol: SinkhornSolution, spec: CostSpec = SQEUCLIDEAN, epsilon=None) -> np.ndarray:
    """Gradient of ``L_{C(X, Y)}`` with respect to ``X``, shape (M, d)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    P = coupling_from_potentials(sol, cost_matrix(X, Y, spec), epsilon)
    if spec.is_sqeuclidean:
        # sum_j P_ij 2 (x_i - y_j), without the (M, N, d) intermediate
        return 2.0 * (P.sum(axis=1)[:, None] * X - P @ Y)
    return _contract(P, cost_gradient(X, Y, spec))


def grad_y_loss(X, Y, sol: SinkhornSolution, spec: CostSpec = SQEUCLIDEAN, epsilon=None) -> np.ndarray:
    """Gradient of ``L_{C(X, Y)}`` with respect to ``Y``, shape (N, d). Symmetric costs only."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    P = coupling_from_potentials(sol, cost_matrix(X, Y, spec), epsilon)
    if spec.is_sqeuclidean:
        return 2.0 * (P.sum(axis=0)[:, None] * Y - P.T @ X)
    return _contract(P.T, cost_gradient(Y, X, spec))


def grad_x_self_loss(X, sol: SinkhornSolution, spec: CostSpec = SQEUCLIDEAN, epsilon=None) -> np.ndarray:
    """Total derivative of ``L_{C(X, X)}`` with respect to ``X``.

    ``X`` enters both arguments of the cost, so both slots contribute:
    ``sum_j P_ij d1C(x_i, x_j) + sum_k P_ki d2C(x_k, x_i)``.
    """
    X = np.asarray(X, dtype=np.float64)
    P = coupling_from_potentials(sol, cost_matrix(X, X, spec), epsilon)
    if spec.is_sqeuclidean:
        S = P + P.T
        return 2.0 * (S.sum(axis=1)[:, None] * X - S @ X)
    dC = cost_gradient(X, X, spec)
    first = _contract(P, dC)
    # d2C(x_k, x_i) = d1C(x_i, x_k) for symmetric costs
    second = _contract(P.T, dC)
    return first + second


def grad_x_divergence(X, Y, div: DivergenceSolution, spec: CostSpec = SQEUCLIDEAN, epsilon=None) -> np.ndarray:
    """Gradient of the Sinkhorn divergence with respect to ``X``, shape (M, d).

    The target self term does not depend on ``X``.
    """
    return grad_x_loss(X, Y, div.xy, spec, epsilon) - 0.5 * grad_x_self_loss(X, div.xx, spec, epsilon)
