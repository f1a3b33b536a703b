"""Entropic optimal transport: log-domain Sinkhorn, couplings and the debiased divergence.

Potentials follow the convention ``P = exp((f_i + g_j - C_ij) / eps)`` (no
weight factors), so ``u = exp(f / eps)`` and ``v = exp(g / eps)`` are the
classical Sinkhorn scalings and ``K = exp(-C / eps)`` the Gibbs kernel.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .measures import SQEUCLIDEAN, CostSpec, DiscreteMeasure, cost_matrix


WARM_BUDGET = 200


class SinkhornError(RuntimeError):
    """Raised when a non-converged solution is used where convergence is required."""


@dataclass(frozen=True)
class SinkhornParams:
    """Solver settings.

    ``newton_after`` is the number of sweeps after which every sweep is
    followed by a damped Newton step on the dual (``None`` disables it).
    ``anneal`` enables epsilon-scaling on cold starts: the problem is first
    solved at geometrically decreasing larger regularizations, each solution
    warm-starting the next.
    """

    epsilon: float = 0.1
    max_iters: int = 2000
    tol: float = 1e-6
    newton_after: Optional[int] = 10
    anneal: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")


@dataclass(frozen=True)
class SinkhornSolution:
    """Dual potentials of one entropic OT problem plus convergence metadata.

    ``loss`` is the dual objective at ``(f, g)``, shifted so that at the optimum
    it equals the primal value ``<C, P> - eps * H(P)``.
    """

    f: np.ndarray
    g: np.ndarray
    loss: float
    iterations: int
    converged: bool
    marginal_error: float
    a: np.ndarray
    b: np.ndarray
    epsilon: float


@dataclass(frozen=True)
class DivergenceSolution:
    value: float
    xy: SinkhornSolution
    xx: SinkhornSolution
    yy: SinkhornSolution

    @property
    def converged(self) -> bool:
        return self.xy.converged and self.xx.converged and self.yy.converged


def _lse(Z, axis):
    zmax = Z.max(axis=axis, keepdims=True)
    out = np.log(np.exp(Z - zmax).sum(axis=axis, keepdims=True)) + zmax
    return np.squeeze(out, axis=axis)


def dual_objective(f, g, a, b, C, epsilon) -> float:
    """``<f, a> + <g, b> - eps * (<e^{f/eps}, K e^{g/eps}> - 1)``."""
    mass = np.exp((f[:, None] + g[None, :] - C) / epsilon).sum()
    return float(f @ a + g @ b - epsilon * (mass - 1.0))


def _marginal_error(f, g, a, b, Ce, eps):
    P = np.exp(f[:, None] / eps + g[None, :] / eps - Ce)
    return max(float(np.max(np.abs(P.sum(axis=1) - a))), float(np.max(np.abs(P.sum(axis=0) - b))))


def _newton_step(f, g, a, b, C, eps):
    """Damped Newton ascent step on the dual; never decreases the objective."""
    n = f.shape[0]
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    P[P < 1e-200] = 0.0
    r, c = P.sum(axis=1), P.sum(axis=0)
    grad = np.concatenate([a - r, b - c])
    # eps * (negative dual Hessian) = [[diag r, P], [P^T, diag c]], singular along (1, -1);
    # solved through its diagonally scaled form, whose spectrum lies in [0, 2]
    d = np.sqrt(np.concatenate([r, c]))
    if np.any(d == 0):
        return f, g
    Q = P / d[:n, None] / d[None, n:]
    S = np.block([[np.eye(n), Q], [Q.T, np.eye(Q.shape[1])]])
    w, V = np.linalg.eigh(S)
    keep = w > 1e-12 * w[-1]
    rhs = eps * grad / d
    step = (V[:, keep] @ ((V[:, keep].T @ rhs) / w[keep])) / d
    if not np.all(np.isfinite(step)):
        return f, g
    base = dual_objective(f, g, a, b, C, eps)
    t = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(30):
            f_new, g_new = f + t * step[:n], g + t * step[n:]
            if dual_objective(f_new, g_new, a, b, C, eps) >= base:
                return f_new, g_new
            t *= 0.5
    return f, g


def _anneal(mu, nu, C, params, start):
    schedule = []
    eps = start
    while eps > 2 * params.epsilon:
        schedule.append(eps)
        eps *= 0.5
    init = None
    for eps in schedule:
        stage = SinkhornParams(eps, params.max_iters, max(params.tol, 1e-3), params.newton_after, anneal=False)
        sol = sinkhorn_solve(mu, nu, C, stage, init)
        init = (sol.f, sol.g)
    return init


def sinkhorn_solve(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    C,
    params: SinkhornParams = SinkhornParams(),
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    trace: Optional[list] = None,
) -> SinkhornSolution:
    """Solve the entropic OT dual by block coordinate ascent in the log domain.

    Each sweep maximizes the dual exactly in ``f`` then in ``g`` (log-sum-exp
    soft-minima). After ``params.newton_after`` sweeps every sweep is followed
    by a line-searched Newton step on ``(f, g)``, which removes the slow linear
    tail of plain Sinkhorn on nearly degenerate problems. Stops when the
    sup-norm violation of both marginals of the implied coupling is at most
    ``params.tol``.

    Problems with identical weights and an exactly symmetric cost use the
    averaged symmetric update ``f <- (f + T(f)) / 2`` with ``g = f`` instead.

    ``init`` is an optional ``(f, g)`` warm start. A warm start that has not
    converged after ``WARM_BUDGET`` sweeps is abandoned for a cold (annealed)
    solve, since stale potentials at small ``eps`` can stall the iteration.

    If ``trace`` is a list, the dual objective after every sweep at the target
    ``eps`` is appended to it.
    """
    C = np.asarray(C, dtype=np.float64)
    a, b = mu.weights, nu.weights
    if C.shape != (a.shape[0], b.shape[0]):
        raise ValueError(f"cost matrix shape {C.shape} does not match measures ({a.shape[0]}, {b.shape[0]})")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("sinkhorn_solve requires strictly positive weights")
    eps = params.epsilon
    loga, logb = np.log(a), np.log(b)
    Ce = C / eps
    symmetric = a.shape == b.shape and np.array_equal(a, b) and np.array_equal(C, C.T)

    if init is None:
        f, g = np.zeros(a.shape[0]), np.zeros(b.shape[0])
        spread = float(C.max() - C.min())
        if params.anneal and spread > 4 * eps:
            f, g = _anneal(mu, nu, C, params, spread)
    else:
        f, g = np.array(init[0], dtype=np.float64), np.array(init[1], dtype=np.float64)
    if symmetric:
        g = f
    err = np.inf
    it = 0
    converged = False
    budget = params.max_iters
    if init is not None and params.anneal:
        budget = min(budget, WARM_BUDGET)
    while it < budget:
        if symmetric:
            f = 0.5 * (f + eps * (loga - _lse(f[None, :] / eps - Ce, axis=1)))
            g = f
        else:
            f = eps * (loga - _lse(g[None, :] / eps - Ce, axis=1))
            g = eps * (logb - _lse(f[:, None] / eps - Ce, axis=0))
            if params.newton_after is not None and it >= params.newton_after:
                f, g = _newton_step(f, g, a, b, C, eps)
        it += 1
        if trace is not None:
            trace.append(dual_objective(f, g, a, b, C, eps))
        err = _marginal_error(f, g, a, b, Ce, eps)
        if err <= params.tol:
            converged = True
            break

    if not converged and budget < params.max_iters:
        cold = sinkhorn_solve(mu, nu, C, params, trace=trace)
        return dataclasses.replace(cold, iterations=cold.iterations + it)

    return SinkhornSolution(
        f=f,
        g=g,
        loss=dual_objective(f, g, a, b, C, eps),
        iterations=it,
        converged=converged,
        marginal_error=err,
        a=a,
        b=b,
        epsilon=eps,
    )


def coupling_from_potentials(sol: SinkhornSolution, C, epsilon: Optional[float] = None) -> np.ndarray:
    """Optimal coupling ``diag(e^{f/eps}) K diag(e^{g/eps})``."""
    if not sol.converged:
        raise SinkhornError(
            f"coupling requested from a non-converged solution "
            f"(marginal error {sol.marginal_error:.3e} after {sol.iterations} sweeps)"
        )
    eps = sol.epsilon if epsilon is None else epsilon
    C = np.asarray(C, dtype=np.float64)
    return np.exp((sol.f[:, None] + sol.g[None, :] - C) / eps)


def sinkhorn_divergence(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    spec: CostSpec = SQEUCLIDEAN,
    params: SinkhornParams = SinkhornParams(),
    init: Optional[DivergenceSolution] = None,
    yy: Optional[SinkhornSolution] = None,
) -> DivergenceSolution:
    """Debiased divergence ``L(a, b) - L(a, a) / 2 - L(b, b) / 2``.

    ``init`` warm-starts the cross and self problems; ``yy`` reuses an
    already-solved target self problem (it does not depend on ``mu``).
    """
    X, Y = mu.points, nu.points
    xy = sinkhorn_solve(mu, nu, cost_matrix(X, Y, spec), params, None if init is None else (init.xy.f, init.xy.g))
    xx = sinkhorn_solve(mu, mu, cost_matrix(X, X, spec), params, None if init is None else (init.xx.f, init.xx.g))
    if yy is None:
        yy = sinkhorn_solve(nu, nu, cost_matrix(Y, Y, spec), params)
    value = xy.loss - 0.5 * xx.loss - 0.5 * yy.loss
    return DivergenceSolution(value=value, xy=xy, xx=xx, yy=yy)
