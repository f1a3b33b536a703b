"""FlowPool forward pass: gradient flow of the pooled support on an OT energy."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional, Sequence

import numpy as np

from .grad import grad_x_divergence, grad_x_loss
from .measures import SQEUCLIDEAN, CostSpec, cost_matrix, uniform_measure
from .sinkhorn import (
    DivergenceSolution,
    SinkhornParams,
    SinkhornSolution,
    sinkhorn_divergence,
    sinkhorn_solve,
)

logger = logging.getLogger(__name__)

OBJECTIVES = ("divergence", "loss")


class FlowError(RuntimeError):
    """The flow could not be carried out (solver failure or divergent iterates)."""

    def __init__(self, message, step=None, index=None):
        super().__init__(message)
        self.step = step
        self.index = index


@dataclass(frozen=True)
class FlowParams:
    tau: float = 1.0
    max_steps: int = 500
    grad_tol: float = 1e-5
    objective: str = "divergence"
    sinkhorn: SinkhornParams = field(default_factory=SinkhornParams)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be > 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    @property
    def epsilon(self) -> float:
        return self.sinkhorn.epsilon


@dataclass
class FlowResult:
    x_star: np.ndarray
    energies: np.ndarray
    steps_taken: int
    final_grad_norm: float
    converged: bool
    solution: object = None


def init_reference(M: int, d: int, seed: int = 0) -> np.ndarray:
    """Shared standard-normal starting support, reproducible from ``seed``."""
    if M < 1 or d < 1:
        raise ValueError("M and d must be >= 1")
    return np.random.default_rng(seed).standard_normal((M, d))


def energy_and_gradient(X, Y, objective="divergence", spec: CostSpec = SQEUCLIDEAN,
                        params: SinkhornParams = SinkhornParams(), init=None, yy=None):
    """Evaluate the flow energy at ``X`` and its gradient.

    Returns ``(energy, grad, solution)``; ``solution`` is a DivergenceSolution
    or a SinkhornSolution and may be passed back as ``init`` to warm-start.
    """
    mu, nu = uniform_measure(X), uniform_measure(Y)
    if objective == "divergence":
        sol = sinkhorn_divergence(mu, nu, spec, params, init=init, yy=yy)
        if not sol.converged:
            bad = min((s for s in (sol.xy, sol.xx, sol.yy) if not s.converged), key=lambda s: s.marginal_error)
            raise FlowError(f"Sinkhorn did not converge (marginal error {bad.marginal_error:.3e})")
        return sol.value, grad_x_divergence(mu.points, nu.points, sol, spec), sol
    if objective == "loss":
        warm = None if init is None else (init.f, init.g)
        sol = sinkhorn_solve(mu, nu, cost_matrix(mu.points, nu.points, spec), params, warm)
        if not sol.converged:
            raise FlowError(f"Sinkhorn did not converge (marginal error {sol.marginal_error:.3e})")
        return sol.loss, grad_x_loss(mu.points, nu.points, sol, spec), sol
    raise ValueError(f"unknown objective {objective!r}")


def flowpool(Y, X0, params: FlowParams = FlowParams(), spec: CostSpec = SQEUCLIDEAN,
             trajectory: Optional[list] = None) -> FlowResult:
    """Pool the rows of ``Y`` (N x d) onto M support points starting from ``X0``.

    Plain gradient descent ``X <- X - tau * grad`` on the chosen energy until
    ``max |grad| < grad_tol`` or ``max_steps`` updates. ``energies[k]`` is the
    energy at the k-th iterate, so the last entry belongs to ``x_star``.
    If ``trajectory`` is a list, every iterate is appended to it.
    """
    Y = np.asarray(Y, dtype=np.float64)
    X = np.array(X0, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise ValueError("Y must be a non-empty (N, d) matrix")
    if X.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"X0 shape {X.shape} incompatible with Y shape {Y.shape}")

    yy = None
    if params.objective == "divergence":
        nu = uniform_measure(Y)
        yy = sinkhorn_solve(nu, nu, cost_matrix(Y, Y, spec), params.sinkhorn)

    energies = []
    sol = None
    converged = False
    step = 0
    while True:
        if trajectory is not None:
            trajectory.append(X.copy())
        try:
            energy, grad, sol = energy_and_gradient(X, Y, params.objective, spec, params.sinkhorn, sol, yy)
        except FlowError as exc:
            raise FlowError(f"step {step}: {exc}", step=step) from None
        energies.append(energy)
        if energy - energies[0] > 10.0 * max(abs(energies[0]), 1e-12):
            raise FlowError(
                f"step {step}: energy rose from {energies[0]:.6g} to {energy:.6g}; tau={params.tau} is too large",
                step=step,
            )
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < params.grad_tol:
            converged = True
            break
        if step == params.max_steps:
            break
        X = X - params.tau * grad
        step += 1

    return FlowResult(
        x_star=X,
        energies=np.asarray(energies),
        steps_taken=step,
        final_grad_norm=gnorm,
        converged=converged,
        solution=sol,
    )


def _pool_one(args, X0, params, spec):
    index, Y = args
    try:
        return flowpool(Y, X0, params, spec)
    except FlowError as exc:
        raise FlowError(f"element {index}: {exc}", step=exc.step, index=index) from None


def pool_batch(graph_reps: Sequence, X0, params: FlowParams = FlowParams(),
               spec: CostSpec = SQEUCLIDEAN, workers: int = 1) -> List[FlowResult]:
    """Run :func:`flowpool` on every representation with the shared ``X0``.

    With ``workers > 1`` elements run in separate processes; results keep the
    input order and do not depend on the schedule.
    """
    work = partial(_pool_one, X0=np.asarray(X0, dtype=np.float64), params=params, spec=spec)
    items = list(enumerate(graph_reps))
    if workers <= 1 or len(items) <= 1:
        return [work(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, items))
