"""Backward pass through FlowPool.

Second-order quantities are matrix-free: every product with the Hessian
``d/dX grad_X E`` or the cross Jacobian ``d/dY grad_X E`` is a central
directional finite difference of the envelope gradient, with the Sinkhorn
potentials re-solved at each perturbed point. The derivative therefore goes
through the Sinkhorn fixed point, not just through the frozen coupling.

Sign convention: the implicit Jacobian solves the normal equations
``(H^T H + lam I) J = -H^T G`` with ``H = d/dX grad_X E`` and
``G = d/dY grad_X E`` at the pooled fixed point.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .flow import FlowParams, flowpool
from .grad import grad_x_loss, grad_x_self_loss, grad_y_loss
from .measures import SQEUCLIDEAN, CostSpec, cost_matrix, uniform_measure
from .sinkhorn import SinkhornParams, sinkhorn_solve

# second-order probes divide gradient errors by the FD step, so they need tight solves
PROBE_TOL = 1e-10
FD_REL_STEP = 1e-4


class ImplicitDiffError(RuntimeError):
    """Backward-pass failure: CG non-convergence, bad fixed point, undefined condition number."""


class UnrolledMemoryError(MemoryError):
    """Storing every flow iterate would exceed the allowed memory budget."""


@dataclass(frozen=True)
class ImplicitDiffParams:
    lam: float = 1e-6
    cg_max_iters: int = 200
    cg_tol: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("Tikhonov lambda must be >= 0")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be > 0")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be >= 1")


def _probe_params(params: SinkhornParams) -> SinkhornParams:
    if params.tol <= PROBE_TOL:
        return params
    return dataclasses.replace(params, tol=PROBE_TOL)


def _fd_step(X, direction, rel_step=FD_REL_STEP):
    scale = float(np.max(np.abs(direction)))
    return rel_step * (1.0 + float(np.max(np.abs(X)))) / scale


class SecondOrderProbe:
    """Matrix-free second-order operators of the flow energy at ``(X, Y)``.

    ``hvp(V)``: Hessian in X applied to an (M, d) direction.
    ``cross_jvp(W)``: ``d/dY grad_X E`` applied to an (N, d) direction.
    ``cross_vjp(U)``: the transpose of ``cross_jvp`` applied to an (M, d) cotangent.
    ``rel_step`` scales the finite-difference step.
    """

    def __init__(self, X, Y, spec: CostSpec = SQEUCLIDEAN, params: SinkhornParams = SinkhornParams(),
                 objective: str = "loss", rel_step: float = FD_REL_STEP):
        if objective not in ("loss", "divergence"):
            raise ValueError(f"unknown objective {objective!r}")
        self.X = np.array(X, dtype=np.float64)
        self.Y = np.array(Y, dtype=np.float64)
        self.spec = spec
        self.params = _probe_params(params)
        self.objective = objective
        self.rel_step = rel_step
        self._xy = self._solve(self.X, self.Y)
        self._xx = self._solve(self.X, self.X) if objective == "divergence" else None
        self.grad = grad_x_loss(self.X, self.Y, self._xy, spec)
        if objective == "divergence":
            self.grad = self.grad - 0.5 * grad_x_self_loss(self.X, self._xx, spec)

    def _solve(self, X, Y, init=None):
        mu, nu = uniform_measure(X), uniform_measure(Y)
        sol = sinkhorn_solve(mu, nu, cost_matrix(X, Y, self.spec), self.params, init)
        if not sol.converged:
            raise ImplicitDiffError(
                f"Sinkhorn failed at a probe point (marginal error {sol.marginal_error:.3e})"
            )
        return sol

    def _grad_x(self, X, Y):
        xy = self._solve(X, Y, (self._xy.f, self._xy.g))
        g = grad_x_loss(X, Y, xy, self.spec)
        if self.objective == "divergence":
            xx = self._solve(X, X, (self._xx.f, self._xx.g))
            g = g - 0.5 * grad_x_self_loss(X, xx, self.spec)
        return g

    def _grad_y(self, X, Y):
        xy = self._solve(X, Y, (self._xy.f, self._xy.g))
        return grad_y_loss(X, Y, xy, self.spec)

    def hvp(self, V) -> np.ndarray:
        V = np.asarray(V, dtype=np.float64)
        if not np.any(V):
            return np.zeros_like(self.X)
        h = _fd_step(self.X, V, self.rel_step)
        return (self._grad_x(self.X + h * V, self.Y) - self._grad_x(self.X - h * V, self.Y)) / (2 * h)

    def cross_jvp(self, W) -> np.ndarray:
        W = np.asarray(W, dtype=np.float64)
        if not np.any(W):
            return np.zeros_like(self.X)
        h = _fd_step(self.Y, W, self.rel_step)
        return (self._grad_x(self.X, self.Y + h * W) - self._grad_x(self.X, self.Y - h * W)) / (2 * h)

    def cross_vjp(self, U) -> np.ndarray:
        # <U, d/dY grad_X E> = d/dY of the X-directional derivative; only the cross term depends on Y
        U = np.asarray(U, dtype=np.float64)
        if not np.any(U):
            return np.zeros_like(self.Y)
        h = _fd_step(self.X, U, self.rel_step)
        return (self._grad_y(self.X + h * U, self.Y) - self._grad_y(self.X - h * U, self.Y)) / (2 * h)


def hessian_vector_product(X, Y, direction, spec: CostSpec = SQEUCLIDEAN,
                           params: SinkhornParams = SinkhornParams(), objective: str = "loss") -> np.ndarray:
    return SecondOrderProbe(X, Y, spec, params, objective).hvp(direction)


def cross_jacobian_vector_product(X, Y, direction, spec: CostSpec = SQEUCLIDEAN,
                                  params: SinkhornParams = SinkhornParams(), objective: str = "loss") -> np.ndarray:
    return SecondOrderProbe(X, Y, spec, params, objective).cross_jvp(direction)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list


def conjugate_gradient(matvec: Callable, b, x0=None, tol=1e-8, max_iters=200) -> CGResult:
    """Conjugate gradient for a symmetric positive definite operator.

    Stops when ``|r| <= tol * |b|``; arrays of any shape are treated as vectors.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    p = r.copy()
    rs = float(np.vdot(r, r))
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm
    residuals = [np.sqrt(rs)]
    if residuals[0] <= target or bnorm == 0.0:
        return CGResult(x, 0, residuals[0], True, residuals)
    for it in range(1, max_iters + 1):
        Ap = matvec(p)
        curv = float(np.vdot(p, Ap))
        if curv <= 0:
            return CGResult(x, it, residuals[-1], False, residuals)
        alpha = rs / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(np.vdot(r, r))
        residuals.append(np.sqrt(rs_new))
        if residuals[-1] <= target:
            return CGResult(x, it, residuals[-1], True, residuals)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return CGResult(x, max_iters, residuals[-1], False, residuals)


def implicit_vjp(x_star, Y, v, spec: CostSpec = SQEUCLIDEAN, params: SinkhornParams = SinkhornParams(),
                 idp: ImplicitDiffParams = ImplicitDiffParams(), objective: str = "loss",
                 grad_tol: Optional[float] = 1e-5, probe: Optional[SecondOrderProbe] = None) -> np.ndarray:
    """Cotangent ``v`` (M, d) on the pooled output -> cotangent on ``Y`` (N, d).

    Solves ``(H^T H + lam I) u = v`` by CG, then returns ``-G^T H u``. The
    Hessian is symmetric, so ``H^T`` is applied with the same operator.
    ``grad_tol`` guards the fixed-point precondition (``None`` skips it).
    """
    v = np.asarray(v, dtype=np.float64)
    if probe is None:
        probe = SecondOrderProbe(x_star, Y, spec, params, objective)
    if grad_tol is not None:
        gnorm = float(np.max(np.abs(probe.grad)))
        if gnorm > grad_tol:
            raise ImplicitDiffError(f"x_star is not a fixed point: max |grad| = {gnorm:.3e} > {grad_tol:.3e}")
    if not np.any(v):
        return np.zeros_like(probe.Y)

    def normal_op(u):
        return probe.hvp(probe.hvp(u)) + idp.lam * u

    res = conjugate_gradient(normal_op, v, tol=idp.cg_tol, max_iters=idp.cg_max_iters)
    if not res.converged:
        raise ImplicitDiffError(
            f"conjugate gradient did not converge in {res.iterations} iterations "
            f"(relative residual {res.residual / np.linalg.norm(v):.3e})"
        )
    return -probe.cross_vjp(probe.hvp(res.x))


@dataclass
class UnrolledResult:
    vjp: np.ndarray
    cotangent_norms: np.ndarray
    steps: int


def unrolled_vjp(Y, X0, v, flow_params: FlowParams = FlowParams(), spec: CostSpec = SQEUCLIDEAN,
                 max_memory_bytes: Optional[int] = None) -> UnrolledResult:
    """Reverse accumulation of ``v^T dX^(L)/dY`` through every step of the flow.

    For ``X^(l+1) = X^(l) - tau * grad(X^(l), Y)`` the cotangent on the iterates
    is propagated by ``w <- w - tau * H_l w`` while each step adds
    ``-tau * G_l^T w`` to the result. ``cotangent_norms[k]`` is ``|w|`` after
    ``k`` backward steps. All iterates are stored, so memory grows with L.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    if max_memory_bytes is not None:
        needed = (flow_params.max_steps + 1) * X0.nbytes
        if needed > max_memory_bytes:
            raise UnrolledMemoryError(
                f"unrolling {flow_params.max_steps} steps needs {needed} bytes > budget {max_memory_bytes}"
            )
    trajectory = []
    result = flowpool(Y, X0, flow_params, spec, trajectory=trajectory)
    L = result.steps_taken
    tau = flow_params.tau
    w = np.array(v, dtype=np.float64)
    gY = np.zeros_like(np.asarray(Y, dtype=np.float64))
    norms = [float(np.linalg.norm(w))]
    for step in range(L - 1, -1, -1):
        probe = SecondOrderProbe(trajectory[step], Y, spec, flow_params.sinkhorn, flow_params.objective)
        gY = gY - tau * probe.cross_vjp(w)
        w = w - tau * probe.hvp(w)
        norms.append(float(np.linalg.norm(w)))
    return UnrolledResult(vjp=gY, cotangent_norms=np.asarray(norms), steps=L)


def _power_iteration(apply, v0, iters=30, rtol=1e-6):
    v = v0 / np.linalg.norm(v0)
    sigma = 0.0
    for _ in range(iters):
        w = apply(v)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        if sigma > 0 and abs(nw - sigma) <= rtol * sigma:
            return nw
        sigma = nw
        v = w / nw
    return sigma


def condition_numbers(X, Y, spec: CostSpec = SQEUCLIDEAN, params: SinkhornParams = SinkhornParams(),
                      objective: str = "loss", iters: int = 30, rtol: float = 1e-6, seed: int = 0):
    """Relative condition numbers ``(kappa_x, kappa_y)`` of the gradient map.

    ``kappa_x = s_max(H) / (|grad| / |X|)`` and
    ``kappa_y = s_max(G) / (|grad| / |Y|)`` with Frobenius norms; the top
    singular values come from power iteration on ``H`` and on ``G^T G``.
    """
    probe = SecondOrderProbe(X, Y, spec, params, objective)
    gnorm = float(np.linalg.norm(probe.grad))
    if gnorm == 0.0:
        raise ImplicitDiffError("gradient is zero; condition numbers are undefined")
    rng = np.random.default_rng(seed)
    s_h = _power_iteration(probe.hvp, rng.standard_normal(probe.X.shape), iters, rtol)
    # power iteration on G^T G converges to s_max(G)^2
    s_g2 = _power_iteration(lambda w: probe.cross_vjp(probe.cross_jvp(w)), rng.standard_normal(probe.Y.shape),
                            iters, rtol)
    s_g = np.sqrt(s_g2)
    kappa_x = s_h / (gnorm / float(np.linalg.norm(probe.X)))
    kappa_y = s_g / (gnorm / float(np.linalg.norm(probe.Y)))
    return float(kappa_x), float(kappa_y)


def linear_operator_condition(x_star, Y, params: SinkhornParams = SinkhornParams(), lam: float = 1e-6,
                              spec: CostSpec = SQEUCLIDEAN, objective: str = "loss",
                              probe: Optional[SecondOrderProbe] = None) -> float:
    """Condition number ``(s_max + lam) / (s_min + lam)`` of ``A + lam I`` with ``A = H^T H``.

    The extreme eigenvalues of the (symmetric PSD) normal operator come from
    Lanczos iterations on the matrix-free operator.
    """
    if probe is None:
        probe = SecondOrderProbe(x_star, Y, spec, params, objective)
    shape = probe.X.shape
    n = probe.X.size

    def matvec(u):
        u = np.asarray(u, dtype=np.float64).reshape(shape)
        return probe.hvp(probe.hvp(u)).ravel()

    op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    v0 = np.ones(n)
    if n == 1:
        s = float(matvec(v0)[0])
        return (s + lam) / (s + lam) if s + lam > 0 else np.inf
    try:
        s_max = float(eigsh(op, k=1, which="LA", v0=v0, tol=1e-8, return_eigenvectors=False)[0])
        s_min = float(eigsh(op, k=1, which="SA", v0=v0, tol=1e-8, maxiter=50 * n, return_eigenvectors=False)[0])
    except ArpackNoConvergence as exc:
        raise ImplicitDiffError(f"extreme eigenvalue estimation did not converge: {exc}") from None
    # FD noise can push the smallest eigenvalue of a PSD operator slightly negative
    s_min = max(s_min, 0.0)
    if s_min + lam == 0.0:
        return np.inf
    return (s_max + lam) / (s_min + lam)
