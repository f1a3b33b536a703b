"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .flow import FlowError, FlowParams, flowpool, init_reference
from .graphs import LabeledGraph
from .implicit import (
    ImplicitDiffError,
    ImplicitDiffParams,
    condition_numbers,
    implicit_vjp,
    linear_operator_condition,
)
from .measures import SQEUCLIDEAN, CostSpec
from .pipeline import Adam, graph_features
from .sinkhorn import SinkhornError, SinkhornParams

logger = logging.getLogger(__name__)

EPS_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


# ----------------------------------------------------------------------------- unit circle

def circle_objective(X) -> float:
    """``sum_i (|x_i|^2 - 1)^2``."""
    return float((((X ** 2).sum(axis=1) - 1.0) ** 2).sum())


def circle_objective_grad(X) -> np.ndarray:
    return 4.0 * ((X ** 2).sum(axis=1) - 1.0)[:, None] * X


def default_demo_flow(m: int = 12) -> FlowParams:
    """Divergence flow for the circle demo; ``tau = m/4`` (3 at the default size) was tuned by hand."""
    return FlowParams(tau=m / 4, max_steps=5000, grad_tol=1e-7, objective="divergence",
                      sinkhorn=SinkhornParams(epsilon=0.1, max_iters=5000, tol=1e-10))


@dataclass
class CircleDemoResult:
    X_traj: List[np.ndarray]
    Y_traj: List[np.ndarray]
    objective: List[float]
    max_x_dev: float
    mean_y_dev: float


def unit_circle_demo(n: int = 20, m: int = 12, lr: float = 0.01, iters: int = 300, seed: int = 0,
                     flow: Optional[FlowParams] = None, idp: ImplicitDiffParams = ImplicitDiffParams(),
                     spec: CostSpec = SQEUCLIDEAN, record_every: int = 1) -> CircleDemoResult:
    """Move the input cloud ``Y`` with Adam so that its pooled support lies on the unit circle.

    Each outer step pools ``Y`` (warm-starting the flow at the previous pooled
    support), pulls the objective's gradient back to ``Y`` with the implicit
    VJP and takes an Adam step on ``Y``.
    """
    flow = flow or default_demo_flow(m)
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, 2))
    X = init_reference(m, 2, seed + 1)
    Xs, Ys, objs = [], [], []
    if iters == 0:
        return CircleDemoResult([X.copy()], [Y.copy()], [circle_objective(X)],
                                float(np.max(np.abs(np.linalg.norm(X, axis=1) - 1))),
                                float(np.mean(np.abs(np.linalg.norm(Y, axis=1) - 1))))
    opt = Adam([Y.shape], lr)
    for it in range(iters + 1):
        res = flowpool(Y, X, flow, spec)
        # same slack as the fixed-point guard of the implicit VJP below
        if not res.converged and res.final_grad_norm > 10 * flow.grad_tol:
            raise FlowError(f"iteration {it}: flow stopped with max |grad| = {res.final_grad_norm:.3e}", step=it)
        X = res.x_star
        if it % record_every == 0 or it == iters:
            Xs.append(X.copy())
            Ys.append(Y.copy())
            objs.append(circle_objective(X))
        if it == iters:
            break
        gY = implicit_vjp(X, Y, circle_objective_grad(X), spec, flow.sinkhorn, idp, flow.objective,
                          grad_tol=10 * flow.grad_tol)
        (Y,) = opt.step([Y], [gY])
        if not np.all(np.isfinite(Y)):
            raise FlowError(f"iteration {it}: Y diverged", step=it)
    return CircleDemoResult(
        Xs, Ys, objs,
        float(np.max(np.abs(np.linalg.norm(X, axis=1) - 1))),
        float(np.mean(np.abs(np.linalg.norm(Y, axis=1) - 1))),
    )


# ----------------------------------------------------------------------------- conditioning

@dataclass
class ConditionStudy:
    eps_grid: List[float]
    kappa_x: Dict[float, List[float]]
    kappa_y: Dict[float, List[float]]
    kappa_a: Dict[float, List[float]]
    failures: Dict[float, int] = field(default_factory=dict)

    def summary(self, which: str, stat=np.median) -> List[float]:
        data = getattr(self, which)
        return [float(stat(data[e])) if data[e] else float("nan") for e in self.eps_grid]

    def rows(self):
        """One row per epsilon: mean/std/median of each condition number plus counts."""
        out = []
        for e in self.eps_grid:
            row = {"epsilon": e}
            for name in ("kappa_x", "kappa_y", "kappa_a"):
                vals = np.asarray(getattr(self, name)[e], dtype=float)
                row[f"{name}_mean"] = float(vals.mean()) if vals.size else float("nan")
                row[f"{name}_std"] = float(vals.std()) if vals.size else float("nan")
                row[f"{name}_median"] = float(np.median(vals)) if vals.size else float("nan")
            row["clouds_ok"] = len(self.kappa_x[e])
            row["clouds_failed"] = self.failures.get(e, 0)
            out.append(row)
        return out


def condition_study(clouds: int = 20, eps_grid: Sequence[float] = EPS_GRID, m: int = 50, n: int = 100,
                    d: int = 2, seed: int = 0, lam: float = 1e-6, fp_m: int = 12, fp_n: int = 20,
                    spec: CostSpec = SQEUCLIDEAN, sinkhorn_tol: float = 1e-9) -> ConditionStudy:
    """Condition numbers of the LossOnly gradient map over random Gaussian clouds.

    ``kappa_x``/``kappa_y`` are measured at a random support ``X`` (m points)
    against a random input ``Y`` (n points). ``kappa(A + lam I)`` needs the
    Hessian at a fixed point, so a smaller cloud pair (fp_m, fp_n) is flowed to
    convergence first. Failing clouds are logged, excluded and counted.
    """
    grid = [float(e) for e in eps_grid]
    kx = {e: [] for e in grid}
    ky = {e: [] for e in grid}
    ka = {e: [] for e in grid}
    failures = {e: 0 for e in grid}
    for c in range(clouds):
        rng = np.random.default_rng(seed + c)
        X = rng.standard_normal((m, d))
        Y = rng.standard_normal((n, d))
        Xf = rng.standard_normal((fp_m, d))
        Yf = rng.standard_normal((fp_n, d))
        for e in grid:
            params = SinkhornParams(e, 5000, sinkhorn_tol)
            try:
                a, b = condition_numbers(X, Y, spec, params)
                fp = flowpool(Yf, Xf, FlowParams(fp_m / 2.0, 5000, 1e-7, "loss", params), spec)
                k = linear_operator_condition(fp.x_star, Yf, params, lam, spec)
            except (FlowError, ImplicitDiffError, SinkhornError) as exc:
                logger.warning("cloud %d, eps %g excluded: %s", c, e, exc)
                failures[e] += 1
                continue
            kx[e].append(a)
            ky[e].append(b)
            ka[e].append(k)
    return ConditionStudy(grid, kx, ky, ka, failures)


def is_non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


# ----------------------------------------------------------------------------- permutation check

@dataclass
class PermCheck:
    max_deviation: float
    pairs: int
    passed: bool
    deviations: List[float]


def perm_check(graphs: Sequence[LabeledGraph], trials: int = 5, seed: int = 0, kinds: Optional[int] = None,
               d: int = 8, M: int = 5, flow: Optional[FlowParams] = None, break_reference: bool = False,
               tol: float = 1e-6, spec: CostSpec = SQEUCLIDEAN) -> PermCheck:
    """Pool each graph and ``trials`` random node relabelings of it; compare the pooled supports.

    Node representations come from SGC propagation of one-hot labels and a
    fixed random linear map. With ``break_reference`` every permuted copy gets
    its own reference support, which must make the check fail.
    """
    from .pipeline import default_pipeline_flow, init_model

    flow = flow or default_pipeline_flow(M)
    if kinds is None:
        kinds = max(int(g.node_labels.max()) for g in graphs) + 1 if graphs else 1
    model = init_model(kinds, 2, d, M, seed)
    rng = np.random.default_rng(seed)
    devs = []
    for gi, g in enumerate(graphs):
        base = flowpool(graph_features(g, kinds) @ model.W, model.X0, flow, spec).x_star
        for t in range(trials):
            perm = rng.permutation(g.num_nodes)
            X0 = model.X0 if not break_reference else init_reference(M, d, seed + 1 + gi * trials + t)
            out = flowpool(graph_features(g.permuted(perm), kinds) @ model.W, X0, flow, spec).x_star
            devs.append(float(np.max(np.abs(out - base))))
    worst = max(devs) if devs else 0.0
    return PermCheck(worst, len(devs), worst < tol, devs)


def random_graphs(count: int, kinds: int = 7, min_nodes: int = 10, max_nodes: int = 28, seed: int = 0):
    """Connected random graphs with random categorical labels (a stand-in for molecule fixtures)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        n = int(rng.integers(min_nodes, max_nodes + 1))
        # random spanning tree plus a few extra edges, roughly molecule-like sparsity
        edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
        for _ in range(n // 5):
            i, j = rng.integers(0, n, size=2)
            if i != j:
                edges.add((int(min(i, j)), int(max(i, j))))
        out.append(LabeledGraph(n, tuple(sorted(edges)), rng.integers(0, kinds, size=n), k % 2))
    return out
