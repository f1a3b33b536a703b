"""FlowPool: optimal-transport gradient-flow pooling of point sets, with an implicit backward pass."""

from .measures import SQEUCLIDEAN, CostSpec, DiscreteMeasure, cost_gradient, cost_matrix, uniform_measure
from .sinkhorn import (
    DivergenceSolution,
    SinkhornError,
    SinkhornParams,
    SinkhornSolution,
    coupling_from_potentials,
    sinkhorn_divergence,
    sinkhorn_solve,
)
from .grad import grad_x_divergence, grad_x_loss, grad_x_self_loss, grad_y_loss
from .flow import FlowError, FlowParams, FlowResult, flowpool, init_reference, pool_batch
from .implicit import (
    ImplicitDiffError,
    ImplicitDiffParams,
    SecondOrderProbe,
    condition_numbers,
    conjugate_gradient,
    cross_jacobian_vector_product,
    hessian_vector_product,
    implicit_vjp,
    linear_operator_condition,
    unrolled_vjp,
)

__version__ = "0.1.0"
