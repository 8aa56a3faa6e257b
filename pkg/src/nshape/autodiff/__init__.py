"""Reverse/forward-mode differentiation over dense float64 arrays.

Gradients are emitted as new graphs over the same slots, so they can be
differentiated again (graph-of-graphs nesting).
"""
from .core import (
    AutodiffError,
    Graph,
    GradientRequest,
    IndexArray,
    Node,
    NonDifferentiableError,
    ShapeError,
    UnboundSlotError,
    abs,
    add,
    asnode,
    broadcast_to,
    concat,
    const,
    cos,
    cosine_similarity,
    cumsum,
    div,
    dot,
    embed,
    evaluate,
    exp,
    log,
    matmul,
    mean,
    mul,
    neg,
    norm,
    ones,
    power,
    reduce_max,
    relu,
    reshape,
    scatter_add,
    sigmoid,
    sign,
    sin,
    slice_axis,
    slot,
    softplus,
    sqrt,
    square,
    stack,
    step,
    stop_gradient,
    sub,
    sum,
    sum_to,
    take,
    tanh,
    topological_order,
    transpose,
    zeros,
)
from .diff import gradient, grad, jvp
from .check import check_gradient, numerical_gradient, relative_error
