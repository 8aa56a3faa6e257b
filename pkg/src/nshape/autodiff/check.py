"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .core import Graph, Node, sum as _sum
from .diff import grad


def numerical_gradient(graph: Graph, slot: str, bindings: Mapping, step: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h of the summed first output."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(bindings[slot], dtype=np.float64)
    out = np.zeros_like(base)
    work = dict(bindings)
    flat = base.reshape(-1)
    for i in range(flat.size):
        x = flat.copy()
        x[i] += step
        work[slot] = x.reshape(base.shape)
        fp = float(np.sum(graph.evaluate(work)[0]))
        x[i] -= 2 * step
        work[slot] = x.reshape(base.shape)
        fm = float(np.sum(graph.evaluate(work)[0]))
        out.reshape(-1)[i] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest componentwise deviation relative to the gradient's magnitude.

    max_i |a_i - n_i| / max(|a|_inf, |n|_inf); zero when both vanish.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    diff = np.max(np.abs(a - n), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def check_gradient(graph: Graph | Node, slot: str, bindings: Mapping, step: float = 1e-5) -> float:
    """Compare reverse-mode gradient of the (summed) root with central differences."""
    if isinstance(graph, Node):
        graph = Graph(graph)
    root = graph.outputs[0]
    if root.shape != ():
        root = _sum(root)
    target = graph.slots[slot]
    analytic = Graph(grad(root, [target])).evaluate(bindings)[0]
    numeric = numerical_gradient(Graph(root), slot, bindings, step)
    return relative_error(analytic, numeric)
