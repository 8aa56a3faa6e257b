"""Reverse- and forward-mode differentiation that emit new graphs.

Both transforms return ordinary nodes built from the same primitive set, so
their results can be differentiated again to any depth.
"""
from __future__ import annotations

from typing import Sequence

from .core import (
    OPS,
    Graph,
    GradientRequest,
    Node,
    NonDifferentiableError,
    ShapeError,
    add,
    asnode,
    ones,
    topological_order,
    zeros,
)


def _dependents(order: list[Node], sources: set[int]) -> set[int]:
    dep = set(sources)
    for node in order:
        if node.id in dep:
            continue
        if any(a.id in dep for a in node.args):
            dep.add(node.id)
    return dep


def grad(y: Node, wrt: Sequence[Node] | Node, seed: Node | None = None):
    """Gradient of scalar `y` (or of <seed, y>) with respect to each node in `wrt`.

    Returns graph nodes; contributions are accumulated in a fixed
    (topological) order so results are reproducible bit for bit.
    """
    single = isinstance(wrt, Node)
    wrt = [wrt] if single else list(wrt)
    y = asnode(y)
    if seed is None:
        if y.shape != ():
            raise ShapeError(f"gradient root must be scalar, got shape {y.shape}; pass a seed")
        seed = ones(())
    else:
        seed = asnode(seed)
        if seed.shape != y.shape:
            raise ShapeError(f"seed shape {seed.shape} differs from root shape {y.shape}")
    order = topological_order([y])
    dep = _dependents(order, {w.id for w in wrt})
    grads: dict[int, list[Node]] = {y.id: [seed]} if y.id in dep else {}
    result: dict[int, Node] = {}
    wrt_ids = {w.id for w in wrt}
    for node in reversed(order):
        parts = grads.pop(node.id, None)
        if parts is None:
            continue
        g = parts[0]
        for p in parts[1:]:
            g = add(g, p)
        if node.id in wrt_ids:
            result[node.id] = g
        if not node.args:
            continue
        rule = OPS[node.op]
        try:
            contribs = rule.vjp(node, g)
        except NonDifferentiableError as exc:
            raise NonDifferentiableError(
                f"operation '{node.op}' (node {node.id}) on the differentiation path "
                f"has no gradient rule"
            ) from exc
        for arg, ga in zip(node.args, contribs):
            if ga is None or arg.id not in dep:
                continue
            grads.setdefault(arg.id, []).append(ga)
    out = [result.get(w.id, zeros(w.shape)) for w in wrt]
    return out[0] if single else out


def jvp(outputs: Sequence[Node] | Node, wrt: Sequence[Node] | Node, tangents):
    """Forward-mode directional derivatives.

    Each tangent carries a leading batch axis: shape (T, *w.shape). The
    returned tangents have shape (T, *output.shape), so T directions are
    propagated in one sweep.
    """
    single = isinstance(outputs, Node)
    outputs = [outputs] if single else list(outputs)
    if isinstance(wrt, Node):
        wrt, tangents = [wrt], [tangents]
    tangents = [asnode(t) for t in tangents]
    T = tangents[0].shape[0]
    tan: dict[int, Node] = {}
    for w, t in zip(wrt, tangents):
        if t.shape != (T,) + w.shape:
            raise ShapeError(f"tangent shape {t.shape} != {(T,) + w.shape}")
        tan[w.id] = t
    for node in topological_order(outputs):
        if node.id in tan or not node.args:
            continue
        ts = [tan.get(a.id) for a in node.args]
        if all(t is None for t in ts):
            continue
        try:
            out = OPS[node.op].jvp(node, ts, T)
        except NonDifferentiableError as exc:
            raise NonDifferentiableError(
                f"operation '{node.op}' (node {node.id}) has no tangent rule"
            ) from exc
        if out is not None:
            tan[node.id] = out
    res = [tan.get(o.id, zeros((T,) + o.shape)) for o in outputs]
    return res[0] if single else res


def gradient(graph: Graph, req: GradientRequest | Sequence | None = None) -> Graph:
    """Graph-level gradient: a new Graph whose outputs are d(root)/d(target).

    Targets may be slot names or nodes. Applying `gradient` to the result
    again gives higher-order derivatives.
    """
    if req is None:
        req = GradientRequest(graph.outputs[0], tuple(graph.params.values()))
    elif not isinstance(req, GradientRequest):
        req = GradientRequest(graph.outputs[0], tuple(req))
    targets = []
    for t in req.targets:
        if isinstance(t, str):
            if t not in graph.slots:
                raise KeyError(f"graph has no slot named {t!r}")
            t = graph.slots[t]
        targets.append(t)
    root = req.root
    if root.shape != ():
        root = _sum_all(root)
    out = grad(root, targets)
    for _ in range(req.level - 1):
        if len(targets) != 1:
            raise ValueError("repeated differentiation needs a single target")
        out = [grad(_sum_all(out[0]), targets)[0]]
    return Graph(out, name=f"d({graph.name or 'f'})")


def _sum_all(x: Node) -> Node:
    from .core import sum as _sum

    return _sum(x) if x.shape != () else x
