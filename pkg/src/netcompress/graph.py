"""Graph tracing and network thinning.

Thinning happens in three passes: :func:`trace_graph` records the executed
topology with per-node shapes, :func:`plan_thinning` decides which output
structures every node keeps and what input indices its successors keep,
and :func:`apply_thinning` slices the parameter tensors.

A removed structure still emits its bias, so its activation is a constant.
That constant is folded into the biases of the consumers, which keeps the
thinned network exactly equal to the masked one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from netcompress.exceptions import ShapeError, ThinningError
from netcompress.tensor_net import Model, forward_all

PARAM_KINDS = ("dense", "conv2d")


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str
    inputs: tuple[int, ...]
    in_shapes: tuple[tuple[int, ...], ...]
    out_shape: tuple[int, ...]
    weight_shape: tuple[int, ...] | None = None
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ModelGraph:
    input_shape: tuple[int, ...]
    nodes: tuple[GraphNode, ...]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(src, dst) for dst, n in enumerate(self.nodes) for src in n.inputs if src >= 0]

    @property
    def output(self) -> int:
        return len(self.nodes) - 1

    def successors(self, idx: int) -> list[int]:
        return [dst for dst, n in enumerate(self.nodes) if idx in n.inputs]


def trace_graph(model: Model) -> ModelGraph:
    """Run a probe batch through ``model`` and record the executed DAG with shapes."""
    probe = np.zeros((1,) + tuple(model.input_shape))
    outputs = forward_all(model, probe)
    nodes = []
    for idx, (node, out) in enumerate(zip(model.nodes, outputs)):
        in_shapes = tuple(tuple(model.input_shape) if i == -1 else tuple(outputs[i].shape[1:])
                          for i in node.inputs)
        wshape = tuple(node.params["weight"].shape) if "weight" in node.params else None
        nodes.append(GraphNode(node.name, node.kind, tuple(node.inputs), in_shapes,
                               tuple(out.shape[1:]), wshape, node.stride, node.padding))
    graph = ModelGraph(tuple(model.input_shape), tuple(nodes))
    sources = [i for i, n in enumerate(nodes) if -1 in n.inputs]
    sinks = [i for i in range(len(nodes)) if not graph.successors(i)]
    if not sources:
        raise ShapeError("graph never reads the model input")
    if sinks != [len(nodes) - 1]:
        raise ShapeError(f"graph must have a single sink at the last node, found {sinks}")
    return graph


@dataclass
class ThinningPlan:
    """Retained indices along each node's structured axis.

    ``out_keep[i]`` indexes node ``i``'s output features (2-D activations) or
    channels (4-D activations). ``in_keep`` maps parameterized node names to
    the retained indices of their weight's input axis.
    """

    out_keep: list[np.ndarray]
    in_keep: dict[str, np.ndarray]
    graph: ModelGraph
    masks: dict[str, np.ndarray]

    def is_identity(self) -> bool:
        return all(len(k) == _axis_len(n.out_shape) for k, n in zip(self.out_keep, self.graph.nodes))


def _axis_len(shape) -> int:
    return shape[0]


def _expand_flatten(keep: np.ndarray, in_shape) -> np.ndarray:
    if len(in_shape) == 1:
        return keep
    per = int(np.prod(in_shape[1:]))
    return (keep[:, None] * per + np.arange(per)[None, :]).ravel()


def _param_sources(graph: ModelGraph, idx: int) -> list[int]:
    """Nodes whose structure choice determines the channel set of ``idx``'s output."""
    if idx == -1:
        return [-1]
    node = graph.nodes[idx]
    if node.kind in PARAM_KINDS:
        return [idx]
    if node.kind == "relu":
        return _param_sources(graph, node.inputs[0])
    if node.kind == "add":
        return _param_sources(graph, node.inputs[0]) + _param_sources(graph, node.inputs[1])
    raise ThinningError(f"node {node.name}: {node.kind} between a structure and a residual "
                        "add is not supported")


def plan_thinning(graph: ModelGraph, masks: dict[str, np.ndarray]) -> ThinningPlan:
    """Work out which structures survive and how successors' inputs shrink.

    ``masks`` maps layer names to boolean keep-masks over output structures.
    Residual adds keep the union of their branches; the producers feeding an
    add are widened to that union so both summands line up.
    """
    names = {n.name: i for i, n in enumerate(graph.nodes)}
    for name, m in masks.items():
        if name not in names:
            raise ThinningError(f"mask for unknown layer {name!r}")
        node = graph.nodes[names[name]]
        if node.kind not in PARAM_KINDS:
            raise ThinningError(f"mask given for {name!r}, which has no structures")
        if np.asarray(m).shape != (_axis_len(node.out_shape),):
            raise ThinningError(f"mask for {name!r} has shape {np.asarray(m).shape}, "
                                f"expected ({_axis_len(node.out_shape)},)")

    own: dict[int, set] = {}
    for i, node in enumerate(graph.nodes):
        if node.kind not in PARAM_KINDS:
            continue
        size = _axis_len(node.out_shape)
        if node.name in masks and i != graph.output:
            kept = set(np.flatnonzero(np.asarray(masks[node.name], dtype=bool)).tolist())
            if not kept:
                raise ThinningError(f"degenerate layer {node.name!r}: every structure is zero")
        else:
            kept = set(range(size))
        own[i] = kept

    def full(i):
        return set(range(_axis_len(graph.nodes[i].out_shape)))

    # widen producers tied together by residual adds (and the sink) until stable
    changed = True
    while changed:
        changed = False
        groups = [_param_sources(graph, i) for i, n in enumerate(graph.nodes) if n.kind == "add"]
        groups.append(_param_sources(graph, graph.output) if graph.nodes[graph.output].kind != "flatten"
                      else [])
        for gi, group in enumerate(groups):
            sink_group = gi == len(groups) - 1
            if -1 in group or sink_group:
                union = None
            else:
                union = set().union(*(own[s] for s in group))
            for s in group:
                if s == -1:
                    continue
                target = full(s) if union is None else union
                if own[s] != target:
                    own[s] = set(target)
                    changed = True

    out_keep: list[np.ndarray] = []
    in_keep: dict[str, np.ndarray] = {}

    def upstream(i):
        if i == -1:
            return np.arange(graph.input_shape[0])
        return out_keep[i]

    for i, node in enumerate(graph.nodes):
        if node.kind in PARAM_KINDS:
            in_keep[node.name] = upstream(node.inputs[0])
            out_keep.append(np.array(sorted(own[i]), dtype=np.int64))
        elif node.kind == "relu":
            out_keep.append(upstream(node.inputs[0]))
        elif node.kind == "flatten":
            out_keep.append(_expand_flatten(upstream(node.inputs[0]), node.in_shapes[0]))
        else:
            a, b = upstream(node.inputs[0]), upstream(node.inputs[1])
            if not np.array_equal(a, b):
                raise ThinningError(f"add {node.name}: branches disagree after widening")
            out_keep.append(a)
    clean = {k: np.asarray(v, dtype=bool) for k, v in masks.items()}
    return ThinningPlan(out_keep, in_keep, graph, clean)


def _removed_constants(model: Model, graph: ModelGraph, plan: ThinningPlan) -> list[np.ndarray]:
    """Per-node activation value of every structure along the structured axis,
    valid at removed indices (where the masked weights are all zero)."""
    consts: list[np.ndarray] = []
    for i, (node, gnode) in enumerate(zip(model.nodes, graph.nodes)):
        size = _axis_len(gnode.out_shape)
        src = [None if j == -1 else consts[j] for j in node.inputs]
        if node.kind in PARAM_KINDS:
            bias = node.params.get("bias")
            consts.append(np.zeros(size) if bias is None else bias.astype(np.float64).copy())
        elif node.kind == "relu":
            consts.append(np.zeros(size) if src[0] is None else np.maximum(src[0], 0.0))
        elif node.kind == "flatten":
            in_shape = gnode.in_shapes[0]
            c = np.zeros(in_shape[0]) if src[0] is None else src[0]
            consts.append(np.repeat(c, int(np.prod(in_shape[1:]))) if len(in_shape) > 1 else c)
        else:
            a = np.zeros(size) if src[0] is None else src[0]
            b = np.zeros(size) if src[1] is None else src[1]
            consts.append(a + b)
    return consts


def apply_thinning(model: Model, plan: ThinningPlan) -> Model:
    """Slice weights to the retained structures and fold removed constants into biases.

    The result computes the same function as ``model`` with the planned
    structures' weights zeroed.
    """
    graph = plan.graph
    if len(graph.nodes) != len(model.nodes) or any(
            g.name != n.name or g.kind != n.kind for g, n in zip(graph.nodes, model.nodes)):
        raise ThinningError("plan was built for a different graph")
    # structures widened back in by a residual union keep their zeroed weights
    new = masked_model(model, plan.masks)
    consts = _removed_constants(new, graph, plan)
    for i, node in enumerate(new.nodes):
        if node.kind not in PARAM_KINDS:
            continue
        out_idx = plan.out_keep[i]
        in_idx = plan.in_keep[node.name]
        w = node.params["weight"]
        bias = node.params.get("bias")
        n_in = w.shape[1]
        removed = np.setdiff1d(np.arange(n_in), in_idx)
        fold = np.zeros(w.shape[0])
        src = node.inputs[0]
        if len(removed) and src != -1:
            c = consts[src][removed]
            if np.any(c != 0):
                if node.kind == "dense":
                    fold = w[:, removed] @ c
                elif node.padding == 0:
                    fold = np.einsum("ocij,c->o", w[:, removed], c)
                else:
                    raise ThinningError(
                        f"{node.name}: removed input channels carry nonzero constants "
                        "that cannot be folded through zero padding")
        if np.any(fold != 0):
            bias = fold if bias is None else bias + fold
        w = w[out_idx][:, in_idx]
        node.params["weight"] = np.ascontiguousarray(w)
        if bias is not None:
            node.params["bias"] = bias[out_idx].copy()
    new.input_shape = tuple(model.input_shape)
    return new


def masked_model(model: Model, masks: dict[str, np.ndarray]) -> Model:
    """Copy of ``model`` with the weights of masked-out structures set to zero."""
    new = model.copy()
    for node in new.nodes:
        if node.name in masks:
            keep = np.asarray(masks[node.name], dtype=bool)
            node.params["weight"] = node.params["weight"] * keep.reshape(
                (-1,) + (1,) * (node.params["weight"].ndim - 1))
    return new


def zero_structure_masks(model: Model, layers=None) -> dict[str, np.ndarray]:
    """Keep-masks marking the all-zero rows/filters of every (or each listed) weight layer."""
    masks = {}
    for node in model.nodes:
        if node.kind in PARAM_KINDS and (layers is None or node.name in layers):
            w = node.params["weight"]
            masks[node.name] = np.any(w.reshape(w.shape[0], -1) != 0, axis=1)
    return masks


def thin(model: Model, masks: dict[str, np.ndarray]) -> Model:
    """Trace, plan and apply in one call."""
    return apply_thinning(model, plan_thinning(trace_graph(model), masks))


def parameter_count_from_plan(model: Model, plan: ThinningPlan) -> int:
    """Closed-form parameter count of the thinned model (bias folding aside)."""
    total = 0
    for i, node in enumerate(model.nodes):
        if node.kind not in PARAM_KINDS:
            continue
        w = node.params["weight"]
        per = int(np.prod(w.shape[2:])) if w.ndim > 2 else 1
        total += len(plan.out_keep[i]) * len(plan.in_keep[node.name]) * per
        if "bias" in node.params:
            total += len(plan.out_keep[i])
    return total

