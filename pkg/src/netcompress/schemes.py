"""Compression schemes: projection onto a compressed set and back.

A scheme maps full-precision weights ``w`` to a :class:`CompressedState`
(``project``) and a state back to weights (``decompress``). Pruning variants
keep a boolean mask next to the values; quantization stores binary16
values. ``Compose`` chains schemes left to right.

Sparsity ``s`` always means "remove ``floor(s * total)`` units", where a
unit is a weight for :class:`Prune` and a structure (neuron row, conv
filter, weight block) for the structured variants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from netcompress.exceptions import SchemeError

CRITERIA = ("l2_norm", "mean_abs", "max_abs")

LayerFilter = Union[None, tuple, Callable]


def removal_count(s: float, total: int) -> int:
    """``floor(s * total)`` with a guard against float noise (0.29*100 = 28.999...)."""
    if not 0 <= s < 1:
        raise SchemeError(f"sparsity must lie in [0, 1), got {s}")
    return min(int(math.floor(s * total + 1e-9)), total - 1)


def _criteria_score(blocks: np.ndarray, criteria: str, axis) -> np.ndarray:
    if criteria == "l2_norm":
        return np.sqrt(np.sum(blocks ** 2, axis=axis))
    if criteria == "mean_abs":
        return np.mean(np.abs(blocks), axis=axis)
    if criteria == "max_abs":
        return np.max(np.abs(blocks), axis=axis)
    raise SchemeError(f"unknown criteria {criteria!r}; choose from {CRITERIA}")


def magnitude_threshold(weights, s: float) -> float:
    """Magnitude of the k-th largest entry, ``k = total - floor(s * total)``."""
    flat = np.abs(np.asarray(weights, dtype=np.float64).ravel())
    if flat.size == 0:
        raise SchemeError("no parameters to prune")
    k = flat.size - removal_count(s, flat.size)
    return float(np.partition(flat, flat.size - k)[flat.size - k])


def top_k_mask(values, k: int) -> np.ndarray:
    """Keep the ``k`` largest magnitudes; ties broken by ascending index."""
    flat = np.abs(np.asarray(values).ravel())
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask


# ---------------------------------------------------------------------------
# state

@dataclass
class ParamState:
    values: np.ndarray
    mask: np.ndarray | None = None

    @property
    def quantized(self) -> bool:
        return self.values.dtype == np.float16

    def dense(self) -> np.ndarray:
        out = self.values.astype(np.float64)
        if self.mask is not None:
            out = np.where(self.mask, out, 0.0)
        return out


@dataclass
class CompressedState:
    params: dict[str, ParamState]
    sparsity: float
    structured: bool = False
    # node name -> kind, for layers a structured scheme pruned
    structure_layers: dict[str, str] = field(default_factory=dict)
    # parameter keys some scheme constrained; the rest pass through unchanged
    compressed_keys: frozenset = frozenset()

    @property
    def quantized_keys(self) -> list[str]:
        return [k for k, p in self.params.items() if p.quantized]

    def same_as(self, other: CompressedState) -> bool:
        if self.params.keys() != other.params.keys():
            return False
        for key, p in self.params.items():
            q = other.params[key]
            if p.values.dtype != q.values.dtype or not np.array_equal(p.values, q.values):
                return False
            if (p.mask is None) != (q.mask is None):
                return False
            if p.mask is not None and not np.array_equal(p.mask, q.mask):
                return False
        return True


def decompress(state: CompressedState) -> dict[str, np.ndarray]:
    """Weights in float64: masked values, with binary16 payloads widened exactly."""
    return {key: p.dense() for key, p in state.params.items()}


# ---------------------------------------------------------------------------
# schemes

@dataclass(frozen=True)
class Scheme:
    layers: LayerFilter = field(default=None, kw_only=True)

    def applies_to(self, node) -> bool:
        if self.layers is None:
            return True
        if callable(self.layers):
            return bool(self.layers(node))
        return node.name in self.layers

    def _apply(self, model, params: dict[str, ParamState], s: float) -> bool:
        """Update ``params`` in place; return True for structure-removing schemes."""
        raise NotImplementedError

    def touched_keys(self, model) -> set[str]:
        raise NotImplementedError

    def flatten(self) -> list[Scheme]:
        return [self]


def _weight_nodes(model, scheme: Scheme, kinds=("dense", "conv2d"), skip_output=False):
    last = len(model.nodes) - 1
    out = []
    for i, node in enumerate(model.nodes):
        if node.kind not in kinds or "weight" not in node.params:
            continue
        if skip_output and i == last:
            continue
        if scheme.applies_to(node):
            out.append(node)
    return out


@dataclass(frozen=True)
class Prune(Scheme):
    """Unstructured global magnitude pruning of weights (biases untouched)."""

    def _apply(self, model, params, s):
        nodes = _weight_nodes(model, self)
        if not nodes:
            raise SchemeError("Prune: no layer with weights matches the layer filter")
        keys = [f"{n.name}.weight" for n in nodes]
        flat = np.concatenate([params[k].dense().ravel() for k in keys])
        keep = top_k_mask(flat, flat.size - removal_count(s, flat.size))
        start = 0
        for key in keys:
            p = params[key]
            size = p.values.size
            local = keep[start:start + size].reshape(p.values.shape)
            start += size
            p.mask = local if p.mask is None else (p.mask & local)
        return False

    def touched_keys(self, model):
        return {f"{n.name}.weight" for n in _weight_nodes(model, self)}


@dataclass(frozen=True)
class Quantize(Scheme):
    """Round weights and biases to the nearest binary16 value (ties to even)."""

    dtype: str = "float16"

    def _apply(self, model, params, s):
        if self.dtype not in ("float16", "half"):
            raise SchemeError(f"unsupported quantization dtype {self.dtype!r}")
        nodes = [n for n in model.nodes if n.params and self.applies_to(n)]
        if not nodes:
            raise SchemeError("Quantize: no parameterized layer matches the layer filter")
        for node in nodes:
            for pname in node.params:
                p = params[f"{node.name}.{pname}"]
                with np.errstate(over="ignore"):
                    q = p.values.astype(np.float64).astype(np.float16)
                if not np.all(np.isfinite(q)):
                    raise SchemeError(f"{node.name}.{pname}: value outside binary16 range")
                p.values = q
        return False

    def touched_keys(self, model):
        return {f"{n.name}.{p}" for n in model.nodes if n.params and self.applies_to(n)
                for p in n.params}


@dataclass(frozen=True)
class _StructuredPrune(Scheme):
    criteria: str = "l2_norm"

    def _structures(self, model) -> list:
        raise NotImplementedError

    def _blocks(self, weight: np.ndarray):
        """Index tuples selecting each structure of one layer's weight."""
        raise NotImplementedError

    def _apply(self, model, params, s):
        if self.criteria not in CRITERIA:
            raise SchemeError(f"unknown criteria {self.criteria!r}; choose from {CRITERIA}")
        nodes = self._structures(model)
        if not nodes:
            raise SchemeError(f"{type(self).__name__}: no matching layers in model")
        entries = []  # (layer position, slices, score)
        for li, node in enumerate(nodes):
            w = params[f"{node.name}.weight"].dense()
            for slc in self._blocks(w):
                entries.append((li, slc, float(_criteria_score(w[slc], self.criteria, None))))
        total = len(entries)
        n_keep = total - removal_count(s, total)
        keep = np.zeros(total, dtype=bool)
        # every layer keeps its best structure, the rest of the budget goes globally
        for li in range(len(nodes)):
            idx = [i for i, e in enumerate(entries) if e[0] == li]
            best = max(idx, key=lambda i: (entries[i][2], -i))
            keep[best] = True
        rest = [i for i in range(total) if not keep[i]]
        rest.sort(key=lambda i: (-entries[i][2], i))
        for i in rest[:max(n_keep - len(nodes), 0)]:
            keep[i] = True
        masks = {node.name: np.ones(params[f"{node.name}.weight"].values.shape, dtype=bool)
                 for node in nodes}
        for i, (li, slc, _) in enumerate(entries):
            if not keep[i]:
                masks[nodes[li].name][slc] = False
        for node in nodes:
            p = params[f"{node.name}.weight"]
            p.mask = masks[node.name] if p.mask is None else (p.mask & masks[node.name])
        return True

    def touched_keys(self, model):
        return {f"{n.name}.weight" for n in self._structures(model)}


@dataclass(frozen=True)
class NeuronPrune(_StructuredPrune):
    """Remove whole output neurons (weight rows) of dense layers except the output layer."""

    criteria: str = "mean_abs"

    def _structures(self, model):
        return _weight_nodes(model, self, kinds=("dense",), skip_output=True)

    def _blocks(self, weight):
        return [(np.s_[r],) for r in range(weight.shape[0])]


@dataclass(frozen=True)
class FilterPrune(_StructuredPrune):
    """Remove whole conv filters (output channels)."""

    criteria: str = "l2_norm"

    def _structures(self, model):
        return _weight_nodes(model, self, kinds=("conv2d",), skip_output=True)

    def _blocks(self, weight):
        return [(np.s_[r],) for r in range(weight.shape[0])]


@dataclass(frozen=True)
class BlockPrune(_StructuredPrune):
    """Remove n-d blocks of ``block_shape`` from dense weights; trailing blocks may be ragged.

    ``block_shape`` is aligned with the leading weight axes; missing axes have
    extent 1.
    """

    criteria: str = "mean_abs"
    block_shape: tuple = (5, 1)
    kinds: tuple = ("dense",)

    def _structures(self, model):
        nodes = _weight_nodes(model, self, kinds=self.kinds)
        for node in nodes:
            ndim = node.params["weight"].ndim
            if len(self.block_shape) > ndim or any(b < 1 for b in self.block_shape):
                raise SchemeError(f"block_shape {self.block_shape} invalid for "
                                  f"{node.name} weight of rank {ndim}")
        return nodes

    def _blocks(self, weight):
        bs = tuple(self.block_shape) + (1,) * (weight.ndim - len(self.block_shape))
        ranges = [range(0, dim, b) for dim, b in zip(weight.shape, bs)]
        out = []
        for corner in np.ndindex(*[len(r) for r in ranges]):
            out.append(tuple(slice(ranges[d][c], ranges[d][c] + bs[d]) for d, c in enumerate(corner)))
        return out


@dataclass(frozen=True)
class Compose(Scheme):
    schemes: tuple = ()

    def __post_init__(self):
        flat = []
        if isinstance(self.schemes, Scheme):
            object.__setattr__(self, "schemes", (self.schemes,))
        for sch in self.schemes:
            flat.extend(sch.flatten())
        if not flat:
            raise SchemeError("Compose needs at least one scheme")
        object.__setattr__(self, "schemes", tuple(flat))

    def flatten(self):
        return list(self.schemes)

    def _apply(self, model, params, s):
        structured = False
        for sch in self.schemes:
            structured |= sch._apply(model, params, s)
        return structured


def is_structured(scheme: Scheme) -> bool:
    return any(isinstance(s, _StructuredPrune) for s in scheme.flatten())


def project(model, scheme: Scheme, s: float, params: dict[str, np.ndarray] | None = None
            ) -> CompressedState:
    """Project ``params`` (default: the model's own) onto the scheme's feasible set."""
    removal_count(s, 2)  # validates s
    source = model.parameters() if params is None else params
    state = {k: ParamState(np.asarray(v, dtype=np.float64).copy()) for k, v in source.items()}
    structured = False
    layers = {}
    touched = set()
    for sch in scheme.flatten():
        if sch._apply(model, state, s):
            structured = True
            for node in sch._structures(model):
                layers[node.name] = node.kind
        touched |= sch.touched_keys(model)
    for p in state.values():
        if p.mask is not None:
            # canonical form: masked-out entries hold zero
            p.values = np.where(p.mask, p.values, p.values.dtype.type(0))
    return CompressedState(state, float(s), structured, layers, frozenset(touched))


def structure_masks(state: CompressedState, model=None) -> dict[str, np.ndarray]:
    """Per-layer keep masks over output structures (rows / filters).

    A structure is dropped iff all its weight entries are zero.
    """
    if not state.structured:
        raise SchemeError("structure_masks needs a state produced by a structured scheme")
    dense = decompress(state)
    masks = {}
    for key, w in dense.items():
        if not key.endswith(".weight"):
            continue
        name = key[: -len(".weight")]
        if model is not None and model.nodes[model.node_index(name)].kind not in ("dense", "conv2d"):
            continue
        masks[name] = np.any(w.reshape(w.shape[0], -1) != 0, axis=1)
    return masks


# ---------------------------------------------------------------------------
# config trees

_NAMES = {
    "prune": Prune,
    "quantize": Quantize,
    "neuron_prune": NeuronPrune,
    "filter_prune": FilterPrune,
    "block_prune": BlockPrune,
    "compose": Compose,
}


def scheme_from_config(tree) -> Scheme:
    """Build a scheme from ``{"type": "prune" | ... | "compose", ...}``.

    A bare string is shorthand for ``{"type": name}``; a list means compose.
    """
    if isinstance(tree, str):
        tree = {"type": tree}
    if isinstance(tree, list):
        tree = {"type": "compose", "schemes": tree}
    tree = dict(tree)
    kind = tree.pop("type", None)
    if kind not in _NAMES:
        raise SchemeError(f"unknown scheme {kind!r}; choose from {sorted(_NAMES)}")
    if "layers" in tree and tree["layers"] is not None:
        tree["layers"] = tuple(tree["layers"])
    if kind == "compose":
        return Compose(schemes=tuple(scheme_from_config(t) for t in tree.pop("schemes", [])), **tree)
    if "block_shape" in tree:
        tree["block_shape"] = tuple(tree["block_shape"])
    try:
        return _NAMES[kind](**tree)
    except TypeError as exc:
        raise SchemeError(f"bad arguments for {kind}: {exc}") from None


def scheme_to_config(scheme: Scheme) -> dict:
    name = {v: k for k, v in _NAMES.items()}[type(scheme)]
    out = {"type": name}
    if isinstance(scheme, Compose):
        out["schemes"] = [scheme_to_config(s) for s in scheme.schemes]
        return out
    if isinstance(scheme.layers, tuple):
        out["layers"] = list(scheme.layers)
    if isinstance(scheme, _StructuredPrune):
        out["criteria"] = scheme.criteria
    if isinstance(scheme, BlockPrune):
        out["block_shape"] = list(scheme.block_shape)
    if isinstance(scheme, Quantize):
        out["dtype"] = scheme.dtype
    return out
