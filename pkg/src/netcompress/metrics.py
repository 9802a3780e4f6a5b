"""Objectives over compressed models: memory footprint and FLOPs.

Also hosts synthetic accuracy curves with known level-set crossings, used to
exercise the search without training anything.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from netcompress.exceptions import ShapeError
from netcompress.graph import trace_graph
from netcompress.schemes import CompressedState
from netcompress.tensor_net import Model

FULL_BYTES = 4
HALF_BYTES = 2


@dataclass
class FootprintReport:
    bytes_total: int
    bytes_per_layer: dict[str, int]
    nonzeros_per_layer: dict[str, int]
    dtype_bytes: dict[str, int]
    reference_bytes: int
    compression_ratio: float

    def to_dict(self) -> dict:
        return {
            "bytes_total": self.bytes_total,
            "bytes_per_layer": self.bytes_per_layer,
            "nonzeros_per_layer": self.nonzeros_per_layer,
            "dtype_bytes": self.dtype_bytes,
            "reference_bytes": self.reference_bytes,
            "compression_ratio": self.compression_ratio,
        }


@dataclass
class FlopReport:
    flops_total: int
    flops_per_layer: dict[str, int]
    reference_flops: int
    speedup_ratio: float

    def to_dict(self) -> dict:
        return {"flops_total": self.flops_total, "flops_per_layer": self.flops_per_layer,
                "reference_flops": self.reference_flops, "speedup_ratio": self.speedup_ratio}


def _payload(source) -> tuple[dict[str, np.ndarray], set[str]]:
    if isinstance(source, CompressedState):
        dense = {k: p.dense() for k, p in source.params.items()}
        return dense, set(source.quantized_keys)
    if isinstance(source, Model):
        return source.parameters(), set(source.quantized)
    raise TypeError(f"expected CompressedState or Model, got {type(source).__name__}")


def memory_footprint(source, reference=None) -> FootprintReport:
    """Bytes of nonzero parameters at their stored width (2 for half, 4 otherwise).

    The reference is counted dense at 4 bytes per parameter; it defaults to
    the parameter count of ``source`` itself.
    """
    params, quantized = _payload(source)
    per_layer: dict[str, int] = {}
    nnz_layer: dict[str, int] = {}
    widths: dict[str, int] = {}
    for key, arr in params.items():
        layer = key.rsplit(".", 1)[0]
        width = HALF_BYTES if key in quantized else FULL_BYTES
        nnz = int(np.count_nonzero(arr))
        widths[key] = width
        per_layer[layer] = per_layer.get(layer, 0) + nnz * width
        nnz_layer[layer] = nnz_layer.get(layer, 0) + nnz
    total = sum(per_layer.values())
    if reference is None:
        ref_count = sum(a.size for a in params.values())
    else:
        ref_count = sum(a.size for a in _payload(reference)[0].values())
    ref_bytes = FULL_BYTES * ref_count
    ratio = ref_bytes / total if total else math.inf
    return FootprintReport(total, per_layer, nnz_layer, widths, ref_bytes, ratio)


def layer_flops(node) -> int:
    """Per-sample multiply and add count for one traced node (separately counted)."""
    if node.kind == "dense":
        if node.weight_shape is None:
            raise ShapeError(f"{node.name}: unresolved weight shape")
        m, n = node.weight_shape
        return 2 * m * n
    if node.kind == "conv2d":
        if node.weight_shape is None or node.out_shape is None:
            raise ShapeError(f"{node.name}: unresolved shapes")
        cout, cin, kh, kw = node.weight_shape
        _, oh, ow = node.out_shape
        return 2 * kh * kw * cin * cout * oh * ow
    return 0


def count_flops(graph, reference=None) -> FlopReport:
    """FLOPs per sample; ``graph`` and ``reference`` may be models or traced graphs."""
    if isinstance(graph, Model):
        graph = trace_graph(graph)
    per_layer = {n.name: layer_flops(n) for n in graph.nodes}
    total = sum(per_layer.values())
    if reference is None:
        ref_total = total
    else:
        ref_graph = trace_graph(reference) if isinstance(reference, Model) else reference
        ref_total = sum(layer_flops(n) for n in ref_graph.nodes)
    return FlopReport(total, per_layer, ref_total, ref_total / total if total else math.inf)


# ---------------------------------------------------------------------------
# synthetic curves

@dataclass
class SyntheticCurve:
    """Deterministic accuracy-like curve; optional seeded noise is a pure function of ``s``."""

    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    noise: float = 0.0
    calls: int = 0

    def value(self, s: float) -> float:
        p = self.params
        if self.name == "flat":
            y = p["c"]
        elif self.name == "step":
            y = p["top"] if s < p["at"] else p["low"]
        elif self.name == "logistic":
            y = p["top"] / (1.0 + math.exp(p["k"] * (s - p["mid"])))
        elif self.name == "knee":
            y = p["top"] - p["slope"] * max(0.0, s - p["knee"])
        else:
            raise KeyError(self.name)
        if self.noise:
            digest = hashlib.sha256(f"{self.seed}:{float(s)!r}".encode()).digest()
            u = int.from_bytes(digest[:8], "little") / 2.0 ** 64
            y += self.noise * (2.0 * u - 1.0)
        return float(y)

    def __call__(self, s: float) -> float:
        self.calls += 1
        return self.value(s)

    def crossing(self, level: float) -> float:
        """Sparsity where the noise-free curve falls to ``level``."""
        p = self.params
        if self.name == "logistic":
            return p["mid"] + math.log(p["top"] / level - 1.0) / p["k"]
        if self.name == "knee":
            return p["knee"] + (p["top"] - level) / p["slope"]
        if self.name == "step":
            return p["at"]
        raise ValueError(f"{self.name} curve has no level crossing")


CURVE_DEFAULTS = {
    "flat": {"c": 0.93},
    "step": {"top": 0.93, "at": 0.5, "low": 0.0},
    "logistic": {"top": 0.93, "k": 40.0, "mid": 0.85},
    "knee": {"top": 0.93, "knee": 0.6, "slope": 2.0},
}


def synthetic_curve(name: str, seed: int = 0, noise: float = 0.0, **params) -> SyntheticCurve:
    if name not in CURVE_DEFAULTS:
        raise KeyError(f"unknown synthetic curve {name!r}; choose from {sorted(CURVE_DEFAULTS)}")
    unknown = set(params) - set(CURVE_DEFAULTS[name])
    if unknown:
        raise KeyError(f"unknown parameters for {name}: {sorted(unknown)}")
    return SyntheticCurve(name, {**CURVE_DEFAULTS[name], **params}, seed, noise)


def flop_ratio(reference_shape, compressed_shape) -> float:
    """FLOP ratio of two conv kernels ``kh x kw x cin x cout`` at equal spatial size."""
    return float(np.prod(reference_shape)) / float(np.prod(compressed_shape))

