"""Small numpy network engine: dense/conv layers, backprop, momentum SGD.

Models are DAGs of :class:`Node` objects evaluated in list order. Node
inputs refer to earlier nodes by position; ``-1`` is the model input. All
arithmetic is float64.
"""
from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field

import numpy as np

from netcompress.exceptions import NumericError, ShapeError

KINDS = ("dense", "conv2d", "relu", "flatten", "add")
PARAM_KINDS = ("dense", "conv2d")
FORMAT_VERSION = 1


@dataclass
class Node:
    name: str
    kind: str
    inputs: list[int]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class Model:
    input_shape: tuple[int, ...]
    nodes: list[Node]
    # parameter keys stored at half precision
    quantized: frozenset = frozenset()

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``"<node>.<weight|bias>"`` in node order."""
        out = {}
        for node in self.nodes:
            for pname in ("weight", "bias"):
                if pname in node.params:
                    out[f"{node.name}.{pname}"] = node.params[pname]
        return out

    def with_parameters(self, params: dict[str, np.ndarray]) -> Model:
        new = copy.deepcopy(self)
        for node in new.nodes:
            for pname in list(node.params):
                key = f"{node.name}.{pname}"
                if key in params:
                    arr = np.asarray(params[key], dtype=np.float64)
                    if arr.shape != node.params[pname].shape:
                        raise ShapeError(
                            f"{key}: expected shape {node.params[pname].shape}, got {arr.shape}")
                    node.params[pname] = arr.copy()
        return new

    def copy(self) -> Model:
        return copy.deepcopy(self)

    def node_index(self, name: str) -> int:
        for i, node in enumerate(self.nodes):
            if node.name == name:
                return i
        raise KeyError(name)

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dense(name, in_features, out_features, rng, bias=True, inputs=None) -> Node:
    params = {"weight": kaiming_uniform(rng, (out_features, in_features), in_features)}
    if bias:
        params["bias"] = np.zeros(out_features)
    return Node(name, "dense", inputs if inputs is not None else [], params)


def conv2d(name, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
           bias=True, inputs=None) -> Node:
    kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size
    fan_in = in_channels * kh * kw
    params = {"weight": kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in)}
    if bias:
        params["bias"] = np.zeros(out_channels)
    return Node(name, "conv2d", inputs if inputs is not None else [], params,
                stride=stride, padding=padding)


def sequential(input_shape, nodes: list[Node]) -> Model:
    """Chain ``nodes`` so each consumes its predecessor's output."""
    for i, node in enumerate(nodes):
        node.inputs = [i - 1]
    return Model(tuple(input_shape), nodes)


def mlp(input_dim: int, hidden: list[int], n_classes: int, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    nodes = []
    width = input_dim
    for i, h in enumerate(hidden):
        nodes.append(dense(f"fc{i}", width, h, rng))
        nodes.append(Node(f"relu{i}", "relu", []))
        width = h
    nodes.append(dense(f"fc{len(hidden)}", width, n_classes, rng))
    return sequential((input_dim,), nodes)


def small_convnet(input_shape, channels: int, n_classes: int, seed: int = 0,
                  kernel_size: int = 3) -> Model:
    """conv -> relu -> flatten -> dense."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    oh, ow = h - kernel_size + 1, w - kernel_size + 1
    nodes = [
        conv2d("conv0", c, channels, kernel_size, rng),
        Node("relu0", "relu", []),
        Node("flatten", "flatten", []),
        dense("fc0", channels * oh * ow, n_classes, rng),
    ]
    return sequential(input_shape, nodes)


# ---------------------------------------------------------------------------
# layer kernels

def _conv_windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    _, _, kh, kw = weight.shape
    win = _conv_windows(x, kh, kw, stride, padding)
    out = np.einsum("ncijkl,ockl->noij", win, weight, optimize=True)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def conv2d_backward(x, weight, gout, stride=1, padding=0):
    _, _, kh, kw = weight.shape
    win = _conv_windows(x, kh, kw, stride, padding)
    gw = np.einsum("ncijkl,noij->ockl", win, gout, optimize=True)
    gb = gout.sum(axis=(0, 2, 3))
    n, c, h, w = x.shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    oh, ow = gout.shape[2], gout.shape[3]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.einsum(
                "noij,oc->ncij", gout, weight[:, :, i, j], optimize=True)
    gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
    return gx, gw, gb


def conv_output_hw(h, w, kh, kw, stride, padding):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _node_params(node: Node, params):
    if params is None:
        return node.params.get("weight"), node.params.get("bias")
    return params.get(f"{node.name}.weight"), params.get(f"{node.name}.bias")


def _node_forward(node: Node, idx: int, xs: list[np.ndarray], params):
    if node.kind == "add":
        if len(xs) != 2 or xs[0].shape != xs[1].shape:
            raise ShapeError(f"layer {idx} ({node.name}): add needs two equal-shape inputs, "
                             f"got {[a.shape for a in xs]}")
        return xs[0] + xs[1]
    if len(xs) != 1:
        raise ShapeError(f"layer {idx} ({node.name}): expects one input, got {len(xs)}")
    x = xs[0]
    if node.kind == "relu":
        return np.maximum(x, 0.0)
    if node.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    weight, bias = _node_params(node, params)
    if node.kind == "dense":
        if x.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise ShapeError(f"layer {idx} ({node.name}): dense expects [batch, {weight.shape[1]}], "
                             f"got {list(x.shape)}")
        out = x @ weight.T
        return out + bias if bias is not None else out
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"layer {idx} ({node.name}): conv2d expects [batch, {weight.shape[1]}, h, w], "
                         f"got {list(x.shape)}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * node.padding < kh or x.shape[3] + 2 * node.padding < kw:
        raise ShapeError(f"layer {idx} ({node.name}): input {list(x.shape)} smaller than kernel")
    return conv2d_forward(x, weight, bias, node.stride, node.padding)


def _gather_inputs(node, x, outputs):
    return [x if i == -1 else outputs[i] for i in node.inputs]


def forward_all(model: Model, batch: np.ndarray, params=None, check_finite=False) -> list[np.ndarray]:
    """Outputs of every node, in node order."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"input: expected trailing shape {list(model.input_shape)}, "
                         f"got {list(x.shape[1:])}")
    outputs: list[np.ndarray] = []
    for idx, node in enumerate(model.nodes):
        for i in node.inputs:
            if not -1 <= i < idx:
                raise ShapeError(f"layer {idx} ({node.name}): input index {i} is not an earlier node")
        out = _node_forward(node, idx, _gather_inputs(node, x, outputs), params)
        if check_finite and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite activation at layer {idx} ({node.name})", layer=idx)
        outputs.append(out)
    return outputs


def forward(model: Model, batch: np.ndarray, params=None) -> np.ndarray:
    """Logits ``[batch, n_classes]`` from the last node."""
    return forward_all(model, batch, params)[-1]


# ---------------------------------------------------------------------------
# loss and gradients

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_grad(model: Model, batch, labels, params=None):
    """Mean softmax cross-entropy and its gradient for every parameter.

    Returns ``(loss, grads)`` where ``grads`` has the same keys as
    ``model.parameters()``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    x = np.asarray(batch, dtype=np.float64)
    outputs = forward_all(model, x, params, check_finite=True)
    logits = outputs[-1]
    n_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],) or labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be {logits.shape[0]} class indices in [0, {n_classes})")
    logp = log_softmax(logits)
    n = len(labels)
    loss = float(-logp[np.arange(n), labels].mean())

    gout: list[np.ndarray | None] = [None] * len(model.nodes)
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    gout[-1] = g / n
    grads = {}
    for idx in range(len(model.nodes) - 1, -1, -1):
        node = model.nodes[idx]
        go = gout[idx]
        if go is None:
            continue
        xs = _gather_inputs(node, x, outputs)
        weight, bias = _node_params(node, params)
        if node.kind == "add":
            gin = [go, go]
        elif node.kind == "relu":
            gin = [go * (xs[0] > 0)]
        elif node.kind == "flatten":
            gin = [go.reshape(xs[0].shape)]
        elif node.kind == "dense":
            grads[f"{node.name}.weight"] = go.T @ xs[0]
            if bias is not None:
                grads[f"{node.name}.bias"] = go.sum(axis=0)
            gin = [go @ weight]
        else:
            gx, gw, gb = conv2d_backward(xs[0], weight, go, node.stride, node.padding)
            grads[f"{node.name}.weight"] = gw
            if bias is not None:
                grads[f"{node.name}.bias"] = gb
            gin = [gx]
        for i, gi in zip(node.inputs, gin):
            if i == -1:
                continue
            gout[i] = gi if gout[i] is None else gout[i] + gi
    keys = model.parameters() if params is None else params
    ordered = {}
    for key, arr in keys.items():
        ordered[key] = grads.get(key, np.zeros_like(arr))
    return loss, ordered


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def sgd_step(params, grads, learning_rate, momentum, velocity=None):
    """One heavy-ball step: ``v <- m*v - lr*g``, ``p <- p + v``.

    Returns new ``(params, velocity)`` dicts; inputs are not modified.
    """
    new_params, new_velocity = {}, {}
    for key, p in params.items():
        g = grads[key]
        v = np.zeros_like(p) if velocity is None else velocity[key]
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{key}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v - learning_rate * g
        new_params[key] = p + v
        new_velocity[key] = v
    return new_params, new_velocity


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_labels(model: Model, inputs, params=None, batch_size: int = 1024) -> np.ndarray:
    preds = []
    for start in range(0, len(inputs), batch_size):
        # argmax returns the first maximum, i.e. ties go to the lowest class index
        preds.append(np.argmax(forward(model, inputs[start:start + batch_size], params), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, inputs, labels, params=None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(predict_labels(model, inputs, params) == labels))


def train(model: Model, dataset, cfg: TrainConfig):
    """Train a copy of ``model`` with momentum SGD.

    Returns ``(trained_model, history)``; history holds one dict per epoch
    with ``loss``, ``train_accuracy`` and ``val_accuracy``.
    """
    X, y = dataset.train
    if len(y) == 0:
        raise ValueError("training split is empty")
    Xv, yv = dataset.val
    params = {k: v.copy() for k, v in model.parameters().items()}
    velocity = None
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for step, idx in enumerate(iterate_minibatches(len(y), cfg.batch_size, rng)):
            loss, grads = loss_and_grad(model, X[idx], y[idx], params)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}, step {step}")
            params, velocity = sgd_step(params, grads, cfg.learning_rate, cfg.momentum, velocity)
            losses.append(loss)
        history.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_accuracy": evaluate(model, X, y, params),
            "val_accuracy": evaluate(model, Xv, yv, params) if len(yv) else float("nan"),
        })
    return model.with_parameters(params), history


# ---------------------------------------------------------------------------
# serialization

def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(blob["shape"])


def model_to_dict(model: Model) -> dict:
    nodes = []
    for node in model.nodes:
        entry = {"name": node.name, "kind": node.kind, "inputs": list(node.inputs)}
        if node.kind == "conv2d":
            entry["stride"] = node.stride
            entry["padding"] = node.padding
        if node.params:
            entry["params"] = {k: _encode(v) for k, v in node.params.items()}
        nodes.append(entry)
    edges = [[src, dst] for dst, node in enumerate(model.nodes) for src in node.inputs]
    return {"format": "netcompress-model", "version": FORMAT_VERSION,
            "input_shape": list(model.input_shape), "nodes": nodes, "edges": edges,
            "quantized": sorted(model.quantized)}


def model_from_dict(doc: dict) -> Model:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')!r}")
    nodes = []
    for entry in doc["nodes"]:
        params = {k: _decode(v) for k, v in entry.get("params", {}).items()}
        nodes.append(Node(entry["name"], entry["kind"], list(entry["inputs"]), params,
                          stride=entry.get("stride", 1), padding=entry.get("padding", 0)))
    return Model(tuple(doc["input_shape"]), nodes, frozenset(doc.get("quantized", [])))


def save_model(model: Model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> Model:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
