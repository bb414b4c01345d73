"""Computation-graph IR: construction, validation, shape inference and execution.

A ``Graph`` is an immutable, topologically ordered tuple of ``Node`` objects.
Nodes are identified by unique path-style names such as
``stage3.dense5.branch_b.conv1``; edges are implied by each node's ``inputs``.
Weights live outside the graph in a name-keyed store (see ``pelee.weights``).
"""
from __future__ import annotations

import dataclasses
import heapq
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor_ops as ops
from .tensor_ops import ConvSpec, ShapeError

GRAPH_FORMAT = "pelee-graph"
GRAPH_FORMAT_VERSION = 1

KINDS = ("input", "conv", "bn", "relu", "pool", "gap", "concat", "add", "linear", "softmax")


class GraphError(ValueError):
    """Structural problem with a graph: cycles, dangling edges, bad attrs."""


class WeightError(ValueError):
    """A weight referenced by a node is missing or has the wrong shape."""


@dataclass(frozen=True)
class InputSpec:
    channels: int


@dataclass(frozen=True)
class BnSpec:
    channels: int
    epsilon: float = 1e-5


@dataclass(frozen=True)
class PoolSpec:
    mode: str
    kernel: int
    stride: int
    ceil_mode: bool = False
    pad: int = 0


@dataclass(frozen=True)
class LinearSpec:
    in_features: int
    out_features: int
    has_bias: bool = True


ATTR_TYPES = {
    "input": InputSpec,
    "conv": ConvSpec,
    "bn": BnSpec,
    "pool": PoolSpec,
    "linear": LinearSpec,
}

BN_WEIGHT_SUFFIXES = ("gamma", "beta", "running_mean", "running_var")


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: object = None
    weights: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"node {self.name!r}: unknown kind {self.kind!r}")
        expected = ATTR_TYPES.get(self.kind)
        if expected is None:
            if self.attrs is not None:
                raise GraphError(f"node {self.name!r}: kind {self.kind} takes no attrs")
        elif not isinstance(self.attrs, expected):
            raise GraphError(f"node {self.name!r}: kind {self.kind} requires {expected.__name__} attrs")
        arity = {"input": 0, "concat": None, "add": 2}.get(self.kind, 1)
        if arity is not None and len(self.inputs) != arity:
            raise GraphError(f"node {self.name!r}: kind {self.kind} takes {arity} inputs, got {len(self.inputs)}")
        if self.kind == "concat" and not self.inputs:
            raise GraphError(f"node {self.name!r}: concat needs at least one input")
        if self.weights != default_weight_names(self.name, self.kind, self.attrs):
            raise GraphError(f"node {self.name!r}: weight references {self.weights} do not match its kind")

    def with_inputs(self, inputs: Sequence[str]) -> "Node":
        return dataclasses.replace(self, inputs=tuple(inputs))


def default_weight_names(name: str, kind: str, attrs) -> tuple[str, ...]:
    if kind in ("conv", "linear"):
        # malformed attrs are reported by Node validation
        return (f"{name}.weight", f"{name}.bias") if getattr(attrs, "has_bias", False) else (f"{name}.weight",)
    if kind == "bn":
        return tuple(f"{name}.{s}" for s in BN_WEIGHT_SUFFIXES)
    return ()


def make_node(name: str, kind: str, inputs: Sequence[str] = (), attrs=None) -> Node:
    return Node(name, kind, tuple(inputs), attrs, default_weight_names(name, kind, attrs))


def weight_shapes(node: Node) -> dict[str, tuple[int, ...]]:
    """Expected shape of every weight tensor a node references."""
    a = node.attrs
    if node.kind == "conv":
        shapes = {f"{node.name}.weight": a.weight_shape}
        if a.has_bias:
            shapes[f"{node.name}.bias"] = (a.out_channels,)
        return shapes
    if node.kind == "bn":
        return {w: (a.channels,) for w in node.weights}
    if node.kind == "linear":
        shapes = {f"{node.name}.weight": (a.out_features, a.in_features)}
        if a.has_bias:
            shapes[f"{node.name}.bias"] = (a.out_features,)
        return shapes
    return {}


class Graph:
    """Immutable DAG of nodes, stored in a valid topological order."""

    def __init__(self, nodes: Iterable[Node], inputs: Sequence[str], outputs: Sequence[str]):
        nodes = tuple(nodes)
        by_name: dict[str, Node] = {}
        for node in nodes:
            if node.name in by_name:
                raise GraphError(f"duplicate node name {node.name!r}")
            by_name[node.name] = node
        for node in nodes:
            for src in node.inputs:
                if src not in by_name:
                    raise GraphError(f"node {node.name!r} reads undefined node {src!r}")
        for name in inputs:
            if name not in by_name or by_name[name].kind != "input":
                raise GraphError(f"declared input {name!r} is not an input node")
        for name in outputs:
            if name not in by_name:
                raise GraphError(f"declared output {name!r} is not a node")
        self._by_name = by_name
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        order = topo_order_of(nodes)
        self.nodes = tuple(by_name[n] for n in order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name: str) -> Node:
        return self._by_name[name]

    def __eq__(self, other):
        return (
            isinstance(other, Graph)
            and self.nodes == other.nodes
            and self.inputs == other.inputs
            and self.outputs == other.outputs
        )

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, inputs={self.inputs}, outputs={self.outputs})"

    @property
    def edges(self) -> list[tuple[str, str, int]]:
        return [(src, node.name, slot) for node in self.nodes for slot, src in enumerate(node.inputs)]

    def consumers(self) -> dict[str, list[str]]:
        users: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for node in self.nodes:
            for src in node.inputs:
                users[src].append(node.name)
        return users

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for node in self.nodes:
            shapes.update(weight_shapes(node))
        return shapes


def topo_order_of(nodes: Sequence[Node]) -> list[str]:
    """Kahn's algorithm; among ready nodes the earliest inserted goes first."""
    position = {n.name: i for i, n in enumerate(nodes)}
    pending = {n.name: len(set(n.inputs)) for n in nodes}
    users: dict[str, list[str]] = {n.name: [] for n in nodes}
    for n in nodes:
        for src in set(n.inputs):
            if src in users:
                users[src].append(n.name)
    ready = [position[n.name] for n in nodes if pending[n.name] == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        name = nodes[heapq.heappop(ready)].name
        order.append(name)
        for user in users[name]:
            pending[user] -= 1
            if pending[user] == 0:
                heapq.heappush(ready, position[user])
    if len(order) != len(nodes):
        stuck = sorted(n for n, c in pending.items() if c > 0)
        raise GraphError(f"graph has a cycle through {stuck[:5]}")
    return order


def topo_order(graph: Graph) -> list[str]:
    return topo_order_of(graph.nodes)


class GraphBuilder:
    """Incrementally assemble a graph. Every method returns the new node's name."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._names: set[str] = set()
        self._channels: dict[str, int] = {}
        self.inputs: list[str] = []

    def _add(self, node: Node, channels: int) -> str:
        if node.name in self._names:
            raise GraphError(f"duplicate node name {node.name!r}")
        self._nodes.append(node)
        self._names.add(node.name)
        self._channels[node.name] = channels
        return node.name

    def channels(self, name: str) -> int:
        return self._channels[name]

    def add_node(self, node: Node) -> str:
        """Insert a prebuilt node, e.g. when replaying part of another graph."""
        if node.kind == "input":
            self.inputs.append(node.name)
            return self._add(node, node.attrs.channels)
        if node.kind == "conv":
            c = node.attrs.out_channels
        elif node.kind == "linear":
            c = node.attrs.out_features
        elif node.kind == "concat":
            c = sum(self.channels(s) for s in node.inputs)
        else:
            c = self.channels(node.inputs[0])
        return self._add(node, c)

    def input(self, name: str = "data", channels: int = 3) -> str:
        self.inputs.append(name)
        return self._add(make_node(name, "input", (), InputSpec(channels)), channels)

    def conv(self, name, src, out_channels, kernel, stride=1, pad=None, groups=1, bias=False) -> str:
        spec = ConvSpec(
            self.channels(src), out_channels, kernel, kernel, stride,
            kernel // 2 if pad is None else pad, groups, bias,
        )
        return self._add(make_node(name, "conv", (src,), spec), out_channels)

    def bn(self, name, src, epsilon=1e-5) -> str:
        c = self.channels(src)
        return self._add(make_node(name, "bn", (src,), BnSpec(c, epsilon)), c)

    def relu(self, name, src) -> str:
        return self._add(make_node(name, "relu", (src,)), self.channels(src))

    def pool(self, name, src, mode, kernel, stride, ceil_mode=False, pad=0) -> str:
        spec = PoolSpec(mode, kernel, stride, ceil_mode, pad)
        return self._add(make_node(name, "pool", (src,), spec), self.channels(src))

    def gap(self, name, src) -> str:
        return self._add(make_node(name, "gap", (src,)), self.channels(src))

    def concat(self, name, srcs) -> str:
        return self._add(make_node(name, "concat", tuple(srcs)), sum(self.channels(s) for s in srcs))

    def add(self, name, a, b) -> str:
        if self.channels(a) != self.channels(b):
            raise ShapeError(f"{name}: add of {self.channels(a)} and {self.channels(b)} channels")
        return self._add(make_node(name, "add", (a, b)), self.channels(a))

    def linear(self, name, src, out_features, bias=True) -> str:
        spec = LinearSpec(self.channels(src), out_features, bias)
        return self._add(make_node(name, "linear", (src,), spec), out_features)

    def softmax(self, name, src) -> str:
        return self._add(make_node(name, "softmax", (src,)), self.channels(src))

    def conv_bn_relu(self, prefix, src, out_channels, kernel, stride=1, pad=None, groups=1,
                     order="post", activate=True) -> str:
        """Composite function. ``post``: conv-bn-relu. ``pre``: bn-relu-conv."""
        if order == "post":
            x = self.conv(f"{prefix}.conv", src, out_channels, kernel, stride, pad, groups)
            x = self.bn(f"{prefix}.bn", x)
            return self.relu(f"{prefix}.relu", x) if activate else x
        if order == "pre":
            x = self.bn(f"{prefix}.bn", src)
            x = self.relu(f"{prefix}.relu", x)
            return self.conv(f"{prefix}.conv", x, out_channels, kernel, stride, pad, groups)
        raise ValueError(f"unknown activation order {order!r}")

    def build(self, outputs: Sequence[str]) -> Graph:
        return Graph(self._nodes, self.inputs, outputs)


# -- shape inference ---------------------------------------------------------

Dims = tuple[int, int, int, int]


def _input_dims_map(graph: Graph, input_dims) -> dict[str, Dims]:
    if isinstance(input_dims, Mapping):
        dims = {k: tuple(v) for k, v in input_dims.items()}
    else:
        if len(graph.inputs) != 1:
            raise GraphError("graph has several inputs; pass a mapping of input dims")
        dims = {graph.inputs[0]: tuple(input_dims)}
    for name, d in dims.items():
        if len(d) != 4 or any(int(v) < 1 for v in d):
            raise ShapeError(f"input {name!r}: dims must be 4 positive integers, got {d}")
    return dims


def node_output_dims(node: Node, in_dims: Sequence[Dims]) -> Dims:
    """Symbolic output dims of one node, raising ShapeError on a precondition failure."""
    a = node.attrs
    kind = node.kind
    try:
        if kind == "conv":
            n, c, h, w = in_dims[0]
            if c != a.in_channels:
                raise ShapeError(f"input has {c} channels, expected {a.in_channels}")
            ho, wo = a.output_hw(h, w)
            return (n, a.out_channels, ho, wo)
        if kind == "bn":
            if in_dims[0][1] != a.channels:
                raise ShapeError(f"input has {in_dims[0][1]} channels, expected {a.channels}")
            return in_dims[0]
        if kind in ("relu", "softmax"):
            return in_dims[0]
        if kind == "pool":
            n, c, h, w = in_dims[0]
            return (
                n, c,
                ops.pool_output_size(h, a.kernel, a.stride, a.pad, a.ceil_mode),
                ops.pool_output_size(w, a.kernel, a.stride, a.pad, a.ceil_mode),
            )
        if kind == "gap":
            n, c, _, _ = in_dims[0]
            return (n, c, 1, 1)
        if kind == "concat":
            n, _, h, w = in_dims[0]
            for d in in_dims[1:]:
                if (d[0], d[2], d[3]) != (n, h, w):
                    raise ShapeError(f"concat spatial mismatch {in_dims[0]} vs {d}")
            return (n, sum(d[1] for d in in_dims), h, w)
        if kind == "add":
            if in_dims[0] != in_dims[1]:
                raise ShapeError(f"add shape mismatch {in_dims[0]} vs {in_dims[1]}")
            return in_dims[0]
        if kind == "linear":
            n, c, h, w = in_dims[0]
            if (h, w) != (1, 1) or c != a.in_features:
                raise ShapeError(f"linear expects (N,{a.in_features},1,1), got {in_dims[0]}")
            return (n, a.out_features, 1, 1)
    except ShapeError as exc:
        raise ShapeError(f"node {node.name!r} ({kind}): {exc}") from None
    raise GraphError(f"node {node.name!r}: cannot infer shape for kind {kind}")


def infer_shapes(graph: Graph, input_dims) -> dict[str, Dims]:
    dims = _input_dims_map(graph, input_dims)
    shapes: dict[str, Dims] = {}
    for node in graph.nodes:
        if node.kind == "input":
            if node.name not in dims:
                raise ShapeError(f"no dims given for input {node.name!r}")
            d = dims[node.name]
            if d[1] != node.attrs.channels:
                raise ShapeError(f"input {node.name!r} expects {node.attrs.channels} channels, got {d[1]}")
            shapes[node.name] = d
        else:
            shapes[node.name] = node_output_dims(node, [shapes[s] for s in node.inputs])
    return shapes


# -- execution ---------------------------------------------------------------

def check_weights(graph: Graph, weights: Mapping[str, np.ndarray]) -> None:
    for node in graph.nodes:
        for wname, shape in weight_shapes(node).items():
            if wname not in weights:
                raise WeightError(f"node {node.name!r}: missing weight {wname!r}")
            got = tuple(np.shape(weights[wname]))
            if got != shape:
                raise WeightError(f"node {node.name!r}: weight {wname!r} has shape {got}, expected {shape}")


def _run_node(node: Node, args: list[np.ndarray], weights: Mapping[str, np.ndarray]) -> np.ndarray:
    kind, a, name = node.kind, node.attrs, node.name
    if kind == "conv":
        bias = weights[f"{name}.bias"] if a.has_bias else None
        return ops.conv2d(args[0], weights[f"{name}.weight"], bias, a)
    if kind == "bn":
        params = ops.BnParams(*(weights[w] for w in node.weights), epsilon=a.epsilon)
        return ops.batch_norm_infer(args[0], params)
    if kind == "relu":
        return ops.relu(args[0])
    if kind == "pool":
        return ops.pool2d(args[0], a.mode, a.kernel, a.stride, a.ceil_mode, a.pad)
    if kind == "gap":
        return ops.global_avg_pool(args[0])
    if kind == "concat":
        return ops.concat_channels(args)
    if kind == "add":
        return ops.add(args[0], args[1])
    if kind == "linear":
        bias = weights[f"{name}.bias"] if a.has_bias else None
        return ops.linear(args[0], weights[f"{name}.weight"], bias)
    if kind == "softmax":
        return ops.softmax(args[0], axis=1)
    raise GraphError(f"cannot execute node kind {kind}")


def execute(graph: Graph, weights: Mapping[str, np.ndarray], inputs, check: bool = True) -> dict[str, np.ndarray]:
    """Run the graph and return ``{output name: tensor}``.

    ``inputs`` is a single tensor for one-input graphs or a name-keyed mapping.
    Intermediate activations are dropped as soon as their last consumer ran.
    """
    if not isinstance(inputs, Mapping):
        if len(graph.inputs) != 1:
            raise GraphError("graph has several inputs; pass a mapping")
        inputs = {graph.inputs[0]: inputs}
    feeds = {k: ops.as_tensor(v) for k, v in inputs.items()}
    if check:
        infer_shapes(graph, {k: v.shape for k, v in feeds.items()})
        check_weights(graph, weights)
    remaining = {n.name: 0 for n in graph.nodes}
    for node in graph.nodes:
        for src in node.inputs:
            remaining[src] += 1
    keep = set(graph.outputs)
    acts: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind == "input":
            acts[node.name] = feeds[node.name]
            continue
        acts[node.name] = _run_node(node, [acts[s] for s in node.inputs], weights)
        for src in node.inputs:
            remaining[src] -= 1
            if remaining[src] == 0 and src not in keep:
                acts.pop(src, None)
    return {name: acts[name] for name in graph.outputs}


# -- batch-norm folding --------------------------------------------------------

def fold_batchnorm(graph: Graph, weights: Mapping[str, np.ndarray]):
    """Merge every conv -> bn pair into a single biased conv.

    Returns ``(new_graph, new_weights)``; inputs are not modified. A bn whose
    producer is not a conv used only by that bn raises ``GraphError``.
    """
    users = graph.consumers()
    folded: dict[str, str] = {}  # bn name -> conv name
    for node in graph.nodes:
        if node.kind != "bn":
            continue
        src = graph[node.inputs[0]]
        if src.kind != "conv":
            raise GraphError(
                f"cannot fold bn {node.name!r}: producer {src.name!r} is {src.kind}, not conv "
                "(pre-activation ordering is not foldable)"
            )
        if users[src.name] != [node.name] or src.name in graph.outputs:
            raise GraphError(f"cannot fold bn {node.name!r}: conv {src.name!r} has other consumers")
        folded[node.name] = src.name

    new_weights = dict(weights)
    conv_to_bn = {c: b for b, c in folded.items()}
    nodes = []
    for node in graph.nodes:
        if node.kind == "bn":
            continue
        if node.name in conv_to_bn:
            bn = graph[conv_to_bn[node.name]]
            spec: ConvSpec = node.attrs
            params = ops.BnParams(*(weights[w] for w in bn.weights), epsilon=bn.attrs.epsilon)
            scale, shift = params.scale_shift()
            w = np.asarray(weights[f"{node.name}.weight"], dtype=np.float64)
            b = np.asarray(weights[f"{node.name}.bias"], dtype=np.float64) if spec.has_bias else 0.0
            new_weights[f"{node.name}.weight"] = (w * scale[:, None, None, None]).astype(np.float32)
            new_weights[f"{node.name}.bias"] = (shift + b * scale).astype(np.float32)
            for wname in bn.weights:
                new_weights.pop(wname, None)
            node = make_node(node.name, "conv", node.inputs, dataclasses.replace(spec, has_bias=True))
        inputs = [folded.get(s, s) for s in node.inputs]
        nodes.append(node.with_inputs(inputs))
    outputs = [folded.get(o, o) for o in graph.outputs]
    return Graph(nodes, graph.inputs, outputs), new_weights


# -- serialization -------------------------------------------------------------

def graph_to_dict(graph: Graph) -> dict:
    return {
        "format": GRAPH_FORMAT,
        "version": GRAPH_FORMAT_VERSION,
        "inputs": list(graph.inputs),
        "outputs": list(graph.outputs),
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "attrs": dataclasses.asdict(n.attrs) if n.attrs is not None else {},
                "weights": list(n.weights),
            }
            for n in graph.nodes
        ],
        "edges": [list(e) for e in graph.edges],
    }


def graph_from_dict(doc: Mapping) -> Graph:
    if doc.get("format") != GRAPH_FORMAT:
        raise GraphError(f"not a {GRAPH_FORMAT} document")
    if doc.get("version") != GRAPH_FORMAT_VERSION:
        raise GraphError(f"unsupported graph format version {doc.get('version')!r}")
    nodes = []
    try:
        for item in doc["nodes"]:
            kind = item["kind"]
            attr_type = ATTR_TYPES.get(kind)
            attrs = attr_type(**item["attrs"]) if attr_type else None
            nodes.append(Node(item["name"], kind, tuple(item["inputs"]), attrs, tuple(item["weights"])))
        graph = Graph(nodes, doc["inputs"], doc["outputs"])
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph document: {exc!r}") from None
    if "edges" in doc and sorted(map(tuple, doc["edges"])) != sorted(graph.edges):
        raise GraphError("edge list disagrees with node inputs")
    return graph


def dumps(obj: dict) -> str:
    """Canonical text form shared by graph and report documents."""
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_graph(graph: Graph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(graph_to_dict(graph)))


def load_graph(path) -> Graph:
    with open(path, encoding="utf-8") as fh:
        return graph_from_dict(json.load(fh))
