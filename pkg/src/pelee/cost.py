"""Static cost accounting: multiply-accumulates, parameter counts and a text summary.

FLOPs follow the multiply-accumulate convention: only conv and linear nodes
contribute. Batch-norm running statistics are part of ``total_params`` but are
also broken out so that the learned-only count is available.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .graph import Graph, Node, infer_shapes


@dataclass(frozen=True)
class NodeCost:
    name: str
    kind: str
    flops: int
    params: int
    learned_params: int
    output_shape: Optional[tuple[int, int, int, int]] = None


@dataclass
class CostReport:
    per_node: list[NodeCost] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(c.flops for c in self.per_node)

    @property
    def total_params(self) -> int:
        return sum(c.params for c in self.per_node)

    @property
    def learned_params(self) -> int:
        return sum(c.learned_params for c in self.per_node)

    @property
    def running_stat_params(self) -> int:
        return self.total_params - self.learned_params

    @property
    def conv_layer_count(self) -> int:
        return sum(1 for c in self.per_node if c.kind == "conv")

    def subset(self, prefix: str) -> "CostReport":
        return CostReport([c for c in self.per_node if c.name.startswith(prefix)])

    def to_dict(self) -> dict:
        return {
            "total_flops": self.total_flops,
            "total_params": self.total_params,
            "learned_params": self.learned_params,
            "conv_layer_count": self.conv_layer_count,
            "per_node": [
                {
                    "name": c.name,
                    "kind": c.kind,
                    "flops": c.flops,
                    "params": c.params,
                    "learned_params": c.learned_params,
                    "output_shape": list(c.output_shape) if c.output_shape else None,
                }
                for c in self.per_node
            ],
        }


def node_params(node: Node) -> tuple[int, int]:
    """(total, learned) parameter count of a node."""
    a = node.attrs
    if node.kind == "conv":
        n = a.out_channels * (a.in_channels // a.groups) * a.kernel_h * a.kernel_w
        n += a.out_channels if a.has_bias else 0
        return n, n
    if node.kind == "bn":
        return 4 * a.channels, 2 * a.channels
    if node.kind == "linear":
        n = a.in_features * a.out_features + (a.out_features if a.has_bias else 0)
        return n, n
    return 0, 0


def node_flops(node: Node, output_shape) -> int:
    a = node.attrs
    if node.kind == "conv":
        _, c, h, w = output_shape
        return h * w * c * (a.in_channels // a.groups) * a.kernel_h * a.kernel_w
    if node.kind == "linear":
        return a.in_features * a.out_features
    return 0


def analyze(graph: Graph, input_dims=None) -> CostReport:
    """Per-node costs. FLOPs need ``input_dims``; without them they are left at 0."""
    shapes = infer_shapes(graph, input_dims) if input_dims is not None else {}
    report = CostReport()
    for node in graph.nodes:
        shape = shapes.get(node.name)
        # per-image MACs: batch dimension is not multiplied in
        flops = node_flops(node, shape) if shape is not None else 0
        total, learned = node_params(node)
        report.per_node.append(NodeCost(node.name, node.kind, flops, total, learned, shape))
    return report


def count_flops(graph: Graph, input_dims) -> CostReport:
    return analyze(graph, input_dims)


def count_params(graph: Graph) -> CostReport:
    return analyze(graph)


def _fmt_shape(shape) -> str:
    if shape is None:
        return "-"
    return "x".join(str(d) for d in shape[1:])


def summarize(graph: Graph, input_dims=None) -> str:
    """Fixed-width table: one row per node, then totals."""
    report = analyze(graph, input_dims)
    name_w = max([len("name")] + [len(c.name) for c in report.per_node])
    header = f"{'name':<{name_w}}  {'kind':<7}  {'output (CxHxW)':>16}  {'params':>10}  {'MACs':>14}"
    lines = [header, "-" * len(header)]
    for c in report.per_node:
        lines.append(
            f"{c.name:<{name_w}}  {c.kind:<7}  {_fmt_shape(c.output_shape):>16}  {c.params:>10,}  {c.flops:>14,}"
        )
    if report.per_node:
        lines.append("-" * len(header))
        lines.append(f"total MACs:        {report.total_flops:,}")
        lines.append(f"total params:      {report.total_params:,}")
        lines.append(f"learned params:    {report.learned_params:,}")
        lines.append(f"conv_layer_count:  {report.conv_layer_count}")
    return "\n".join(lines) + "\n"
