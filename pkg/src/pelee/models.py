"""Builders for PeleeNet (with ablation toggles), DenseNet-41 and MobileNet-v1."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .graph import Graph, GraphBuilder


@dataclass(frozen=True)
class PeleeConfig:
    growth_rate: int = 32
    stage_layers: tuple[int, int, int, int] = (3, 4, 8, 6)
    bottleneck_width: tuple[int, int, int, int] = (1, 2, 4, 4)
    use_stem: bool = True
    two_way: bool = True
    dynamic_bottleneck: bool = True
    compression: Fraction = Fraction(1)
    activation_order: str = "post"
    extra_dense_layers: int = 0
    num_classes: int = 1000

    def __post_init__(self):
        if self.growth_rate % 2:
            raise ValueError(f"growth rate must be even, got {self.growth_rate}")
        if not 0 < self.compression <= 1:
            raise ValueError(f"compression factor must lie in (0, 1], got {self.compression}")
        if self.activation_order not in ("post", "pre"):
            raise ValueError(f"activation_order must be 'post' or 'pre', got {self.activation_order!r}")
        if self.extra_dense_layers < 0:
            raise ValueError("extra_dense_layers must be non-negative")

    @property
    def layers_per_stage(self) -> tuple[int, ...]:
        """Dense layers per stage; extra layers go to the last stage."""
        layers = list(self.stage_layers)
        layers[-1] += self.extra_dense_layers
        return tuple(layers)


def bottleneck_channels(in_channels: int, k: int, stage_index: int, cfg: PeleeConfig) -> int:
    """Width of the 1x1 bottleneck conv of one dense-layer branch."""
    if in_channels < 1:
        raise ValueError("in_channels must be positive")
    if not cfg.dynamic_bottleneck:
        return 4 * k
    width = (k // 2) * cfg.bottleneck_width[stage_index]
    if width > in_channels / 2:
        width = 4 * (in_channels // 8) if in_channels >= 8 else 1
    return width


def stem_block(b: GraphBuilder, src: str, cfg: PeleeConfig, prefix: str = "stem") -> str:
    order = cfg.activation_order
    x = b.conv_bn_relu(f"{prefix}.conv1", src, 32, 3, stride=2, order="post")
    branch = b.conv_bn_relu(f"{prefix}.branch_a.conv1", x, 16, 1, order=order)
    branch = b.conv_bn_relu(f"{prefix}.branch_a.conv2", branch, 32, 3, stride=2, order=order)
    pooled = b.pool(f"{prefix}.branch_b.pool", x, "max", 2, 2, ceil_mode=True)
    x = b.concat(f"{prefix}.concat", [branch, pooled])
    return b.conv_bn_relu(f"{prefix}.conv2", x, 32, 1, order=order)


def dense_layer(b: GraphBuilder, src: str, k: int, stage_index: int, cfg: PeleeConfig, prefix: str) -> str:
    in_c = b.channels(src)
    width = bottleneck_channels(in_c, k, stage_index, cfg)
    order = cfg.activation_order
    if not cfg.two_way:
        x = b.conv_bn_relu(f"{prefix}.conv1", src, width, 1, order=order)
        x = b.conv_bn_relu(f"{prefix}.conv2", x, k, 3, order=order)
        return b.concat(f"{prefix}.concat", [src, x])
    half = k // 2
    a = b.conv_bn_relu(f"{prefix}.branch_a.conv1", src, width, 1, order=order)
    a = b.conv_bn_relu(f"{prefix}.branch_a.conv2", a, half, 3, order=order)
    c = b.conv_bn_relu(f"{prefix}.branch_b.conv1", src, width, 1, order=order)
    c = b.conv_bn_relu(f"{prefix}.branch_b.conv2", c, half, 3, order=order)
    c = b.conv_bn_relu(f"{prefix}.branch_b.conv3", c, half, 3, order=order)
    return b.concat(f"{prefix}.concat", [src, a, c])


def transition(b: GraphBuilder, src: str, compression, with_pool: bool, prefix: str, order: str = "post") -> str:
    out_c = round(Fraction(compression) * b.channels(src))
    if out_c < 1:
        raise ValueError(f"{prefix}: compression leaves no channels")
    x = b.conv_bn_relu(prefix, src, out_c, 1, order=order)
    if with_pool:
        x = b.pool(f"{prefix}.pool", x, "avg", 2, 2, ceil_mode=True)
    return x


def peleenet_features(b: GraphBuilder, src: str, cfg: PeleeConfig) -> list[str]:
    """Stem plus four stages. Returns the output node name of every stage (stem first)."""
    order = cfg.activation_order
    k = cfg.growth_rate
    if cfg.use_stem:
        x = stem_block(b, src, cfg)
    else:
        # plain stride-4 front end at the same width: conv 3x3/2 then 2x2 max pool
        x = b.conv_bn_relu("stem.conv1", src, 32, 3, stride=2, order="post")
        x = b.pool("stem.pool", x, "max", 2, 2, ceil_mode=True)
    outs = [x]
    n_stages = len(cfg.stage_layers)
    for s, n_layers in enumerate(cfg.layers_per_stage):
        for i in range(n_layers):
            x = dense_layer(b, x, k, s, cfg, f"stage{s + 1}.dense{i + 1}")
        last = s == n_stages - 1
        x = transition(b, x, cfg.compression, not last, f"stage{s + 1}.transition", order)
        outs.append(x)
    if order == "pre":
        x = b.bn("final.bn", x)
        x = b.relu("final.relu", x)
        outs[-1] = x
    return outs


def build_peleenet(cfg: PeleeConfig = PeleeConfig()) -> Graph:
    b = GraphBuilder()
    x = b.input("data", 3)
    x = peleenet_features(b, x, cfg)[-1]
    x = b.gap("classifier.gap", x)
    x = b.linear("classifier.fc", x, cfg.num_classes)
    x = b.softmax("classifier.softmax", x)
    return b.build([x])


def build_densenet41(block_layers=(4, 6, 8, 6), growth_rate: int = 32, compression=Fraction(1, 2),
                     activation_order: str = "pre", num_classes: int = 1000) -> Graph:
    """DenseNet baseline: 3x3/24 first conv, single-branch 4k bottleneck layers, compressed transitions."""
    order = activation_order
    b = GraphBuilder()
    x = b.input("data", 3)
    x = b.conv_bn_relu("stem.conv1", x, 24, 3, stride=2, order="post")
    x = b.pool("stem.pool", x, "max", 2, 2, ceil_mode=True)
    k = growth_rate
    n_blocks = len(block_layers)
    for s, n_layers in enumerate(block_layers):
        for i in range(n_layers):
            prefix = f"stage{s + 1}.dense{i + 1}"
            y = b.conv_bn_relu(f"{prefix}.conv1", x, 4 * k, 1, order=order)
            y = b.conv_bn_relu(f"{prefix}.conv2", y, k, 3, order=order)
            x = b.concat(f"{prefix}.concat", [x, y])
        if s < n_blocks - 1:
            out_c = max(1, math.floor(Fraction(compression) * b.channels(x)))
            x = b.conv_bn_relu(f"stage{s + 1}.transition", x, out_c, 1, order=order)
            x = b.pool(f"stage{s + 1}.transition.pool", x, "avg", 2, 2, ceil_mode=True)
    if order == "pre":
        x = b.bn("final.bn", x)
        x = b.relu("final.relu", x)
    x = b.gap("classifier.gap", x)
    x = b.linear("classifier.fc", x, num_classes)
    x = b.softmax("classifier.softmax", x)
    return b.build([x])


# (output channels, stride) of the 13 depthwise-separable units
MOBILENET_UNITS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)


def build_mobilenet_v1(width_multiplier: float = 1.0, num_classes: int = 1000) -> Graph:
    def width(c):
        return max(8, int(c * width_multiplier))

    b = GraphBuilder()
    x = b.input("data", 3)
    x = b.conv_bn_relu("conv1", x, width(32), 3, stride=2)
    for i, (out_c, stride) in enumerate(MOBILENET_UNITS, start=1):
        c = b.channels(x)
        x = b.conv_bn_relu(f"unit{i}.depthwise", x, c, 3, stride=stride, groups=c)
        x = b.conv_bn_relu(f"unit{i}.pointwise", x, width(out_c), 1)
    x = b.gap("classifier.gap", x)
    x = b.linear("classifier.fc", x, num_classes)
    x = b.softmax("classifier.softmax", x)
    return b.build([x])


def cosine_lr(t: float, base_lr: float, total_epochs: int = 120) -> float:
    """Cosine-annealed learning rate for epoch ``t``."""
    if not 0 <= t <= total_epochs:
        raise ValueError(f"epoch {t} outside [0, {total_epochs}]")
    return 0.5 * base_lr * (math.cos(math.pi * t / total_epochs) + 1)


PRESETS: dict[str, Callable[[], Graph]] = {
    "peleenet": lambda: build_peleenet(PeleeConfig()),
    "densenet41": lambda: build_densenet41(),
    "mobilenet_v1": lambda: build_mobilenet_v1(),
}

# single-knob departures from the default PeleeNet
ABLATIONS: dict[str, dict] = {
    "peleenet-no-stem": {"use_stem": False},
    "peleenet-one-way": {"two_way": False},
    "peleenet-fixed-bottleneck": {"dynamic_bottleneck": False},
    "peleenet-compressed": {"compression": Fraction(1, 2)},
    "peleenet-preact": {"activation_order": "pre"},
    "peleenet-deep": {"extra_dense_layers": 3},
}

for _name, _overrides in ABLATIONS.items():
    PRESETS[_name] = (lambda o: lambda: build_peleenet(dataclasses.replace(PeleeConfig(), **o)))(_overrides)


def preset_names() -> list[str]:
    return sorted(PRESETS)


def build_preset(name: str) -> Graph:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown model preset {name!r}; choose from {', '.join(preset_names())}") from None
    return factory()


@dataclass(frozen=True)
class LayerSaving:
    layer: str
    in_channels: int
    dynamic_width: int
    fixed_width: int
    dynamic_macs: int
    fixed_macs: int

    @property
    def saving(self) -> float:
        return 1.0 - self.dynamic_macs / self.fixed_macs


def dense_layer_savings(cfg: PeleeConfig = PeleeConfig(), input_size: int = 224, n_layers: int = 4) -> list[LayerSaving]:
    """MACs of the first ``n_layers`` dense layers with dynamic vs fixed (4k) bottlenecks."""
    from .cost import analyze

    dims = (1, 3, input_size, input_size)
    dyn_cfg = dataclasses.replace(cfg, dynamic_bottleneck=True)
    fix_cfg = dataclasses.replace(cfg, dynamic_bottleneck=False)
    dyn = {c.name: c for c in analyze(build_peleenet(dyn_cfg), dims).per_node}
    fix = {c.name: c for c in analyze(build_peleenet(fix_cfg), dims).per_node}
    g = build_peleenet(dyn_cfg)
    out = []
    for s, count in enumerate(cfg.layers_per_stage):
        for i in range(count):
            if len(out) == n_layers:
                return out
            prefix = f"stage{s + 1}.dense{i + 1}."
            first = next(n for n in g.nodes if n.name.startswith(prefix) and n.kind == "conv")
            in_c = first.attrs.in_channels
            out.append(LayerSaving(
                prefix[:-1], in_c,
                bottleneck_channels(in_c, cfg.growth_rate, s, dyn_cfg),
                bottleneck_channels(in_c, cfg.growth_rate, s, fix_cfg),
                sum(c.flops for n, c in dyn.items() if n.startswith(prefix)),
                sum(c.flops for n, c in fix.items() if n.startswith(prefix)),
            ))
    return out
