"""Pelee-SSD: detection head on a PeleeNet backbone, default boxes, decoding and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor_ops as ops
from .graph import Graph, GraphBuilder, GraphError, infer_shapes
from .tensor_ops import ShapeError

DEFAULT_FEATURE_MAPS = (
    (19, (30.4, 60.8)),
    (10, (112.5,)),
    (5, (164.2,)),
    (3, (215.8,)),
    (1, (267.4,)),
)
DEFAULT_ASPECT_RATIOS = (Fraction(1), Fraction(2), Fraction(1, 2), Fraction(3), Fraction(1, 3))

# backbone tensors used as detection sources, keyed by stride
BACKBONE_TAPS = {
    8: "stage2.transition.relu",   # 38x38 @304, before the stage-2 pool
    16: "stage2.transition.pool",  # 19x19 @304, input of stage 3
    32: "stage4.transition.relu",  # 10x10 @304, last backbone tensor
}


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 304
    feature_maps: tuple = DEFAULT_FEATURE_MAPS
    aspect_ratios: tuple = DEFAULT_ASPECT_RATIOS
    head_kernel: int = 1
    use_38x38: bool = False
    use_resblock: bool = True
    num_classes: int = 21
    variances: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    score_threshold: float = 0.01
    nms_iou_threshold: float = 0.45
    top_k: int = 200
    resblock_channels: tuple[int, int, int] = (128, 128, 320)
    extra_channels: tuple[int, int] = (128, 256)

    def __post_init__(self):
        if self.head_kernel not in (1, 3):
            raise ValueError(f"head_kernel must be 1 or 3, got {self.head_kernel}")
        if self.num_classes < 2:
            raise ValueError("num_classes counts background and must be >= 2")
        if not self.aspect_ratios or any(a <= 0 for a in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")
        sizes = [f for f, _ in self.feature_maps]
        if sizes != sorted(sizes, reverse=True) or len(set(sizes)) != len(sizes):
            raise ValueError(f"feature map sizes must be strictly decreasing, got {sizes}")

    @property
    def maps(self) -> tuple[tuple[int, tuple[float, ...]], ...]:
        """Feature maps actually used for prediction.

        With ``use_38x38`` the smallest default-box scale of the 19x19 map moves
        onto a 38x38 map, as in the original SSD layout.
        """
        maps = tuple((int(f), tuple(s)) for f, s in self.feature_maps)
        if not self.use_38x38 or any(f == 38 for f, _ in maps):
            return maps
        first_f, first_scales = maps[0]
        if len(first_scales) < 2:
            return ((38, first_scales[:1]),) + maps
        return ((38, first_scales[:1]), (first_f, first_scales[1:])) + maps[1:]

    def boxes_per_location(self) -> list[int]:
        return [len(scales) * len(self.aspect_ratios) for _, scales in self.maps]

    @property
    def num_priors(self) -> int:
        return sum(f * f * a for (f, _), a in zip(self.maps, self.boxes_per_location()))


@dataclass(frozen=True)
class PriorBox:
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]

    def to_line(self) -> str:
        xmin, ymin, xmax, ymax = self.box
        return f"{self.class_id} {self.score:.6f} {xmin:.6f} {ymin:.6f} {xmax:.6f} {ymax:.6f}"

    @classmethod
    def from_line(cls, line: str) -> "Detection":
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"detection record needs 6 fields, got {len(parts)}: {line!r}")
        return cls(int(parts[0]), float(parts[1]), tuple(float(p) for p in parts[2:]))


def format_detections(dets: Iterable[Detection]) -> str:
    """Line-oriented text: ``class score xmin ymin xmax ymax`` per detection."""
    return "".join(d.to_line() + "\n" for d in dets)


def parse_detections(text: str) -> list[Detection]:
    return [Detection.from_line(line) for line in text.splitlines() if line.strip() and not line.startswith("#")]


# -- graph construction ---------------------------------------------------------

def res_block(b: GraphBuilder, src: str, prefix: str, channels=(128, 128, 256)) -> str:
    """1x1 -> 3x3 -> 1x1 main path plus a 1x1 projection shortcut, summed then rectified."""
    c1, c2, c_out = channels
    x = b.conv_bn_relu(f"{prefix}.main.conv1", src, c1, 1)
    x = b.conv_bn_relu(f"{prefix}.main.conv2", x, c2, 3)
    x = b.conv_bn_relu(f"{prefix}.main.conv3", x, c_out, 1, activate=False)
    s = b.conv_bn_relu(f"{prefix}.shortcut", src, c_out, 1, activate=False)
    x = b.add(f"{prefix}.add", x, s)
    return b.relu(f"{prefix}.relu", x)


def build_res_block(in_channels: int, channels=(128, 128, 256)) -> Graph:
    b = GraphBuilder()
    x = b.input("data", in_channels)
    return b.build([res_block(b, x, "resblock", channels)])


def build_pelee_ssd(backbone: Graph, cfg: DetectorConfig = DetectorConfig()) -> Graph:
    """Attach extra layers, optional ResBlocks and 1x1/3x3 prediction heads to a PeleeNet backbone.

    Outputs are ``head{i}.loc`` and ``head{i}.conf`` for every prediction map, in map order.
    """
    shapes = infer_shapes(backbone, (1, 3, cfg.input_size, cfg.input_size))
    maps = cfg.maps
    sizes = [f for f, _ in maps]
    tap_size = {}
    for stride, name in BACKBONE_TAPS.items():
        if name in backbone:
            tap_size[name] = shapes[name][2]

    b = GraphBuilder()
    for node in backbone.nodes:
        if not node.name.startswith("classifier."):
            b.add_node(node)
    sources: list[str] = []
    remaining = list(sizes)
    for stride in sorted(BACKBONE_TAPS):
        name = BACKBONE_TAPS[stride]
        want = math.ceil(cfg.input_size / stride)
        if want not in remaining:
            continue
        if name not in tap_size or tap_size[name] != want:
            raise GraphError(f"backbone lacks a {want}x{want} tap at stride {stride} (expected node {name!r})")
        sources.append(name)
        remaining.remove(want)

    if not sources:
        raise GraphError("backbone provides none of the required feature maps")
    x = sources[-1]
    red, out = cfg.extra_channels
    h = tap_size[x]
    for i, f in enumerate(list(remaining), start=1):
        x = b.conv_bn_relu(f"extra{i}.conv1", x, red, 1)
        if (h - 1) // 2 + 1 == f:
            x = b.conv_bn_relu(f"extra{i}.conv2", x, out, 3, stride=2, pad=1)
        elif h - 2 == f:
            x = b.conv_bn_relu(f"extra{i}.conv2", x, out, 3, stride=1, pad=0)
        else:
            raise ShapeError(f"no 3x3 extra layer maps {h}x{h} to {f}x{f}")
        h = f
        sources.append(x)
    graph_so_far = b.build(sources)
    got = [infer_shapes(graph_so_far, (1, 3, cfg.input_size, cfg.input_size))[s][2] for s in sources]
    if got != sizes:
        raise ShapeError(f"feature maps {got} do not match configured sizes {sizes}")

    outputs = []
    k = cfg.head_kernel
    for i, (src, a) in enumerate(zip(sources, cfg.boxes_per_location())):
        feat = res_block(b, src, f"head{i}.resblock", cfg.resblock_channels) if cfg.use_resblock else src
        outputs.append(b.conv(f"head{i}.loc", feat, 4 * a, k, bias=True))
        outputs.append(b.conv(f"head{i}.conf", feat, cfg.num_classes * a, k, bias=True))
    return b.build(outputs)


def flatten_predictions(outputs: dict, cfg: DetectorConfig, batch_index: int = 0):
    """Reorder head outputs to prior order. Returns (loc (P, 4), conf (P, num_classes))."""
    locs, confs = [], []
    for i, a in enumerate(cfg.boxes_per_location()):
        loc = outputs[f"head{i}.loc"][batch_index]
        conf = outputs[f"head{i}.conf"][batch_index]
        if loc.shape[0] != 4 * a or conf.shape[0] != cfg.num_classes * a:
            raise ShapeError(f"head {i}: channel counts {loc.shape[0]}/{conf.shape[0]} do not match {a} boxes")
        # (A*4, H, W) -> (H, W, A*4): cell-major, then anchor, then coordinate
        locs.append(loc.transpose(1, 2, 0).reshape(-1, 4))
        confs.append(conf.transpose(1, 2, 0).reshape(-1, cfg.num_classes))
    return np.concatenate(locs), np.concatenate(confs)


# -- default boxes --------------------------------------------------------------

def generate_priors(cfg: DetectorConfig = DetectorConfig()) -> list[PriorBox]:
    """Default boxes ordered by map, cell (row, then column), scale, aspect ratio."""
    priors = []
    for f, scales in cfg.maps:
        shapes = []
        for s in scales:
            for ar in cfg.aspect_ratios:
                r = math.sqrt(float(ar))
                shapes.append((s * r / cfg.input_size, s / (r * cfg.input_size)))
        for i in range(f):
            cy = (i + 0.5) / f
            for j in range(f):
                cx = (j + 0.5) / f
                for w, h in shapes:
                    priors.append(PriorBox(_clip(cx), _clip(cy), _clip(w), _clip(h)))
    return priors


def _clip(v: float) -> float:
    return min(max(v, 0.0), 1.0)


def priors_array(priors: Sequence[PriorBox]) -> np.ndarray:
    return np.array([(p.cx, p.cy, p.w, p.h) for p in priors], dtype=np.float64).reshape(-1, 4)


def decode_boxes(loc, priors, variances=(0.1, 0.1, 0.2, 0.2)) -> np.ndarray:
    """Offsets (P, 4) or flat (4P,) -> clipped corner boxes (P, 4) as xmin, ymin, xmax, ymax."""
    p = priors if isinstance(priors, np.ndarray) else priors_array(priors)
    loc = np.asarray(loc, dtype=np.float64)
    if loc.size != 4 * len(p):
        raise ShapeError(f"{loc.size} offsets for {len(p)} priors (need {4 * len(p)})")
    loc = loc.reshape(-1, 4)
    v0, v1, v2, v3 = variances
    cx = p[:, 0] + loc[:, 0] * v0 * p[:, 2]
    cy = p[:, 1] + loc[:, 1] * v1 * p[:, 3]
    w = p[:, 2] * np.exp(loc[:, 2] * v2)
    h = p[:, 3] * np.exp(loc[:, 3] * v3)
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(boxes, 0.0, 1.0)


# -- suppression and postprocessing -----------------------------------------------

def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_indices(boxes, scores, iou_threshold: float, top_k: Optional[int] = None) -> list[int]:
    """Greedy NMS; returns kept indices in descending score, ties to the lower index."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    if not order:
        return []
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(scores), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        if top_k is not None and len(keep) >= top_k:
            break
        ix = np.clip(np.minimum(x2, x2[i]) - np.maximum(x1, x1[i]), 0, None)
        iy = np.clip(np.minimum(y2, y2[i]) - np.maximum(y1, y1[i]), 0, None)
        inter = ix * iy
        union = areas + areas[i] - inter
        overlap = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        alive &= ~(overlap > iou_threshold)
    return keep


def nms(detections: Sequence[Detection], iou_threshold: float, top_k: Optional[int] = None) -> list[Detection]:
    if not detections:
        return []
    boxes = [d.box for d in detections]
    scores = [d.score for d in detections]
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold, top_k)]


def class_probabilities(conf_logits) -> np.ndarray:
    """Softmax over classes for (P, num_classes) logits."""
    return ops.softmax(np.asarray(conf_logits, dtype=np.float32), axis=-1)


def postprocess(conf, loc, priors, cfg: DetectorConfig = DetectorConfig()) -> list[Detection]:
    """Class probabilities (P, C) and offsets (P, 4) -> final detections.

    Class 0 is background. Per class: threshold, decode, NMS; then the global
    top ``cfg.top_k`` by score (ties by class id, then prior index).
    """
    p = priors if isinstance(priors, np.ndarray) else priors_array(priors)
    n = len(p)
    conf = np.asarray(conf, dtype=np.float64)
    if conf.size != cfg.num_classes * n:
        raise ShapeError(f"{conf.size} confidences for {n} priors x {cfg.num_classes} classes")
    conf = conf.reshape(n, cfg.num_classes)
    boxes = decode_boxes(loc, p, cfg.variances)
    found = []
    for cls in range(1, cfg.num_classes):
        scores = conf[:, cls]
        idx = np.flatnonzero(scores > cfg.score_threshold)
        if idx.size == 0:
            continue
        kept = nms_indices(boxes[idx], scores[idx], cfg.nms_iou_threshold, cfg.top_k)
        for k in kept:
            i = int(idx[k])
            found.append((-float(scores[i]), cls, i))
    found.sort()
    return [
        Detection(cls, -neg, tuple(float(v) for v in boxes[i]))
        for neg, cls, i in found[: cfg.top_k]
    ]
