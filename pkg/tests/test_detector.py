import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pelee.cost import analyze
from pelee.detector import (
    Detection, DetectorConfig, PriorBox, build_pelee_ssd, build_res_block, class_probabilities, decode_boxes,
    flatten_predictions, format_detections, generate_priors, iou, nms, nms_indices, parse_detections, postprocess,
    priors_array,
)
from pelee.graph import GraphError, execute, infer_shapes
from pelee.tensor_ops import ShapeError
from pelee.models import build_mobilenet_v1, build_peleenet
from pelee.weights import init_weights


def encode_boxes(boxes, priors, variances=(0.1, 0.1, 0.2, 0.2)):
    """Inverse of decode_boxes for unclipped corner boxes (test-only)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    p = priors_array(priors) if not isinstance(priors, np.ndarray) else priors
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([
        (cx - p[:, 0]) / (variances[0] * p[:, 2]),
        (cy - p[:, 1]) / (variances[1] * p[:, 3]),
        np.log(w / p[:, 2]) / variances[2],
        np.log(h / p[:, 3]) / variances[3],
    ], axis=1)


def brute_force_nms(boxes, scores, threshold):
    """Pure-Python greedy NMS over a score-sorted candidate list."""
    def overlap(a, b):
        ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
        iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
        union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - ix * iy
        return ix * iy / union if union > 0 else 0.0

    candidates = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    while candidates:
        best = candidates.pop(0)
        keep.append(best)
        candidates = [i for i in candidates if not overlap(boxes[best], boxes[i]) > threshold]
    return keep


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.5, (n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)


class TestPriors:
    def test_default_count(self):
        priors = generate_priors()
        assert len(priors) == DetectorConfig().num_priors == 4285

    def test_count_with_38_map(self):
        assert DetectorConfig(use_38x38=True).num_priors == 38 * 38 * 5 + 4285 - 19 * 19 * 5

    def test_all_clipped(self):
        p = priors_array(generate_priors())
        assert p.min() >= 0 and p.max() <= 1

    def test_last_map_square_prior(self):
        last = generate_priors()[-5]
        assert (last.cx, last.cy) == (0.5, 0.5)
        assert last.w == pytest.approx(267.4 / 304) == pytest.approx(0.8796, abs=1e-4)

    def test_wide_prior_is_clipped(self):
        cfg = DetectorConfig(feature_maps=((1, (300.0,)),), aspect_ratios=(2,))
        (p,) = generate_priors(cfg)
        assert p.w == 1.0 and p.h == pytest.approx(300 / math.sqrt(2) / 304)

    def test_order_is_cell_major(self):
        priors = generate_priors()
        assert priors[0].cx == priors[9].cx == pytest.approx(0.5 / 19)
        assert priors[10].cx == pytest.approx(1.5 / 19)


class TestDecode:
    def test_zero_offsets_give_prior(self):
        priors = [PriorBox(0.5, 0.5, 0.2, 0.4)]
        np.testing.assert_allclose(decode_boxes(np.zeros(4), priors), [[0.4, 0.3, 0.6, 0.7]])

    def test_width_doubles(self):
        priors = [PriorBox(0.5, 0.5, 0.2, 0.2)]
        out = decode_boxes([0, 0, math.log(2) / 0.2, 0], priors)
        np.testing.assert_allclose(out, [[0.3, 0.4, 0.7, 0.6]])

    def test_scalar_oracle(self):
        p = PriorBox(0.3, 0.6, 0.1, 0.2)
        loc = [1.0, -2.0, 0.5, -0.5]
        cx = 0.3 + 1.0 * 0.1 * 0.1
        cy = 0.6 - 2.0 * 0.1 * 0.2
        w = 0.1 * math.exp(0.1)
        h = 0.2 * math.exp(-0.1)
        np.testing.assert_allclose(decode_boxes(loc, [p])[0], [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])

    def test_output_clipped(self):
        out = decode_boxes([[0, 0, 20, 20]], [PriorBox(0.5, 0.5, 0.5, 0.5)])
        np.testing.assert_array_equal(out, [[0, 0, 1, 1]])

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            decode_boxes(np.zeros(5), [PriorBox(0.5, 0.5, 0.1, 0.1)])

    def test_round_trip(self, rng):
        priors = priors_array(generate_priors())
        idx = rng.choice(len(priors), 500, replace=False)
        p = priors[idx]
        # boxes well inside the unit square so clipping does not interfere
        cx, cy = rng.uniform(0.3, 0.7, (2, 500))
        w, h = rng.uniform(0.05, 0.5, (2, 500))
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        assert np.abs(decode_boxes(encode_boxes(boxes, p), p) - boxes).max() <= 1e-6


class TestNms:
    def test_iou_examples(self):
        assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0
        assert iou((0, 0, 2, 1), (1, 0, 3, 1)) == pytest.approx(1 / 3)
        assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0

    def test_suppresses_overlap(self):
        boxes = [(0, 0, 1, 1), (0.05, 0, 1.05, 1), (2, 2, 3, 3)]
        assert nms_indices(boxes, [0.9, 0.8, 0.7], 0.45) == [0, 2]

    def test_threshold_is_strict(self):
        boxes = [(0, 0, 2, 1), (1, 0, 3, 1)]  # IoU exactly 1/3
        assert nms_indices(boxes, [0.9, 0.8], 1 / 3) == [0, 1]

    def test_ties_prefer_lower_index(self):
        boxes = [(0, 0, 1, 1), (0, 0, 1, 1)]
        assert nms_indices(boxes, [0.5, 0.5], 0.45) == [0]

    def test_top_k(self):
        boxes = [(i, 0, i + 1, 1) for i in range(5)]
        assert nms_indices(boxes, [0.1, 0.5, 0.3, 0.4, 0.2], 0.45, top_k=2) == [1, 3]

    def test_empty(self):
        assert nms_indices(np.zeros((0, 4)), [], 0.45) == []
        assert nms([], 0.45) == []

    def test_detection_wrapper(self):
        dets = [Detection(1, 0.5, (0, 0, 1, 1)), Detection(1, 0.9, (0, 0, 1, 1))]
        assert nms(dets, 0.45) == [dets[1]]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_subset_in_score_order(self, seed, n):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, n)
        scores = rng.integers(0, 4, n) / 3
        keep = nms_indices(boxes, scores, 0.45)
        assert len(set(keep)) == len(keep) and set(keep) <= set(range(n))
        assert keep == sorted(keep, key=lambda i: (-scores[i], i))

    def test_matches_brute_force(self, rng):
        for _ in range(600):
            n = int(rng.integers(1, 13))
            boxes = random_boxes(rng, n)
            # coarse scores to exercise ties
            scores = rng.integers(0, 5, n) / 4
            threshold = float(rng.choice([0.3, 0.45, 0.7]))
            assert nms_indices(boxes, scores, threshold) == brute_force_nms(boxes.tolist(), scores.tolist(), threshold)


class TestPostprocess:
    def test_all_background(self):
        priors = generate_priors()
        conf = np.zeros((len(priors), 21))
        conf[:, 0] = 1
        assert postprocess(conf, np.zeros((len(priors), 4)), priors) == []

    def test_single_prior(self):
        cfg = DetectorConfig(num_classes=3)
        priors = [PriorBox(0.5, 0.5, 0.2, 0.2)]
        dets = postprocess([[0.1, 0.2, 0.7]], np.zeros((1, 4)), priors, cfg)
        assert [(d.class_id, d.score) for d in dets] == [(2, 0.7), (1, 0.2)]
        assert dets[0].box == pytest.approx((0.4, 0.4, 0.6, 0.6))

    def test_three_prior_trace(self):
        cfg = DetectorConfig(num_classes=2)
        priors = [PriorBox(0.3, 0.3, 0.2, 0.2), PriorBox(0.31, 0.3, 0.2, 0.2), PriorBox(0.7, 0.7, 0.2, 0.2)]
        conf = [[0.2, 0.8], [0.1, 0.9], [0.995, 0.005]]
        dets = postprocess(conf, np.zeros((3, 4)), priors, cfg)
        # prior 1 suppresses its near-duplicate prior 0; prior 2 is below the score threshold
        assert len(dets) == 1
        assert dets[0].score == 0.9 and dets[0].box == pytest.approx((0.21, 0.2, 0.41, 0.4))

    def test_top_k_and_order(self, rng):
        cfg = DetectorConfig(num_classes=4, top_k=7)
        priors = generate_priors(DetectorConfig(feature_maps=((5, (100.0,)),), aspect_ratios=(1,)))
        conf = class_probabilities(rng.standard_normal((len(priors), 4)))
        dets = postprocess(conf, np.zeros((len(priors), 4)), priors, cfg)
        assert len(dets) == 7
        keys = [(-d.score, d.class_id) for d in dets]
        assert keys == sorted(keys)

    def test_text_round_trip(self):
        dets = [Detection(3, 0.25, (0.1, 0.2, 0.3, 0.4)), Detection(1, 0.125, (0, 0, 1, 1))]
        assert parse_detections(format_detections(dets)) == dets


class TestResBlock:
    @pytest.mark.parametrize("out", [256, 320])
    def test_shape_and_convs(self, out):
        g = build_res_block(704, (128, 128, out))
        assert g.count("conv") == 4
        assert infer_shapes(g, (1, 704, 10, 10))["resblock.relu"] == (1, out, 10, 10)

    def test_identity_shortcut(self, rng):
        g = build_res_block(6, (4, 4, 6))
        w = init_weights(g)
        for name in w:
            if name.startswith("resblock.main.") and name.endswith(".weight"):
                w[name][...] = 0
            elif name.endswith((".beta", ".running_mean")):
                w[name][...] = 0
            elif name.endswith((".gamma", ".running_var")):
                w[name][...] = 1
        w["resblock.shortcut.conv.weight"] = np.eye(6, dtype=np.float32).reshape(6, 6, 1, 1)
        x = rng.standard_normal((1, 6, 4, 4)).astype(np.float32)
        out = execute(g, w, x)["resblock.relu"]
        np.testing.assert_allclose(out, np.maximum(x, 0), atol=1e-4)

    def test_output_is_nonnegative(self, rng):
        g = build_res_block(8, (4, 4, 6))
        out = execute(g, init_weights(g), rng.standard_normal((1, 8, 5, 5)))["resblock.relu"]
        assert out.min() >= 0


@pytest.fixture(scope="module")
def backbone():
    return build_peleenet()


class TestPeleeSsd:
    @pytest.mark.parametrize("head_kernel,resblock,use38", list(itertools.product((1, 3), (True, False), (True, False))))
    def test_heads_cover_priors(self, backbone, head_kernel, resblock, use38):
        cfg = DetectorConfig(head_kernel=head_kernel, use_resblock=resblock, use_38x38=use38)
        g = build_pelee_ssd(backbone, cfg)
        shapes = infer_shapes(g, (1, 3, 304, 304))
        total = 0
        for i, ((f, _), a) in enumerate(zip(cfg.maps, cfg.boxes_per_location())):
            assert shapes[f"head{i}.loc"] == (1, 4 * a, f, f)
            assert shapes[f"head{i}.conf"] == (1, cfg.num_classes * a, f, f)
            total += f * f * a
        assert total == cfg.num_priors == len(generate_priors(cfg))

    def test_flatten_matches_priors(self, pelee_ssd, pelee_ssd_weights, rng):
        cfg = DetectorConfig()
        outs = execute(pelee_ssd, pelee_ssd_weights, rng.uniform(-1, 1, (1, 3, 304, 304)).astype(np.float32))
        loc, conf = flatten_predictions(outs, cfg)
        assert loc.shape == (4285, 4) and conf.shape == (4285, 21)
        # prior order: first cell of map 0, anchors 0..4
        np.testing.assert_array_equal(loc[1], outs["head0.loc"][0, 4:8, 0, 0])
        dets = postprocess(class_probabilities(conf), loc, generate_priors(cfg), cfg)
        assert len(dets) <= cfg.top_k

    def test_no_classifier_nodes(self, pelee_ssd):
        assert not any(n.name.startswith("classifier.") for n in pelee_ssd.nodes)

    def test_missing_tap(self):
        with pytest.raises(GraphError, match="lacks a 19x19 tap"):
            build_pelee_ssd(build_mobilenet_v1(), DetectorConfig())

    def test_wrong_input_size(self, backbone):
        with pytest.raises(ShapeError, match="19x19"):
            build_pelee_ssd(backbone, DetectorConfig(input_size=320))

    def test_head_cost_ratio_report(self, backbone):
        dims = (1, 3, 304, 304)
        one = analyze(build_pelee_ssd(backbone, DetectorConfig(head_kernel=1)), dims)
        three = analyze(build_pelee_ssd(backbone, DetectorConfig(head_kernel=3)), dims)
        heads1 = sum(c.flops for c in one.per_node if c.name.endswith((".loc", ".conf")))
        heads3 = sum(c.flops for c in three.per_node if c.name.endswith((".loc", ".conf")))
        # a 3x3 head does exactly 9x the work of a 1x1 head of the same width
        assert heads3 == 9 * heads1
        whole = 1 - one.total_flops / three.total_flops
        print(f"1x1 heads: {one.total_flops / 1e6:.1f}M MACs, 3x3 heads: {three.total_flops / 1e6:.1f}M MACs; "
              f"whole-network reduction {100 * whole:.1f}%, head-layer reduction {100 * (1 - heads1 / heads3):.1f}%")
        assert 0 < whole < 1

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
    def test_class_probabilities_rows_sum_to_one(self, logits):
        p = class_probabilities([logits])
        assert abs(float(p.sum()) - 1) < 1e-6
