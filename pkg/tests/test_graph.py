import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pelee import tensor_ops as ops
from pelee.graph import (
    Graph, GraphBuilder, GraphError, WeightError, dumps, execute, fold_batchnorm,
    graph_from_dict, graph_to_dict, infer_shapes, make_node, topo_order,
)
from pelee.tensor_ops import BnParams, ShapeError
from pelee.weights import init_weights


def chain(*names):
    nodes = [make_node(names[0], "input", (), __import__("pelee.graph", fromlist=["InputSpec"]).InputSpec(1))]
    for prev, name in zip(names, names[1:]):
        nodes.append(make_node(name, "relu", (prev,)))
    return Graph(nodes, [names[0]], [names[-1]])


def conv_bn_relu_graph(cin=3, cout=4):
    b = GraphBuilder()
    x = b.input("data", cin)
    x = b.conv_bn_relu("block", x, cout, 3)
    return b.build([x])


class TestTopoOrder:
    def test_chain(self):
        assert topo_order(chain("A", "B", "C")) == ["A", "B", "C"]

    def test_diamond(self):
        b = GraphBuilder()
        a = b.input("A", 2)
        l = b.relu("B", a)
        r = b.relu("C", a)
        d = b.add("D", l, r)
        order = topo_order(b.build([d]))
        assert order[0] == "A" and order[-1] == "D"

    def test_reorders_nodes_given_out_of_order(self):
        from pelee.graph import InputSpec
        nodes = [make_node("C", "relu", ("B",)), make_node("B", "relu", ("A",)), make_node("A", "input", (), InputSpec(1))]
        assert [n.name for n in Graph(nodes, ["A"], ["C"]).nodes] == ["A", "B", "C"]

    def test_cycle_detected(self):
        from pelee.graph import InputSpec
        nodes = [make_node("A", "input", (), InputSpec(1)), make_node("B", "add", ("A", "C")), make_node("C", "relu", ("B",))]
        with pytest.raises(GraphError, match="cycle"):
            Graph(nodes, ["A"], ["C"])

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_random_dag_order_is_valid(self, data):
        from pelee.graph import InputSpec
        n = data.draw(st.integers(2, 25))
        nodes = [make_node("n0", "input", (), InputSpec(1))]
        for i in range(1, n):
            k = data.draw(st.integers(1, min(3, i)))
            srcs = data.draw(st.lists(st.integers(0, i - 1), min_size=k, max_size=k, unique=True))
            nodes.append(make_node(f"n{i}", "concat", [f"n{s}" for s in srcs]))
        shuffled = data.draw(st.permutations(nodes))
        g = Graph(shuffled, ["n0"], [f"n{n - 1}"])
        pos = {name: i for i, name in enumerate(topo_order(g))}
        for src, dst, _ in g.edges:
            assert pos[src] < pos[dst]
        assert topo_order(g) == topo_order(g)


class TestGraphValidation:
    def test_duplicate_names(self):
        b = GraphBuilder()
        x = b.input("x", 1)
        b.relu("r", x)
        with pytest.raises(GraphError, match="duplicate"):
            b.relu("r", x)

    def test_dangling_input(self):
        with pytest.raises(GraphError, match="undefined"):
            Graph([make_node("r", "relu", ("missing",))], [], ["r"])

    def test_attrs_checked_against_kind(self):
        with pytest.raises(GraphError, match="requires ConvSpec"):
            make_node("c", "conv", ("x",), None)

    def test_unknown_kind(self):
        with pytest.raises(GraphError):
            make_node("c", "dropout", ("x",))


class TestInferShapes:
    def test_single_conv(self):
        b = GraphBuilder()
        x = b.input("data", 3)
        x = b.conv("c", x, 32, 3, stride=2, pad=1)
        assert infer_shapes(b.build([x]), (1, 3, 224, 224))["c"] == (1, 32, 112, 112)

    def test_concat_conflict(self):
        b = GraphBuilder()
        x = b.input("data", 3)
        y = b.pool("p", x, "max", 2, 2)
        z = b.concat("cat", [x, y])
        with pytest.raises(ShapeError, match="cat"):
            infer_shapes(b.build([z]), (1, 3, 8, 8))

    def test_add_conflict(self):
        b = GraphBuilder()
        x = b.input("data", 3)
        y = b.conv("c", x, 3, 3, stride=2)
        z = b.add("sum", x, y)
        with pytest.raises(ShapeError, match="sum"):
            infer_shapes(b.build([z]), (1, 3, 8, 8))

    def test_input_channel_mismatch(self):
        with pytest.raises(ShapeError):
            infer_shapes(conv_bn_relu_graph(), (1, 4, 8, 8))


class TestExecute:
    def test_single_relu(self):
        g = chain("x", "r")
        out = execute(g, {}, np.array([-1, 2], np.float32).reshape(1, 1, 1, 2))
        np.testing.assert_array_equal(out["r"].ravel(), [0, 2])

    def test_conv_bn_relu_matches_manual_composition(self, rng):
        g = conv_bn_relu_graph()
        w = init_weights(g, seed=3)
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        spec = g["block.conv"].attrs
        manual = ops.conv2d(x, w["block.conv.weight"], None, spec)
        manual = ops.batch_norm_infer(manual, BnParams(
            w["block.bn.gamma"], w["block.bn.beta"], w["block.bn.running_mean"], w["block.bn.running_var"], 1e-5))
        manual = ops.relu(manual)
        np.testing.assert_array_equal(execute(g, w, x)["block.relu"], manual)

    def test_missing_weight(self, rng):
        g = conv_bn_relu_graph()
        w = init_weights(g)
        del w["block.bn.gamma"]
        with pytest.raises(WeightError, match="block.bn.gamma"):
            execute(g, w, np.zeros((1, 3, 4, 4)))

    def test_wrong_weight_shape(self):
        g = conv_bn_relu_graph()
        w = init_weights(g)
        w["block.conv.weight"] = np.zeros((4, 3, 1, 1), np.float32)
        with pytest.raises(WeightError, match="block.conv.weight"):
            execute(g, w, np.zeros((1, 3, 4, 4)))

    def test_peleenet_scores_sum_to_one(self, peleenet, peleenet_weights, rng):
        x = rng.uniform(-1, 1, (1, 3, 224, 224)).astype(np.float32)
        out = execute(peleenet, peleenet_weights, x)["classifier.softmax"]
        assert out.shape == (1, 1000, 1, 1)
        assert abs(float(out.sum(dtype=np.float64)) - 1) < 1e-5

    def test_deterministic_across_runs_and_order(self, peleenet, peleenet_weights, rng):
        x = rng.uniform(-1, 1, (1, 3, 96, 96)).astype(np.float32)
        a = execute(peleenet, peleenet_weights, x)["classifier.softmax"]
        rebuilt = Graph(reversed(peleenet.nodes), peleenet.inputs, peleenet.outputs)
        b = execute(rebuilt, peleenet_weights, x)["classifier.softmax"]
        assert a.tobytes() == b.tobytes()


class TestFoldBatchnorm:
    def test_scalar_example(self):
        g = conv_bn_relu_graph(1, 1)
        w = {
            "block.conv.weight": np.ones((1, 1, 3, 3), np.float32),
            "block.bn.gamma": np.array([2.0], np.float32), "block.bn.beta": np.zeros(1, np.float32),
            "block.bn.running_mean": np.zeros(1, np.float32), "block.bn.running_var": np.ones(1, np.float32),
        }
        g = Graph(
            [n if n.kind != "bn" else make_node(n.name, "bn", n.inputs, type(n.attrs)(1, 0.0)) for n in g.nodes],
            g.inputs, g.outputs)
        fg, fw = fold_batchnorm(g, w)
        np.testing.assert_array_equal(fw["block.conv.weight"], 2.0)
        np.testing.assert_array_equal(fw["block.conv.bias"], 0.0)
        assert fg.count("bn") == 0 and len(fg) == len(g) - 1

    def test_identity_bn_leaves_weights(self, rng):
        g = conv_bn_relu_graph(2, 3)
        w = init_weights(g)
        g = Graph([n if n.kind != "bn" else make_node(n.name, "bn", n.inputs, type(n.attrs)(3, 0.0)) for n in g.nodes],
                  g.inputs, g.outputs)
        w.update({"block.bn.gamma": np.ones(3, np.float32), "block.bn.beta": np.zeros(3, np.float32),
                  "block.bn.running_mean": np.zeros(3, np.float32), "block.bn.running_var": np.ones(3, np.float32)})
        _, fw = fold_batchnorm(g, w)
        np.testing.assert_array_equal(fw["block.conv.weight"], w["block.conv.weight"])
        np.testing.assert_array_equal(fw["block.conv.bias"], 0.0)

    def test_inputs_not_mutated(self):
        g = conv_bn_relu_graph()
        w = init_weights(g)
        before = {k: v.copy() for k, v in w.items()}
        fold_batchnorm(g, w)
        assert set(w) == set(before) and all((w[k] == before[k]).all() for k in w)

    def test_preactivation_rejected(self):
        b = GraphBuilder()
        x = b.input("data", 3)
        x = b.conv_bn_relu("pre", x, 4, 1, order="pre")
        g = b.build([x])
        with pytest.raises(GraphError, match="pre-activation"):
            fold_batchnorm(g, init_weights(g))

    def test_existing_conv_bias_is_folded(self, rng):
        b = GraphBuilder()
        x = b.input("data", 2)
        x = b.conv("c", x, 3, 3, bias=True)
        x = b.bn("n", x)
        g = b.build([x])
        w = init_weights(g, 5)
        inp = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        fg, fw = fold_batchnorm(g, w)
        np.testing.assert_allclose(execute(fg, fw, inp)["c"], execute(g, w, inp)["n"], atol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(cin=st.integers(1, 5), cout=st.integers(1, 6), k=st.sampled_from([1, 3]),
           stride=st.integers(1, 2), relu=st.booleans(), seed=st.integers(0, 10**6))
    def test_preserves_function(self, cin, cout, k, stride, relu, seed):
        b = GraphBuilder()
        x = b.input("data", cin)
        y = b.conv_bn_relu("blk", x, cout, k, stride=stride, activate=relu)
        g = b.build([y])
        w = init_weights(g, seed)
        inp = np.random.default_rng(seed).standard_normal((1, cin, 7, 7)).astype(np.float32)
        fg, fw = fold_batchnorm(g, w)
        assert len(fg) == len(g) - 1 and fg.count("bn") == 0
        out_name = fg.outputs[0]
        diff = np.abs(execute(fg, fw, inp)[out_name] - execute(g, w, inp)[y]).max()
        assert diff <= 1e-4

    def test_peleenet_fold_keeps_flops(self, peleenet, peleenet_weights):
        from pelee.cost import analyze
        fg, _ = fold_batchnorm(peleenet, peleenet_weights)
        dims = (1, 3, 224, 224)
        assert analyze(fg, dims).total_flops == analyze(peleenet, dims).total_flops
        assert len(fg) == len(peleenet) - peleenet.count("bn")


class TestSerialization:
    def test_round_trip_is_byte_identical(self, peleenet):
        text = dumps(graph_to_dict(peleenet))
        again = graph_from_dict(json.loads(text))
        assert again == peleenet
        assert dumps(graph_to_dict(again)) == text

    def test_document_fields(self, peleenet):
        doc = graph_to_dict(peleenet)
        assert doc["format"] == "pelee-graph" and doc["version"] == 1
        conv = next(n for n in doc["nodes"] if n["kind"] == "conv")
        assert set(conv["attrs"]) >= {"in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "pad", "groups", "has_bias"}
        assert len(doc["edges"]) == len(peleenet.edges)

    def test_bad_version(self, peleenet):
        doc = graph_to_dict(peleenet)
        doc["version"] = 99
        with pytest.raises(GraphError, match="version"):
            graph_from_dict(doc)

    def test_tampered_edges(self, peleenet):
        doc = graph_to_dict(peleenet)
        doc["edges"] = doc["edges"][1:]
        with pytest.raises(GraphError, match="edge"):
            graph_from_dict(doc)
