import zlib

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from avsd.tensor import (
    OPS,
    Graph,
    GraphError,
    evaluate,
    finite_difference,
    gradient,
    instance_norm,
    relative_error,
)


def _scalar_graph(build):
    g = Graph()
    loss = build(g)
    g.output("loss", loss)
    return g


def test_matmul_identity():
    g = Graph()
    x = g.input("x")
    eye = g.input("eye")
    g.output("y", g.op("matmul", x, eye))
    X = np.arange(12.0).reshape(3, 4)
    out = evaluate(g, {"x": X, "eye": np.eye(4)})["y"]
    np.testing.assert_array_equal(out, X)


def test_softmax_uniform():
    g = Graph()
    g.output("p", g.op("softmax", g.input("x")))
    np.testing.assert_allclose(evaluate(g, {"x": np.zeros(3)})["p"], np.full(3, 1 / 3), atol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    g = Graph()
    g.output("p", g.op("softmax", g.input("x")))
    p = evaluate(g, {"x": rng.normal(0, 5, size=(7, 11))})["p"]
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-9)


def test_layer_norm_of_constant_is_zero():
    g = Graph()
    g.output("y", g.op("layer_norm", g.input("x")))
    np.testing.assert_array_equal(evaluate(g, {"x": np.full((2, 5), 3.7)})["y"], np.zeros((2, 5)))


def test_square_gradient_at_three():
    def build(g):
        x = g.param("x")
        return g.op("sum", g.op("mul", x, x))

    assert gradient(_scalar_graph(build), {"x": np.array([3.0])}, "loss")["x"][0] == pytest.approx(6.0)


def test_duplicate_names_rejected():
    g = Graph()
    g.param("x")
    with pytest.raises(GraphError, match="duplicate"):
        g.input("x")


def test_stop_gradient_blocks_flow():
    def build(g):
        x = g.param("x")
        return g.op("sum", g.op("square", g.op("stop_gradient", x)))

    grads = gradient(_scalar_graph(build), {"x": np.array([1.0, -2.0])}, "loss")
    np.testing.assert_array_equal(grads["x"], 0.0)


def test_stop_gradient_partial_path():
    # y = x * sg(x): only the first factor carries gradient, so dy/dx = x
    def build(g):
        x = g.param("x")
        return g.op("sum", g.op("mul", x, g.op("stop_gradient", x)))

    grads = gradient(_scalar_graph(build), {"x": np.array([2.0, 5.0])}, "loss")
    np.testing.assert_allclose(grads["x"], [2.0, 5.0])


def test_nonscalar_loss_rejected():
    g = Graph()
    g.output("y", g.op("square", g.param("x")))
    with pytest.raises(GraphError, match="scalar"):
        gradient(g, {"x": np.ones(3)}, "y")


def test_shape_mismatch_names_node():
    g = Graph()
    a, b = g.input("a"), g.input("b")
    node = g.op("matmul", a, b)
    g.output("y", node)
    with pytest.raises(GraphError) as info:
        evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((4, 2))})
    assert info.value.node == node
    assert info.value.kind == "matmul"


def test_nonfinite_input_rejected():
    g = Graph()
    g.output("y", g.op("relu", g.input("x")))
    with pytest.raises(GraphError, match="non-finite"):
        evaluate(g, {"x": np.array([1.0, np.nan])})


def test_unbound_input_and_unknown_op():
    g = Graph()
    x = g.input("x")
    with pytest.raises(GraphError, match="unknown op"):
        g.op("warp", x)
    g.output("y", g.op("tanh", x))
    with pytest.raises(GraphError, match="unbound"):
        evaluate(g, {})


def test_inputs_must_precede():
    g = Graph()
    with pytest.raises(GraphError):
        g.op("relu", 3)


def test_unused_param_gets_zero_gradient():
    def build(g):
        g.param("unused")
        return g.op("sum", g.op("square", g.param("x")))

    grads = gradient(_scalar_graph(build), {"x": np.ones(2), "unused": np.ones((2, 2))}, "loss")
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_evaluate_is_pure(rng):
    g = Graph()
    x = g.input("x")
    w = g.param("w")
    g.output("y", g.op("gelu", g.op("matmul", x, w)))
    feeds = {"x": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 5))}
    a = evaluate(g, feeds)["y"]
    b = evaluate(g, feeds)["y"]
    assert a.tobytes() == b.tobytes()


def _three_layer_graph():
    g = Graph()
    x = g.input("x")
    h = x
    for i in range(3):
        w = g.param(f"w{i}")
        b = g.param(f"b{i}")
        h = g.op("add", g.op("matmul", h, w), b)
        h = g.op("tanh" if i < 2 else "gelu", g.op("layer_norm", h) if i == 1 else h)
    g.output("loss", g.op("mean", g.op("square", h)))
    return g


def test_random_three_layer_graph_matches_finite_differences():
    g = _three_layer_graph()
    r = np.random.default_rng(7)
    feeds = {"x": r.normal(size=(5, 4))}
    dims = [4, 6, 6, 3]
    for i in range(3):
        feeds[f"w{i}"] = r.normal(0, 0.7, size=(dims[i], dims[i + 1]))
        feeds[f"b{i}"] = r.normal(0, 0.1, size=dims[i + 1])
    grads = gradient(g, feeds, "loss")
    for name in g.param_names:
        def f(v, name=name):
            return float(evaluate(g, {**feeds, name: v})["loss"])

        assert relative_error(grads[name], finite_difference(f, feeds[name])) < 1e-4, name


UNARY = ["layer_norm", "instance_norm", "softmax", "log_softmax", "gelu", "relu", "tanh", "square", "mean", "sum"]


@pytest.mark.parametrize("kind", UNARY)
def test_unary_ops_match_finite_differences(kind):
    r = np.random.default_rng(zlib.crc32(kind.encode()))
    g = Graph()
    x = g.param("x")
    w = g.input("w")
    y = g.op(kind, x)
    if kind in ("mean", "sum"):
        loss = g.op("square", y)
        loss = g.op("sum", loss)
    else:
        loss = g.op("sum", g.op("mul", y, w))
    g.output("loss", loss)
    x0 = r.normal(size=(6, 4))
    if kind == "relu":
        x0 = np.where(np.abs(x0) < 1e-2, 0.5, x0)  # keep away from the kink
    feeds = {"x": x0, "w": r.normal(size=(6, 4))}
    ana = gradient(g, feeds, "loss")["x"]
    num = finite_difference(lambda v: float(evaluate(g, {**feeds, "x": v})["loss"]), x0)
    assert relative_error(ana, num) < 1e-4


@pytest.mark.parametrize("kind", ["matmul", "add", "sub", "mul", "concat"])
def test_binary_ops_match_finite_differences(kind):
    r = np.random.default_rng(11)
    g = Graph()
    a, b = g.param("a"), g.param("b")
    y = g.op(kind, a, b)
    g.output("loss", g.op("sum", g.op("tanh", y)))
    shape_b = (4, 3) if kind == "matmul" else (3, 4)
    feeds = {"a": r.normal(size=(3, 4)), "b": r.normal(size=shape_b)}
    grads = gradient(g, feeds, "loss")
    for name in ("a", "b"):
        num = finite_difference(lambda v, n=name: float(evaluate(g, {**feeds, n: v})["loss"]), feeds[name])
        assert relative_error(grads[name], num) < 1e-4


def test_conv2d_and_embedding_gradients():
    r = np.random.default_rng(5)
    g = Graph()
    img, ker = g.param("img"), g.param("ker")
    table = g.param("table")
    conv = g.op("conv2d", img, ker, stride=2, padding=1)
    emb = g.op("embedding", table, ids=[2, 0, 2])
    loss = g.op("add", g.op("sum", g.op("square", conv)), g.op("sum", g.op("tanh", emb)))
    g.output("loss", loss)
    feeds = {"img": r.normal(size=(1, 2, 6, 6)), "ker": r.normal(size=(3, 2, 3, 3)), "table": r.normal(size=(4, 5))}
    grads = gradient(g, feeds, "loss")
    for name in feeds:
        num = finite_difference(lambda v, n=name: float(evaluate(g, {**feeds, n: v})["loss"]), feeds[name])
        assert relative_error(grads[name], num) < 1e-4, name


def test_every_op_is_covered():
    covered = set(UNARY) | {"matmul", "add", "sub", "mul", "concat", "conv2d", "embedding", "stop_gradient"}
    assert covered == set(OPS)


@given(
    t=st.integers(2, 30),
    c=st.integers(1, 6),
    scale=st.floats(0.5, 20.0),
    seed=st.integers(0, 10_000),
)
def test_instance_norm_statistics(t, c, scale, seed):
    x = torch.as_tensor(np.random.default_rng(seed).normal(3.0, scale, size=(t, c)))
    y = instance_norm(x)
    var_x = x.var(dim=0, unbiased=False)
    assert torch.all(y.mean(dim=0).abs() < 1e-6)
    ok = var_x > 0.1  # non-degenerate channels
    assert torch.all((y.var(dim=0, unbiased=False)[ok] - 1).abs() < 1e-4)


def test_instance_norm_respects_mask():
    x = torch.randn(2, 5, 3, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    y = instance_norm(x, mask)
    np.testing.assert_array_equal(y[0, 3:].numpy(), 0.0)
    np.testing.assert_allclose(y[0, :3].numpy(), instance_norm(x[0, :3]).numpy(), atol=1e-12)


def test_finite_difference_helper_on_quadratic():
    grad = finite_difference(lambda v: float(np.sum(v**2)), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(grad, [2.0, -4.0, 1.0], atol=1e-8)
