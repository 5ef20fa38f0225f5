"""Dense tensor ops and a small reverse-mode graph evaluator.

Numerics are delegated to torch; graph evaluation runs in float64. Model code calls the
functional ops below directly; :class:`Graph` wraps the same ops as explicit
nodes so that forward evaluation and gradients can be requested by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
NORM_EPS = 1e-5


class GraphError(ValueError):
    """Raised for malformed graphs, shape mismatches and non-finite inputs."""

    def __init__(self, message: str, node: int | None = None, kind: str | None = None):
        self.node = node
        self.kind = kind
        where = f"node {node} ({kind}): " if node is not None else ""
        super().__init__(where + message)


# -- functional ops ---------------------------------------------------------


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def layer_norm(x, weight=None, bias=None, eps: float = NORM_EPS):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def instance_norm(x: torch.Tensor, mask: torch.Tensor | None = None, eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize each channel over the time axis, separately per utterance.

    ``x`` is ``(B, T, C)`` or ``(T, C)``; ``mask`` marks valid frames with
    shape ``(B, T)``. Padded frames come back as zeros.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if mask is None:
        mask = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
    w = mask.to(x.dtype).unsqueeze(-1)
    count = w.sum(dim=1, keepdim=True).clamp_min(1.0)
    mean = (x * w).sum(dim=1, keepdim=True) / count
    var = (((x - mean) * w) ** 2).sum(dim=1, keepdim=True) / count
    out = (x - mean) / torch.sqrt(var + eps) * w
    return out.squeeze(0) if squeeze else out


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


def embedding(table: torch.Tensor, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


def _matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise RuntimeError(f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def _conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    return F.conv2d(x, w, b, stride=stride, padding=padding)


# name -> (function, minimum arity, maximum arity)
OPS: dict[str, tuple[Callable[..., torch.Tensor], int, int]] = {
    "matmul": (_matmul, 2, 2),
    "add": (torch.add, 2, 2),
    "sub": (torch.sub, 2, 2),
    "mul": (torch.mul, 2, 2),
    "concat": (lambda *xs, axis=-1: torch.cat(xs, dim=axis), 1, 64),
    "embedding": (embedding, 1, 1),
    "layer_norm": (layer_norm, 1, 3),
    "instance_norm": (instance_norm, 1, 1),
    "softmax": (lambda x, axis=-1: torch.softmax(x, dim=axis), 1, 1),
    "log_softmax": (lambda x, axis=-1: torch.log_softmax(x, dim=axis), 1, 1),
    "gelu": (F.gelu, 1, 1),
    "relu": (F.relu, 1, 1),
    "tanh": (torch.tanh, 1, 1),
    "square": (torch.square, 1, 1),
    "conv2d": (_conv2d, 2, 3),
    "mean": (lambda x, axis=None: x.mean() if axis is None else x.mean(dim=axis), 1, 1),
    "sum": (lambda x, axis=None: x.sum() if axis is None else x.sum(dim=axis), 1, 1),
    "stop_gradient": (stop_gradient, 1, 1),
}


# -- graph ------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: Mapping[str, Any] = field(default_factory=dict)
    name: str | None = None


class Graph:
    """Append-only op graph; node ids are positions, so order is topological."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.outputs: dict[str, int] = {}

    def _append(self, node: Node) -> int:
        for i in node.inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"input {i} does not precede this node", len(self.nodes), node.kind)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _named(self, kind: str, name: str) -> int:
        if any(n.name == name for n in self.nodes):
            raise GraphError(f"duplicate input name {name!r}", len(self.nodes), kind)
        return self._append(Node(kind, name=name))

    def input(self, name: str) -> int:
        return self._named("input", name)

    def param(self, name: str) -> int:
        """A named input that receives a gradient."""
        return self._named("param", name)

    def op(self, kind: str, *inputs: int, **attrs) -> int:
        if kind not in OPS:
            raise GraphError(f"unknown op {kind!r}", len(self.nodes), kind)
        _, lo, hi = OPS[kind]
        if not lo <= len(inputs) <= hi:
            raise GraphError(f"expects {lo}..{hi} inputs, got {len(inputs)}", len(self.nodes), kind)
        return self._append(Node(kind, tuple(inputs), dict(attrs)))

    def output(self, name: str, node: int) -> int:
        if not 0 <= node < len(self.nodes):
            raise GraphError(f"no node {node}")
        self.outputs[name] = node
        return node

    @property
    def param_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.kind == "param"]


def _bind(graph: Graph, inputs: Mapping[str, Any], track: bool) -> list[torch.Tensor | None]:
    values: list[torch.Tensor | None] = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        if node.kind not in ("input", "param"):
            continue
        if node.name not in inputs:
            raise GraphError(f"unbound input {node.name!r}", i, node.kind)
        t = torch.as_tensor(np.asarray(inputs[node.name], dtype=np.float64), dtype=DTYPE).clone()
        if not torch.isfinite(t).all():
            raise GraphError(f"non-finite values in input {node.name!r}", i, node.kind)
        if track and node.kind == "param":
            t.requires_grad_(True)
        values[i] = t
    return values


def _run(graph: Graph, values: list[torch.Tensor | None]) -> list[torch.Tensor | None]:
    for i, node in enumerate(graph.nodes):
        if node.kind in ("input", "param"):
            continue
        fn = OPS[node.kind][0]
        try:
            values[i] = fn(*(values[j] for j in node.inputs), **node.attrs)
        except (RuntimeError, IndexError, TypeError) as exc:
            raise GraphError(str(exc), i, node.kind) from exc
    return values


def evaluate(graph: Graph, inputs: Mapping[str, Any]) -> dict[str, np.ndarray]:
    """Run the graph forward and return every named output as a float64 array."""
    with torch.no_grad():
        values = _run(graph, _bind(graph, inputs, track=False))
    return {name: values[i].numpy().copy() for name, i in graph.outputs.items()}


def gradient(graph: Graph, inputs: Mapping[str, Any], loss: int | str) -> dict[str, np.ndarray]:
    """Gradients of a scalar node with respect to every ``param`` node.

    Params the loss does not depend on (including those hidden behind a
    ``stop_gradient``) get an all-zero gradient.
    """
    loss_id = graph.outputs[loss] if isinstance(loss, str) else loss
    values = _run(graph, _bind(graph, inputs, track=True))
    out = values[loss_id]
    if out.numel() != 1:
        raise GraphError(f"loss must be scalar, got shape {tuple(out.shape)}", loss_id, graph.nodes[loss_id].kind)
    params = [(n.name, values[i]) for i, n in enumerate(graph.nodes) if n.kind == "param"]
    if not params:
        return {}
    if not out.requires_grad:
        return {name: np.zeros(t.shape) for name, t in params}
    grads = torch.autograd.grad(out.reshape(()), [t for _, t in params], allow_unused=True)
    return {
        name: (np.zeros(t.shape) if g is None else g.numpy().copy())
        for (name, t), g in zip(params, grads)
    }


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function; used as the gradient oracle."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
