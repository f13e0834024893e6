"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is a static, topologically ordered list of primitive nodes.
Leaves are parameters (looked up by id in a parameter mapping at evaluation
time), named inputs, or constants. Graphs hold no numeric state, so the same
graph can be evaluated against any parameter store.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .errors import ContractError, DimensionError, NumericError

Tensor = np.ndarray
ParamMap = Mapping[str, np.ndarray]
GradientMap = dict[str, np.ndarray]

LEAF_OPS = ("param", "input", "const")
PRIMITIVES = ("matmul", "add", "tanh", "relu", "mse", "softmax_xent", "scale", "sum")


def as_tensor(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


class Node(NamedTuple):
    op: str
    parents: tuple[int, ...]
    attr: object = None


class Graph:
    """Builder and container for a computation graph.

    Node-constructing methods return the integer index of the new node.
    Parameter leaves are deduplicated by id so gradients accumulate into one
    entry per parameter.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: int | None = None
        self.names: dict[str, int] = {}
        self._param_nodes: dict[str, int] = {}
        self._input_nodes: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, parents=(), attr=None) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ContractError(f"parent index {p} does not precede node {len(self.nodes)}")
        self.nodes.append(Node(op, tuple(parents), attr))
        return len(self.nodes) - 1

    # leaves
    def param(self, pid: str) -> int:
        if pid not in self._param_nodes:
            self._param_nodes[pid] = self._push("param", attr=pid)
        return self._param_nodes[pid]

    def input(self, name: str) -> int:
        if name not in self._input_nodes:
            self._input_nodes[name] = self._push("input", attr=name)
        return self._input_nodes[name]

    def const(self, value) -> int:
        return self._push("const", attr=as_tensor(value))

    # primitives
    def matmul(self, a: int, b: int) -> int:
        return self._push("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def tanh(self, a: int) -> int:
        return self._push("tanh", (a,))

    def relu(self, a: int) -> int:
        return self._push("relu", (a,))

    def mse(self, pred: int, target: int) -> int:
        return self._push("mse", (pred, target))

    def softmax_xent(self, logits: int, labels: int) -> int:
        return self._push("softmax_xent", (logits, labels))

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), float(c))

    def sum(self, a: int) -> int:
        return self._push("sum", (a,))

    def activation(self, a: int, kind: str) -> int:
        if kind == "tanh":
            return self.tanh(a)
        if kind == "relu":
            return self.relu(a)
        raise ContractError(f"unknown activation {kind!r}")

    def set_output(self, node: int) -> int:
        if not 0 <= node < len(self.nodes):
            raise ContractError(f"no node {node}")
        self.output = node
        return node

    def mark(self, name: str, node: int) -> int:
        self.names[name] = node
        return node

    @property
    def param_ids(self) -> list[str]:
        return list(self._param_nodes)

    @property
    def input_names(self) -> list[str]:
        return list(self._input_nodes)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _class_indices(labels: np.ndarray, n_classes: int) -> np.ndarray:
    idx = labels.reshape(-1).astype(np.int64)
    if np.any(idx != labels.reshape(-1)) or np.any(idx < 0) or np.any(idx >= n_classes):
        raise DimensionError(f"class labels must be integers in [0, {n_classes})")
    return idx


def _forward_op(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "matmul":
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
        return a @ b
    if op == "add":
        a, b = args
        try:
            out_shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"add shapes {a.shape} and {b.shape} do not broadcast") from None
        if out_shape != a.shape and out_shape != b.shape:
            raise DimensionError(f"add shapes {a.shape} and {b.shape}: only one side may broadcast")
        return a + b
    if op == "tanh":
        return np.tanh(args[0])
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "mse":
        pred, target = args
        if pred.shape != target.shape:
            raise DimensionError(f"mse shapes {pred.shape} and {target.shape} differ")
        return np.asarray(np.mean((pred - target) ** 2))
    if op == "softmax_xent":
        logits, labels = args
        if logits.ndim != 2 or labels.size != logits.shape[0]:
            raise DimensionError(f"softmax_xent needs (batch, classes) logits and batch labels, "
                                 f"got {logits.shape} and {labels.shape}")
        idx = _class_indices(labels, logits.shape[1])
        logp = _log_softmax(logits)
        return np.asarray(-np.mean(logp[np.arange(len(idx)), idx]))
    if op == "scale":
        return args[0] * node.attr
    if op == "sum":
        return np.asarray(np.sum(args[0]))
    raise ContractError(f"unknown primitive {op!r}")


def _leaf_value(node: Node, params: ParamMap, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    if node.op == "param":
        try:
            return params[node.attr]
        except KeyError:
            raise ContractError(f"parameter {node.attr!r} is not bound") from None
    if node.op == "input":
        try:
            return inputs[node.attr]
        except KeyError:
            raise ContractError(f"input {node.attr!r} is not bound") from None
    return node.attr


def forward_values(graph: Graph, params: ParamMap, inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node; returns the list of node values in graph order."""
    values: list[np.ndarray] = []
    for i, node in enumerate(graph.nodes):
        if node.op in LEAF_OPS:
            val = np.asarray(_leaf_value(node, params, inputs), dtype=np.float64)
        else:
            val = _forward_op(node, [values[p] for p in node.parents])
        if not np.all(np.isfinite(val)):
            raise NumericError(f"non-finite value at node {i} ({node.op})")
        values.append(val)
    return values


def evaluate(graph: Graph, params: ParamMap, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    if graph.output is None:
        raise ContractError("graph has no designated output")
    return forward_values(graph, params, inputs)[graph.output]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _vjp(node: Node, args: list[np.ndarray], out: np.ndarray, g: np.ndarray) -> list[np.ndarray | None]:
    op = node.op
    if op == "matmul":
        a, b = args
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = args
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    if op == "tanh":
        return [g * (1.0 - out * out)]
    if op == "relu":
        return [g * (args[0] > 0.0)]
    if op == "mse":
        pred, target = args
        d = (2.0 / pred.size) * (pred - target) * g
        return [d, -d]
    if op == "softmax_xent":
        logits, labels = args
        idx = _class_indices(labels, logits.shape[1])
        probs = np.exp(_log_softmax(logits))
        probs[np.arange(len(idx)), idx] -= 1.0
        return [probs * (g / len(idx)), None]
    if op == "scale":
        return [g * node.attr]
    if op == "sum":
        return [np.broadcast_to(g, args[0].shape).copy()]
    raise ContractError(f"unknown primitive {op!r}")


def backward(graph: Graph, params: ParamMap, inputs: Mapping[str, np.ndarray],
             wrt: set[str] | None = None) -> GradientMap:
    """Gradient of the scalar graph output with respect to parameter leaves.

    ``wrt`` optionally restricts which parameter ids get an entry; every
    parameter reachable from the output is included otherwise.
    """
    return value_and_grad(graph, params, inputs, wrt)[1]


def value_and_grad(graph: Graph, params: ParamMap, inputs: Mapping[str, np.ndarray],
                   wrt: set[str] | None = None) -> tuple[list[np.ndarray], GradientMap]:
    """Like :func:`backward` but also returns every node value from the forward pass."""
    if graph.output is None:
        raise ContractError("graph has no designated output")
    values = forward_values(graph, params, inputs)
    out = values[graph.output]
    if out.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.shape}")

    # which nodes lie on a path to the output
    needed = [False] * len(graph.nodes)
    needed[graph.output] = True
    for i in range(graph.output, -1, -1):
        if needed[i]:
            for p in graph.nodes[i].parents:
                needed[p] = True

    adjoint: dict[int, np.ndarray] = {graph.output: np.ones_like(out)}
    for i in range(graph.output, -1, -1):
        node = graph.nodes[i]
        if not needed[i] or i not in adjoint or node.op in LEAF_OPS:
            continue
        grads = _vjp(node, [values[p] for p in node.parents], values[i], adjoint[i])
        for p, gp in zip(node.parents, grads):
            if gp is None or graph.nodes[p].op in ("input", "const"):
                continue
            adjoint[p] = adjoint[p] + gp if p in adjoint else gp

    result: GradientMap = {}
    for pid, idx in graph._param_nodes.items():
        if not needed[idx] or (wrt is not None and pid not in wrt):
            continue
        g = adjoint.get(idx)
        if g is None:
            g = np.zeros_like(values[idx])
        result[pid] = np.asarray(g, dtype=np.float64).reshape(values[idx].shape)
    for pid, g in result.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {pid!r}")
    return values, result


def numerical_gradient(graph: Graph, params: ParamMap, inputs: Mapping[str, np.ndarray],
                       h: float = 1e-5) -> GradientMap:
    """Central-difference gradient, one scalar parameter entry at a time."""
    if h <= 0:
        raise ContractError("h must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    result: GradientMap = {}
    for pid in graph.param_ids:
        if pid not in work:
            raise ContractError(f"parameter {pid!r} is not bound")
        p = work[pid]
        grad = np.zeros_like(p)
        flat, gflat = p.reshape(-1), grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(evaluate(graph, work, inputs))
            flat[j] = orig - h
            down = float(evaluate(graph, work, inputs))
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        result[pid] = grad
    return result


def _check_shapes(params: ParamMap, grads: ParamMap):
    for pid, g in grads.items():
        if pid not in params:
            raise ContractError(f"gradient for unknown parameter {pid!r}")
        if np.shape(g) != np.shape(params[pid]):
            raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape "
                                 f"{np.shape(params[pid])} for {pid!r}")


def sgd_step(params: ParamMap, grads: ParamMap, lr: float) -> dict[str, np.ndarray]:
    """Plain SGD. Returns a new mapping; entries without a gradient are the same objects."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    _check_shapes(params, grads)
    out = dict(params)
    for pid, g in grads.items():
        out[pid] = params[pid] - lr * g
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamMap, grads: ParamMap, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps_adam: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    _check_shapes(params, grads)
    for pid, m in state.m.items():
        if pid in params and np.shape(m) != np.shape(params[pid]):
            raise DimensionError(f"optimizer state shape mismatch for {pid!r}")
    step = state.step + 1
    new_m, new_v = dict(state.m), dict(state.v)
    out = dict(params)
    for pid, g in grads.items():
        m = beta1 * state.m.get(pid, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(pid, 0.0) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        out[pid] = params[pid] - lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        new_m[pid], new_v[pid] = np.asarray(m), np.asarray(v)
    return out, AdamState(step, new_m, new_v)


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        raise ContractError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
