"""Reverse-mode differentiation over a recorded tape of dense float64 ops.

The op set is deliberately small: exactly what a pre-norm decoder-only
transformer and its cross-entropy / logit-difference heads need.  A tape is a
Wengert list: every node refers only to earlier nodes, so forward evaluation
is a single pass in order and backward is a single pass in reverse order.

    tape = Tape()
    x = tape.leaf("x")
    y = tape.mul(x, x)
    tape.name(y, "y")
    trace = evaluate(tape, {"x": 3.0})
    grads = backward(trace, y)
    grads["x"]   # Tensor(6.0)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

LAYERNORM_EPS = 1e-5
TAPE_FORMAT = 1


class ShapeError(ValueError):
    def __init__(self, op: str, index: int, detail: str):
        super().__init__(f"shape mismatch in op {op!r} (node {index}): {detail}")
        self.op = op
        self.index = index


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, index: int):
        super().__init__(f"non-finite value produced by op {op!r} at node {index}")
        self.op = op
        self.index = index


class Tensor:
    """Immutable row-major float64 array."""

    __slots__ = ("_a",)

    def __init__(self, data: Any, shape: Sequence[int] | None = None):
        a = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != a.size:
                raise ValueError(f"data of length {a.size} does not fit shape {shape}")
            a = a.reshape(shape)
        a.flags.writeable = False
        self._a = a

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def data(self) -> list[float]:
        return self._a.ravel().tolist()

    def numpy(self) -> np.ndarray:
        return self._a

    def item(self) -> float:
        if self._a.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self._a.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self._a!r})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._a, other._a)

    __hash__ = None  # type: ignore[assignment]


def _as_array(x: Any) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.numpy()
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * c * (1.0 + 3 * 0.044715 * x**2)


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)


# Forward rules: (input arrays, attrs) -> output array
def _fwd_layernorm(xs, at):
    x, w, b = xs
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + at.get("eps", LAYERNORM_EPS)) * w + b


def _fwd_cross_entropy(xs, at):
    (logits,) = xs
    tgt = np.asarray(at["targets"], dtype=np.int64)
    lp = _log_softmax(logits)
    return np.asarray(-lp[np.arange(len(tgt)), tgt].mean())


def _fwd_take(xs, at):
    return np.take(xs[0], np.asarray(at["index"], dtype=np.int64), axis=at["axis"])


_FORWARD: dict[str, Callable[[list[np.ndarray], Mapping[str, Any]], np.ndarray]] = {
    "add": lambda xs, at: xs[0] + xs[1],
    "sub": lambda xs, at: xs[0] - xs[1],
    "mul": lambda xs, at: xs[0] * xs[1],
    "scale": lambda xs, at: xs[0] * at["c"],
    "matmul": lambda xs, at: np.matmul(xs[0], xs[1]),
    "transpose": lambda xs, at: np.transpose(xs[0], at["axes"]),
    "reshape": lambda xs, at: xs[0].reshape(at["shape"]),
    "sum": lambda xs, at: np.asarray(xs[0].sum(axis=at.get("axis"), keepdims=at.get("keepdims", False))),
    "take": _fwd_take,
    "gelu": lambda xs, at: _gelu(xs[0]),
    "relu": lambda xs, at: np.maximum(xs[0], 0.0),
    "layernorm": _fwd_layernorm,
    "softmax": lambda xs, at: _softmax(xs[0], None if at.get("mask") is None else np.asarray(at["mask"], dtype=bool)),
    "log_softmax": lambda xs, at: _log_softmax(xs[0]),
    "embedding": lambda xs, at: xs[0][np.asarray(at["ids"], dtype=np.int64)],
    "cross_entropy": _fwd_cross_entropy,
}


def _check_shapes(op: str, index: int, xs: list[np.ndarray], at: Mapping[str, Any]) -> None:
    if op in ("add", "sub", "mul"):
        try:
            np.broadcast_shapes(xs[0].shape, xs[1].shape)
        except ValueError:
            raise ShapeError(op, index, f"cannot broadcast {xs[0].shape} with {xs[1].shape}") from None
    elif op == "matmul":
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(op, index, f"{a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(op, index, f"batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from None
    elif op == "layernorm":
        x, w, b = xs
        d = x.shape[-1]
        if w.shape != (d,) or b.shape != (d,):
            raise ShapeError(op, index, f"input last dim {d}, weight {w.shape}, bias {b.shape}")
    elif op == "reshape":
        if int(np.prod(at["shape"])) != xs[0].size and -1 not in at["shape"]:
            raise ShapeError(op, index, f"cannot reshape {xs[0].shape} to {tuple(at['shape'])}")
    elif op == "transpose":
        if len(at["axes"]) != xs[0].ndim:
            raise ShapeError(op, index, f"axes {tuple(at['axes'])} for rank {xs[0].ndim}")
    elif op == "embedding":
        ids = np.asarray(at["ids"], dtype=np.int64)
        if xs[0].ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= xs[0].shape[0])):
            raise ShapeError(op, index, f"ids out of range for table {xs[0].shape}")
    elif op == "softmax" and at.get("mask") is not None:
        if np.asarray(at["mask"]).shape != xs[0].shape:
            try:
                np.broadcast_shapes(np.asarray(at["mask"]).shape, xs[0].shape)
            except ValueError:
                raise ShapeError(op, index, f"mask {np.asarray(at['mask']).shape} vs {xs[0].shape}") from None
    elif op == "cross_entropy":
        tgt = np.asarray(at["targets"], dtype=np.int64)
        if xs[0].ndim != 2 or len(tgt) != xs[0].shape[0]:
            raise ShapeError(op, index, f"logits {xs[0].shape} vs {len(tgt)} targets")


class Tape:
    """Append-only op list.  Methods return integer node references."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}
        self.names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op: str, inputs: Sequence[int], **attrs: Any) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"op {op!r} refers to node {i}, tape has {len(self.nodes)} nodes")
        self.nodes.append(Node(op, tuple(int(i) for i in inputs), attrs))
        return len(self.nodes) - 1

    def leaf(self, name: str) -> int:
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        ref = self._push("leaf", (), name=name)
        self.leaves[name] = ref
        self.names[name] = ref
        return ref

    def const(self, value: Any) -> int:
        return self._push("const", (), value=np.array(value, dtype=np.float64))

    def name(self, ref: int, name: str) -> int:
        if name in self.names and self.names[name] != ref:
            raise ValueError(f"name {name!r} already bound")
        self.names[name] = ref
        return ref

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._push("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b))

    def scale(self, a: int, c: float) -> int:
        return self._push("scale", (a,), c=float(c))

    def matmul(self, a: int, b: int) -> int:
        return self._push("matmul", (a, b))

    def transpose(self, a: int, axes: Sequence[int]) -> int:
        return self._push("transpose", (a,), axes=tuple(int(x) for x in axes))

    def reshape(self, a: int, shape: Sequence[int]) -> int:
        return self._push("reshape", (a,), shape=tuple(int(x) for x in shape))

    def sum(self, a: int, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> int:
        if isinstance(axis, Sequence):
            axis = tuple(int(x) for x in axis)
        return self._push("sum", (a,), axis=axis, keepdims=bool(keepdims))

    def take(self, a: int, index: Sequence[int] | int, axis: int) -> int:
        return self._push("take", (a,), index=index if isinstance(index, int) else tuple(int(i) for i in index), axis=int(axis))

    def gelu(self, a: int) -> int:
        return self._push("gelu", (a,))

    def relu(self, a: int) -> int:
        return self._push("relu", (a,))

    def layernorm(self, x: int, w: int, b: int, eps: float = LAYERNORM_EPS) -> int:
        return self._push("layernorm", (x, w, b), eps=float(eps))

    def softmax(self, a: int, mask: Any = None) -> int:
        return self._push("softmax", (a,), mask=None if mask is None else np.asarray(mask, dtype=bool))

    def log_softmax(self, a: int) -> int:
        return self._push("log_softmax", (a,))

    def embedding(self, table: int, ids: Any) -> int:
        return self._push("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))

    def cross_entropy(self, logits: int, targets: Sequence[int]) -> int:
        return self._push("cross_entropy", (logits,), targets=tuple(int(t) for t in targets))

    # serialization -----------------------------------------------------

    def to_json(self) -> str:
        def enc(v: Any) -> Any:
            if isinstance(v, np.ndarray):
                return {"__array__": v.tolist(), "dtype": str(v.dtype), "shape": list(v.shape)}
            if isinstance(v, tuple):
                return list(v)
            return v

        payload = {
            "format": TAPE_FORMAT,
            "nodes": [{"op": n.op, "inputs": list(n.inputs), "attrs": {k: enc(v) for k, v in n.attrs.items()}} for n in self.nodes],
            "names": self.names,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Tape":
        payload = json.loads(text)
        if payload.get("format") != TAPE_FORMAT:
            raise ValueError(f"unsupported tape format {payload.get('format')!r}")

        def dec(k: str, v: Any) -> Any:
            if isinstance(v, dict) and "__array__" in v:
                return np.array(v["__array__"], dtype=v["dtype"]).reshape(v["shape"])
            if isinstance(v, list) and k in ("axes", "shape", "index", "targets", "axis"):
                return tuple(v)
            return v

        tape = cls()
        for n in payload["nodes"]:
            tape.nodes.append(Node(n["op"], tuple(n["inputs"]), {k: dec(k, v) for k, v in n["attrs"].items()}))
            if n["op"] == "leaf":
                tape.leaves[n["attrs"]["name"]] = len(tape.nodes) - 1
        tape.names = {k: int(v) for k, v in payload["names"].items()}
        return tape


@dataclass
class Trace:
    """Forward values of every node on a tape."""

    tape: Tape
    values: list[np.ndarray]

    def __getitem__(self, key: str | int) -> Tensor:
        ref = self.tape.names[key] if isinstance(key, str) else key
        return Tensor(self.values[ref])


class Gradients:
    def __init__(self, tape: Tape, grads: list[np.ndarray | None], shapes: list[tuple[int, ...]]):
        self._tape = tape
        self._grads = grads
        self._shapes = shapes

    def __getitem__(self, key: str | int) -> Tensor:
        ref = self._tape.names[key] if isinstance(key, str) else key
        g = self._grads[ref]
        return Tensor(np.zeros(self._shapes[ref]) if g is None else g)

    def __len__(self) -> int:
        return len(self._grads)


def evaluate(tape: Tape, inputs: Mapping[str, Any], check_finite: bool = True) -> Trace:
    """Run the tape forward.  Every leaf must be bound in ``inputs``."""
    missing = set(tape.leaves) - set(inputs)
    if missing:
        raise KeyError(f"unbound leaves: {sorted(missing)}")
    values: list[np.ndarray] = []
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf":
            out = np.array(_as_array(inputs[node.attrs["name"]]), dtype=np.float64)
        elif node.op == "const":
            out = node.attrs["value"]
        else:
            xs = [values[j] for j in node.inputs]
            _check_shapes(node.op, i, xs, node.attrs)
            with np.errstate(over="ignore", invalid="ignore"):
                out = _FORWARD[node.op](xs, node.attrs)
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(node.op, i)
        values.append(out)
    return Trace(tape, values)


def _vjp(node: Node, xs: list[np.ndarray], out: np.ndarray, g: np.ndarray) -> list[np.ndarray | None]:
    op, at = node.op, node.attrs
    if op == "add":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]
    if op == "sub":
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]
    if op == "mul":
        return [_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)]
    if op == "scale":
        return [g * at["c"]]
    if op == "matmul":
        a, b = xs
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]
    if op == "transpose":
        return [np.transpose(g, np.argsort(at["axes"]))]
    if op == "reshape":
        return [g.reshape(xs[0].shape)]
    if op == "sum":
        axis = at.get("axis")
        if axis is not None and not at.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, xs[0].shape).copy()]
    if op == "take":
        gx = np.zeros_like(xs[0])
        idx = np.asarray(at["index"], dtype=np.int64)
        ax = at["axis"]
        if idx.ndim == 0:
            g = np.expand_dims(g, ax)
            idx = idx.reshape(1)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return [gx]
    if op == "gelu":
        return [g * _gelu_grad(xs[0])]
    if op == "relu":
        return [g * (xs[0] > 0)]
    if op == "layernorm":
        x, w, _ = xs
        eps = at.get("eps", LAYERNORM_EPS)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * rstd
        gxhat = g * w
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return [gx, (g * xhat).sum(axis=red), g.sum(axis=red)]
    if op == "softmax":
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]
    if op == "log_softmax":
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]
    if op == "embedding":
        gt = np.zeros_like(xs[0])
        np.add.at(gt, np.asarray(at["ids"], dtype=np.int64), g)
        return [gt]
    if op == "cross_entropy":
        logits = xs[0]
        tgt = np.asarray(at["targets"], dtype=np.int64)
        p = np.exp(_log_softmax(logits))
        p[np.arange(len(tgt)), tgt] -= 1.0
        return [p * (g / len(tgt))]
    raise NotImplementedError(op)


def backward(trace: Trace, output: int | str) -> Gradients:
    """Gradient of a scalar node with respect to every node on the tape.

    Accumulation runs in reverse tape order, so results are deterministic.
    Nodes the output does not depend on get zero gradients.
    """
    tape, values = trace.tape, trace.values
    ref = tape.names[output] if isinstance(output, str) else output
    if values[ref].size != 1:
        raise ValueError(f"backward needs a scalar output, node {ref} has shape {values[ref].shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[ref] = np.ones_like(values[ref])
    for i in range(ref, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or not node.inputs:
            continue
        xs = [values[j] for j in node.inputs]
        for j, gj in zip(node.inputs, _vjp(node, xs, values[i], g)):
            if gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    return Gradients(tape, grads, [v.shape for v in values])


def finite_difference(
    fn: Callable[[np.ndarray], float],
    point: Any,
    step: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> Tensor:
    """Central-difference gradient of a scalar function.

    ``indices`` restricts the estimate to a subset of flat coordinates; the
    remaining entries of the result are zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(_as_array(point), dtype=np.float64)
    grad = np.zeros(x0.size)
    flat = x0.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(x0.copy()))
        flat[i] = orig - step
        down = float(fn(x0.copy()))
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return Tensor(grad, x0.shape)
