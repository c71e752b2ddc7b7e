"""Small reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Graph` is a tape: nodes are appended as ops run, so creation order
is already a topological order and :func:`backward` simply walks it in
reverse.  Parameters live in a :class:`ParamStore` and enter a graph through
:meth:`Graph.param`; their gradients are written back into the store.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import CorruptionError, DomainError, GraphError, MalIndexError, NumericError, ShapeError

DTYPE = np.float64

# Reverse rules named here have their gradient sign flipped.  Only used by the
# gradient-check negative control.
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(op_name: str) -> Iterator[None]:
    """Temporarily corrupt the reverse rule of ``op_name`` (sign flip)."""
    _FAULTS.add(op_name)
    try:
        yield
    finally:
        _FAULTS.discard(op_name)


def _sign(op_name: str) -> float:
    return -1.0 if op_name in _FAULTS else 1.0


# ---------------------------------------------------------------- parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


class ParamStore:
    """Named parameters with parallel gradient and Adam state arrays."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Param] = OrderedDict()
        self.step = 0
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(np.asarray(value, dtype=DTYPE))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return int(sum(p.value.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            q = out.add(name, p.value.copy())
            q.grad[...] = p.grad
            q.m[...] = p.m
            q.v[...] = p.v
        out.step = self.step
        out.frozen = set(self.frozen)
        return out

    def state_equal(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(p.value, other[n].value) for n, p in self.items())


# --------------------------------------------------------------------- graph


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "param_name", "differentiable")

    def __init__(self, value, parents=(), backward_fn=None, op="const", param_name=None, differentiable=True):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.param_name = param_name
        self.differentiable = differentiable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.value.shape})"


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")


def _stable_log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = -softplus(-x)
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Numerically stable logistic function on scalars or arrays."""
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        return float(_sigmoid(arr.reshape(1))[0])
    return _sigmoid(arr)


class Graph:
    """Tape of op nodes supporting forward evaluation and reverse accumulation."""

    def __init__(self, store: ParamStore | None = None, row_stable: bool = False) -> None:
        # row_stable: forward matmuls avoid BLAS so each output row is bit-identical
        # whatever the batch size (BLAS picks kernels by shape)
        self.store = store
        self.row_stable = row_stable
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    def _emit(self, value, parents, backward_fn, op, differentiable=True) -> Node:
        _check_finite(op, value)
        node = Node(value, tuple(parents), backward_fn, op, differentiable=differentiable)
        self.nodes.append(node)
        return node

    # leaves

    def param(self, name: str) -> Node:
        if self.store is None:
            raise GraphError("graph has no parameter store")
        node = self._param_nodes.get(name)
        if node is None:
            node = Node(self.store[name].value, op="param", param_name=name)
            self.nodes.append(node)
            self._param_nodes[name] = node
        return node

    def constant(self, value) -> Node:
        node = Node(np.asarray(value, dtype=DTYPE), op="const")
        self.nodes.append(node)
        return node

    # primitives

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
        s = _sign("matmul")

        def bw(g):
            return (s * (g @ b.value.T), s * (a.value.T @ g))

        out = np.einsum("ik,kj->ij", a.value, b.value) if self.row_stable else a.value @ b.value
        return self._emit(out, (a, b), bw, "matmul")

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise add; ``b`` may be a row vector broadcast over the batch."""
        if a.shape != b.shape and not (b.value.ndim == 1 and a.value.ndim == 2 and a.shape[1] == b.shape[0]):
            raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")
        s = _sign("add")
        broadcast = a.shape != b.shape

        def bw(g):
            return (s * g, s * (g.sum(axis=0) if broadcast else g))

        return self._emit(a.value + b.value, (a, b), bw, "add")

    def concat(self, nodes: list[Node]) -> Node:
        if not nodes:
            raise ShapeError("concat of zero tensors")
        lead = nodes[0].shape[:-1]
        for n in nodes[1:]:
            if n.shape[:-1] != lead:
                raise ShapeError(f"concat shapes {nodes[0].shape} and {n.shape} are incompatible")
        widths = [n.shape[-1] for n in nodes]
        cuts = np.cumsum(widths)[:-1]
        s = _sign("concat")

        def bw(g):
            return tuple(s * part for part in np.split(g, cuts, axis=-1))

        return self._emit(np.concatenate([n.value for n in nodes], axis=-1), nodes, bw, "concat")

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        s = _sign("relu")

        def bw(g):
            return (s * g * mask,)

        return self._emit(np.where(mask, x.value, 0.0), (x,), bw, "relu")

    def sigmoid(self, x: Node) -> Node:
        out = _sigmoid(x.value)
        s = _sign("sigmoid")

        def bw(g):
            return (s * g * out * (1.0 - out),)

        return self._emit(out, (x,), bw, "sigmoid")

    def softmax(self, x: Node) -> Node:
        z = x.value - x.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        s = _sign("softmax")

        def bw(g):
            return (s * out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._emit(out, (x,), bw, "softmax")

    def embedding_lookup(self, table: Node, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        n_rows = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
            bad = ids[(ids < 0) | (ids >= n_rows)][0]
            raise MalIndexError(f"embedding id {int(bad)} out of range [0, {n_rows})")
        s = _sign("embedding_lookup")

        def bw(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids, g)
            return (s * gt,)

        return self._emit(table.value[ids], (table,), bw, "embedding_lookup")

    def linear(self, x: Node, weight: str, bias: str) -> Node:
        return self.add(self.matmul(x, self.param(weight)), self.param(bias))

    def scale(self, x: Node, alpha: float) -> Node:
        s = _sign("scale")

        def bw(g):
            return (s * alpha * g,)

        return self._emit(alpha * x.value, (x,), bw, "scale")

    def sum(self, nodes: list[Node]) -> Node:
        """Sum of same-shaped nodes."""
        if not nodes:
            raise ShapeError("sum of zero tensors")
        for n in nodes[1:]:
            if n.shape != nodes[0].shape:
                raise ShapeError(f"sum shapes {nodes[0].shape} and {n.shape} are incompatible")

        def bw(g):
            return tuple(g for _ in nodes)

        return self._emit(np.sum([n.value for n in nodes], axis=0), nodes, bw, "sum")

    def sum_squares(self, x: Node) -> Node:
        s = _sign("sum_squares")

        def bw(g):
            return (s * 2.0 * g * x.value,)

        return self._emit(np.asarray((x.value * x.value).sum()), (x,), bw, "sum_squares")

    def squeeze_last(self, x: Node) -> Node:
        if x.shape[-1] != 1:
            raise ShapeError(f"cannot squeeze last axis of shape {x.shape}")

        def bw(g):
            return (g[..., None],)

        return self._emit(x.value[..., 0], (x,), bw, "squeeze_last")

    def stop_gradient(self, x: Node) -> Node:
        """Identity in the forward pass; blocks gradient flow backwards."""
        return self._emit(x.value, (x,), lambda g: (np.zeros_like(g),), "stop_gradient")

    def step(self, x: Node) -> Node:
        """Heaviside indicator 1{x > 0}.  Not differentiable."""
        return self._emit((x.value > 0).astype(DTYPE), (x,), None, "step", differentiable=False)

    # losses

    def weighted_bce(self, logits: Node, labels, weights) -> Node:
        """Sum over the batch of w * BCE(sigmoid(logit), label), stable form."""
        labels = np.asarray(labels, dtype=DTYPE)
        weights = np.asarray(weights, dtype=DTYPE)
        if logits.shape != labels.shape or labels.shape != weights.shape:
            raise ShapeError(f"weighted_bce shapes {logits.shape}, {labels.shape}, {weights.shape} disagree")
        if np.any(weights <= 0):
            raise DomainError("weighted_bce requires strictly positive weights")
        if np.any((labels < 0) | (labels > 1)):
            raise DomainError("weighted_bce labels must lie in [0, 1]")
        y = logits.value
        per = weights * (-labels * _stable_log_sigmoid(y) - (1.0 - labels) * _stable_log_sigmoid(-y))
        s = _sign("weighted_bce")

        def bw(g):
            return (s * g * weights * (_sigmoid(y) - labels),)

        return self._emit(np.asarray(per.sum()), (logits,), bw, "weighted_bce")

    def softmax_ce(self, logits: Node, classes, weights=None) -> Node:
        """Sum over the batch of -log softmax(logits)[class], stable form."""
        classes = np.asarray(classes, dtype=np.int64)
        if logits.value.ndim != 2 or classes.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_ce shapes {logits.shape} and {classes.shape} disagree")
        n_classes = logits.shape[1]
        if classes.size and (classes.min() < 0 or classes.max() >= n_classes):
            raise DomainError(f"class index out of range [0, {n_classes})")
        w = np.ones(classes.shape) if weights is None else np.asarray(weights, dtype=DTYPE)
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(classes.size)
        per = w * (lse - z[rows, classes])
        s = _sign("softmax_ce")

        def bw(g):
            p = np.exp(z - lse[:, None])
            p[rows, classes] -= 1.0
            return (s * g * w[:, None] * p,)

        return self._emit(np.asarray(per.sum()), (logits,), bw, "softmax_ce")


def backward(graph: Graph, loss: Node) -> None:
    """Reverse-mode sweep from a scalar ``loss`` into the graph's ParamStore.

    Store gradients are zeroed first, then accumulated.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    store = graph.store
    if store is not None:
        store.zero_grad()
    for n in graph.nodes:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(graph.nodes):
        g = node.grad
        if g is None or not node.parents:
            continue
        if not node.differentiable:
            raise GraphError(f"gradient reaches non-differentiable op {node.op!r}")
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            parent.grad = pg if parent.grad is None else parent.grad + pg
    if store is not None:
        for name, node in graph._param_nodes.items():
            if node.grad is not None:
                store[name].grad += node.grad


# ------------------------------------------------------------------ scalars


def weighted_bce(logit: float, label: float, weight: float) -> float:
    """Scalar weighted binary cross-entropy on a logit."""
    if weight <= 0:
        raise DomainError(f"weight must be positive, got {weight}")
    return float(weight * (-label * _stable_log_sigmoid(np.float64(logit)) - (1 - label) * _stable_log_sigmoid(np.float64(-logit))))


def softmax_ce(logits, cls: int) -> float:
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= cls < logits.shape[-1]:
        raise DomainError(f"class {cls} out of range [0, {logits.shape[-1]})")
    d = np.delete(logits - logits[cls], cls)
    top = d.max(initial=-np.inf)
    if top <= 0:
        # log1p keeps large-margin losses positive instead of rounding to 0
        return float(np.log1p(np.exp(d).sum()))
    return float(top + np.log(np.exp(-top) + np.exp(d - top).sum()))


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(store: ParamStore, hyper: AdamHyper = AdamHyper()) -> ParamStore:
    """Bias-corrected Adam update in place.  Frozen parameters are skipped."""
    store.step += 1
    t = store.step
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.items():
        if name in store.frozen:
            continue
        g = p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        p.value -= hyper.lr * (p.m / c1) / (np.sqrt(p.v / c2) + hyper.eps)
    return store


# --------------------------------------------------------------- checkpoint

_MAGIC = b"MALCKPT1"


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    """Write values as a JSON header followed by little-endian float64 payloads."""
    entries = []
    chunks = []
    offset = 0
    for name, p in store.items():
        raw = p.value.astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "params": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload)


def read_checkpoint_meta(path) -> dict:
    header, _ = _read_container(path)
    return header.get("meta", {})


def _read_container(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != _MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header ({exc})") from exc
    payload = data[16 + hlen :]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptionError(f"{path}: checksum mismatch")
    return header, payload


def load_checkpoint(path, into: ParamStore | None = None) -> ParamStore:
    """Read a checkpoint.  With ``into``, names and shapes must match exactly."""
    header, payload = _read_container(path)
    loaded: dict[str, np.ndarray] = {}
    for e in header["params"]:
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        loaded[e["name"]] = arr.reshape(e["shape"]).astype(DTYPE)
    if into is None:
        store = ParamStore()
        for name, arr in loaded.items():
            store.add(name, arr)
        return store
    bad = sorted(set(into.names()) ^ set(loaded))
    bad += sorted(n for n in loaded if n in into and into[n].shape != loaded[n].shape)
    if bad:
        raise ShapeError(f"checkpoint does not match architecture; offending parameters: {', '.join(bad)}")
    for name, arr in loaded.items():
        into[name].value[...] = arr
    return into


# --------------------------------------------------------------- grad check


def grad_check(
    model_fn: Callable[[ParamStore], tuple[Graph, Node]],
    store: ParamStore,
    eps: float = 1e-5,
    seed: int = 0,
    fraction: float = 0.01,
    min_coords: int = 50,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``model_fn`` must build a fresh graph over ``store`` and return it with
    its scalar loss.  Coordinates are a random ``fraction`` subsample (at
    least ``min_coords``, or all of them if fewer exist).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise DomainError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    graph, loss = model_fn(store)
    backward(graph, loss)
    analytic = {name: p.grad.copy() for name, p in store.items()}

    coords = [(name, i) for name, p in store.items() for i in range(p.value.size)]
    n_pick = min(len(coords), max(min_coords, int(np.ceil(fraction * len(coords)))))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(coords), size=n_pick, replace=False)

    worst = 0.0
    for k in sorted(picks):
        name, i = coords[k]
        flat = store[name].value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = float(model_fn(store)[1].value)
        flat[i] = orig - eps
        down = float(model_fn(store)[1].value)
        flat[i] = orig
        num = (up - down) / (2 * eps)
        ana = float(analytic[name].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
