"""Small dense-tensor autodiff engine used by the policy and critic networks.

Values are float64 numpy arrays. Operations record themselves on the active
:class:`Tape` (if any input requires a gradient); :meth:`Tape.backward` then
walks the records in reverse creation order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


class Tape:
    """Records differentiable operations; single-threaded.

    Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor) -> list[Tensor]:
        """Reverse-mode accumulation from a scalar ``loss``.

        Returns the leaf tensors (inputs never produced on this tape) that
        received a gradient; their ``.grad`` holds d loss / d leaf.
        """
        if self._consumed:
            raise TapeError("backward already run on this tape; call reset() first")
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        produced = {id(n.out) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            node.out.grad = None
            for t in node.inputs:
                if t.requires_grad:
                    t.grad = None
                    if id(t) not in produced:
                        leaves[id(t)] = t
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        self._consumed = True
        for t in leaves.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.value)
        return list(leaves.values())


def backward(loss: Tensor, tape: Tape) -> list[Tensor]:
    return tape.backward(loss)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def square(a: Tensor) -> Tensor:
    return _emit(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)
    return _emit(v, (a,), lambda g: (g * v,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.value > 0
    scale = np.where(mask, 1.0, slope)
    return _emit(a.value * scale, (a,), lambda g: (g * scale,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum needs equal shapes, got {a.shape} and {b.shape}")
    pick_a = a.value <= b.value
    return _emit(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# -- reductions and shape ops ----------------------------------------------------

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    v = a.value.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(v, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    v = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit(v, tensors, bw)


def matmul(a, b) -> Tensor:
    """``a[..., p, q] @ b[q, r]`` (``b`` may also carry the same leading dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    v = a.value @ b.value

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        if b.value.ndim == 2:
            q, r = b.shape
            gb = a.value.reshape(-1, q).T @ g.reshape(-1, r)
        else:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(v, (a, b), bw)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.value
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty tensor")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (logits,), bw)


# -- graph ops --------------------------------------------------------------------

@dataclass(frozen=True)
class NeighborGraph:
    """k-NN adjacency: row ``i`` lists the ``k`` nearest other rows."""

    neighbor_indices: np.ndarray
    k: int

    def __post_init__(self):
        idx = self.neighbor_indices
        n = idx.shape[0]
        if idx.ndim != 2 or idx.shape[1] != self.k:
            raise DimensionError(f"neighbor matrix shape {idx.shape} does not match k={self.k}")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ConfigurationError("neighbor index out of range")

    @property
    def n(self) -> int:
        return self.neighbor_indices.shape[0]


def knn_graph(points, k: int) -> NeighborGraph:
    """Indices of the k nearest rows (Euclidean), self excluded, ties to lower index."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if pts.shape[1] < 1:
        raise DimensionError("points need at least one coordinate")
    if not 0 < k < n:
        raise ConfigurationError(f"k={k} must satisfy 0 < k < N={n}")
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return NeighborGraph(order.astype(np.int64), k)


def _neighbor_index(graph) -> np.ndarray:
    return graph.neighbor_indices if isinstance(graph, NeighborGraph) else np.asarray(graph)


def gather_neighbors(x: Tensor, graph) -> Tensor:
    """``x[..., N, H]`` -> ``[..., N, k, H]`` with slot j holding neighbor j's row."""
    idx = _neighbor_index(graph)
    if x.shape[-2] != idx.shape[-2]:
        raise DimensionError(f"features have {x.shape[-2]} rows, graph has {idx.shape[-2]}")
    if x.value.ndim == 2:
        v = x.value[idx]
    else:
        b = np.arange(x.shape[0]).reshape(-1, 1, 1)
        v = x.value[b, idx]

    def bw(g):
        out = np.zeros_like(x.value)
        if x.value.ndim == 2:
            np.add.at(out, idx, g)
        else:
            np.add.at(out, (b, idx), g)
        return (out,)

    return _emit(v, (x,), bw)


def neighbor_max_pool(edge_features: Tensor, graph=None) -> Tensor:
    """Max over the neighbor axis ``[..., N, k, H] -> [..., N, H]``.

    The gradient goes to the arg-max slot only; ties resolve to the lowest slot.
    """
    e = edge_features.value
    if e.ndim < 3:
        raise DimensionError(f"edge features need [..., N, k, H], got {e.shape}")
    if graph is not None:
        idx = _neighbor_index(graph)
        if e.shape[-3:-1] != idx.shape[-2:]:
            raise DimensionError(f"edge features {e.shape} do not match graph {idx.shape}")
    arg = np.argmax(e, axis=-2)
    v = np.take_along_axis(e, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        out = np.zeros_like(e)
        np.put_along_axis(out, arg[..., None, :], g[..., None, :], axis=-2)
        return (out,)

    return _emit(v, (edge_features,), bw)


def neighbor_max_gather(x: Tensor, graph) -> Tensor:
    """Fused ``neighbor_max_pool(gather_neighbors(x, graph))``.

    Same values and gradients as the composition; the backward pass is a
    single scatter-add instead of going through the ``[..., N, k, H]`` stack.
    """
    idx = _neighbor_index(graph)
    xv = x.value
    if xv.shape[-2] != idx.shape[-2]:
        raise DimensionError(f"features have {xv.shape[-2]} rows, graph has {idx.shape[-2]}")
    batched = xv.ndim == 3
    if not batched:
        xv = xv[None]
        idx = idx[None] if idx.ndim == 2 else idx
    bsz, n, h = xv.shape
    idx = np.broadcast_to(idx, (bsz, n, idx.shape[-1]))
    slots = np.ascontiguousarray(np.moveaxis(idx, -1, 0)) + np.arange(bsz)[:, None] * n  # [k, B, N]
    x2 = xv.reshape(bsz * n, h)
    best = np.take(x2, slots[0], axis=0)
    for rows in slots[1:]:
        np.maximum(best, np.take(x2, rows, axis=0), out=best)
    value = best if batched else best[0]

    def bw(g):
        # route each output's gradient to the first slot attaining the max
        g3 = g if batched else g[None]
        src = np.full(best.shape, -1, dtype=np.int64)
        for rows in slots:
            hit = (src < 0) & (np.take(x2, rows, axis=0) == best)
            src = np.where(hit, rows[:, :, None], src)
        flat = src * h + np.arange(h)
        out = np.bincount(flat.ravel(), weights=g3.ravel(), minlength=bsz * n * h)
        out = out.reshape(bsz, n, h)
        return (out if batched else out[0],)

    return _emit(value, (x,), bw)


def max_over_points(x: Tensor) -> Tensor:
    """``[..., N, H] -> [..., 1, H]`` global max; ties to the lowest row."""
    arg = np.argmax(x.value, axis=-2)[..., None, :]
    v = np.take_along_axis(x.value, arg, axis=-2)

    def bw(g):
        out = np.zeros_like(x.value)
        np.put_along_axis(out, arg, g, axis=-2)
        return (out,)

    return _emit(v, (x,), bw)


# -- parameters -------------------------------------------------------------------

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(1.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True, name=name + ".w")
    b = Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True, name=name + ".b")
    return w, b


def gradient_check(f: Callable[[], Tensor], params: Tensor | Iterable[Tensor], step: float = 1e-5,
                   floor: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its scalar output from the current ``.value`` of
    ``params`` on each call. ``floor`` bounds the denominator so that
    coordinates whose true gradient is zero are judged by the absolute
    difference (central differences carry ~1e-11 of rounding noise).
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().value)
            flat[i] = orig - step
            fm = float(f().value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(floor, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


_HEADER = "DIFFMATH-PARAMS v1"
_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-\[\]]+$")


def format_params(params: dict[str, np.ndarray]) -> str:
    lines = [_HEADER, str(len(params))]
    for name, arr in params.items():
        if not _NAME_RE.match(name):
            raise ValueError(f"bad parameter name {name!r}")
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(" ".join([name, *map(str, arr.shape)]))
        lines.append(" ".join(f"{v:.17g}" for v in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def parse_params(lines: Sequence[str], first_lineno: int = 1) -> dict[str, np.ndarray]:
    """Inverse of :func:`format_params`; ``lines`` excludes trailing newlines."""

    def fail(offset, msg):
        raise ParseError(f"line {first_lineno + offset}: {msg}")

    if not lines or lines[0].strip() != _HEADER:
        fail(0, f"expected header {_HEADER!r}")
    if len(lines) < 2:
        fail(1, "missing tensor count")
    try:
        count = int(lines[1])
    except ValueError:
        fail(1, "tensor count is not an integer")
    out: dict[str, np.ndarray] = {}
    pos = 2
    for _ in range(count):
        if pos + 1 >= len(lines):
            fail(min(pos, len(lines)), "truncated parameter block")
        head = lines[pos].split()
        if not head:
            fail(pos, "empty tensor header")
        try:
            shape = tuple(int(d) for d in head[1:])
        except ValueError:
            fail(pos, "non-integer dimension")
        try:
            values = np.array([float(v) for v in lines[pos + 1].split()], dtype=np.float64)
        except ValueError:
            fail(pos + 1, "non-numeric value")
        if values.size != int(np.prod(shape)):
            fail(pos + 1, f"expected {int(np.prod(shape))} values for {head[0]}, got {values.size}")
        out[head[0]] = values.reshape(shape)
        pos += 2
    return out
