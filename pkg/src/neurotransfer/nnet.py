"""Executable network phenotypes.

Two kinds of network are used throughout the package:

* :class:`DagNetwork` -- an arbitrary feedforward graph, the phenotype of a
  NEAT genome (and of a CPPN).
* :class:`LayeredNet` -- a fixed-topology multilayer perceptron with optional
  skip connections and an exact reverse-mode gradient, used by CMA-ES,
  MAP-Elites, PPO and as the HyperNEAT policy.

All arithmetic is float64.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array sizes do not match a network's interface."""


class StructuralError(ValueError):
    """Raised for malformed networks (cycles, mismatched caches, bad shapes)."""


STEEP_SLOPE = 4.9


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _steep_sigmoid(x):
    # slope used by classic NEAT so that weights in [-5, 5] reach saturation
    return 0.5 * (1.0 + np.tanh(0.5 * STEEP_SLOPE * x))


def _swish(x):
    return x * _sigmoid(x)


def _gauss(x):
    return np.exp(-x * x)


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "sigmoid": _sigmoid,
    "steep_sigmoid": _steep_sigmoid,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "swish": _swish,
    "step": lambda x: (x > 0.0).astype(np.float64),
    # CPPN extras
    "sine": np.sin,
    "gauss": _gauss,
    "abs": np.abs,
}


def _activation_grad(tag: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of activation ``tag`` at pre-activation ``z`` (``a = f(z)``)."""
    if tag == "identity":
        return np.ones_like(z)
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "sigmoid":
        return a * (1.0 - a)
    if tag == "steep_sigmoid":
        return STEEP_SLOPE * a * (1.0 - a)
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    if tag == "swish":
        s = _sigmoid(z)
        return s + z * s * (1.0 - s)
    if tag == "step":
        return np.zeros_like(z)
    if tag == "sine":
        return np.cos(z)
    if tag == "gauss":
        return -2.0 * z * a
    if tag == "abs":
        return np.sign(z)
    raise StructuralError(f"unknown activation {tag!r}")


def activate(tag: str, x):
    try:
        fn = ACTIVATIONS[tag]
    except KeyError:
        raise StructuralError(f"unknown activation {tag!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# DAG networks
# ---------------------------------------------------------------------------

INPUT, HIDDEN, OUTPUT = "input", "hidden", "output"


@dataclass(frozen=True)
class Node:
    id: int
    role: str
    activation: str = "identity"
    bias: float = 0.0


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    weight: float
    enabled: bool = True


def topological_order(node_ids: Sequence[int], edges: Sequence[Edge]) -> list[int]:
    """Kahn's algorithm over enabled edges; ties resolved by ascending node id."""
    ids = sorted(node_ids)
    indeg = {n: 0 for n in ids}
    succ: dict[int, list[int]] = {n: [] for n in ids}
    for e in edges:
        if not e.enabled:
            continue
        if e.source not in indeg or e.target not in indeg:
            raise StructuralError(f"edge {e.source}->{e.target} references an unknown node")
        succ[e.source].append(e.target)
        indeg[e.target] += 1
    ready = [n for n in ids if indeg[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(ready, m)
    if len(order) != len(ids):
        raise StructuralError("enabled subgraph contains a cycle")
    return order


class DagNetwork:
    """Feedforward network over an arbitrary DAG.

    Node values are ``activation(bias + sum(w * source))``; input nodes pass
    their input through unchanged. Disabled edges are ignored. A node with no
    incoming enabled edge evaluates to ``activation(bias)``.
    """

    def __init__(self, nodes: Sequence[Node], edges: Sequence[Edge], order: Sequence[int] | None = None):
        self.nodes = list(nodes)
        self.edges = list(edges)
        by_id = {n.id: n for n in self.nodes}
        if len(by_id) != len(self.nodes):
            raise StructuralError("duplicate node ids")
        if order is None:
            order = topological_order(list(by_id), self.edges)
        else:
            order = list(order)
            self._check_order(order, by_id)
        self.order = order
        self.input_ids = [n.id for n in self.nodes if n.role == INPUT]
        self.output_ids = [n.id for n in self.nodes if n.role == OUTPUT]
        incoming: dict[int, list[tuple[int, float]]] = {n: [] for n in by_id}
        for e in self.edges:
            if e.enabled:
                incoming[e.target].append((e.source, e.weight))
        slot = {nid: i for i, nid in enumerate(self.order)}
        self._slot = slot
        plan = []
        for nid in self.order:
            node = by_id[nid]
            if node.role == INPUT:
                continue
            srcs = incoming[nid]
            plan.append((
                slot[nid],
                node.activation,
                node.bias,
                np.array([slot[s] for s, _ in srcs], dtype=np.intp),
                np.array([w for _, w in srcs], dtype=np.float64),
            ))
        self._plan = plan
        self._in_slots = np.array([slot[i] for i in self.input_ids], dtype=np.intp)
        self._out_slots = np.array([slot[o] for o in self.output_ids], dtype=np.intp)

    def _check_order(self, order, by_id):
        if sorted(order) != sorted(by_id):
            raise StructuralError("evaluation order must list every node exactly once")
        pos = {n: i for i, n in enumerate(order)}
        for e in self.edges:
            if e.enabled and pos[e.source] >= pos[e.target]:
                raise StructuralError("evaluation order is not topological")

    @property
    def n_inputs(self) -> int:
        return len(self.input_ids)

    @property
    def n_outputs(self) -> int:
        return len(self.output_ids)

    def __call__(self, inputs):
        return forward_dag(self, inputs)


def forward_dag(net: DagNetwork, inputs) -> np.ndarray:
    """Evaluate ``net`` on one input vector or a batch of rows."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != net.n_inputs:
        raise DimensionError(f"expected {net.n_inputs} inputs, got {x.shape[-1]}")
    vals = np.zeros((len(net.order), x.shape[0]))
    vals[net._in_slots] = x.T
    for slot, act, bias, src, w in net._plan:
        if len(src):
            z = w @ vals[src] + bias
        else:
            z = np.full(x.shape[0], bias)
        vals[slot] = activate(act, z)
    out = vals[net._out_slots].T
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Layered networks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Layout:
    """Shape of a :class:`LayeredNet` and the order of its flat parameters.

    Flat order is layer-major (weights then bias for each layer), followed by
    skip matrices ordered by (source layer, target layer).
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    skip: bool = False

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise DimensionError(f"invalid layer sizes {self.sizes}")
        if len(self.activations) != len(self.sizes) - 1:
            raise DimensionError("need one activation per non-input layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise StructuralError(f"unknown activation {a!r}")

    def skip_pairs(self) -> list[tuple[int, int]]:
        if not self.skip:
            return []
        n = len(self.sizes)
        return [(i, j) for i in range(n) for j in range(i + 2, n)]

    def segments(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        """(kind, index, offset, shape) for every parameter block."""
        segs = []
        off = 0
        for l in range(len(self.sizes) - 1):
            shape = (self.sizes[l], self.sizes[l + 1])
            segs.append(("weight", l, off, shape))
            off += shape[0] * shape[1]
            segs.append(("bias", l, off, (self.sizes[l + 1],)))
            off += self.sizes[l + 1]
        for k, (i, j) in enumerate(self.skip_pairs()):
            shape = (self.sizes[i], self.sizes[j])
            segs.append(("skip", k, off, shape))
            off += shape[0] * shape[1]
        return segs

    @property
    def size(self) -> int:
        kind, _, off, shape = self.segments()[-1]
        return off + int(np.prod(shape))


@dataclass
class LayeredNet:
    layout: Layout
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    skips: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        sizes = self.layout.sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise StructuralError("one weight matrix and bias per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise StructuralError(f"layer {l} has inconsistent shapes")
        if set(self.skips) != set(self.layout.skip_pairs()):
            raise StructuralError("skip matrices must match the layout's skip flag")
        for (i, j), s in self.skips.items():
            if s.shape != (sizes[i], sizes[j]):
                raise StructuralError(f"skip {i}->{j} has shape {s.shape}")

    @classmethod
    def zeros(cls, layout: Layout) -> "LayeredNet":
        return unflatten(layout, np.zeros(layout.size))

    @classmethod
    def random(cls, layout: Layout, rng: np.random.Generator, scale: float = 1.0) -> "LayeredNet":
        """Weights ~ N(0, scale^2 / fan_in), biases zero."""
        values = np.zeros(layout.size)
        for kind, _, off, shape in layout.segments():
            if kind == "bias":
                continue
            n = shape[0] * shape[1]
            values[off:off + n] = rng.normal(0.0, scale / np.sqrt(shape[0]), n)
        return unflatten(layout, values)

    @property
    def n_params(self) -> int:
        return self.layout.size

    def __eq__(self, other):
        if not isinstance(other, LayeredNet) or other.layout != self.layout:
            return NotImplemented if not isinstance(other, LayeredNet) else False
        return np.array_equal(flatten(self).values, flatten(other).values)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __len__(self):
        return len(self.values)


@dataclass
class ForwardCache:
    layout: Layout
    activations: list[np.ndarray]  # a_0 (input) ... a_L (output)
    preacts: list[np.ndarray]  # z_1 ... z_L
    single: bool


def flatten(net: LayeredNet) -> ParamVector:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    for pair in net.layout.skip_pairs():
        parts.append(net.skips[pair].ravel())
    return ParamVector(np.concatenate(parts).astype(np.float64), net.layout)


def unflatten(layout: Layout, values) -> LayeredNet:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (layout.size,):
        raise DimensionError(f"expected {layout.size} parameters, got {values.shape}")
    weights, biases, skips = [], [], {}
    pairs = layout.skip_pairs()
    for kind, idx, off, shape in layout.segments():
        block = values[off:off + int(np.prod(shape))].reshape(shape).copy()
        if kind == "weight":
            weights.append(block)
        elif kind == "bias":
            biases.append(block)
        else:
            skips[pairs[idx]] = block
    return LayeredNet(layout, weights, biases, skips)


def forward_layered(net: LayeredNet, inputs) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    sizes = net.layout.sizes
    if x.shape[-1] != sizes[0]:
        raise DimensionError(f"expected {sizes[0]} inputs, got {x.shape[-1]}")
    acts = [x]
    pre = []
    skip_into: dict[int, list[int]] = {}
    for i, j in net.layout.skip_pairs():
        skip_into.setdefault(j, []).append(i)
    for l, tag in enumerate(net.layout.activations):
        z = acts[-1] @ net.weights[l] + net.biases[l]
        for i in skip_into.get(l + 1, ()):
            z = z + acts[i] @ net.skips[(i, l + 1)]
        pre.append(z)
        acts.append(activate(tag, z))
    out = acts[-1]
    cache = ForwardCache(net.layout, acts, pre, single)
    return (out[0] if single else out), cache


def backprop(net: LayeredNet, cache: ForwardCache, grad_outputs) -> ParamVector:
    """Gradient of ``sum(outputs * grad_outputs)`` w.r.t. every parameter.

    For batched caches the gradient is summed over rows.
    """
    if cache.layout != net.layout:
        raise StructuralError("cache was produced by a network with a different layout")
    g = np.asarray(grad_outputs, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.activations[-1].shape:
        raise DimensionError(f"grad_outputs shape {g.shape} != outputs {cache.activations[-1].shape}")
    layout = net.layout
    L = len(layout.activations)
    skip_from: dict[int, list[int]] = {}
    for i, j in layout.skip_pairs():
        skip_from.setdefault(i, []).append(j)
    grad = np.zeros(layout.size)
    segs = {(k, i): (off, shape) for k, i, off, shape in layout.segments()}
    pairs = layout.skip_pairs()
    pair_index = {p: k for k, p in enumerate(pairs)}
    # dz[l] holds dLoss/dz_{l+1}
    dz: list[np.ndarray | None] = [None] * L
    for l in range(L - 1, -1, -1):
        if l == L - 1:
            da = g
        else:
            da = dz[l + 1] @ net.weights[l + 1].T
            for j in skip_from.get(l + 1, ()):
                da = da + dz[j - 1] @ net.skips[(l + 1, j)].T
        z, a = cache.preacts[l], cache.activations[l + 1]
        dz[l] = da * _activation_grad(layout.activations[l], z, a)
    for l in range(L):
        off, shape = segs[("weight", l)]
        grad[off:off + shape[0] * shape[1]] = (cache.activations[l].T @ dz[l]).ravel()
        off, shape = segs[("bias", l)]
        grad[off:off + shape[0]] = dz[l].sum(axis=0)
    for (i, j), k in pair_index.items():
        off, shape = segs[("skip", k)]
        grad[off:off + shape[0] * shape[1]] = (cache.activations[i].T @ dz[j - 1]).ravel()
    return ParamVector(grad, layout)


def forward_population(layout: Layout, params, inputs) -> np.ndarray:
    """Evaluate P parameter vectors at once.

    ``params`` is (P, n_params); ``inputs`` is (B, n_in) shared by every
    member or (P, B, n_in). Returns (P, B, n_out).
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    if params.shape[1] != layout.size:
        raise DimensionError(f"expected {layout.size} parameters per row, got {params.shape[1]}")
    x = np.asarray(inputs, dtype=np.float64)
    P = params.shape[0]
    if x.ndim == 2:
        x = np.broadcast_to(x, (P,) + x.shape)
    if x.shape[-1] != layout.sizes[0]:
        raise DimensionError(f"expected {layout.sizes[0]} inputs, got {x.shape[-1]}")
    blocks = {}
    for kind, idx, off, shape in layout.segments():
        n = int(np.prod(shape))
        blocks[(kind, idx)] = params[:, off:off + n].reshape((P,) + shape)
    pairs = layout.skip_pairs()
    skip_into: dict[int, list[tuple[int, int]]] = {}
    for k, (i, j) in enumerate(pairs):
        skip_into.setdefault(j, []).append((i, k))
    acts = [x]
    for l, tag in enumerate(layout.activations):
        z = np.matmul(acts[-1], blocks[("weight", l)]) + blocks[("bias", l)][:, None, :]
        for i, k in skip_into.get(l + 1, ()):
            z = z + np.matmul(acts[i], blocks[("skip", k)])
        acts.append(activate(tag, z))
    return acts[-1]
