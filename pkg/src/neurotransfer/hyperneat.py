"""HyperNEAT: a CPPN evolved by NEAT paints the weights of a fixed substrate.

The CPPN reads the coordinates of two neurons ``(x1, y1, x2, y2)`` and its
single output becomes the weight of the edge between them after
thresholding. Biases are the CPPN's answer for ``(origin, neuron)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neat import NeatConfig, NeatGenome
from .nnet import Layout, LayeredNet, StructuralError, forward_dag

CPPN_ACTIVATIONS = ("sine", "gauss", "sigmoid", "abs", "identity")


@dataclass(frozen=True)
class HyperConfig:
    threshold: float = 0.2
    w_max: float = 3.0
    hidden_activation: str = "sigmoid"
    output_activation: str = "sigmoid"


def cppn_config(**overrides) -> NeatConfig:
    """NEAT settings for evolving CPPNs: 4 coordinates in, one weight out."""
    kw = dict(hidden_activation="sine", output_activation="identity", activation_options=CPPN_ACTIVATIONS)
    kw.update(overrides)
    return NeatConfig(4, 1, **kw)


@dataclass(frozen=True)
class Substrate:
    inputs: np.ndarray  # (n_in, 2)
    hidden: np.ndarray  # (n_hidden, 2)
    outputs: np.ndarray  # (n_out, 2)

    def __post_init__(self):
        for name in ("inputs", "hidden", "outputs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 2)
            if len(arr) == 0:
                raise StructuralError(f"substrate layer {name!r} is empty")
            if np.any(np.abs(arr) > 1.0):
                raise StructuralError(f"substrate layer {name!r} has coordinates outside [-1, 1]")
            object.__setattr__(self, name, arr)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.inputs), len(self.hidden), len(self.outputs)

    def layout(self, cfg: HyperConfig = HyperConfig()) -> Layout:
        return Layout(self.sizes, (cfg.hidden_activation, cfg.output_activation))

    def translated(self, dx: float, dy: float) -> "Substrate":
        shift = np.array([dx, dy])
        return Substrate(self.inputs + shift, self.hidden + shift, self.outputs + shift)

    def __eq__(self, other):
        return isinstance(other, Substrate) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("inputs", "hidden", "outputs"))


def _row(n: int, y: float) -> np.ndarray:
    xs = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    return np.column_stack([xs, np.full(n, y)])


def gates_substrate(n_inputs: int, n_outputs: int, n_hidden: int | None = None) -> Substrate:
    """Inputs on y=-1, hidden row on y=0, outputs on y=+1."""
    n_hidden = n_hidden or max(8, 2 * n_inputs)
    return Substrate(_row(n_inputs, -1.0), _row(n_hidden, 0.0), _row(n_outputs, 1.0))


def _compass(center_y: float, radius: float) -> np.ndarray:
    # E, N, W, S around (0, center_y)
    return np.array([[radius, center_y], [0.0, center_y + radius], [-radius, center_y], [0.0, center_y - radius]])


def arena_substrate(n_hidden: int = 32, goal_inputs: bool = False) -> Substrate:
    """Sensors and actuators placed by the direction they face.

    Input order follows the arena observation: five rangefinders (spread
    over the bottom row by bearing, right of heading on the right), four
    food pie slices at their compass points, then the normalised position
    (and optionally the goal) at the row's ends.
    """
    bearings = np.radians([-90.0, -45.0, 0.0, 45.0, 90.0])
    ranges = np.column_stack([-np.sin(bearings), np.full(5, -1.0)])
    pies = _compass(-0.6, 0.3)
    extras = [[-1.0, -0.6], [1.0, -0.6]]
    if goal_inputs:
        extras += [[-1.0, -0.3], [1.0, -0.3]]
    inputs = np.vstack([ranges, pies, np.array(extras)])
    return Substrate(inputs, _row(n_hidden, 0.0), _compass(0.6, 0.3))


def _raw(cppn: NeatGenome, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """CPPN output for every (src, dst) pair, shape (len(src), len(dst))."""
    ns, nd = len(src), len(dst)
    q = np.empty((ns, nd, 4))
    q[:, :, 0:2] = src[:, None, :]
    q[:, :, 2:4] = dst[None, :, :]
    return forward_dag(cppn.to_network(), q.reshape(-1, 4))[:, 0].reshape(ns, nd)


def threshold_weights(raw, cfg: HyperConfig = HyperConfig()) -> np.ndarray:
    """Zero below the threshold, otherwise rescale the remainder onto (0, w_max]."""
    raw = np.asarray(raw, dtype=np.float64)
    mag = np.minimum(np.abs(raw), 1.0)
    w = np.sign(raw) * (mag - cfg.threshold) / (1.0 - cfg.threshold) * cfg.w_max
    return np.where(np.abs(raw) < cfg.threshold, 0.0, w)


def query_weight(cppn: NeatGenome, src, dst, cfg: HyperConfig = HyperConfig()) -> float:
    src = np.asarray(src, dtype=np.float64).reshape(1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(1, 2)
    return float(threshold_weights(_raw(cppn, src, dst), cfg)[0, 0])


def build_policy(cppn: NeatGenome, substrate: Substrate, cfg: HyperConfig = HyperConfig()) -> LayeredNet:
    if cppn.n_inputs != 4 or cppn.n_outputs != 1:
        raise StructuralError("a CPPN has 4 inputs and 1 output")
    origin = np.zeros((1, 2))
    w1 = threshold_weights(_raw(cppn, substrate.inputs, substrate.hidden), cfg)
    w2 = threshold_weights(_raw(cppn, substrate.hidden, substrate.outputs), cfg)
    b1 = threshold_weights(_raw(cppn, origin, substrate.hidden), cfg)[0]
    b2 = threshold_weights(_raw(cppn, origin, substrate.outputs), cfg)[0]
    return LayeredNet(substrate.layout(cfg), [w1, w2], [b1, b2])


# ---------------------------------------------------------------------------
# text format: one "input|hidden|output x y" line per neuron, '#' comments
# ---------------------------------------------------------------------------


def parse_substrate(text: str) -> Substrate:
    layers: dict[str, list[list[float]]] = {"input": [], "hidden": [], "output": []}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] not in layers or len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'input|hidden|output x y', got {line!r}")
        layers[parts[0]].append([float(parts[1]), float(parts[2])])
    return Substrate(np.array(layers["input"]), np.array(layers["hidden"]), np.array(layers["output"]))


def serialize_substrate(substrate: Substrate) -> str:
    lines = []
    for tag, arr in (("input", substrate.inputs), ("hidden", substrate.hidden), ("output", substrate.outputs)):
        lines.extend(f"{tag} {x!r} {y!r}" for x, y in arr.tolist())
    return "\n".join(lines) + "\n"
