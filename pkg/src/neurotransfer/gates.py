"""Stepping-gates environments: N-parity and a small ALU.

Observations and actions are bit vectors written most-significant bit first.

N-parity
    Observation length is always ``N``; level ``l`` activates the first
    ``l + 1`` bits and leaves the rest at 0. One output bit.

Simple ALU
    Observation is ``[c3 c2 c1 c0 i3 i2 i1 i0]`` (control code, then data
    nibble), action is ``[o3 o2 o1 o0]``. Level ``l`` presents control codes
    ``0..l``; the codes name MUX, NAND, NOT, AND, XOR, INC, DEC, SHL, SHR.

Two modes: ``enumerated`` walks through every active input combination in
binary-counting order (one NE episode), ``sampled`` draws one random input
and ends after a single step (RL episodes).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

ENUMERATED = "enumerated"
SAMPLED = "sampled"

ALU_OPS = ("MUX", "NAND", "NOT", "AND", "XOR", "INC", "DEC", "SHL", "SHR")
ALU_LEVELS = len(ALU_OPS) - 1


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class GatesTask:
    kind: str  # "parity" or "alu"
    n_bits: int = 6  # parity width; ignored for the ALU
    mode: str = ENUMERATED

    def __post_init__(self):
        if self.kind not in ("parity", "alu"):
            raise ValueError(f"unknown gates task {self.kind!r}")
        if self.kind == "parity" and self.n_bits < 2:
            raise ValueError("parity needs at least 2 bits")
        if self.mode not in (ENUMERATED, SAMPLED):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_levels(self) -> int:
        return self.n_bits - 1 if self.kind == "parity" else ALU_LEVELS

    @property
    def n_inputs(self) -> int:
        return self.n_bits if self.kind == "parity" else 8

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == "parity" else 4

    def check_level(self, level: int) -> None:
        if not 1 <= level <= self.n_levels:
            raise PreconditionError(f"level {level} outside 1..{self.n_levels}")


def parity_task(n: int = 6, mode: str = ENUMERATED) -> GatesTask:
    return GatesTask("parity", n, mode)


def alu_task(mode: str = ENUMERATED) -> GatesTask:
    return GatesTask("alu", 8, mode)


def _bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - k)) & 1 for k in range(width)]


def _value(bits) -> int:
    v = 0
    for b in bits:
        v = (v << 1) | int(b)
    return v


def alu_control_width(level: int) -> int:
    """Number of control bits in use at ``level`` (codes 0..level)."""
    return max(1, int(level).bit_length())


def _alu_apply(code: int, nibble: int) -> int:
    i3, i2, i1, i0 = _bits(nibble, 4)
    op = ALU_OPS[code]
    if op == "MUX":
        sel = 2 * i3 + i2
        return (nibble >> sel) & 1
    if op in ("NAND", "AND", "XOR"):
        a_hi, a_lo, b_hi, b_lo = i3, i2, i1, i0
        if op == "NAND":
            hi, lo = 1 - (a_hi & b_hi), 1 - (a_lo & b_lo)
        elif op == "AND":
            hi, lo = a_hi & b_hi, a_lo & b_lo
        else:
            hi, lo = a_hi ^ b_hi, a_lo ^ b_lo
        return (hi << 1) | lo
    if op == "NOT":
        return (~nibble) & 0xF
    if op == "INC":
        return (nibble + 1) % 16
    if op == "DEC":
        return (nibble - 1) % 16
    if op == "SHL":
        return (nibble << 1) & 0xF
    return nibble >> 1  # SHR


def oracle(task: GatesTask, level: int, bits) -> np.ndarray:
    """Ground-truth output bits for one observation."""
    bits = [int(b) for b in np.asarray(bits).ravel()]
    if len(bits) != task.n_inputs:
        raise PreconditionError(f"expected {task.n_inputs} input bits, got {len(bits)}")
    task.check_level(level)
    if task.kind == "parity":
        active = level + 1
        if any(bits[active:]):
            raise PreconditionError("inactive parity bits must be 0")
        return np.array([sum(bits) % 2], dtype=np.int64)
    code = _value(bits[:4])
    if code > level:
        raise PreconditionError(f"control code {code} is not presented at level {level}")
    return np.array(_bits(_alu_apply(code, _value(bits[4:])), 4), dtype=np.int64)


def enumerate_inputs(task: GatesTask, level: int) -> np.ndarray:
    """Every active input combination of ``level`` in canonical counting order."""
    task.check_level(level)
    if task.kind == "parity":
        active = level + 1
        rows = np.zeros((2 ** active, task.n_bits), dtype=np.int64)
        for k in range(2 ** active):
            rows[k, :active] = _bits(k, active)
        return rows
    rows = [_bits(code, 4) + _bits(nib, 4) for code in range(level + 1) for nib in range(16)]
    return np.array(rows, dtype=np.int64)


def truth_table(task: GatesTask, level: int) -> tuple[np.ndarray, np.ndarray]:
    inputs = enumerate_inputs(task, level)
    outputs = np.array([oracle(task, level, row) for row in inputs], dtype=np.int64)
    return inputs, outputs


_TABLE_CACHE: dict[tuple[GatesTask, int], tuple[np.ndarray, np.ndarray]] = {}


def cached_truth_table(task: GatesTask, level: int) -> tuple[np.ndarray, np.ndarray]:
    key = (replace(task, mode=ENUMERATED), level)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = truth_table(*key)
    return _TABLE_CACHE[key]


def truth_table_csv(task: GatesTask, level: int) -> str:
    inputs, outputs = truth_table(task, level)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"in{k}" for k in range(inputs.shape[1])] + [f"out{k}" for k in range(outputs.shape[1])])
    for i, o in zip(inputs, outputs):
        w.writerow(list(i) + list(o))
    return buf.getvalue()


@dataclass(frozen=True)
class GatesState:
    task: GatesTask
    level: int
    step: int
    observation: np.ndarray = field(compare=False)
    inputs: np.ndarray = field(compare=False, repr=False)  # the episode's input rows


def reset(task: GatesTask, level: int, rng: np.random.Generator | None = None) -> tuple[GatesState, np.ndarray]:
    if task.mode == ENUMERATED:
        rows = enumerate_inputs(task, level)
    else:
        if rng is None:
            raise PreconditionError("sampled mode needs an rng")
        rows = sample_inputs(task, level, rng, 1)
    obs = rows[0].astype(np.float64)
    return GatesState(task, level, 0, obs, rows), obs


def sample_inputs(task: GatesTask, level: int, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` uniformly random observations of ``level``; inactive bits are 0."""
    task.check_level(level)
    if task.kind == "parity":
        rows = np.zeros((n, task.n_bits), dtype=np.int64)
        rows[:, :level + 1] = rng.integers(0, 2, size=(n, level + 1))
        return rows
    codes = rng.integers(0, level + 1, size=n)
    nibs = rng.integers(0, 16, size=n)
    rows = np.zeros((n, 8), dtype=np.int64)
    for k in range(4):
        rows[:, k] = (codes >> (3 - k)) & 1
        rows[:, 4 + k] = (nibs >> (3 - k)) & 1
    return rows


def threshold(actions) -> np.ndarray:
    return (np.asarray(actions, dtype=np.float64) > 0.5).astype(np.int64)


def step(state: GatesState, action) -> tuple[GatesState, np.ndarray, float, bool]:
    task = state.task
    act = np.asarray(action).ravel()
    if act.shape != (task.n_outputs,):
        raise PreconditionError(f"expected {task.n_outputs} action values, got {act.shape}")
    target = oracle(task, state.level, state.inputs[state.step])
    reward = float(np.mean(threshold(act) == target))
    nxt = state.step + 1
    done = nxt >= len(state.inputs)
    obs = state.observation if done else state.inputs[nxt].astype(np.float64)
    return GatesState(task, state.level, nxt, obs, state.inputs), obs, reward, done


Policy = Callable[[np.ndarray], np.ndarray]


def batch_rewards(task: GatesTask, level: int, outputs) -> tuple[float, float]:
    """(mean per-step reward, success) of real-valued outputs over the full table."""
    _, target = cached_truth_table(task, level)
    correct = threshold(outputs).reshape(target.shape) == target
    return float(correct.mean()), float(correct.all(axis=1).mean())


def evaluate_success(task: GatesTask, level: int, policy: Policy) -> float:
    """Fraction of the level's input combinations answered with every bit right.

    ``policy`` maps an (rows, n_inputs) array to (rows, n_outputs) reals.
    """
    inputs, _ = cached_truth_table(task, level)
    outputs = np.asarray(policy(inputs.astype(np.float64)), dtype=np.float64)
    return batch_rewards(task, level, outputs)[1]


def oracle_policy(task: GatesTask, level: int) -> Policy:
    def act(rows):
        rows = np.atleast_2d(rows)
        return np.array([oracle(task, level, r) for r in rows], dtype=np.float64)

    return act
