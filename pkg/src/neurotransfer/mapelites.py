"""MAP-Elites with a uniform grid over a 2D behaviour space."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nnet import Layout, LayeredNet, flatten

RESOLUTION = 50
MUTATION_SIGMA = 0.1
BATCH_SIZE = 100

# evaluate(params (B, dim)) -> (fitness (B,), descriptors (B, 2))
Evaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def policy_layout(n_obs: int, n_act: int = 4, hidden: int = 32, depth: int = 4) -> Layout:
    return Layout((n_obs,) + (hidden,) * depth + (n_act,), ("tanh",) * (depth + 1))


def cell_index(descriptor, bounds=((0.0, 0.0), (1.0, 1.0)), resolution: int = RESOLUTION) -> tuple[int, int]:
    """Uniform binning of a descriptor inside ``bounds``; out-of-range values are clamped."""
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    u = np.clip((np.asarray(descriptor, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    idx = np.minimum((u * resolution).astype(int), resolution - 1)
    return int(idx[0]), int(idx[1])


@dataclass
class Archive:
    bounds: tuple[tuple[float, float], tuple[float, float]] = ((0.0, 0.0), (1.0, 1.0))
    resolution: int = RESOLUTION
    fitness: np.ndarray = field(init=False)
    descriptors: np.ndarray = field(init=False)
    params: dict[tuple[int, int], np.ndarray] = field(init=False, default_factory=dict)

    def __post_init__(self):
        self.fitness = np.full((self.resolution, self.resolution), -np.inf)
        self.descriptors = np.full((self.resolution, self.resolution, 2), np.nan)

    @property
    def filled(self) -> np.ndarray:
        return np.isfinite(self.fitness)

    def __len__(self) -> int:
        return len(self.params)

    def cells(self) -> list[tuple[int, int]]:
        return sorted(self.params)

    def cell_of(self, descriptor) -> tuple[int, int]:
        return cell_index(descriptor, self.bounds, self.resolution)


def try_insert(archive: Archive, params, fitness: float, descriptor) -> bool:
    """Store ``params`` if its cell is empty or it strictly beats the incumbent."""
    if not np.isfinite(fitness):
        return False
    cell = archive.cell_of(descriptor)
    if fitness > archive.fitness[cell]:
        archive.fitness[cell] = fitness
        archive.descriptors[cell] = descriptor
        archive.params[cell] = np.array(params, dtype=np.float64)
        return True
    return False


def seed_archive(archive: Archive, layout: Layout, rng: np.random.Generator, batch_size: int,
                 evaluate: Evaluator) -> int:
    """Fill the archive with ``batch_size`` randomly initialised policies."""
    pop = np.stack([flatten(LayeredNet.random(layout, rng)).values for _ in range(batch_size)])
    return _insert_batch(archive, pop, evaluate)


def _insert_batch(archive: Archive, pop: np.ndarray, evaluate: Evaluator) -> int:
    fit, desc = evaluate(pop)
    return sum(try_insert(archive, p, f, d) for p, f, d in zip(pop, fit, desc))


def me_iteration(archive: Archive, rng: np.random.Generator, batch_size: int, evaluate: Evaluator,
                 sigma: float = MUTATION_SIGMA) -> int:
    """One batch: uniform parents from filled cells, Gaussian offspring, sequential insertion.

    Returns the number of insertions.
    """
    cells = archive.cells()
    if not cells:
        raise ValueError("archive must be seeded before iterating")
    picks = rng.integers(len(cells), size=batch_size)
    parents = np.stack([archive.params[cells[k]] for k in picks])
    children = parents + sigma * rng.standard_normal(parents.shape)
    return _insert_batch(archive, children, evaluate)


@dataclass(frozen=True)
class ArchiveMetrics:
    coverage: float
    max_fitness: float | None
    qd_score: float


def metrics(archive: Archive) -> ArchiveMetrics:
    filled = archive.filled
    n = int(filled.sum())
    if n == 0:
        return ArchiveMetrics(0.0, None, 0.0)
    vals = archive.fitness[filled]
    return ArchiveMetrics(n / archive.resolution ** 2, float(vals.max()), float(np.maximum(vals, 0.0).sum()))


def export_grid(archive: Archive) -> str:
    """CSV with one row per cell: row, col, fitness, descriptor x/y, filled flag."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "fitness", "desc_x", "desc_y", "filled"])
    for r in range(archive.resolution):
        for c in range(archive.resolution):
            if archive.filled[r, c]:
                dx, dy = archive.descriptors[r, c]
                w.writerow([r, c, repr(float(archive.fitness[r, c])), repr(float(dx)), repr(float(dy)), 1])
            else:
                w.writerow([r, c, "", "", "", 0])
    return buf.getvalue()
