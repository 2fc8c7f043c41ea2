"""(mu/mu_w, lambda)-CMA-ES with the tutorial default parameters.

Minimisation throughout; callers maximising a reward negate it before
``tell``. ``tell`` depends on fitness values only through their ranking
(stable sort, so ties go to the lower candidate index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .nnet import DimensionError

MAX_CONDITION = 1e14


@dataclass(frozen=True)
class CmaParams:
    dim: int
    popsize: int
    mu: int
    weights: np.ndarray
    mueff: float
    cs: float
    damps: float
    cc: float
    c1: float
    cmu: float
    chi_n: float
    eigen_every: int

    @classmethod
    def defaults(cls, dim: int, popsize: int | None = None) -> "CmaParams":
        n = dim
        lam = popsize or 4 + int(math.floor(3 * math.log(n)))
        mu = lam // 2
        raw = np.log((lam + 1) / 2.0) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mueff = 1.0 / np.sum(weights ** 2)
        cs = (mueff + 2) / (n + mueff + 5)
        damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
        cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
        c1 = 2 / ((n + 1.3) ** 2 + mueff)
        cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        eigen_every = max(1, int(1 / (10 * n * (c1 + cmu))))
        return cls(n, lam, mu, weights, float(mueff), cs, damps, cc, c1, cmu, chi_n, eigen_every)

    def as_dict(self) -> dict:
        return {"popsize": self.popsize, "mu": self.mu, "mueff": self.mueff, "cs": self.cs, "damps": self.damps,
                "cc": self.cc, "c1": self.c1, "cmu": self.cmu, "eigen_every": self.eigen_every}


@dataclass(frozen=True)
class CmaState:
    params: CmaParams
    mean: np.ndarray
    sigma: float
    C: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    B: np.ndarray
    D: np.ndarray  # square roots of the eigenvalues of C
    generation: int = 0
    eigen_generation: int = 0

    @property
    def popsize(self) -> int:
        return self.params.popsize

    @property
    def inv_sqrt_C(self) -> np.ndarray:
        return (self.B / self.D) @ self.B.T


def init(dim: int, mean0=None, sigma0: float = 0.5, popsize: int | None = None) -> CmaState:
    if dim < 1:
        raise DimensionError("CMA-ES needs at least one dimension")
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    mean = np.zeros(dim) if mean0 is None else np.array(mean0, dtype=np.float64).reshape(dim)
    params = CmaParams.defaults(dim, popsize)
    return CmaState(params, mean, float(sigma0), np.eye(dim), np.zeros(dim), np.zeros(dim), np.eye(dim), np.ones(dim))


def ask(state: CmaState, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((state.params.popsize, state.params.dim))
    return state.mean + state.sigma * (z * state.D) @ state.B.T


def _decompose(C: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    C = (C + C.T) / 2.0
    evals, B = np.linalg.eigh(C)
    lo, hi = evals.min(), evals.max()
    if lo <= 0 or hi / lo > MAX_CONDITION:
        C = C + (hi / MAX_CONDITION - min(lo, 0.0)) * np.eye(len(C))
        evals, B = np.linalg.eigh(C)
    return C, B, np.sqrt(evals)


def tell(state: CmaState, candidates, fitnesses) -> CmaState:
    p = state.params
    X = np.asarray(candidates, dtype=np.float64)
    if X.shape != (p.popsize, p.dim):
        raise DimensionError(f"expected {p.popsize} candidates of dim {p.dim}, got {X.shape}")
    f = np.asarray(fitnesses, dtype=np.float64).ravel()
    f = np.where(np.isfinite(f), f, np.inf)
    order = np.argsort(f, kind="stable")[: p.mu]
    Y = (X[order] - state.mean) / state.sigma
    y_w = p.weights @ Y
    mean = state.mean + state.sigma * y_w
    gen = state.generation + 1

    p_sigma = (1 - p.cs) * state.p_sigma + math.sqrt(p.cs * (2 - p.cs) * p.mueff) * (state.inv_sqrt_C @ y_w)
    norm_ps = float(np.linalg.norm(p_sigma))
    h_sigma = norm_ps / math.sqrt(1 - (1 - p.cs) ** (2 * gen)) < (1.4 + 2 / (p.dim + 1)) * p.chi_n
    p_c = (1 - p.cc) * state.p_c + h_sigma * math.sqrt(p.cc * (2 - p.cc) * p.mueff) * y_w
    delta_h = (1 - h_sigma) * p.cc * (2 - p.cc)
    rank_mu = (Y.T * p.weights) @ Y
    C = ((1 + p.c1 * delta_h - p.c1 - p.cmu * p.weights.sum()) * state.C
         + p.c1 * np.outer(p_c, p_c) + p.cmu * rank_mu)
    sigma = state.sigma * math.exp((p.cs / p.damps) * (norm_ps / p.chi_n - 1))

    B, D, eig_gen = state.B, state.D, state.eigen_generation
    if gen - eig_gen >= p.eigen_every:
        C, B, D = _decompose(C)
        eig_gen = gen
    else:
        C = (C + C.T) / 2.0
    return replace(state, mean=mean, sigma=sigma, C=C, p_sigma=p_sigma, p_c=p_c, B=B, D=D,
                   generation=gen, eigen_generation=eig_gen)


def minimize(fn, mean0, sigma0: float, max_evals: int, rng: np.random.Generator, target: float | None = None):
    """Plain ask/tell loop; returns (final state, evaluations used, f(mean) history)."""
    state = init(len(mean0), mean0, sigma0)
    evals = 0
    history = []
    while evals + state.popsize <= max_evals:
        X = ask(state, rng)
        state = tell(state, X, [fn(x) for x in X])
        evals += state.popsize
        history.append(float(fn(state.mean)))
        if target is not None and history[-1] < target:
            break
    return state, evals, history
