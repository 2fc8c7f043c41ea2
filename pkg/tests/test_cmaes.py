import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurotransfer import cmaes
from neurotransfer.nnet import DimensionError

cma = pytest.importorskip("cma")


# ---------------------------------------------------------------------------
# independent pure-Python transcription of the tutorial update for n = 2
# ---------------------------------------------------------------------------


def _mat_vec(m, v):
    return [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]


def _inv_sqrt_2x2(c):
    # sqrt of a 2x2 SPD matrix: (C + s I) / t with s = sqrt(det C), t = sqrt(tr C + 2 s)
    a, b, d = c[0][0], c[0][1], c[1][1]
    s = math.sqrt(a * d - b * b)
    t = math.sqrt(a + d + 2 * s)
    r = [[(a + s) / t, b / t], [b / t, (d + s) / t]]
    det = r[0][0] * r[1][1] - r[0][1] * r[1][0]
    return [[r[1][1] / det, -r[0][1] / det], [-r[1][0] / det, r[0][0] / det]]


def reference_tell(mean, sigma, C, ps, pc, gen, X, f):
    n, lam = 2, len(X)
    mu = lam // 2
    raw = [math.log((lam + 1) / 2) - math.log(i + 1) for i in range(mu)]
    w = [r / sum(raw) for r in raw]
    mueff = sum(w) ** 2 / sum(x * x for x in w)
    cs = (mueff + 2) / (n + mueff + 5)
    ds = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    chi = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    idx = sorted(range(lam), key=lambda i: (f[i], i))[:mu]
    ys = [[(X[i][k] - mean[k]) / sigma for k in range(n)] for i in idx]
    yw = [sum(w[j] * ys[j][k] for j in range(mu)) for k in range(n)]
    new_mean = [mean[k] + sigma * yw[k] for k in range(n)]
    g = gen + 1
    white = _mat_vec(_inv_sqrt_2x2(C), yw)
    new_ps = [(1 - cs) * ps[k] + math.sqrt(cs * (2 - cs) * mueff) * white[k] for k in range(n)]
    norm = math.sqrt(sum(v * v for v in new_ps))
    hs = 1.0 if norm / math.sqrt(1 - (1 - cs) ** (2 * g)) < (1.4 + 2 / (n + 1)) * chi else 0.0
    new_pc = [(1 - cc) * pc[k] + hs * math.sqrt(cc * (2 - cc) * mueff) * yw[k] for k in range(n)]
    dh = (1 - hs) * cc * (2 - cc)
    new_C = [[(1 + c1 * dh - c1 - cmu) * C[a][b] + c1 * new_pc[a] * new_pc[b]
              + cmu * sum(w[j] * ys[j][a] * ys[j][b] for j in range(mu)) for b in range(n)] for a in range(n)]
    new_sigma = sigma * math.exp((cs / ds) * (norm / chi - 1))
    return new_mean, new_sigma, new_C, new_ps, new_pc


def test_tell_matches_reference_on_two_steps():
    rng = np.random.default_rng(42)
    state = cmaes.init(2, [0.3, -0.7], 0.8, popsize=4)
    mean, sigma, C = list(state.mean), state.sigma, [[1.0, 0.0], [0.0, 1.0]]
    ps, pc = [0.0, 0.0], [0.0, 0.0]
    for gen in range(3):
        X = cmaes.ask(state, rng)
        f = [float(np.sum(x ** 2) + 0.5 * x[0] * x[1]) for x in X]
        state = cmaes.tell(state, X, f)
        mean, sigma, C, ps, pc = reference_tell(mean, sigma, C, ps, pc, gen, X.tolist(), f)
        np.testing.assert_allclose(state.mean, mean, rtol=0, atol=1e-12)
        assert abs(state.sigma - sigma) < 1e-12
        np.testing.assert_allclose(state.C, C, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.p_sigma, ps, rtol=0, atol=1e-12)
        np.testing.assert_allclose(state.p_c, pc, rtol=0, atol=1e-12)
    assert state.C[0, 1] != 0.0  # later steps exercised a non-identity covariance


@pytest.mark.parametrize("dim", [2, 10, 149])
def test_strategy_parameters_agree_with_pycma(dim):
    es = cma.CMAEvolutionStrategy([0.0] * dim, 0.5, {"verbose": -9})
    p = cmaes.CmaParams.defaults(dim)
    assert p.popsize == es.popsize and p.mu == es.sp.weights.mu
    np.testing.assert_allclose(p.weights, np.array(es.sp.weights[: p.mu]), rtol=1e-12)
    assert p.mueff == pytest.approx(es.sp.weights.mueff, rel=1e-12)
    assert p.c1 == pytest.approx(es.sp.c1, rel=1e-12)
    assert p.cc == pytest.approx(es.sp.cc, rel=1e-12)


def test_population_size_formula():
    assert cmaes.init(10).popsize == 10
    assert cmaes.init(1).popsize == 4
    with pytest.raises(DimensionError):
        cmaes.init(0)
    with pytest.raises(ValueError):
        cmaes.init(3, sigma0=0.0)


def test_weights_normalised_and_non_increasing():
    for dim in (1, 2, 7, 50, 300):
        w = cmaes.CmaParams.defaults(dim).weights
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.diff(w) <= 0) and np.all(w > 0)


def test_initial_state():
    s = cmaes.init(5, np.ones(5), 0.3)
    assert np.array_equal(s.C, np.eye(5))
    assert not s.p_sigma.any() and not s.p_c.any()


def test_ask_tiny_sigma_returns_mean():
    s = cmaes.init(4, [1.0, 2.0, 3.0, 4.0], 1e-300)
    X = cmaes.ask(s, np.random.default_rng(0))
    assert np.all(X == s.mean)


def test_ask_sample_covariance():
    s = cmaes.init(3, np.zeros(3), 0.7, popsize=100_000)
    X = cmaes.ask(s, np.random.default_rng(1))
    cov = np.cov(X.T)
    np.testing.assert_allclose(np.diag(cov), 0.49, rtol=0.05)
    assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 0.05 * 0.49


def test_ask_deterministic():
    s = cmaes.init(6, sigma0=0.4)
    a = cmaes.ask(s, np.random.default_rng(3))
    b = cmaes.ask(s, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_equal_fitness_uses_index_order():
    s = cmaes.init(3, sigma0=1.0)
    X = cmaes.ask(s, np.random.default_rng(4))
    s1 = cmaes.tell(s, X, np.zeros(len(X)))
    expected = s.mean + (s.params.weights @ (X[: s.params.mu] - s.mean))
    np.testing.assert_allclose(s1.mean, expected, atol=1e-15)
    assert s1.sigma != s.sigma


def test_non_finite_fitness_ranked_last():
    s = cmaes.init(2, sigma0=1.0, popsize=4)
    X = cmaes.ask(s, np.random.default_rng(5))
    a = cmaes.tell(s, X, [np.nan, 1.0, 2.0, np.inf])
    b = cmaes.tell(s, X, [9.0, 1.0, 2.0, 10.0])
    assert np.array_equal(a.mean, b.mean)
    with pytest.raises(DimensionError):
        cmaes.tell(s, X[:3], [1, 2, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["exp", "cube", "affine", "atan"]))
def test_rank_invariance(seed, transform):
    rng = np.random.default_rng(seed)
    s = cmaes.init(4, rng.normal(size=4), 0.5)
    for _ in range(3):
        X = cmaes.ask(s, rng)
        f = rng.normal(size=len(X))
        g = {"exp": np.exp(f), "cube": f ** 3, "affine": 3 * f + 7, "atan": np.arctan(f)}[transform]
        a, b = cmaes.tell(s, X, f), cmaes.tell(s, X, g)
        for field in ("mean", "C", "p_sigma", "p_c"):
            assert getattr(a, field).tobytes() == getattr(b, field).tobytes()
        assert a.sigma == b.sigma
        s = a


def sphere(x):
    return float(np.sum(np.asarray(x) ** 2))


def test_sphere_convergence_ten_seeds():
    for seed in range(10):
        state, evals, _ = cmaes.minimize(sphere, 3.0 * np.ones(10), 0.5, 2000, np.random.default_rng(seed), 1e-10)
        assert sphere(state.mean) < 1e-10 and evals <= 2000, seed


def test_covariance_stays_positive_definite_and_sphere_progress():
    rng = np.random.default_rng(9)
    s = cmaes.init(10, 3.0 * np.ones(10), 0.5)
    best_gen = []
    for _ in range(150):
        X = cmaes.ask(s, rng)
        f = np.sum(X ** 2, axis=1)
        best_gen.append(f.min())
        s = cmaes.tell(s, X, f)
        assert np.array_equal(s.C, s.C.T)
        assert np.linalg.eigvalsh(s.C).min() > 0
    best_so_far = np.minimum.accumulate(best_gen)
    after = np.diff(best_so_far[10:])
    assert np.mean(after <= 0) >= 0.95
    # each generation's best also trends down: compare 10-generation block minima
    blocks = np.array(best_gen[10:]).reshape(-1, 10).min(axis=1)
    assert np.mean(np.diff(blocks) < 0) >= 0.95


def test_reconditioning_caps_condition_number():
    C = np.diag([1.0, 1e-20])
    C2, B, D = cmaes._decompose(C)
    ev = D ** 2
    assert ev.min() > 0 and ev.max() / ev.min() <= 1.0001e14
