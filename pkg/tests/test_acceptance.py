"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL verdict through the ``criterion`` fixture; the
verdicts are listed together at the end of the pytest run.
"""
import itertools
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from test_cmaes import reference_tell, sphere
from test_gates import brute_alu, brute_parity
from test_ppo import SMALL, fd_gradient, toy_problem
from test_stats import brute_p

from neurotransfer import arena as A
from neurotransfer import cmaes, gates
from neurotransfer.harness.config import ExperimentConfig
from neurotransfer.harness.stats import mann_whitney_u, significance_stars
from neurotransfer.harness.trial import run_trial
from neurotransfer.ppo import BERNOULLI, GAUSSIAN, ppo_loss

SEEDS = range(10)


def test_criterion_01_oracle_exhaustive(criterion):
    t0 = time.perf_counter()
    checked = mismatches = 0
    task = gates.parity_task(6)
    for level in range(1, 6):
        for bits in itertools.product((0, 1), repeat=level + 1):
            row = list(bits) + [0] * (5 - level)
            checked += 1
            mismatches += gates.oracle(task, level, row).tolist() != brute_parity(row)
    task = gates.alu_task()
    for level in range(1, task.n_levels + 1):
        for row in gates.enumerate_inputs(task, level):
            checked += 1
            mismatches += gates.oracle(task, level, row).tolist() != brute_alu(row)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 1.0
    criterion(1, ok, f"{checked} (task, level, input) cases, {mismatches} mismatches, {secs:.2f} s")
    assert ok


def test_criterion_02_neat_solves_xor(criterion):
    t0 = time.perf_counter()
    gens = []
    for seed in SEEDS:
        log = run_trial(ExperimentConfig("neat", "parity", n_bits=2, budget=150 * 200), seed)
        # generations are counted from zero, so a solve at index 199 is the 200th
        gens.append(log.summary["first_solve"][-1][1] + 1 if log.summary["solved"] else None)
    secs = time.perf_counter() - t0
    solved = sum(g is not None and g <= 200 for g in gens)
    ok = solved >= 9 and secs < 120
    criterion(2, ok, f"XOR solved in {solved}/10 seeds (generations {gens}), {secs:.0f} s")
    assert ok


def _curriculum_runs(method, curriculum=True, seeds=SEEDS):
    out = []
    for seed in seeds:
        log = run_trial(ExperimentConfig(method, "parity", n_bits=4, curriculum=curriculum), seed)
        out.append(log.summary)
    return out


def test_criterion_03_curriculum_transfer(criterion):
    t0 = time.perf_counter()
    neat_runs = _curriculum_runs("neat")
    cma_runs = _curriculum_runs("cmaes")
    ppo_runs = _curriculum_runs("ppo")
    # HyperNEAT takes part without a performance bar
    hyper_runs = _curriculum_runs("hyperneat", seeds=range(3))
    secs = time.perf_counter() - t0
    n_neat = sum(s["solved"] for s in neat_runs)
    n_cma = sum(s["solved"] for s in cma_runs)
    n_ppo = sum(s["solved"] for s in ppo_runs)
    levels = {m: Counter(s["final_level"] for s in runs) for m, runs in
              (("neat", neat_runs), ("cmaes", cma_runs), ("ppo", ppo_runs), ("hyperneat", hyper_runs))}
    ok = n_neat >= 8 and n_cma >= 8 and n_ppo <= 2
    criterion(3, ok, f"final level reached: NEAT {n_neat}/10, CMA-ES {n_cma}/10, PPO {n_ppo}/10; "
                     f"HyperNEAT {sum(s['solved'] for s in hyper_runs)}/3 (no bar); "
                     f"final-level histograms {dict((m, dict(c)) for m, c in levels.items())}; {secs / 60:.1f} min")
    assert ok


def test_criterion_04_ppo_without_curriculum(criterion):
    t0 = time.perf_counter()
    runs = _curriculum_runs("ppo", curriculum=False)
    secs = time.perf_counter() - t0
    n = sum(s["solved"] for s in runs)
    succ = [round(s["final_success"], 4) for s in runs]
    ok = n >= 8
    criterion(4, ok, f"direct 4-parity solved by PPO in {n}/10 seeds (final success {succ}); {secs / 60:.1f} min")
    assert ok


def test_criterion_05_cmaes_numerics(criterion):
    t0 = time.perf_counter()
    reached = []
    for seed in SEEDS:
        state, evals, _ = cmaes.minimize(sphere, 3.0 * np.ones(10), 0.5, 2000, np.random.default_rng(seed), 1e-10)
        reached.append(sphere(state.mean) < 1e-10 and evals <= 2000)
    rng = np.random.default_rng(7)
    state = cmaes.init(2, [0.5, -0.2], 0.6, popsize=6)
    X = cmaes.ask(state, rng)
    f = [float(x[0] ** 2 + 3 * x[1] ** 2 - x[0] * x[1]) for x in X]
    new = cmaes.tell(state, X, f)
    mean, sigma, C, ps, pc = reference_tell(list(state.mean), state.sigma, [[1.0, 0.0], [0.0, 1.0]],
                                            [0.0, 0.0], [0.0, 0.0], 0, X.tolist(), f)
    err = max(np.max(np.abs(new.mean - mean)), abs(new.sigma - sigma), np.max(np.abs(new.C - np.array(C))),
              np.max(np.abs(new.p_sigma - ps)), np.max(np.abs(new.p_c - pc)))
    secs = time.perf_counter() - t0
    ok = all(reached) and err <= 1e-12 and secs < 60
    criterion(5, ok, f"sphere reached in {sum(reached)}/10 seeds; tell vs reference max error {err:.1e}; {secs:.1f} s")
    assert ok


def test_criterion_06_ppo_gradient(criterion):
    t0 = time.perf_counter()
    worst = {}
    for head in (BERNOULLI, GAUSSIAN):
        errs = []
        for seed in range(20):
            net, mb = toy_problem(head, 100 + seed)
            _, grad, _ = ppo_loss(net, mb, SMALL)
            num = fd_gradient(net, mb, SMALL)
            errs.append(np.linalg.norm(grad - num) / max(np.linalg.norm(grad), np.linalg.norm(num)))
        worst[head] = max(errs)
    secs = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and secs < 60
    criterion(6, ok, f"worst relative error over 20 buffers: bernoulli {worst[BERNOULLI]:.1e}, "
                     f"gaussian {worst[GAUSSIAN]:.1e}; {secs:.1f} s")
    assert ok


def _scripted(maze, points):
    env = A.ArenaEnv(maze, A.STONES)
    policy = A.WaypointPolicy(points)
    total, _, _ = A.rollout(env, lambda obs: policy(env.pos[0])[None])
    return float(total[0]), bool(env.food_reached[0])


def test_criterion_07_stepping_stone_rewards(criterion):
    t0 = time.perf_counter()
    maze = A.shipped_arena("hard_maze")
    oracle, _ = _scripted(maze, maze.waypoints())
    beeline, _ = _scripted(maze, [maze.food])
    # corridor centre lines reach the food while keeping clear of every stone
    route = [[2.6, 0.4], [2.6, 1.2], [0.4, 1.2], [0.4, 2.0], [2.6, 2.0], [2.6, 2.8], [0.4, 2.8], maze.food]
    detour, fed = _scripted(maze, route)
    secs = time.perf_counter() - t0
    ok = oracle >= 9000 and beeline <= 1100 and fed and detour <= 1100 and secs < 10
    criterion(7, ok, f"waypoint oracle {oracle:.0f}; beeline {beeline:.0f}; stone-free route to food {detour:.0f} "
                     f"(food reached: {fed}); {secs:.1f} s")
    assert ok


def test_criterion_08_deceptive_telescoping(criterion):
    t0 = time.perf_counter()
    maze = A.shipped_arena("easy_maze")
    env = A.ArenaEnv(maze, A.DECEPTIVE, n_envs=100)
    rng = np.random.default_rng(0)
    bias = rng.uniform(-1, 1, (100, 4))
    total, final, _ = A.rollout(env, lambda obs: np.clip(bias + rng.normal(0, 0.8, (100, 4)), -1, 1))
    expected = (env.d0 - np.linalg.norm(final - np.array(maze.food), axis=1)) / env.d0
    err = float(np.max(np.abs(total - expected)))
    secs = time.perf_counter() - t0
    ok = err <= 1e-9 and secs < 10
    criterion(8, ok, f"100 random action sequences, max |sum r - (d0 - d_final)/d0| = {err:.1e}; {secs:.1f} s")
    assert ok


def test_criterion_09_map_elites_exploration(criterion):
    t0 = time.perf_counter()
    me = run_trial(ExperimentConfig("mapelites", "stones"), 0)
    rl = run_trial(ExperimentConfig("ppo", "stones"), 0)
    secs = time.perf_counter() - t0
    rows = me.rows
    monotone = all(b["coverage"] >= a["coverage"] and b["best_fitness"] >= a["best_fitness"]
                   and b["qd_score"] >= a["qd_score"] for a, b in zip(rows, rows[1:]))
    me_cov, ppo_cov = me.summary["coverage"], rl.summary["visited_coverage"]
    ratio = me_cov / ppo_cov if ppo_cov else float("inf")
    ok = ratio >= 3 and me.summary["best_fitness"] < 3000 and monotone
    criterion(9, ok, f"MAP-Elites coverage {me_cov:.4f} vs PPO visited {ppo_cov:.4f} (x{ratio:.1f}); "
                     f"MAP-Elites best {me.summary['best_fitness']:.0f}; archive monotone over {len(rows)} "
                     f"iterations: {monotone}; PPO best {rl.summary['best_fitness']:.0f}; {secs / 60:.1f} min")
    assert ok


def test_criterion_10_statistics_exactness(criterion):
    t0 = time.perf_counter()
    cases = mismatches = 0
    # every tie-free configuration: distinct ranks, all ways of splitting them
    for n in range(2, 11):
        for na in range(1, n):
            null = Counter()
            for idx in itertools.combinations(range(n), na):
                rest = [k for k in range(n) if k not in idx]
                null[sum(a > b for a in idx for b in rest)] += 1
            total = sum(null.values())
            mu = na * (n - na) / 2
            for idx in itertools.combinations(range(n), na):
                a = [float(k) for k in idx]
                b = [float(k) for k in range(n) if k not in idx]
                u = sum(x > y for x in a for y in b)
                hits = sum(c for v, c in null.items() if abs(v - mu) >= abs(u - mu))
                cases += 1
                mismatches += mann_whitney_u(a, b).p != float(Fraction(hits, total))
    # tied samples against full relabelling
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(2, 11))
        na = int(rng.integers(1, n))
        pooled = rng.integers(0, 3, n).tolist()
        cases += 1
        mismatches += mann_whitney_u(pooled[:na], pooled[na:]).p != float(brute_p(pooled[:na], pooled[na:]))
    stars = {p: significance_stars(p) for p in (0.05, 0.005, 0.0005)}
    stars_ok = stars == {0.05: "", 0.005: "**", 0.0005: "***"} and significance_stars(0.0499) == "*"
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and stars_ok and secs < 10
    criterion(10, ok, f"{cases} samples, {mismatches} exact-p mismatches; boundary stars {stars}; {secs:.1f} s")
    assert ok


DETERMINISM = [
    ExperimentConfig("oracle", "alu"),
    ExperimentConfig("neat", "parity", n_bits=4, budget=3000),
    ExperimentConfig("hyperneat", "parity", n_bits=4, budget=1500),
    ExperimentConfig("cmaes", "alu", budget=1000),
    ExperimentConfig("ppo", "parity", n_bits=4, budget=8192),
    ExperimentConfig("mapelites", "stones", budget=200_000),
    ExperimentConfig("ppo", "deceptive", budget=25_600),
    ExperimentConfig("gcppo", "stones", budget=25_600),
    ExperimentConfig("neat", "locomotion", budget=300_000),
]


def test_criterion_11_determinism(criterion):
    t0 = time.perf_counter()
    same = {}
    for cfg in DETERMINISM:
        same[f"{cfg.method}/{cfg.task}"] = run_trial(cfg, 5).to_json() == run_trial(cfg, 5).to_json()
    secs = time.perf_counter() - t0
    ok = all(same.values()) and secs < 600
    criterion(11, ok, f"byte-identical reruns {sum(same.values())}/{len(same)} {same}; {secs:.0f} s")
    assert ok
