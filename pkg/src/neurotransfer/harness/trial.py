"""Curriculum control, trial logs and the per-seed trial runner."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .. import arena as arena_mod
from .. import cmaes, gates, hyperneat, mapelites, neat, ppo
from ..nnet import Layout, LayeredNet, flatten, forward_dag, forward_population, unflatten
from .config import ConfigError, ExperimentConfig

# weight of the graded tie-break in neuroevolution fitness on gates tasks; it
# stays below the smallest return increment (one bit of a 4-bit answer, 0.25)
GRADED_WEIGHT = 0.2


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumState:
    level: int
    final_level: int
    enabled: bool = True
    solved: bool = False
    first_solve: tuple[tuple[int, int], ...] = ()  # (level, generation)

    @classmethod
    def start(cls, final_level: int, enabled: bool = True) -> "CurriculumState":
        return cls(1 if enabled else final_level, final_level, enabled)


def advance_level(cur: CurriculumState, success: float, generation: int = 0) -> CurriculumState:
    """Move up one level only on perfect success; flag the run solved at the final level."""
    if not 0.0 <= success <= 1.0:
        raise ValueError("success must lie in [0, 1]")
    if success < 1.0 or cur.solved:
        return cur
    solves = cur.first_solve + ((cur.level, generation),)
    if cur.level >= cur.final_level:
        return replace(cur, solved=True, first_solve=solves)
    return replace(cur, level=cur.level + 1, first_solve=solves)


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    return v


@dataclass
class TrialLog:
    config: dict
    config_hash: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    best_policy: dict | None = None

    def append(self, **row) -> None:
        if self.rows:
            last = self.rows[-1]
            if row["evaluations"] < last["evaluations"]:
                raise ValueError("evaluations must not decrease")
            if row["level"] < last["level"]:
                raise ValueError("curriculum level must not decrease")
        self.rows.append(_clean(row))

    def to_json(self) -> str:
        doc = {"config": _clean(self.config), "config_hash": self.config_hash, "seed": self.seed,
               "rows": self.rows, "summary": _clean(self.summary), "best_policy": _clean(self.best_policy)}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrialLog":
        d = json.loads(text)
        return cls(d["config"], d["config_hash"], d["seed"], d["rows"], d["summary"], d["best_policy"])


# ---------------------------------------------------------------------------
# policy encodings stored in logs
# ---------------------------------------------------------------------------


def encode_layered(net: LayeredNet) -> dict:
    lay = net.layout
    return {"kind": "layered", "sizes": list(lay.sizes), "activations": list(lay.activations),
            "skip": lay.skip, "params": flatten(net).values.tolist()}


def decode_policy(doc: dict):
    """Rebuild an ``obs -> action`` callable from a stored policy."""
    kind = doc["kind"]
    if kind == "dag":
        net = neat.genome_from_text(doc["genome"]).to_network()
        return lambda obs: forward_dag(net, obs)
    if kind in ("layered", "ppo"):
        layout = Layout(tuple(doc["sizes"]), tuple(doc["activations"]), doc.get("skip", False))
        params = np.array(doc["params"], dtype=np.float64)
        mean = np.array(doc["norm_mean"]) if doc.get("norm_mean") is not None else None
        std = np.sqrt(np.array(doc["norm_var"]) + 1e-8) if mean is not None else None

        def act(obs):
            x = np.asarray(obs, dtype=np.float64)
            if mean is not None:
                x = np.clip((x - mean) / std, -10.0, 10.0)
            out = forward_population(layout, params[None], np.atleast_2d(x))[0]
            if x.ndim == 1:
                out = out[0]
            if doc.get("head") == ppo.BERNOULLI:
                return (out > 0).astype(np.float64)
            return out

        return act
    raise ValueError(f"cannot decode policy of kind {kind!r}")


# ---------------------------------------------------------------------------
# gates evaluation helpers
# ---------------------------------------------------------------------------


def gates_fitness(task: gates.GatesTask, level: int, outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fitness and success for a batch of output tables, shape (P, rows, n_out).

    Fitness is the enumerated episode return (sum over steps of the fraction
    of correct bits) plus a graded tie-break below one return increment.
    """
    _, target = gates.cached_truth_table(task, level)
    out = np.asarray(outputs, dtype=np.float64)
    correct = (out > 0.5) == target[None]
    ret = correct.mean(axis=2).sum(axis=1)
    graded = np.mean(1.0 - (np.clip(out, 0.0, 1.0) - target[None]) ** 2, axis=(1, 2))
    success = correct.all(axis=2).mean(axis=1)
    return ret + GRADED_WEIGHT * graded, success


# ---------------------------------------------------------------------------
# method adapters: ask() -> candidates, tell(fitness), policy(i)
# ---------------------------------------------------------------------------


def neat_config(cfg: ExperimentConfig, n_in: int, n_out: int) -> neat.NeatConfig:
    return neat.NeatConfig(
        n_in, n_out, pop_size=cfg.pop_size, species_target=cfg.species_target,
        prob_add_conn=cfg.prob_add_conn, prob_del_conn=cfg.prob_del_conn, prob_mutate_conn=cfg.prob_mutate_conn,
        prob_mutate_node=cfg.prob_mutate_node, prob_del_node=cfg.prob_del_node, prob_add_node=cfg.prob_add_node,
        weight_sigma=cfg.weight_sigma, threshold=cfg.compat_threshold, stagnation=cfg.stagnation,
        stagnation_delta=cfg.stagnation_delta, hidden_activation=cfg.neat_activation,
        output_activation=cfg.neat_activation)


class NeatAdapter:
    def __init__(self, cfg, n_in, n_out, rng):
        self.neat = neat.Neat(neat_config(cfg, n_in, n_out), rng)

    def ask(self):
        self.pop = self.neat.ask()
        return self.pop

    def tell(self, fitness):
        self.neat.tell(fitness)

    def new_level(self):
        self.neat.reset_stagnation()

    def outputs(self, inputs):
        return np.stack([forward_dag(g.to_network(), inputs) for g in self.pop])

    def act_batch(self, obs):
        return np.stack([forward_dag(g.to_network(), o) for g, o in zip(self.pop, obs)])

    def encode(self, i):
        return {"kind": "dag", "genome": neat.genome_to_text(self.pop[i])}


class LayeredAdapter:
    """Shared plumbing for methods whose candidates are flat LayeredNet parameters."""

    layout: Layout

    def outputs(self, inputs):
        return forward_population(self.layout, self.params, inputs)

    def act_batch(self, obs):
        return forward_population(self.layout, self.params, obs[:, None, :])[:, 0, :]

    def encode(self, i):
        return encode_layered(unflatten(self.layout, self.params[i]))

    def new_level(self):
        pass


class HyperAdapter(LayeredAdapter):
    def __init__(self, cfg, n_in, n_out, rng, substrate, out_act):
        ncfg = hyperneat.cppn_config(pop_size=cfg.pop_size, species_target=cfg.species_target,
                                     prob_add_conn=cfg.prob_add_conn, prob_del_conn=cfg.prob_del_conn,
                                     prob_mutate_conn=cfg.prob_mutate_conn, prob_mutate_node=cfg.prob_mutate_node,
                                     prob_del_node=cfg.prob_del_node, prob_add_node=cfg.prob_add_node,
                                     weight_sigma=cfg.weight_sigma, threshold=cfg.compat_threshold,
                                     stagnation=cfg.stagnation, stagnation_delta=cfg.stagnation_delta)
        self.neat = neat.Neat(ncfg, rng)
        self.substrate = substrate
        self.hcfg = hyperneat.HyperConfig(cfg.hyper_threshold, cfg.hyper_w_max, out_act, out_act)
        self.layout = substrate.layout(self.hcfg)

    def ask(self):
        self.pop = self.neat.ask()
        self.params = np.stack([flatten(hyperneat.build_policy(g, self.substrate, self.hcfg)).values for g in self.pop])
        return self.pop

    def tell(self, fitness):
        self.neat.tell(fitness)

    def new_level(self):
        self.neat.reset_stagnation()


class CmaAdapter(LayeredAdapter):
    def __init__(self, cfg, n_in, n_out, rng, out_act):
        hid = "tanh"
        self.layout = Layout((n_in, cfg.cma_hidden, n_out), (hid, out_act), skip=True)
        self.state = cmaes.init(self.layout.size, np.zeros(self.layout.size), cfg.cma_sigma0, cfg.cma_popsize)
        self.rng = rng

    def ask(self):
        self.params = cmaes.ask(self.state, self.rng)
        return self.params

    def tell(self, fitness):
        # maximised here, minimised inside CMA-ES
        self.state = cmaes.tell(self.state, self.params, -np.asarray(fitness))


def make_adapter(cfg: ExperimentConfig, n_in: int, n_out: int, rng: np.random.Generator, goal_inputs=False):
    out_act = "sigmoid" if cfg.is_gates else "tanh"
    if cfg.method == "neat":
        return NeatAdapter(cfg, n_in, n_out, rng)
    if cfg.method == "hyperneat":
        if cfg.is_gates:
            sub = hyperneat.gates_substrate(n_in, n_out, cfg.hyper_hidden)
        else:
            sub = hyperneat.arena_substrate(cfg.hyper_hidden, goal_inputs)
        return HyperAdapter(cfg, n_in, n_out, rng, sub, out_act)
    if cfg.method == "cmaes":
        return CmaAdapter(cfg, n_in, n_out, rng, out_act)
    raise ConfigError(f"no population adapter for {cfg.method!r}")


# ---------------------------------------------------------------------------
# trial runner
# ---------------------------------------------------------------------------


def gates_task(cfg: ExperimentConfig) -> gates.GatesTask:
    return gates.parity_task(cfg.n_bits) if cfg.task == "parity" else gates.alu_task()


def load_arena(cfg: ExperimentConfig) -> arena_mod.Arena:
    name = cfg.arena
    if name.endswith(".txt") or "/" in name:
        with open(name) as fh:
            return arena_mod.parse_arena(fh.read())
    return arena_mod.shipped_arena(name)


def run_trial(config: ExperimentConfig, seed: int) -> TrialLog:
    """Run one seed until the budget is spent or the final level is solved."""
    cfg = config.resolve()
    log = TrialLog(cfg.as_dict(), cfg.hash(), int(seed))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(cfg.hash(), 16) % (2 ** 32)]))
    if cfg.is_gates:
        if cfg.method == "oracle":
            _run_gates_oracle(cfg, log)
        elif cfg.method == "ppo":
            _run_gates_ppo(cfg, rng, log)
        else:
            _run_gates_population(cfg, rng, log)
    else:
        env_arena = load_arena(cfg)
        if cfg.method in ("ppo", "gcppo"):
            _run_arena_ppo(cfg, env_arena, rng, log)
        elif cfg.method == "mapelites":
            _run_arena_mapelites(cfg, env_arena, rng, log)
        else:
            _run_arena_population(cfg, env_arena, rng, log)
    return log


def _finish_gates(log: TrialLog, cur: CurriculumState, evals: int, gen: int, extra: dict | None = None):
    last = log.rows[-1] if log.rows else {}
    log.summary = {"final_level": cur.level, "solved": cur.solved, "final_success": last.get("success", 0.0),
                   "best_fitness": last.get("best_fitness"), "evaluations": evals, "env_steps": evals,
                   "generations": gen, "first_solve": [list(p) for p in cur.first_solve], **(extra or {})}


def _run_gates_oracle(cfg, log):
    task = gates_task(cfg)
    cur = CurriculumState.start(task.n_levels, cfg.curriculum)
    evals = gen = 0
    while not cur.solved and evals < cfg.budget:
        level = cur.level
        succ = gates.evaluate_success(task, level, gates.oracle_policy(task, level))
        evals += 1
        n_rows = len(gates.cached_truth_table(task, level)[0])
        log.append(generation=gen, evaluations=evals, env_steps=evals, best_fitness=float(n_rows),
                   mean_fitness=float(n_rows), success=succ, level=level)
        cur = advance_level(cur, succ, gen)
        gen += 1
    log.best_policy = {"kind": "oracle"}
    _finish_gates(log, cur, evals, gen)


def _run_gates_population(cfg, rng, log):
    task = gates_task(cfg)
    cur = CurriculumState.start(task.n_levels, cfg.curriculum)
    ad = make_adapter(cfg, task.n_inputs, task.n_outputs, rng)
    evals = gen = 0
    while not cur.solved:
        cands = ad.ask()
        if evals + len(cands) > cfg.budget:
            break
        level = cur.level
        inputs = gates.cached_truth_table(task, level)[0].astype(np.float64)
        fit, succ = gates_fitness(task, level, ad.outputs(inputs))
        evals += len(cands)
        best = int(np.argmax(fit))
        top = int(np.argmax(succ))
        log.append(generation=gen, evaluations=evals, env_steps=evals, best_fitness=float(fit[best]),
                   mean_fitness=float(fit.mean()), success=float(succ[top]), level=level)
        log.best_policy = ad.encode(top if succ[top] == 1.0 else best)
        new = advance_level(cur, float(succ[top]), gen)
        gen += 1
        if new.solved:
            cur = new
            break
        ad.tell(fit)
        if new.level != cur.level:
            ad.new_level()
        cur = new
    _finish_gates(log, cur, evals, gen)


def _ppo_config(cfg: ExperimentConfig) -> ppo.PPOConfig:
    base = ppo.PPOConfig.for_gates() if cfg.is_gates else ppo.PPOConfig.for_arena()
    return replace(base, batch_size=cfg.ppo_batch, unroll=cfg.ppo_unroll, n_minibatches=cfg.ppo_minibatches,
                   epochs=cfg.ppo_epochs, lr=cfg.ppo_lr, entropy_cost=cfg.ppo_entropy, clip=cfg.ppo_clip,
                   gamma=cfg.ppo_gamma, gae_lambda=cfg.ppo_gae_lambda, reward_scaling=cfg.ppo_reward_scaling)


def _encode_ppo(net: ppo.PolicyValueNet) -> dict:
    pol, _, _ = net.split()
    doc = encode_layered(pol)
    doc.update(kind="ppo", head=net.head,
               norm_mean=net.norm.mean.tolist() if net.norm is not None else None,
               norm_var=net.norm.var.tolist() if net.norm is not None else None)
    return doc


def _run_gates_ppo(cfg, rng, log):
    task = gates_task(cfg)
    pcfg = _ppo_config(cfg)
    cur = CurriculumState.start(task.n_levels, cfg.curriculum)
    env = ppo.GatesVecEnv(task, cur.level, pcfg.n_envs, rng)
    net = ppo.PolicyValueNet.create(env.obs_dim, env.act_dim, ppo.BERNOULLI, pcfg, rng)
    adam = ppo.AdamState.zeros(len(net.params), pcfg.lr)
    obs = env.reset()
    gen = 0
    while not cur.solved and env.episodes + pcfg.n_envs * pcfg.unroll <= cfg.budget:
        buf, obs = ppo.collect_rollouts(env, net, pcfg, rng, obs)
        info = ppo.ppo_update(net, adam, buf, pcfg, rng)
        level = cur.level
        succ = gates.evaluate_success(task, level, net.deterministic)
        log.append(generation=gen, evaluations=env.episodes, env_steps=env.steps,
                   best_fitness=info["mean_reward"], mean_fitness=info["mean_reward"], success=succ, level=level)
        cur = advance_level(cur, succ, gen)
        gen += 1
        if cur.level != level:
            env.set_level(cur.level)
            obs = env.reset()
    log.best_policy = _encode_ppo(net)
    _finish_gates(log, cur, env.episodes, gen)


def _arena_rollout(env: arena_mod.ArenaEnv, act_fn):
    returns, final, _ = arena_mod.rollout(env, act_fn)
    return returns, final, int(env.t.sum())


def solved_threshold(arena: arena_mod.Arena) -> float:
    return np.inf if arena.solved is None else float(arena.solved)


def _run_arena_population(cfg, arena, rng, log):
    ad = make_adapter(cfg, 11, 4, rng)
    evals = steps = gen = 0
    best_ever = -np.inf
    while True:
        cands = ad.ask()
        n = len(cands)
        if steps + n * arena_mod.EPISODE_STEPS > cfg.budget:
            break
        env = arena_mod.ArenaEnv(arena, cfg.task, n)
        returns, _, used = _arena_rollout(env, ad.act_batch)
        evals += n
        steps += used
        best = int(np.argmax(returns))
        if returns[best] > best_ever:
            best_ever = float(returns[best])
            log.best_policy = ad.encode(best)
        log.append(generation=gen, evaluations=evals, env_steps=steps, best_fitness=float(returns[best]),
                   mean_fitness=float(returns.mean()), success=float(returns[best] >= solved_threshold(arena)), level=1)
        ad.tell(returns)
        gen += 1
    _finish_arena(log, arena, evals, steps, gen, best_ever)


def _finish_arena(log, arena, evals, steps, gen, best_ever, extra=None):
    solved = bool(best_ever >= solved_threshold(arena))
    log.summary = {"final_level": 1, "solved": solved, "best_fitness": best_ever,
                   "final_success": float(solved), "evaluations": evals, "env_steps": steps,
                   "generations": gen, "first_solve": [], **(extra or {})}


def _run_arena_mapelites(cfg, arena, rng, log):
    layout = mapelites.policy_layout(11, 4, cfg.me_hidden, cfg.me_depth)
    x0, y0, x1, y1 = arena.bounds
    archive = mapelites.Archive(((x0, y0), (x1, y1)))
    counters = {"evals": 0, "steps": 0}

    def evaluate(pop):
        env = arena_mod.ArenaEnv(arena, cfg.task, len(pop))
        returns, final, used = _arena_rollout(env, lambda obs: forward_population(layout, pop, obs[:, None, :])[:, 0, :])
        counters["evals"] += len(pop)
        counters["steps"] += used
        return returns, final

    gen = 0
    cost = cfg.me_batch * arena_mod.EPISODE_STEPS
    while counters["steps"] + cost <= cfg.budget:
        if gen == 0:
            mapelites.seed_archive(archive, layout, rng, cfg.me_batch, evaluate)
        else:
            mapelites.me_iteration(archive, rng, cfg.me_batch, evaluate, cfg.me_sigma)
        m = mapelites.metrics(archive)
        log.append(generation=gen, evaluations=counters["evals"], env_steps=counters["steps"],
                   best_fitness=m.max_fitness, mean_fitness=float(archive.fitness[archive.filled].mean()),
                   success=float(m.max_fitness >= solved_threshold(arena)), level=1, coverage=m.coverage, qd_score=m.qd_score)
        gen += 1
    m = mapelites.metrics(archive)
    best_ever = m.max_fitness if m.max_fitness is not None else -np.inf
    if len(archive):
        cell = max(archive.cells(), key=lambda c: archive.fitness[c])
        log.best_policy = encode_layered(unflatten(layout, archive.params[cell]))
    _finish_arena(log, arena, counters["evals"], counters["steps"], gen, best_ever,
                  {"coverage": m.coverage, "qd_score": m.qd_score, "archive_cells": [list(c) for c in archive.cells()]})


def deterministic_episode(arena, task, net: ppo.PolicyValueNet, goal_conditioned=False, record=False):
    env = arena_mod.ArenaEnv(arena, task, 1, goal_conditioned=goal_conditioned)
    returns, final, traj = arena_mod.rollout(env, net.deterministic, record=record)
    return float(returns[0]), traj


def visited_cells(traj, arena, resolution: int = mapelites.RESOLUTION) -> set[tuple[int, int]]:
    x0, y0, x1, y1 = arena.bounds
    bounds = ((x0, y0), (x1, y1))
    return {mapelites.cell_index(pos[0], bounds, resolution) for pos, _, _ in traj}


def _run_arena_ppo(cfg, arena, rng, log):
    goal = cfg.method == "gcppo"
    pcfg = _ppo_config(cfg)
    env = ppo.ArenaVecEnv(arena_mod.ArenaEnv(arena, cfg.task, pcfg.n_envs, goal_conditioned=goal))
    net = ppo.PolicyValueNet.create(env.obs_dim, env.act_dim, ppo.GAUSSIAN, pcfg, rng)
    adam = ppo.AdamState.zeros(len(net.params), pcfg.lr)
    obs = env.obs
    per_update = pcfg.n_envs * pcfg.unroll
    running = np.zeros(pcfg.n_envs)
    finished: list[float] = []
    gen = 0
    best_ever = -np.inf
    while env.steps + per_update <= cfg.budget:
        buf, obs = ppo.collect_rollouts(env, net, pcfg, rng, obs)
        raw_r = buf.rewards / pcfg.reward_scaling
        for t in range(pcfg.unroll):
            running += raw_r[t]
            done = buf.dones[t].astype(bool)
            finished.extend(running[done].tolist())
            running[done] = 0.0
        info = ppo.ppo_update(net, adam, buf, pcfg, rng)
        row = dict(generation=gen, evaluations=env.steps // arena_mod.EPISODE_STEPS, env_steps=env.steps,
                   best_fitness=max(finished) if finished else None,
                   mean_fitness=float(np.mean(finished[-pcfg.n_envs:])) if finished else None,
                   success=0.0, level=1)
        last = env.steps + per_update > cfg.budget
        if gen % cfg.ppo_eval_every == 0 or last:
            ret, _ = deterministic_episode(arena, cfg.task, net, goal)
            row["eval_return"] = ret
            row["success"] = float(ret >= solved_threshold(arena))
            best_ever = max(best_ever, ret)
        if finished:
            best_ever = max(best_ever, max(finished))
        log.append(**row)
        gen += 1
    ret, traj = deterministic_episode(arena, cfg.task, net, goal, record=True)
    log.best_policy = _encode_ppo(net)
    cells = visited_cells(traj, arena) if traj else set()
    _finish_arena(log, arena, env.steps // arena_mod.EPISODE_STEPS, env.steps, gen, max(best_ever, ret),
                  {"final_eval_return": ret, "visited_cells": len(cells),
                   "visited_coverage": len(cells) / mapelites.RESOLUTION ** 2})
