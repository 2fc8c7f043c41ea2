"""NEAT: evolving feedforward topologies with historical markings.

Genomes hold node genes and connection genes keyed by innovation number.
Connection innovations are global per (source, target) pair, so the same
structural mutation always receives the same id; node ids created by
splitting an edge are shared within a generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .nnet import HIDDEN, INPUT, OUTPUT, DagNetwork, Edge, Node


class NodeGene(NamedTuple):
    id: int
    role: str
    activation: str
    bias: float


class ConnGene(NamedTuple):
    innovation: int
    source: int
    target: int
    weight: float
    enabled: bool


@dataclass
class NeatConfig:
    n_inputs: int
    n_outputs: int
    pop_size: int = 150
    species_target: int = 10
    prob_add_conn: float = 0.2
    prob_del_conn: float = 0.2
    prob_mutate_conn: float = 0.1
    prob_mutate_node: float = 0.1
    prob_del_node: float = 0.1
    prob_add_node: float = 0.2
    weight_sigma: float = 0.5
    weight_clip: float = 5.0
    init_weight_std: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 0.4
    threshold: float = 3.0
    threshold_step: float = 0.1
    elitism: int = 1
    survival: float = 0.2
    stagnation: int = 20
    stagnation_delta: float = 0.0  # smaller gains over a species' best do not reset its stagnation count
    hidden_activation: str = "sigmoid"
    output_activation: str = "sigmoid"
    activation_options: tuple[str, ...] = ()

    def hidden_choices(self) -> tuple[str, ...]:
        return self.activation_options or (self.hidden_activation,)


class InnovationRegistry:
    def __init__(self, first_node_id: int):
        self.conn_ids: dict[tuple[int, int], int] = {}
        self.next_innovation = 0
        self.next_node = first_node_id
        self.split_nodes: dict[tuple[int, int], int] = {}

    def connection(self, source: int, target: int) -> int:
        key = (source, target)
        if key not in self.conn_ids:
            self.conn_ids[key] = self.next_innovation
            self.next_innovation += 1
        return self.conn_ids[key]

    def split_node(self, source: int, target: int, taken) -> int:
        node = self.split_nodes.get((source, target))
        if node is None or node in taken:
            node = self.next_node
            self.next_node += 1
            self.split_nodes[(source, target)] = node
        return node

    def new_generation(self) -> None:
        self.split_nodes.clear()


class NeatGenome:
    __slots__ = ("n_inputs", "n_outputs", "nodes", "conns", "_net")

    def __init__(self, n_inputs: int, n_outputs: int, nodes: dict[int, NodeGene], conns: dict[int, ConnGene]):
        self.n_inputs = n_inputs
        self.n_outputs = n_outputs
        self.nodes = nodes
        self.conns = dict(sorted(conns.items()))
        self._net = None

    def copy(self) -> "NeatGenome":
        return NeatGenome(self.n_inputs, self.n_outputs, dict(self.nodes), dict(self.conns))

    def __eq__(self, other):
        return (isinstance(other, NeatGenome) and self.n_inputs == other.n_inputs
                and self.n_outputs == other.n_outputs and self.nodes == other.nodes and self.conns == other.conns)

    def __repr__(self):
        return f"NeatGenome(nodes={len(self.nodes)}, conns={len(self.conns)}, enabled={self.n_enabled})"

    @property
    def n_enabled(self) -> int:
        return sum(c.enabled for c in self.conns.values())

    def hidden_ids(self) -> list[int]:
        return [n for n, g in self.nodes.items() if g.role == HIDDEN]

    def to_network(self) -> DagNetwork:
        # genomes are never edited in place, so the decoded network can be cached
        if self._net is None:
            self._net = self._decode()
        return self._net

    def _decode(self) -> DagNetwork:
        nodes = [Node(g.id, g.role, g.activation, g.bias) for g in sorted(self.nodes.values())]
        edges = [Edge(c.source, c.target, c.weight, c.enabled) for c in self.conns.values()]
        return DagNetwork(nodes, edges)


def minimal_genome(cfg: NeatConfig, registry: InnovationRegistry, rng: np.random.Generator) -> NeatGenome:
    """Inputs fully connected to outputs, no hidden nodes."""
    nodes = {i: NodeGene(i, INPUT, "identity", 0.0) for i in range(cfg.n_inputs)}
    outs = range(cfg.n_inputs, cfg.n_inputs + cfg.n_outputs)
    for o in outs:
        nodes[o] = NodeGene(o, OUTPUT, cfg.output_activation, 0.0)
    conns = {}
    for i in range(cfg.n_inputs):
        for o in outs:
            innov = registry.connection(i, o)
            conns[innov] = ConnGene(innov, i, o, float(rng.normal(0.0, cfg.init_weight_std)), True)
    return NeatGenome(cfg.n_inputs, cfg.n_outputs, nodes, conns)


def _reaches(conns, start: int, goal: int) -> bool:
    """Is ``goal`` reachable from ``start`` through enabled connections?"""
    succ: dict[int, list[int]] = {}
    for c in conns:
        if c.enabled:
            succ.setdefault(c.source, []).append(c.target)
    stack, seen = [start], {start}
    while stack:
        n = stack.pop()
        if n == goal:
            return True
        for m in succ.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def _legal_new_connections(genome: NeatGenome) -> list[tuple[int, int]]:
    present = {(c.source, c.target) for c in genome.conns.values()}
    sources = [n for n, g in genome.nodes.items() if g.role != OUTPUT]
    targets = [n for n, g in genome.nodes.items() if g.role != INPUT]
    succ: dict[int, set[int]] = {}
    for c in genome.conns.values():
        if c.enabled:
            succ.setdefault(c.source, set()).add(c.target)
    # descendants via DFS with memo
    memo: dict[int, set[int]] = {}

    def desc(n):
        if n not in memo:
            memo[n] = set()
            out = set()
            for m in succ.get(n, ()):
                out.add(m)
                out |= desc(m)
            memo[n] = out
        return memo[n]

    legal = []
    for s in sorted(sources):
        for t in sorted(targets):
            if s == t or (s, t) in present:
                continue
            if s in desc(t):
                continue
            legal.append((s, t))
    return legal


def _perturb(value: float, rng: np.random.Generator, cfg: NeatConfig) -> float:
    v = value + rng.normal(0.0, cfg.weight_sigma)
    return float(min(cfg.weight_clip, max(-cfg.weight_clip, v)))


def mutate(genome: NeatGenome, registry: InnovationRegistry, rng: np.random.Generator, cfg: NeatConfig) -> NeatGenome:
    """Return a mutated copy. Infeasible structural mutations are skipped."""
    nodes = dict(genome.nodes)
    conns = dict(genome.conns)

    if rng.random() < cfg.prob_add_node:
        enabled = [c for c in conns.values() if c.enabled]
        if enabled:
            old = enabled[rng.integers(len(enabled))]
            new_id = registry.split_node(old.source, old.target, nodes)
            act = cfg.hidden_choices()[rng.integers(len(cfg.hidden_choices()))]
            nodes[new_id] = NodeGene(new_id, HIDDEN, act, 0.0)
            conns[old.innovation] = old._replace(enabled=False)
            i1 = registry.connection(old.source, new_id)
            i2 = registry.connection(new_id, old.target)
            conns[i1] = ConnGene(i1, old.source, new_id, 1.0, True)
            conns[i2] = ConnGene(i2, new_id, old.target, old.weight, True)

    if rng.random() < cfg.prob_del_node:
        hidden = sorted(n for n, g in nodes.items() if g.role == HIDDEN)
        if hidden:
            victim = hidden[rng.integers(len(hidden))]
            del nodes[victim]
            conns = {k: c for k, c in conns.items() if c.source != victim and c.target != victim}

    if rng.random() < cfg.prob_add_conn:
        legal = _legal_new_connections(NeatGenome(genome.n_inputs, genome.n_outputs, nodes, conns))
        if legal:
            s, t = legal[rng.integers(len(legal))]
            innov = registry.connection(s, t)
            conns[innov] = ConnGene(innov, s, t, float(rng.normal(0.0, cfg.init_weight_std)), True)

    if rng.random() < cfg.prob_del_conn and conns:
        keys = sorted(conns)
        del conns[keys[rng.integers(len(keys))]]

    if cfg.prob_mutate_conn > 0:
        for k in sorted(conns):
            if rng.random() < cfg.prob_mutate_conn:
                c = conns[k]
                conns[k] = c._replace(weight=_perturb(c.weight, rng, cfg))

    if cfg.prob_mutate_node > 0:
        choices = cfg.hidden_choices()
        for n in sorted(nodes):
            g = nodes[n]
            if g.role == INPUT or rng.random() >= cfg.prob_mutate_node:
                continue
            g = g._replace(bias=_perturb(g.bias, rng, cfg))
            if g.role == HIDDEN and len(choices) > 1:
                g = g._replace(activation=choices[rng.integers(len(choices))])
            nodes[n] = g

    return NeatGenome(genome.n_inputs, genome.n_outputs, nodes, conns)


def crossover(fitter: NeatGenome, other: NeatGenome, rng: np.random.Generator, tie: bool = False) -> NeatGenome:
    """Align genes by innovation number.

    Matching genes come from a random parent; disjoint and excess genes from
    the fitter parent (from a uniformly chosen parent when ``tie``). Any
    inherited enabled connection that would close a cycle is disabled.
    """
    if tie and rng.random() < 0.5:
        fitter, other = other, fitter
    conns = {}
    for k, c in fitter.conns.items():
        o = other.conns.get(k)
        conns[k] = c if o is None or rng.random() < 0.5 else o
    nodes = {}
    for n, g in fitter.nodes.items():
        o = other.nodes.get(n)
        nodes[n] = g if o is None or rng.random() < 0.5 else o
    # only genes enabled here but disabled in the fitter parent can close a cycle
    if any(c.enabled and not fitter.conns[k].enabled for k, c in conns.items()):
        kept: list[ConnGene] = []
        for k in sorted(conns):
            c = conns[k]
            if c.enabled and _reaches(kept, c.target, c.source):
                c = c._replace(enabled=False)
                conns[k] = c
            kept.append(c)
    return NeatGenome(fitter.n_inputs, fitter.n_outputs, nodes, conns)


def compatibility_distance(g1: NeatGenome, g2: NeatGenome, coeffs: tuple[float, float, float] = (1.0, 1.0, 0.4)) -> float:
    c1, c2, c3 = coeffs
    k1, k2 = g1.conns, g2.conns
    if not k1 and not k2:
        return 0.0
    # connection dicts are kept sorted by innovation, so the last key is the max
    max1 = next(reversed(k1)) if k1 else -1
    max2 = next(reversed(k2)) if k2 else -1
    common = k1.keys() & k2.keys()
    longer, cutoff = (k1, max2) if max1 > max2 else (k2, max1)
    excess = sum(1 for k in longer if k > cutoff)
    disjoint = len(k1) + len(k2) - 2 * len(common) - excess
    n = max(1, len(k1), len(k2))
    mean_w = sum(abs(k1[k].weight - k2[k].weight) for k in common) / len(common) if common else 0.0
    return (c1 * excess + c2 * disjoint) / n + c3 * mean_w


@dataclass
class Species:
    id: int
    representative: NeatGenome
    members: list[int] = field(default_factory=list)
    best_fitness: float = -math.inf
    stagnation: int = 0
    history: list[float] = field(default_factory=list)


def speciate(population: Sequence[NeatGenome], previous: Sequence[Species], threshold: float,
             coeffs=(1.0, 1.0, 0.4), max_species: int | None = None, next_id: int = 0,
             stats: dict | None = None) -> list[Species]:
    """Assign each genome to the first species whose representative is within ``threshold``.

    Genomes that match no species found a new one, unless ``max_species``
    is reached, in which case they join the closest species (counted in
    ``stats["forced"]`` when a dict is passed).
    """
    forced = 0
    species = [Species(s.id, s.representative, [], s.best_fitness, s.stagnation, list(s.history)) for s in previous]
    nid = max([next_id] + [s.id + 1 for s in previous])
    for idx, g in enumerate(population):
        dists = []
        placed = False
        for sp in species:
            d = compatibility_distance(g, sp.representative, coeffs)
            if d < threshold:
                sp.members.append(idx)
                placed = True
                break
            dists.append(d)
        if placed:
            continue
        if max_species is None or len(species) < max_species:
            species.append(Species(nid, g, [idx]))
            nid += 1
        else:
            species[int(np.argmin(dists))].members.append(idx)
            forced += 1
    if stats is not None:
        stats["forced"] = forced
    return [s for s in species if s.members]


def allocate_offspring(shared: Sequence[float], total: int) -> list[int]:
    """Split ``total`` offspring proportionally to ``shared`` (largest remainder)."""
    shared = np.asarray(shared, dtype=np.float64)
    if len(shared) == 0:
        return []
    if shared.sum() <= 0 or not np.all(np.isfinite(shared)):
        shared = np.ones_like(shared)
    exact = shared / shared.sum() * total
    alloc = np.floor(exact).astype(int)
    rest = total - alloc.sum()
    order = np.argsort(-(exact - alloc), kind="stable")
    alloc[order[:rest]] += 1
    return alloc.tolist()


class Neat:
    """Generational NEAT loop: ``ask`` the population, ``tell`` its fitnesses."""

    def __init__(self, cfg: NeatConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.registry = InnovationRegistry(cfg.n_inputs + cfg.n_outputs)
        self.population = [minimal_genome(cfg, self.registry, rng) for _ in range(cfg.pop_size)]
        self.species: list[Species] = []
        self.threshold = cfg.threshold
        self.generation = 0
        self.restarts = 0
        self.last_forced = 0
        self._next_species = 0
        self.best_genome: NeatGenome | None = None
        self.best_fitness = -math.inf

    def ask(self) -> list[NeatGenome]:
        return self.population

    def reset_stagnation(self) -> None:
        """Forget fitness history, e.g. after the task changes."""
        for sp in self.species:
            sp.best_fitness = -math.inf
            sp.stagnation = 0
        self.best_fitness = -math.inf

    def tell(self, fitnesses: Sequence[float]) -> None:
        fit = np.asarray(fitnesses, dtype=np.float64)
        if fit.shape != (len(self.population),):
            raise ValueError("one fitness per genome required")
        fit = np.where(np.isfinite(fit), fit, -np.inf)
        champ = int(np.argmax(fit))
        if fit[champ] > self.best_fitness:
            self.best_fitness = float(fit[champ])
            self.best_genome = self.population[champ]
        stats: dict = {}
        self.species = speciate(self.population, self.species, self.threshold,
                                (self.cfg.c1, self.cfg.c2, self.cfg.c3), self.cfg.species_target,
                                self._next_species, stats)
        self._next_species = max([self._next_species] + [s.id + 1 for s in self.species])
        self.last_forced = stats["forced"]
        if len(self.species) < self.cfg.species_target:
            self.threshold = max(1e-3, self.threshold * (1 - self.cfg.threshold_step))
        elif len(self.species) > self.cfg.species_target:
            self.threshold *= 1 + self.cfg.threshold_step
        self.population, self.species = next_generation(self.population, fit, self.species, self.registry,
                                                        self.rng, self.cfg, self)
        self.generation += 1


def _rank(members: list[int], fit: np.ndarray) -> list[int]:
    return sorted(members, key=lambda i: (-fit[i], i))


def next_generation(population, fitnesses, species, registry, rng, cfg: NeatConfig, owner: Neat | None = None):
    """Produce the next population (size preserved) and the surviving species."""
    fit = np.asarray(fitnesses, dtype=np.float64)
    registry.new_generation()
    champ = int(np.argmax(fit))
    for sp in species:
        best = max(fit[i] for i in sp.members)
        sp.history.append(float(best))
        if best > sp.best_fitness + cfg.stagnation_delta:
            sp.best_fitness = float(best)
            sp.stagnation = 0
        else:
            sp.stagnation += 1

    if species and all(sp.stagnation >= cfg.stagnation for sp in species):
        elites = [population[_rank(sp.members, fit)[0]] for sp in species]
        fresh = [minimal_genome(cfg, registry, rng) for _ in range(cfg.pop_size - len(elites))]
        if owner is not None:
            owner.restarts += 1
        for sp in species:
            sp.stagnation = 0
            sp.best_fitness = -math.inf
        return elites + fresh, species

    survivors = [sp for sp in species if sp.stagnation < cfg.stagnation or champ in sp.members]
    # shift so the worst genome scores zero: allocation then follows how far
    # each species' mean sits above the population's floor
    floor = float(np.min(fit))
    shared = [float(np.mean([fit[i] for i in sp.members])) - floor for sp in survivors]
    alloc = allocate_offspring(shared, cfg.pop_size)
    champ_sp = next(k for k, sp in enumerate(survivors) if champ in sp.members)
    if alloc[champ_sp] == 0:
        alloc[int(np.argmax(alloc))] -= 1
        alloc[champ_sp] = 1

    new_pop: list[NeatGenome] = []
    kept = []
    for sp, n in zip(survivors, alloc):
        if n == 0:
            continue
        ranked = _rank(sp.members, fit)
        n_elite = min(cfg.elitism, n, len(ranked))
        new_pop.extend(population[i] for i in ranked[:n_elite])
        pool = ranked[:max(2, int(math.ceil(cfg.survival * len(ranked))))]
        for _ in range(n - n_elite):
            a = pool[rng.integers(len(pool))]
            b = pool[rng.integers(len(pool))]
            if fit[b] > fit[a]:
                a, b = b, a
            child = crossover(population[a], population[b], rng, tie=fit[a] == fit[b])
            new_pop.append(mutate(child, registry, rng, cfg))
        sp.representative = population[ranked[rng.integers(len(ranked))]]
        kept.append(sp)
    return new_pop, kept


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def genome_to_text(genome: NeatGenome) -> str:
    lines = [f"genome {genome.n_inputs} {genome.n_outputs}", "[nodes]"]
    for g in sorted(genome.nodes.values()):
        lines.append(f"{g.id} {g.role} {g.activation} {g.bias!r}")
    lines.append("[connections]")
    for c in genome.conns.values():
        lines.append(f"{c.innovation} {c.source} {c.target} {c.weight!r} {int(c.enabled)}")
    return "\n".join(lines) + "\n"


def genome_from_text(text: str) -> NeatGenome:
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "genome" or len(head) != 3:
        raise ValueError("genome text must start with 'genome <n_inputs> <n_outputs>'")
    section = None
    nodes, conns = {}, {}
    for ln in lines[1:]:
        if ln in ("[nodes]", "[connections]"):
            section = ln
            continue
        parts = ln.split()
        if section == "[nodes]":
            nid, role, act, bias = int(parts[0]), parts[1], parts[2], float(parts[3])
            nodes[nid] = NodeGene(nid, role, act, bias)
        elif section == "[connections]":
            innov, s, t, w, en = int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), parts[4] == "1"
            conns[innov] = ConnGene(innov, s, t, w, en)
        else:
            raise ValueError(f"line outside a section: {ln!r}")
    return NeatGenome(int(head[1]), int(head[2]), nodes, conns)
