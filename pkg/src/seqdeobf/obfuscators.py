"""Plan search: randomized (ReDLock) and evolutionary obfuscation.

Both searches score a candidate plan by attacking it: the obfuscated graph
is traced, the extraction model recovers a layer sequence, and the layer
error rate against the original sequence is the candidate's score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import MAX_TOKENS, ComputationGraph, LayerSequence, encode_sequence
from .interp import equivalence_check, init_params
from .metrics import ler
from .passes import ObfuscationPlan, added_words, applicable_ops, apply_plan, target_nodes
from .scas import ScasModel, predict_many, recover_dimensions
from .trace import CostModelConfig, graph_latency, simulate_trace

REDRAWS = 50
REPORT_FIELDS = ("candidate", "ler", "latency_ratio", "chosen")


class ObfuscationError(RuntimeError):
    pass


@dataclass
class Attacker:
    """Trace + extract: the adversary's view of a deployed graph."""

    model: ScasModel
    cost: CostModelConfig = field(default_factory=CostModelConfig)

    def extract(self, graphs: list[ComputationGraph], seeds: list[int] | None = None) -> list[LayerSequence]:
        seeds = seeds if seeds is not None else list(range(len(graphs)))
        traces = [simulate_trace(g, replace(self.cost, seed=int(s))) for g, s in zip(graphs, seeds)]
        kinds = predict_many(self.model, traces)
        return [
            recover_dimensions(k, t, self.cost, g.input_shape) for k, t, g in zip(kinds, traces, graphs)
        ]


@dataclass
class Candidate:
    plan: ObfuscationPlan
    graph: ComputationGraph
    extracted: LayerSequence
    ler: float
    latency_ratio: float


@dataclass
class ObfuscationReport:
    candidates: list[Candidate]
    chosen: int
    history: list[float] = field(default_factory=list)  # best-so-far fitness per generation

    @property
    def best(self) -> Candidate:
        return self.candidates[self.chosen]

    @property
    def latency_ratio(self) -> float:
        return self.best.latency_ratio

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for i, c in enumerate(self.candidates):
                w.writerow([i, repr(c.ler), repr(c.latency_ratio), int(i == self.chosen)])


def _score(graph, plans, attacker: Attacker, seed: int, base_latency: float) -> list[Candidate]:
    truth = encode_sequence(graph)
    built = [apply_plan(graph, p)[0] for p in plans]
    # one noise stream per candidate, derived from the search seed
    noise = [int(s) for s in np.random.SeedSequence(seed).generate_state(len(built), dtype=np.uint32)]
    extracted = attacker.extract(built, noise)
    return [
        Candidate(p, g, e, ler(e, truth), graph_latency(g, attacker.cost) / base_latency)
        for p, g, e in zip(plans, built, extracted)
    ]


def verify(original: ComputationGraph, obfuscated: ComputationGraph, plan: ObfuscationPlan, trials=5, seed=0):
    """Interpreter check that ``plan`` preserves the function of ``original``."""
    params = init_params(original, seed)
    g2, p2, _ = apply_plan(original, plan, params)
    if g2.to_json() != obfuscated.to_json():
        raise ObfuscationError("plan replay does not reproduce the obfuscated graph")
    return equivalence_check((original, params), (g2, p2), trials=trials, seed=seed, tol=1e-12)


# ---------------------------------------------------------------------------
# ReDLock


def sample_layer_ops(rng: np.random.Generator) -> tuple[str, ...]:
    """Enable each of branch, skip and deepen independently with probability 1/2."""
    ops = []
    if rng.random() < 0.5:
        ops.append("branch_out" if rng.random() < 0.5 else "branch_in")
    if rng.random() < 0.5:
        ops.append("skip")
    if rng.random() < 0.5:
        ops.append("deepen")
    return tuple(ops)


def _fits(graph: ComputationGraph, plan: ObfuscationPlan, max_tokens: int) -> bool:
    n = len(encode_sequence(graph)) + added_words(graph, plan)
    return 6 * n + 2 <= max_tokens


def random_plan(graph: ComputationGraph, rng: np.random.Generator, seed: int = 0, max_tokens: int = MAX_TOKENS):
    """Draw a per-layer random plan that fits the token cap.

    Over-long draws are redrawn; if every redraw is too long, ops are
    dropped at random from the last draw until it fits.
    """
    targets = target_nodes(graph)
    for _ in range(REDRAWS):
        plan = ObfuscationPlan(tuple((n, sample_layer_ops(rng)) for n in targets), seed)
        if _fits(graph, plan, max_tokens):
            return plan
    genes = [list(ops) for _, ops in plan.targets]
    while not _fits(graph, plan, max_tokens):
        live = [(i, j) for i, g in enumerate(genes) for j in range(len(g))]
        i, j = live[int(rng.integers(len(live)))]
        del genes[i][j]
        plan = ObfuscationPlan(tuple((n, tuple(g)) for n, g in zip(targets, genes)), seed)
    return plan


def redlock_obfuscate(
    graph: ComputationGraph, seed: int, attacker: Attacker, trials: int = 20, max_tokens: int = MAX_TOKENS
) -> tuple[ComputationGraph, ObfuscationReport]:
    """Draw ``trials`` random plans and keep the one the attacker gets most wrong."""
    if trials < 1:
        raise ObfuscationError("trials must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(trials)
    plans = [random_plan(graph, np.random.default_rng(s), seed, max_tokens) for s in streams]
    base = graph_latency(graph, attacker.cost)
    cands = _score(graph, plans, attacker, seed, base)
    chosen = int(np.argmax([c.ler for c in cands]))  # first maximum wins ties
    return cands[chosen].graph, ObfuscationReport(cands, chosen)


# ---------------------------------------------------------------------------
# Evolutionary search

BRANCH_STATES = (None, "branch_out", "branch_in")


@dataclass(frozen=True)
class EAConfig:
    population: int = 16
    generations: int = 20
    mutation_rate: float = 0.1
    elitism: int = 2
    tournament: int = 2
    penalty: float = 0.5  # lambda
    latency_budget: float = 1.4
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("empty population")
        if self.generations < 1:
            raise ValueError("zero generations")
        if not 0 <= self.elitism <= self.population:
            raise ValueError("elitism must lie in [0, population]")


def _gene_choices(graph, node) -> list[tuple[str, ...]]:
    legal = applicable_ops(graph, node)
    out = []
    for b in BRANCH_STATES:
        if b is not None and b not in legal:
            continue
        for skip in (False, True):
            if skip and "skip" not in legal:
                continue
            for deep in (False, True):
                if deep and "deepen" not in legal:
                    continue
                out.append(tuple(op for op, on in ((b, b is not None), ("skip", skip), ("deepen", deep)) if on))
    return out


def ea_obfuscate(
    graph: ComputationGraph, attacker: Attacker, config: EAConfig | None = None, seed: int = 0
) -> tuple[ComputationGraph, ObfuscationReport]:
    """Elitist genetic search over plans.

    Fitness is ``LER - penalty * max(0, latency_ratio - latency_budget)``;
    plans over the token cap are infeasible.  Generation 0 always contains
    the empty plan.
    """
    config = config or EAConfig()
    rng = np.random.default_rng(seed)
    targets = target_nodes(graph)
    choices = [_gene_choices(graph, n) for n in targets]
    base = graph_latency(graph, attacker.cost)
    cache: dict[tuple, tuple[float, Candidate]] = {}
    order: list[tuple] = []

    def plan_of(genome):
        return ObfuscationPlan(tuple((n, choices[i][g]) for i, (n, g) in enumerate(zip(targets, genome))), seed)

    def evaluate(pop):
        fresh = [g for g in dict.fromkeys(pop) if g not in cache]
        feasible = [g for g in fresh if _fits(graph, plan_of(g), config.max_tokens)]
        for g in fresh:
            if g not in feasible:
                cache[g] = (-np.inf, None)
        if feasible:
            cands = _score(graph, [plan_of(g) for g in feasible], attacker, seed + len(order), base)
            for g, c in zip(feasible, cands):
                over = max(0.0, c.latency_ratio - config.latency_budget)
                cache[g] = (c.ler - config.penalty * over, c)
                order.append(g)
        return [cache[g][0] for g in pop]

    def random_genome():
        return tuple(int(rng.integers(len(c))) for c in choices)

    pop = [tuple(0 for _ in targets)] + [random_genome() for _ in range(config.population - 1)]
    fit = evaluate(pop)
    best = max(range(len(pop)), key=lambda i: (fit[i], -i))
    history = [fit[best]]
    best_genome = pop[best]
    for _ in range(config.generations):
        ranked = sorted(range(len(pop)), key=lambda i: (-fit[i], i))
        nxt = [pop[i] for i in ranked[: config.elitism]]
        while len(nxt) < config.population:
            a = _tournament(pop, fit, rng, config.tournament)
            b = _tournament(pop, fit, rng, config.tournament)
            cut = int(rng.integers(1, len(targets))) if len(targets) > 1 else 0
            child = list(a[:cut] + b[cut:])
            for i in range(len(child)):
                if rng.random() < config.mutation_rate:
                    child[i] = int(rng.integers(len(choices[i])))
            nxt.append(tuple(child))
        pop = nxt
        fit = evaluate(pop)
        i = max(range(len(pop)), key=lambda i: (fit[i], -i))
        if fit[i] > history[-1]:
            best_genome = pop[i]
        history.append(max(history[-1], fit[i]))
    cands = [cache[g][1] for g in order]
    chosen = order.index(best_genome)
    return cands[chosen].graph, ObfuscationReport(cands, chosen, history)


def _tournament(pop, fit, rng, k):
    idx = rng.integers(len(pop), size=k)
    return pop[max(idx, key=lambda i: (fit[i], -i))]
