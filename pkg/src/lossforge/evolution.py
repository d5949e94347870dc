"""The outer evolutionary loop: initialize, filter, optimize, evaluate, breed.

Filter order is fixed: symbolic cache -> weight optimization -> rejection ->
gradient equivalence -> full evaluation. Every candidate is optimized and
evaluated under identical initial conditions (one shared random stream per run
and stage), so fitness differences are attributable to the loss function
rather than the draw, a given tree always receives the same fitness within a
run, the caches are exact, and results are reproducible under parallel
evaluation.

``local_search=False`` is the ablation mode: weight optimization is skipped
entirely and candidates are evaluated in their unit form (all weights 1).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import EvolutionConfig
from .datasets import TaskDataset
from .errors import UsageError
from .expressions import (ExprTree, canonical_key, correct_constraints,
                          crossover, mutate, ramped_population,
                          select_tournament, to_prefix)
from .filters import (WORST_FITNESS, Candidate, FilterConfig, FitnessArchive,
                      Probe, build_probe, evaluate_fitness,
                      gradient_equivalence_key, rejection_protocol,
                      symbolic_cache_lookup)
from .metaopt import optimize_loss
from .network import compile_tree

_SEED_TAGS = {"phi": 101, "opt": 211, "eval": 307, "probe": 401, "init": 503,
              "meta-test": 601}


def stage_rng(run_seed: int, tag: str) -> np.random.Generator:
    """A fresh generator for one pipeline stage; candidates share the seed so
    they all see identical initial conditions."""
    return np.random.default_rng([run_seed, _SEED_TAGS[tag]])


@dataclass
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_finite_fitness: float
    n_worst: int
    counts: dict
    best_expression: str


@dataclass
class EvolutionRun:
    config: dict
    seed: int
    local_search: bool
    history: list = field(default_factory=list)
    best: Candidate | None = None
    population: list = field(default_factory=list)
    alg1_invocations: int = 0
    archive_size: int = 0
    evaluated: dict = field(default_factory=dict)  # key -> fitness, all gens

    def manifest(self) -> dict:
        def safe(x):
            return "inf" if x == WORST_FITNESS else x

        config = dict(self.config)
        config.pop("workers", None)  # execution detail, not a result
        return {
            "seed": self.seed,
            "mode": "evolved-local-search" if self.local_search else "gp-only",
            "config": config,
            "alg1_invocations": self.alg1_invocations,
            "archive_size": self.archive_size,
            "generations": [
                {
                    "generation": r.generation,
                    "best_fitness": safe(r.best_fitness),
                    "mean_finite_fitness": safe(r.mean_finite_fitness),
                    "n_worst": r.n_worst,
                    "counts": r.counts,
                    "best_expression": r.best_expression,
                }
                for r in self.history
            ],
            "best": {
                "expression": to_prefix(self.best.tree),
                "fitness": safe(self.best.fitness),
                "disposition": self.best.disposition,
            } if self.best else None,
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=2)

    def filter_stats_csv(self) -> str:
        lines = ["generation,cached_symbolic,rejected,cached_gradient,evaluated"]
        for r in self.history:
            c = r.counts
            lines.append(f"{r.generation},{c['cached-symbolic']},{c['rejected']},"
                         f"{c['cached-gradient']},{c['evaluated']}")
        return "\n".join(lines) + "\n"


def breed(pop: list[Candidate], gp_cfg, rng: np.random.Generator) -> list[Candidate]:
    """Next generation via elitism, tournament selection, crossover, mutation.

    Elites are copied unchanged (tree, network and fitness); the remaining
    slots come from tournament-selected parents, crossed over with probability
    crossover_rate, then mutated with probability mutation_rate, then
    constraint-repaired.
    """
    if not pop:
        raise UsageError("breed: empty population")
    size = len(pop)
    ranked = sorted(range(size),
                    key=lambda i: (pop[i].fitness, pop[i].tree.size(), i))
    n_elite = min(gp_cfg.elite_count(), size)
    offspring: list[Candidate] = []
    for i in range(n_elite):
        e = pop[ranked[i]]
        offspring.append(Candidate(tree=e.tree, key=e.key, net=e.net,
                                   fitness=e.fitness,
                                   gradient_key=e.gradient_key,
                                   optimize_result=e.optimize_result))

    pairs = [(c.tree, c.fitness) for c in pop]
    fresh: list[ExprTree] = []
    while n_elite + len(fresh) < size:
        if rng.random() < gp_cfg.crossover_rate:
            p1 = select_tournament(pairs, gp_cfg.tournament_size, rng)
            p2 = select_tournament(pairs, gp_cfg.tournament_size, rng)
            c1, c2 = crossover(p1, p2, gp_cfg, rng)
            produced = [c1, c2]
        else:
            produced = [select_tournament(pairs, gp_cfg.tournament_size, rng)]
        for tree in produced:
            if rng.random() < gp_cfg.mutation_rate:
                tree = mutate(tree, gp_cfg, rng)
            fresh.append(correct_constraints(tree, rng))
    fresh = fresh[:size - n_elite]
    offspring.extend(Candidate(tree=t) for t in fresh)
    return offspring


def _resolve_candidate(cand: Candidate, task: TaskDataset,
                       cfg: EvolutionConfig, probe: Probe, seed: int):
    """Optimization + rejection for one non-cached candidate (parallel-safe)."""
    if cfg.local_search:
        net = compile_tree(cand.tree, activation=cfg.activation,
                           rng=stage_rng(seed, "phi"))
        opt = optimize_loss(net, [task], cfg.meta, stage_rng(seed, "opt"))
        cand.net = opt.net
        cand.optimize_result = opt
    else:
        cand.net = compile_tree(cand.tree, activation=cfg.activation,
                                unit_weights=True)
    if cfg.filters.rejection:
        accepted, score = rejection_protocol(cand.net, probe, cfg.filters)
        cand.rejection_score = score
        if not accepted:
            cand.disposition = "rejected"
            cand.fitness = WORST_FITNESS
            return cand
    if cfg.filters.gradient:
        cand.gradient_key = gradient_equivalence_key(cand.net, probe,
                                                     cfg.filters.sig_digits)
        if cand.gradient_key is None:
            cand.disposition = "diverged"
            cand.fitness = WORST_FITNESS
    return cand


def _evaluate_candidate(cand: Candidate, task: TaskDataset,
                        cfg: EvolutionConfig, seed: int):
    fitness, diverged = evaluate_fitness(
        cand.net, task, cfg.filters, stage_rng(seed, "eval"),
        lr=cfg.train.lr, momentum=cfg.train.momentum,
        batch_size=cfg.train.batch_size, hidden=cfg.train.hidden_layers,
        activation=cfg.train.activation)
    cand.fitness = fitness
    cand.disposition = "diverged" if diverged else "evaluated"
    return cand


def _pmap(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_evolution(task: TaskDataset, cfg: EvolutionConfig,
                  seed: int | None = None) -> EvolutionRun:
    """Full meta-training run on one task; returns the best candidate found."""
    cfg.validate()
    seed = cfg.gp.rng_seed if seed is None else int(seed)
    breed_rng = np.random.default_rng([seed, 1])
    init_rng = stage_rng(seed, "init")
    probe = build_probe(task, cfg.filters, stage_rng(seed, "probe"),
                        hidden=cfg.train.hidden_layers,
                        activation=cfg.train.activation)

    archive = FitnessArchive()
    gradient_map: dict[str, float] = {}
    run = EvolutionRun(config=cfg.to_dict(), seed=seed,
                       local_search=cfg.local_search)
    population = [Candidate(tree=t) for t in ramped_population(cfg.gp, init_rng)]

    for gen in range(cfg.gp.generations):
        counts = {"cached-symbolic": 0, "rejected": 0, "cached-gradient": 0,
                  "evaluated": 0, "diverged": 0}

        # Symbolic-equivalence filter: archive hits and within-generation
        # duplicates skip optimization and evaluation outright.
        pending: list[Candidate] = []
        sym_leaders: dict[str, Candidate] = {}
        sym_followers: dict[str, list[Candidate]] = {}
        for cand in population:
            if cfg.filters.symbolic:
                cached = symbolic_cache_lookup(archive, cand.tree)
                if cached is not None:
                    cand.fitness = cached
                    cand.disposition = "cached-symbolic"
                    continue
                if cand.key in sym_leaders:
                    sym_followers.setdefault(cand.key, []).append(cand)
                    continue
                sym_leaders[cand.key] = cand
            pending.append(cand)

        def resolve(c):
            return _resolve_candidate(c, task, cfg, probe, seed)

        pending = _pmap(resolve, pending, cfg.workers)
        if cfg.local_search:
            run.alg1_invocations += len(pending)

        # Gradient-equivalence dedup preserves sequential semantics: the first
        # candidate carrying a new key is evaluated, later ones copy from it.
        to_evaluate: list[Candidate] = []
        followers: dict[str, list[Candidate]] = {}
        leaders: dict[str, Candidate] = {}
        for cand in pending:
            if cand.disposition != "pending":
                continue
            gkey = cand.gradient_key
            if cfg.filters.gradient and gkey is not None:
                if gkey in gradient_map:
                    cand.fitness = gradient_map[gkey]
                    cand.disposition = "cached-gradient"
                    continue
                if gkey in leaders:
                    followers.setdefault(gkey, []).append(cand)
                    continue
                leaders[gkey] = cand
            to_evaluate.append(cand)

        _pmap(lambda c: _evaluate_candidate(c, task, cfg, seed),
              to_evaluate, cfg.workers)

        for cand in to_evaluate:
            if cfg.filters.gradient and cand.gradient_key is not None:
                gradient_map[cand.gradient_key] = cand.fitness
            for follower in followers.get(cand.gradient_key or "", []):
                follower.fitness = cand.fitness
                follower.disposition = "cached-gradient"

        for key, leader in sym_leaders.items():
            for follower in sym_followers.get(key, []):
                follower.fitness = leader.fitness
                follower.net = leader.net
                follower.disposition = "cached-symbolic"

        for cand in population:
            archive.insert(cand.key, cand.fitness)
            counts[cand.disposition] = counts.get(cand.disposition, 0) + 1
            if cand.disposition == "evaluated":
                run.evaluated[cand.key] = cand.fitness

        # "diverged" candidates carry the sentinel like rejected ones; report
        # them under rejected in the per-generation stats table.
        counts["rejected"] += counts.pop("diverged", 0)

        gen_best = min(population,
                       key=lambda c: (c.fitness, c.tree.size()))
        if run.best is None or gen_best.fitness < run.best.fitness:
            run.best = gen_best
        finite = [c.fitness for c in population if math.isfinite(c.fitness)]
        run.history.append(GenerationRecord(
            generation=gen,
            best_fitness=gen_best.fitness,
            mean_finite_fitness=(float(np.mean(finite)) if finite
                                 else WORST_FITNESS),
            n_worst=sum(1 for c in population if c.fitness == WORST_FITNESS),
            counts=counts,
            best_expression=to_prefix(gen_best.tree)))

        if gen < cfg.gp.generations - 1:
            population = breed(population, cfg.gp, breed_rng)

    run.population = population
    run.archive_size = len(archive)
    return run
