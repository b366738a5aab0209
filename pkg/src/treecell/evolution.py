"""The generational loop: evaluate with partial training (optionally
extrapolated by the curve predictor), speciate, retire stagnant species
into the archive, and reproduce with archive-rejection of offspring.

Every stochastic step draws from a generator keyed by (run seed,
generation, counter), so runs replay bit-exactly and the lineage log can
re-derive any genome from the seed tree.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .genetic import crossover_homologous, mutate_pipeline
from .grammar import parse, serialize
from .speciation import ACTIVE, SpeciationConfig, SpeciationState, speciate
from .tree import NodeTree, canonical_text, seed_tree, with_generation

WORST_FITNESS = math.inf

logger = logging.getLogger(__name__)


@dataclass
class EvolutionConfig:
    population_size: int = 100
    generations: int = 30
    crossover_rate: float = 0.6
    insert_rate: float = 0.6
    shrink_rate: float = 0.3
    memory_tap_rate: float = 0.3
    tournament_size: int = 3
    fitness_mode: str = "meta_predicted"  # meta_predicted | epoch10_baseline | full_train
    partial_epochs: int = 10
    max_shame_retries: int = 50
    seed: int = 0
    speciation: SpeciationConfig = field(default_factory=SpeciationConfig)

    def __post_init__(self):
        for name in ("crossover_rate", "insert_rate", "shrink_rate", "memory_tap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")


@dataclass
class FitnessRecord:
    key: str                      # canonical genome text
    curve: list[float]
    fitness: float
    mode: str


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    evaluated: int
    active_species: int
    waiting_species: int
    archived_species: int
    archive_size: int
    best_genome: str


@dataclass
class RunResult:
    best_genome: NodeTree
    best_fitness: float
    history: list[GenerationStats]
    population: list[NodeTree]
    records: dict[str, FitnessRecord]
    speciation: SpeciationState


def _rng(seed, generation, counter) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, generation, counter))))


INIT_KEY_BASE = 1_000_000  # rng-key namespace for initial-population mutations


def init_population(config: EvolutionConfig,
                    lineage: LineageLog | None = None) -> list[NodeTree]:
    """The seed tree plus single-mutation variants of it."""
    seed = seed_tree()
    population = [seed]
    if lineage is not None:
        lineage.record(0, 0, "seed", [], serialize(seed))
    for i in range(config.population_size - 1):
        key = INIT_KEY_BASE + i
        rng = _rng(config.seed, 0, key)
        child = mutate_pipeline(seed_tree(), rng, config.insert_rate,
                                config.shrink_rate, config.memory_tap_rate)
        population.append(child)
        if lineage is not None:
            lineage.record(0, key, "mutate", [serialize(seed)], serialize(child))
    return population


class LineageLog:
    """Append-only record of operator applications, one per line.

    Tab-separated fields: generation, rng key, operator, parent genome
    texts (|-joined), child genome text.  Every line replays independently:
    the rng key fully determines the generator the operator consumed, so
    re-applying the operator to the parents reproduces the child bit-exactly
    (see :func:`replay_line`).
    """

    def __init__(self, sink=None):
        self.lines: list[str] = []
        self.sink = sink

    def record(self, generation, key, op, parents, child) -> None:
        line = "\t".join([str(generation), str(key), op, "|".join(parents), child])
        self.lines.append(line)
        if self.sink is not None:
            self.sink.write(line + "\n")
            self.sink.flush()


def replay_line(line: str, config: EvolutionConfig) -> str:
    """Re-derive the child genome recorded on a lineage line.

    Identity operators (elite, promote) return the parent unchanged; seed
    returns the starting tree; mutate/crossover re-run the recorded
    operator with the generator reconstructed from the rng key.
    """
    generation, key, op, parents_field, child = line.rstrip("\n").split("\t")
    parents = [parse(p) for p in parents_field.split("|")] if parents_field else []
    if op in ("elite", "promote"):
        return serialize(parents[0])
    if op == "seed":
        return serialize(seed_tree())
    rng = _rng(config.seed, int(generation), int(key))
    if op == "crossover":
        out, _ = crossover_homologous(parents[0], parents[1], rng)
    elif op == "mutate":
        out = mutate_pipeline(parents[0], rng, config.insert_rate,
                              config.shrink_rate, config.memory_tap_rate)
    else:
        raise ValueError(f"unknown lineage operator {op!r}")
    return serialize(out)


def genome_key(tree: NodeTree) -> str:
    return canonical_text(tree)


def evaluate_generation(population, evaluator, records, fitness_mode,
                        partial_epochs, workers: int = 1,
                        keys=None, pool=None) -> dict[str, FitnessRecord]:
    """Fill the record cache for every genome in ``population``.

    Identical genomes (same canonical text) share one record and are never
    retrained.  ``evaluator`` maps genome text to a metric curve; training
    failures yield the worst-possible fitness instead of aborting.  Pass an
    executor as ``pool`` (with the evaluator importable in workers) to fan
    evaluation out; results are keyed by genome, so scheduling order never
    affects the outcome.
    """
    keys = keys if keys is not None else [genome_key(g) for g in population]
    pending = sorted({k for k in keys if k not in records})
    if pool is not None and len(pending) > 1:
        curves = list(pool.map(evaluator, pending))
        results = dict(zip(pending, curves))
    elif workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as local_pool:
            curves = list(local_pool.map(evaluator, pending))
        results = dict(zip(pending, curves))
    else:
        results = {k: evaluator(k) for k in pending}
    for key, curve in results.items():
        records[key] = _record_from_curve(key, curve, fitness_mode, partial_epochs)
    return records


def _record_from_curve(key, curve, fitness_mode, partial_epochs) -> FitnessRecord:
    if curve is None or any(not math.isfinite(v) for v in curve):
        return FitnessRecord(key, [], WORST_FITNESS, fitness_mode)
    return FitnessRecord(key, list(curve), float(curve[-1]), fitness_mode)


def apply_meta_fitness(records, predictor) -> None:
    """Replace each record's fitness with the predicted final metric."""
    for rec in records.values():
        if rec.mode == "meta_predicted" and rec.curve and math.isfinite(rec.fitness):
            rec.fitness = float(predictor.predict(rec.curve))


def _spawn_allocation(species_scores, population_size) -> dict[int, int]:
    """Spawn counts proportional to score, summing exactly to the target."""
    total = sum(species_scores.values())
    if total <= 0:
        even = {sid: population_size // len(species_scores)
                for sid in species_scores}
        remainder = population_size - sum(even.values())
        for sid in sorted(species_scores)[:remainder]:
            even[sid] += 1
        return even
    raw = {sid: population_size * score / total
           for sid, score in species_scores.items()}
    alloc = {sid: int(r) for sid, r in raw.items()}
    shortfall = population_size - sum(alloc.values())
    by_frac = sorted(species_scores, key=lambda sid: (alloc[sid] - raw[sid], sid))
    for sid in by_frac[:shortfall]:
        alloc[sid] += 1
    return alloc


def reproduce(population, keys, records, spec_state: SpeciationState,
              config: EvolutionConfig, generation: int,
              lineage: LineageLog | None = None,
              promoted_reps=None) -> list[NodeTree]:
    """Build the next generation.

    Spawns are allocated to active species by mean inverse-rank fitness;
    parents are tournament-selected within their species; offspring come
    from homologous crossover (at the crossover rate) or cloning, then
    mutate, and are re-mutated while they fall inside an archived region
    (up to the retry budget, then accepted with a warning).  Each species'
    best member survives unchanged, and representatives of freshly
    promoted species join the population.
    """
    by_key = {}
    for g, k in zip(population, keys):
        by_key.setdefault(k, g)
    ranked = sorted({k for k in keys if k in records},
                    key=lambda k: (records[k].fitness, k))
    rank_of = {k: i + 1 for i, k in enumerate(ranked)}

    active = [sp for sp in spec_state.species
              if sp.state == ACTIVE and any(m in rank_of for m in sp.members)]
    if not active and not promoted_reps:
        raise RuntimeError("no active species with evaluated members")
    scores = {}
    elites = {}
    for sp in active:
        member_keys = [m for m in sp.members if m in rank_of]
        scores[sp.id] = float(np.mean([1.0 / rank_of[m] for m in member_keys]))
        elites[sp.id] = min(member_keys, key=lambda k: records[k].fitness)

    next_population: list[NodeTree] = []
    offspring_index = [0]
    OFFSPRING_STRIDE = 64  # rng-key slots per offspring: selection, ops chain

    def record_op(key, op, parent_trees, child_tree):
        if lineage is not None:
            lineage.record(generation, key, op,
                           [serialize(p) for p in parent_trees],
                           serialize(child_tree))

    for rep in (promoted_reps or []):
        next_population.append(with_generation(rep, generation))
        record_op(0, "promote", [rep], rep)

    budget = max(config.population_size - len(next_population), 0)
    alloc = _spawn_allocation(scores, budget)

    for sp in active:
        n_spawn = alloc.get(sp.id, 0)
        if n_spawn <= 0:
            continue
        member_keys = [m for m in sp.members if m in rank_of]
        elite_tree = by_key[elites[sp.id]]
        next_population.append(with_generation(elite_tree, generation))
        record_op(0, "elite", [elite_tree], elite_tree)
        produced = 1
        while produced < n_spawn:
            offspring_index[0] += 1
            base_key = offspring_index[0] * OFFSPRING_STRIDE
            step = [0]

            def op_rng():
                key = base_key + step[0]
                step[0] += 1
                return _rng(config.seed, generation, key), key

            rng_sel, _ = op_rng()
            parent_a = _tournament(member_keys, records, rng_sel,
                                   config.tournament_size)
            child = by_key[parent_a]
            if rng_sel.random() < config.crossover_rate and len(member_keys) > 1:
                parent_b = _tournament(member_keys, records, rng_sel,
                                       config.tournament_size)
                rng, key = op_rng()
                child, _ = crossover_homologous(by_key[parent_a],
                                                by_key[parent_b], rng)
                record_op(key, "crossover", [by_key[parent_a], by_key[parent_b]],
                          child)
            retries = 0
            while True:
                rng, key = op_rng()
                mutated = mutate_pipeline(child, rng, config.insert_rate,
                                          config.shrink_rate,
                                          config.memory_tap_rate)
                record_op(key, "mutate", [child], mutated)
                child = mutated
                if not spec_state.violates_archive(child):
                    break
                retries += 1
                if retries > config.max_shame_retries:
                    logger.warning(
                        "offspring still inside an archived region after %d "
                        "re-mutations; accepting it", retries)
                    break
            child = with_generation(child, generation)
            next_population.append(child)
            produced += 1

    # fresh promotions with nothing else evaluated seed the remainder
    fill_index = 0
    while len(next_population) < config.population_size and promoted_reps:
        offspring_index[0] += 1
        key = offspring_index[0] * OFFSPRING_STRIDE
        rng = _rng(config.seed, generation, key)
        source = promoted_reps[fill_index % len(promoted_reps)]
        fill_index += 1
        child = mutate_pipeline(source, rng, config.insert_rate,
                                config.shrink_rate, config.memory_tap_rate)
        record_op(key, "mutate", [source], child)
        next_population.append(with_generation(child, generation))
    return next_population[:config.population_size]


def _tournament(member_keys, records, rng, size) -> str:
    picks = [member_keys[rng.integers(len(member_keys))]
             for _ in range(min(size, len(member_keys)))]
    return min(picks, key=lambda k: records[k].fitness)


def run(config: EvolutionConfig, evaluator, predictor=None, workers: int = 1,
        lineage: LineageLog | None = None, on_generation=None,
        start_state=None, pool=None) -> RunResult:
    """Execute the full evolutionary run.

    ``evaluator`` maps genome text to a partial-training metric curve;
    ``predictor`` extrapolates curves to final fitness when the config's
    fitness mode asks for it.  ``on_generation`` receives
    (stats, population, spec_state, records) after each generation, which
    is where checkpointing hooks in.  ``start_state`` resumes a run from a
    checkpoint tuple (generation, population, spec_state, records, history).
    """
    if config.fitness_mode == "meta_predicted" and predictor is None:
        raise ValueError("meta_predicted fitness requires a trained predictor")
    if start_state is None:
        population = init_population(config, lineage)
        spec_state = SpeciationState(config.speciation)
        records: dict[str, FitnessRecord] = {}
        start_gen = 0
        history: list[GenerationStats] = []
    else:
        start_gen, population, spec_state, records, history = start_state

    best_key = None
    best_fitness = WORST_FITNESS
    best_tree = None
    for rec in records.values():
        if rec.fitness < best_fitness:
            best_fitness, best_key = rec.fitness, rec.key
            best_tree = parse(rec.key)

    promoted_reps = []
    for gen in range(start_gen, config.generations):
        keys = [genome_key(g) for g in population]
        assignment = speciate(dict(zip(keys, population)), spec_state, gen)
        active_ids = {sp.id for sp in spec_state.species if sp.state == ACTIVE}
        eval_keys = [k for k in keys if assignment[k] in active_ids]
        evaluate_generation(population, evaluator, records, config.fitness_mode,
                            config.partial_epochs, workers, keys=eval_keys,
                            pool=pool)
        if config.fitness_mode == "meta_predicted":
            apply_meta_fitness(records, predictor)

        generation_best: dict[int, float] = {}
        for sp in spec_state.species:
            fits = [records[m].fitness for m in sp.members if m in records]
            if fits:
                generation_best[sp.id] = min(fits)
        for sp in spec_state.species:
            if sp.id in generation_best and sp.state == ACTIVE:
                best_member = min((m for m in sp.members if m in records),
                                  key=lambda m: records[m].fitness)
                sp.representative = parse(best_member)

        for k in eval_keys:
            rec = records.get(k)
            if rec is not None and rec.fitness < best_fitness:
                best_fitness = rec.fitness
                best_key = k
                best_tree = parse(k)

        promoted = spec_state.update_stagnation(generation_best)
        promoted_reps = [sp.representative for sp in promoted]

        evaluated = [records[k].fitness for k in sorted(set(eval_keys))
                     if k in records]
        finite = [f for f in evaluated if math.isfinite(f)]
        counts = spec_state.counts()
        stats = GenerationStats(
            generation=gen,
            best_fitness=best_fitness,
            mean_fitness=float(np.mean(finite)) if finite else WORST_FITNESS,
            evaluated=len(evaluated),
            active_species=counts[ACTIVE],
            waiting_species=counts["waiting"],
            archived_species=counts["archived"],
            archive_size=len(spec_state.archive),
            best_genome=best_key or "",
        )
        history.append(stats)
        # reproduce even at the final generation: the callback then always
        # sees the population the next generation would evaluate, so a
        # checkpoint written here resumes (or extends) a run bit-exactly
        population = reproduce(population, keys, records, spec_state, config,
                               gen + 1, lineage, promoted_reps)
        if on_generation is not None:
            on_generation(stats, population, spec_state, records)

    if best_tree is None:
        # generations == 0: evaluate the initial population only
        keys = [genome_key(g) for g in population]
        evaluate_generation(population, evaluator, records, config.fitness_mode,
                            config.partial_epochs, workers, keys=keys, pool=pool)
        if config.fitness_mode == "meta_predicted":
            apply_meta_fitness(records, predictor)
        best_key = min(keys, key=lambda k: records[k].fitness)
        best_fitness = records[best_key].fitness
        best_tree = parse(best_key)

    return RunResult(best_tree, best_fitness, history, population, records,
                     spec_state)
