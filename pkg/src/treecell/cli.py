"""Command-line entry points.

Commands: evolve, train, hetero, distance, meta, validate.  All file
outputs are written atomically (temp file + rename), CSVs carry a header
row and trailing newline, and runs are byte-reproducible given a seed,
single worker, and 64-bit precision.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evolution, meta
from .config import ExperimentConfig, emit_config, load_config
from .fitness import EvalContext, _eval_in_worker, _init_worker, stable_seed
from .genetic import tree_distance
from .grammar import parse, read_population, serialize
from .network import build_network, heterogeneous_layer, NetworkSpec
from .speciation import SpeciationState
from .tree import validate as validate_tree


def atomic_write(path, content: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    atomic_write(path, "\n".join(lines) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_experiment(args) -> ExperimentConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.evolution.seed = args.seed
    else:
        config.evolution.seed = config.seed
    if getattr(args, "precision", None) is not None:
        config.precision = args.precision
    return config


# --- evolve --------------------------------------------------------------------


STATS_HEADER = ("generation", "best_fitness", "mean_fitness", "evaluated",
                "active_species", "waiting_species", "archived_species",
                "archive_size", "best_genome")


def _stats_row(stats):
    return (stats.generation, stats.best_fitness, stats.mean_fitness,
            stats.evaluated, stats.active_species, stats.waiting_species,
            stats.archived_species, stats.archive_size, stats.best_genome)


def _checkpoint_blob(generation, population, spec_state, records, history):
    return json.dumps({
        "version": 1,
        "next_generation": generation + 1,
        "population": [serialize(g) for g in population],
        "speciation": spec_state.to_json(),
        "records": {
            k: {"curve": r.curve, "fitness": r.fitness, "mode": r.mode}
            for k, r in records.items()
        },
        "history": [list(_stats_row(h)) for h in history],
    }, allow_nan=True)


def _restore_checkpoint(path, config):
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("version") != 1:
        raise ValueError("unsupported checkpoint version")
    population = [parse(t) for t in blob["population"]]
    spec_state = SpeciationState.from_json(blob["speciation"], config.speciation)
    records = {
        k: evolution.FitnessRecord(k, r["curve"], r["fitness"], r["mode"])
        for k, r in blob["records"].items()
    }
    history = [evolution.GenerationStats(*row) for row in blob["history"]]
    return blob["next_generation"], population, spec_state, records, history


def cmd_evolve(args) -> int:
    config = _load_experiment(args)
    try:
        ctx = EvalContext(config)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    out_dir = Path(args.out or config.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.json"
    predictor = None
    if config.evolution.fitness_mode == "meta_predicted":
        if not config.paths.meta_model:
            return _fail("meta_predicted fitness requires paths.meta_model")
        predictor = meta.load_model(config.paths.meta_model)

    start_state = None
    if args.resume and checkpoint_path.exists():
        try:
            start_state = _restore_checkpoint(checkpoint_path, config.evolution)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            return _fail(f"corrupt checkpoint {checkpoint_path}: {exc}")
        if start_state[0] >= config.evolution.generations:
            best = min(start_state[3].values(), key=lambda r: r.fitness)
            print(f"run already finished; best fitness {best.fitness}")
            print(best.key)
            return 0

    lineage_path = out_dir / "lineage.log"
    lineage_mode = "a" if start_state else "w"
    history_rows = list(start_state[4]) if start_state else []

    with open(lineage_path, lineage_mode, encoding="utf-8") as sink:
        lineage = evolution.LineageLog(sink)

        def on_generation(stats, population, spec_state, records):
            history_rows.append(stats)
            write_csv(out_dir / "stats.csv", STATS_HEADER,
                      [_stats_row(h) for h in history_rows])
            atomic_write(checkpoint_path,
                         _checkpoint_blob(stats.generation, population,
                                          spec_state, records, history_rows))

        pool = None
        try:
            if args.workers > 1:
                pool = ProcessPoolExecutor(
                    max_workers=args.workers, initializer=_init_worker,
                    initargs=(emit_config(config), config.evolution.partial_epochs))
                evaluator = _eval_in_worker
            else:
                evaluator = ctx
            result = evolution.run(config.evolution, evaluator,
                                   predictor=predictor, lineage=lineage,
                                   on_generation=on_generation,
                                   start_state=start_state, pool=pool)
        finally:
            if pool is not None:
                pool.shutdown()

    atomic_write(out_dir / "best.genome", serialize(result.best_genome) + "\n")
    print(f"best fitness: {result.best_fitness}")
    print(serialize(result.best_genome))
    return 0


# --- train ------------------------------------------------------------------------


def cmd_train(args) -> int:
    config = _load_experiment(args)
    try:
        genome_text = Path(args.genome).read_text(encoding="utf-8").strip()
        genome = parse(genome_text)
    except OSError as exc:
        return _fail(str(exc))
    except Exception as exc:
        return _fail(f"genome does not parse: {exc}")
    report = validate_tree(genome)
    if report:
        for violation in report:
            print(f"violation: {violation}", file=sys.stderr)
        return 1
    try:
        ctx = EvalContext(config)
        curve = ctx.train_genome(serialize(genome), epochs=config.train.epochs,
                                 seed=config.seed)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    seconds = curve.seconds if args.timing else [0.0] * len(curve.metrics)
    rows = [(i + 1, m, s)
            for i, (m, s) in enumerate(zip(curve.metrics, seconds))]
    out = args.out or "curve.csv"
    write_csv(out, ("epoch", curve.metric_name, "seconds"), rows)
    print(f"final {curve.metric_name}: {curve.final()}")
    return 0


# --- hetero ------------------------------------------------------------------------


def cmd_hetero(args) -> int:
    config = _load_experiment(args)
    pool_dir = Path(args.pool)
    if not pool_dir.exists():
        return _fail(f"pool path {pool_dir} does not exist")
    files = sorted(p for p in pool_dir.iterdir() if p.is_file())
    genomes = []
    for f in files:
        genomes.extend(read_population(f))
    if not genomes:
        return _fail("pool contains no genomes")
    cardinality = config.network.cardinality
    width = config.network.width
    if width % cardinality:
        return _fail(f"layer width {width} is not a multiple of cardinality {cardinality}")
    slots = width // cardinality
    try:
        ctx = EvalContext(config)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    results = []
    for i in range(args.count):
        chosen = [int(rng.integers(len(genomes))) for _ in range(slots)]
        trees = [genomes[c] for c in chosen]
        layers = [heterogeneous_layer(range(slots), cardinality)
                  for _ in range(config.network.layers)]
        if ctx.task.kind == "tokens":
            spec = NetworkSpec(layers, config.network.embedding_dim,
                               vocab_size=ctx.task.vocab_size, head="softmax")
        else:
            spec = NetworkSpec(layers, 0, io_dim=ctx.task.io_dim, head="sigmoid")
        net_seed = stable_seed(config.seed, i, *chosen)
        net = build_network(spec, trees,
                            np.random.Generator(np.random.PCG64(net_seed)),
                            dtype=ctx.dtype)
        from .training import TrainConfig, TrainingDiverged, train

        cfg = TrainConfig(unroll_steps=config.train.unroll_steps,
                          batch_size=config.train.batch_size,
                          optimizer=config.train.optimizer, lr=config.train.lr,
                          lr_decay=config.train.lr_decay,
                          decay_after_epoch=config.train.decay_after_epoch,
                          dropout_ff=config.train.dropout_ff,
                          dropout_rec=config.train.dropout_rec,
                          l2=config.train.l2,
                          grad_clip_norm=config.train.grad_clip_norm,
                          epochs=config.evolution.partial_epochs, seed=net_seed)
        try:
            curve = train(net, ctx.task, cfg)
            fitness = (1.0 - curve.final() if curve.metric_name == "f1"
                       else curve.final())
        except TrainingDiverged:
            fitness = math.inf
        results.append((fitness, [serialize(t) for t in trees]))
        print(f"network {i + 1}/{args.count}: fitness {fitness}")
    results.sort(key=lambda r: r[0])
    rows = [(rank + 1, fitness, "|".join(texts))
            for rank, (fitness, texts) in enumerate(results)]
    write_csv(args.out or "hetero.csv", ("rank", "fitness", "genomes"), rows)
    return 0


# --- small commands -----------------------------------------------------------------


def cmd_distance(args) -> int:
    try:
        a = parse(Path(args.genome_a).read_text(encoding="utf-8").strip())
        b = parse(Path(args.genome_b).read_text(encoding="utf-8").strip())
    except OSError as exc:
        return _fail(str(exc))
    except Exception as exc:
        return _fail(f"genome does not parse: {exc}")
    print(tree_distance(a, b))
    return 0


def cmd_validate(args) -> int:
    try:
        genome = parse(Path(args.genome).read_text(encoding="utf-8").strip())
    except OSError as exc:
        return _fail(str(exc))
    except Exception as exc:
        return _fail(f"genome does not parse: {exc}")
    report = validate_tree(genome)
    if report:
        for violation in report:
            print(f"violation: {violation}")
        return 1
    print("valid")
    return 0


def cmd_meta(args) -> int:
    if args.action == "train":
        try:
            samples = meta.load_samples_csv(args.dataset)
        except OSError as exc:
            return _fail(str(exc))
        except ValueError as exc:
            return _fail(str(exc))
        cfg = meta.MetaConfig()
        if args.config:
            cfg = load_config(args.config).meta
        if args.seed is not None:
            cfg.seed = args.seed
        try:
            model = meta.train_meta(samples, cfg)
        except ValueError as exc:
            return _fail(str(exc))
        out = args.out or "meta_model.npz"
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        meta.save_model(model, out)
        print(f"saved model to {out}")
        return 0
    # predict
    try:
        model = meta.load_model(args.model)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if args.curve:
        values = [float(v) for v in args.curve.split(",")]
    else:
        return _fail("provide --curve v1,...,v10")
    try:
        prediction = meta.predict_final(model, values)
    except ValueError as exc:
        return _fail(str(exc))
    print(prediction)
    return 0


# --- parser -------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="treecell",
        description="Evolve gated recurrent cells encoded as trees.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="experiment config (INI)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)

    p = sub.add_parser("evolve", help="run the evolutionary search")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("train", help="train one genome and emit its curve")
    p.add_argument("genome", help="genome text file")
    common(p)
    p.add_argument("--out", default=None, help="curve CSV path")
    p.add_argument("--timing", action="store_true",
                   help="record wall-clock seconds in the curve CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("hetero", help="random heterogeneous network sweep")
    p.add_argument("pool", help="directory of genome files")
    common(p)
    p.add_argument("--count", type=int, required=True,
                   help="number of networks to build")
    p.add_argument("--out", default=None, help="ranked results CSV")
    p.set_defaults(func=cmd_hetero)

    p = sub.add_parser("distance", help="structural distance between two genomes")
    p.add_argument("genome_a")
    p.add_argument("genome_b")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("validate", help="check a genome against every rule")
    p.add_argument("genome")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("meta", help="train or query the curve predictor")
    p.add_argument("action", choices=("train", "predict"))
    p.add_argument("--dataset", help="curve CSV (train)")
    p.add_argument("--model", help="model checkpoint (predict)")
    p.add_argument("--curve", help="comma-separated 10-epoch prefix (predict)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_meta)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
