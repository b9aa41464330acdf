"""``relso`` command line: train, optimize, eval, smoothness, attention, enumerate, toygen

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import logging
import os
import sys
from collections import Counter
from dataclasses import asdict

import numpy as np

from relso import __version__
from relso.conf import load_config, model_config, optimizer_hyperparams, save_lock, toy_spec, train_config
from relso.evalmetrics import (
    aggregate_attention,
    encode_dataset,
    knn_graph,
    mean_step_change,
    onehot,
    onehot_signal,
    pca_project,
    sample_walks,
    smoothness_index,
    walk_table,
)
from relso.exceptions import (
    BudgetExhausted,
    ImproperlyConfigured,
    NumericalError,
    ShapeError,
    TapeError,
    ValidationError,
)
from relso.models import ReLSOModel, load_checkpoint, save_checkpoint
from relso.optimizers import METHODS, ModelSurrogate, run_benchmark
from relso.seqdata import (
    AMINO_ACIDS,
    THRESHOLD_PRESETS,
    Alphabet,
    CsvSchema,
    enumerate_single_mutants,
    gen_toy_landscape,
    load_csv,
    write_csv,
)
from relso.serializers import (
    AttentionMeanSerializer,
    BenchmarkSerializer,
    LatentCoordsSerializer,
    MetricLogSerializer,
    MutantCoordsSerializer,
    MutantsSerializer,
    PhiSummarySerializer,
    PositionalAttentionSerializer,
    SmoothnessSerializer,
    WalksSerializer,
    write_json,
)
from relso.trainer import train, validate
from relso.utils import import_from_path, rng_stream

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

EXIT_CODES = (
    (ImproperlyConfigured, EXIT_CONFIG),
    (ValidationError, EXIT_DATA),
    (ShapeError, EXIT_DATA),
    (NumericalError, EXIT_NUMERIC),
    (TapeError, EXIT_NUMERIC),
    (BudgetExhausted, EXIT_NUMERIC),
)

CHECKPOINT_NAME = "checkpoint.rlso"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _methods(value):
    methods = [m.strip() for m in value.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise argparse.ArgumentTypeError(
            "unknown method(s) {}; choose from {}".format(", ".join(unknown), ",".join(METHODS))
        )
    return methods


def _add_common(parser):
    parser.add_argument("--config", help="YAML config file (nested or flat dotted keys)")
    parser.add_argument("--out", dest="out", required=True, help="output directory")
    parser.add_argument("--seed", dest="seed", type=int)
    parser.add_argument("--log-level", dest="log_level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")


def _add_data(parser):
    parser.add_argument("--data", dest="data.path", help="dataset CSV, or 'toy' for a generated landscape")
    parser.add_argument("--alphabet", dest="data.alphabet", help="residue symbols of a CSV dataset")
    parser.add_argument("--max-len", dest="data.max_len", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="relso", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version="%(prog)s {}".format(__version__))
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train an autoencoder preset")
    _add_common(p)
    _add_data(p)
    p.add_argument("--preset", dest="model.preset", choices=["ae", "jtae", "relso-neg", "relso-interp", "relso"])
    p.add_argument("--scale", dest="model.scale", choices=["desk", "full"])
    p.add_argument("--steps", dest="train.steps", type=int)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--lr", dest="train.lr", type=float)
    p.add_argument("--eval-every", dest="train.eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="train.checkpoint_every", type=int)
    p.add_argument("--optimizer", dest="train.optimizer", choices=["adam", "sgd"])

    p = commands.add_parser("optimize", help="benchmark optimizers from low-fitness seeds")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", dest="optimize.checkpoint")
    p.add_argument("--methods", dest="optimize.methods", type=_methods)
    p.add_argument("--n-seeds", dest="optimize.n_seeds", type=int)
    p.add_argument("--budget", dest="optimize.budget", type=int)
    p.add_argument("--threshold", dest="optimize.threshold", type=float)
    p.add_argument("--threshold-pct", dest="optimize.threshold_pct", type=float)
    p.add_argument("--threshold-preset", dest="optimize.threshold_preset", choices=sorted(THRESHOLD_PRESETS))
    p.add_argument("--oracle", dest="optimize.oracle", help="dotted path to a ground-truth callable")

    p = commands.add_parser("eval", help="task metrics and latent PCA coordinates")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", dest="eval.checkpoint")
    p.add_argument("--split", dest="eval.split")

    p = commands.add_parser("smoothness", help="KNN smoothness indices and latent walks")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", dest="eval.checkpoints", nargs="+")
    p.add_argument("--split", dest="eval.split")
    p.add_argument("--k", dest="eval.k", type=int)
    p.add_argument("--n-walks", dest="eval.n_walks", type=int)
    p.add_argument("--walk-steps", dest="eval.walk_steps", type=int)

    p = commands.add_parser("attention", help="averaged attention maps and pooling weights")
    _add_common(p)
    _add_data(p)
    p.add_argument("--checkpoint", dest="eval.checkpoint")
    p.add_argument("--split", dest="eval.split")
    p.add_argument("--threshold-pct", dest="eval.threshold_pct", type=float)

    p = commands.add_parser("enumerate", help="every single-substitution variant of a sequence")
    _add_common(p)
    _add_data(p)
    p.add_argument("--sequence", dest="eval.seed_sequence")
    p.add_argument("--top-n", dest="eval.top_n", type=int, help="use the N fittest training sequences as seeds")
    p.add_argument("--checkpoint", dest="eval.checkpoint", help="score variants with this model")

    p = commands.add_parser("toygen", help="write a toy fitness landscape dataset")
    _add_common(p)
    p.add_argument("--length", dest="toy.length", type=int)
    p.add_argument("--alphabet-size", dest="toy.alphabet_size", type=int)
    p.add_argument("--pairs", dest="toy.n_epistatic_pairs", type=int)
    p.add_argument("--n-samples", dest="toy.n_samples", type=int)
    p.add_argument("--noise-std", dest="toy.noise_std", type=float)
    p.add_argument("--exhaustive", dest="toy.exhaustive", action="store_const", const=True)
    p.add_argument("--toy-seed", dest="toy.seed", type=int)
    return parser


def config_from_args(args):
    values = vars(args)
    flags = {key: value for key, value in values.items() if "." in key}
    flags.update(command=args.command, seed=args.seed, out=args.out, log_level=args.log_level)
    return load_config(args.config, flags=flags, overrides=args.overrides)


# shared plumbing


def prepare_out(config):
    if not config.out:
        raise ImproperlyConfigured("an output directory is required")
    os.makedirs(config.out, exist_ok=True)
    save_lock(config, config.out)
    return config.out


def require_checkpoint(path, option):
    if not path:
        raise ImproperlyConfigured("{} is required".format(option))
    if not os.path.exists(path):
        raise ImproperlyConfigured("checkpoint not found: {}".format(path))
    return load_checkpoint(path)


def load_data(config, alphabet=None):
    """Dataset plus, for toy data, the landscape that generated it"""
    data = config.data
    if data.path in (None, "toy"):
        dataset, landscape = gen_toy_landscape(toy_spec(config))
        if alphabet is not None and alphabet != dataset.alphabet:
            raise ImproperlyConfigured("checkpoint alphabet {} does not match the toy alphabet".format(alphabet))
        return dataset, landscape
    if not os.path.exists(data.path):
        raise ImproperlyConfigured("dataset file not found: {}".format(data.path))
    if alphabet is None:
        alphabet = Alphabet(data.alphabet) if data.alphabet else Alphabet()
    schema = CsvSchema(sequence=data.sequence_column, fitness=data.fitness_column, split=data.split_column)
    dataset = load_csv(data.path, schema=schema, alphabet=alphabet, max_len=data.max_len, seed=data.split_seed)
    return dataset, None


def _part(dataset, split):
    return dataset.subset(split) if split else dataset


# commands


def cmd_train(config):
    dataset, _ = load_data(config)
    mc = model_config(config)
    tc = train_config(config, progress=sys.stderr.isatty())
    out = prepare_out(config)
    result = train(dataset, mc, tc, out_dir=out)
    save_checkpoint(result.checkpoint, os.path.join(out, CHECKPOINT_NAME))
    MetricLogSerializer(result.log).write(os.path.join(out, "metrics.csv"))
    write_json(os.path.join(out, "metrics.json"), asdict(result.metrics))
    return EXIT_OK


def cmd_optimize(config):
    section = config.optimize
    checkpoint = require_checkpoint(section.checkpoint, "--checkpoint")
    dataset, landscape = load_data(config, alphabet=Alphabet(checkpoint.alphabet))
    threshold, seed_max = section.threshold, None
    if section.threshold_preset:
        if section.threshold_preset not in THRESHOLD_PRESETS:
            raise ImproperlyConfigured("unknown threshold preset {!r}".format(section.threshold_preset))
        preset = THRESHOLD_PRESETS[section.threshold_preset]
        seed_max = preset["seed_max_fitness"]
        threshold = preset["phi_threshold"] if threshold is None else threshold
    oracle = import_from_path(section.oracle, "oracle") if section.oracle else landscape
    unknown = [m for m in section.methods if m not in METHODS]
    if unknown:
        raise ImproperlyConfigured("unknown method(s): {}".format(", ".join(unknown)))
    out = prepare_out(config)

    report = run_benchmark(
        dataset,
        checkpoint,
        methods=list(section.methods),
        n_seeds=section.n_seeds,
        budget=section.budget,
        threshold=threshold,
        threshold_pct=section.threshold_pct,
        seed=config.seed,
        landscape=oracle,
        hyperparams=optimizer_hyperparams(config),
        seed_max_fitness=seed_max,
    )
    BenchmarkSerializer(report.rows).write(os.path.join(out, "benchmark.csv"))
    PhiSummarySerializer(report.summary).write(os.path.join(out, "phi_summary.csv"))
    trajectory_dir = os.path.join(out, "trajectories")
    os.makedirs(trajectory_dir, exist_ok=True)
    for method, runs in report.trajectories.items():
        for trajectory in runs:
            name = "{}-{:03d}.json".format(method, trajectory.seed_id)
            write_json(os.path.join(trajectory_dir, name), trajectory.to_dict())
    return EXIT_OK


def cmd_eval(config):
    checkpoint = require_checkpoint(config.eval.checkpoint, "--checkpoint")
    dataset, _ = load_data(config, alphabet=Alphabet(checkpoint.alphabet))
    model = ReLSOModel.from_checkpoint(checkpoint)
    part = _part(dataset, config.eval.split)
    out = prepare_out(config)
    metrics = validate(model, part, split=None)
    write_json(os.path.join(out, "metrics.json"), asdict(metrics))
    projection = pca_project(encode_dataset(model, part), n_components=2)
    rows = [
        {"id": i, "pc1": pc[0], "pc2": pc[1], "fitness": fitness}
        for i, (pc, fitness) in enumerate(zip(projection.coords, part.fitness))
    ]
    LatentCoordsSerializer(rows).write(os.path.join(out, "latent_coords.csv"))
    return EXIT_OK


def cmd_smoothness(config):
    section = config.eval
    paths = list(section.checkpoints) or ([section.checkpoint] if section.checkpoint else [])
    if not paths:
        raise ImproperlyConfigured("--checkpoint is required")
    checkpoints = [require_checkpoint(path, "--checkpoint") for path in paths]
    dataset, _ = load_data(config, alphabet=Alphabet(checkpoints[0].alphabet))
    part = _part(dataset, section.split)
    out = prepare_out(config)

    sequence_signal = onehot_signal(part.sequences, part.alphabet)
    rows, walks = [], []
    representations = [("onehot", onehot(part.sequences, part.alphabet), None)]
    for path, checkpoint in zip(paths, checkpoints):
        model = ReLSOModel.from_checkpoint(checkpoint)
        representations.append((path, encode_dataset(model, part), model))
    for name, points, model in representations:
        graph = knn_graph(points, k=section.k)
        rows.append(smoothness_index(graph, part.fitness, name="fitness").as_row(name))
        rows.append(smoothness_index(graph, sequence_signal, name="sequence").as_row(name))
        if model is not None:
            profiles = sample_walks(
                model, points, part.fitness, section.n_walks, section.walk_steps, rng_stream(config.seed, "seeds")
            )
            walks.extend(walk_table(profiles, representation=name))
            logger.info("%s: mean per-step sequence change along walks %.3f", name, mean_step_change(profiles))
    SmoothnessSerializer(rows).write(os.path.join(out, "smoothness.csv"))
    WalksSerializer(walks).write(os.path.join(out, "walks.csv"))
    return EXIT_OK


def cmd_attention(config):
    checkpoint = require_checkpoint(config.eval.checkpoint, "--checkpoint")
    dataset, _ = load_data(config, alphabet=Alphabet(checkpoint.alphabet))
    part = _part(dataset, config.eval.split)
    length, _ = Counter(len(s) for s in part.sequences).most_common(1)[0]
    sequences = [s for s in part.sequences if len(s) == length]
    out = prepare_out(config)
    summary = aggregate_attention(ReLSOModel.from_checkpoint(checkpoint), sequences, config.eval.threshold_pct)
    rows = [
        {"row": i, "col": j, "weight": summary.mean_map[i, j]}
        for i in range(summary.mean_map.shape[0])
        for j in range(summary.mean_map.shape[1])
    ]
    AttentionMeanSerializer(rows).write(os.path.join(out, "attention_mean.csv"))
    PositionalAttentionSerializer(
        [{"position": i, "weight": w} for i, w in enumerate(summary.positional)]
    ).write(os.path.join(out, "positional_attention.csv"))
    return EXIT_OK


def _mutant_row(sequence, mutant, score):
    position = next(i for i, (a, b) in enumerate(zip(sequence, mutant)) if a != b)
    return {
        "position": position,
        "wildtype": sequence[position],
        "mutant": mutant[position],
        "sequence": mutant,
        "predicted_fitness": score,
    }


def enumerate_top(config):
    """Variants of the N fittest training sequences, projected with the training set"""
    section = config.eval
    if section.top_n < 1:
        raise ImproperlyConfigured("--top-n must be at least 1")
    checkpoint = require_checkpoint(section.checkpoint, "--checkpoint")
    dataset, _ = load_data(config, alphabet=Alphabet(checkpoint.alphabet))
    model = ReLSOModel.from_checkpoint(checkpoint)
    if not model.config.use_fitness_head:
        raise ImproperlyConfigured("--top-n needs a checkpoint trained with a fitness head")
    train_part = dataset.subset("train")
    if section.top_n > len(train_part):
        raise ImproperlyConfigured(
            "--top-n {} exceeds the {} training sequences".format(section.top_n, len(train_part))
        )
    order = np.argsort(-train_part.fitness, kind="stable")[: section.top_n]
    seeds = [train_part.sequences[i] for i in order]
    out = prepare_out(config)

    surrogate = ModelSurrogate(model, length=None)
    mutant_rows, members = [], []
    for seed_id, seed in enumerate(seeds):
        mutants = enumerate_single_mutants(seed, dataset.alphabet)
        scores = surrogate.score_sequences(mutants)
        for mutant, score in zip(mutants, scores):
            row = _mutant_row(seed, mutant, score)
            mutant_rows.append(row)
            members.append(("variant", seed_id, row["position"], mutant))
    members = (
        [("train", -1, -1, s) for s in train_part.sequences]
        + [("seed", i, -1, s) for i, s in enumerate(seeds)]
        + members
    )
    extra = surrogate.encode([sequence for _, _, _, sequence in members[len(train_part) :]])
    z = np.concatenate([encode_dataset(model, train_part), extra])
    projection = pca_project(z, n_components=2)
    coord_rows = [
        {
            "kind": kind,
            "seed": seed_id,
            "position": position,
            "sequence": sequence,
            "predicted_fitness": score,
            "pc1": pc[0],
            "pc2": pc[1],
        }
        for (kind, seed_id, position, sequence), score, pc in zip(members, surrogate.predict(z), projection.coords)
    ]
    MutantsSerializer(mutant_rows).write(os.path.join(out, "mutants.csv"))
    MutantCoordsSerializer(coord_rows).write(os.path.join(out, "mutant_coords.csv"))
    logger.info("wrote %d variants of the %d fittest training sequences", len(mutant_rows), len(seeds))
    return EXIT_OK


def cmd_enumerate(config):
    if config.eval.top_n is not None:
        return enumerate_top(config)
    sequence = config.eval.seed_sequence
    if not sequence:
        raise ImproperlyConfigured("--sequence or --top-n is required")
    surrogate = None
    if config.eval.checkpoint:
        checkpoint = require_checkpoint(config.eval.checkpoint, "--checkpoint")
        alphabet = Alphabet(checkpoint.alphabet)
        model = ReLSOModel.from_checkpoint(checkpoint)
        if model.config.use_fitness_head:
            surrogate = ModelSurrogate(model, length=len(sequence))
    else:
        alphabet = Alphabet(config.data.alphabet or AMINO_ACIDS)
    mutants = enumerate_single_mutants(sequence, alphabet)
    scores = surrogate.score_sequences(mutants) if surrogate and mutants else np.full(len(mutants), np.nan)
    out = prepare_out(config)
    rows = [_mutant_row(sequence, mutant, score) for mutant, score in zip(mutants, scores)]
    MutantsSerializer(rows).write(os.path.join(out, "mutants.csv"))
    logger.info("wrote %d variants of %s", len(rows), sequence)
    return EXIT_OK


def cmd_toygen(config):
    dataset, landscape = gen_toy_landscape(toy_spec(config))
    out = prepare_out(config)
    write_csv(dataset, os.path.join(out, "dataset.csv"))
    write_json(os.path.join(out, "landscape.json"), landscape.to_dict())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "optimize": cmd_optimize,
    "eval": cmd_eval,
    "smoothness": cmd_smoothness,
    "attention": cmd_attention,
    "enumerate": cmd_enumerate,
    "toygen": cmd_toygen,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        logging.basicConfig(level=config.log_level, format=LOG_FORMAT)
        return COMMANDS[config.command](config)
    except tuple(cls for cls, _ in EXIT_CODES) as e:
        code = next(code for cls, code in EXIT_CODES if isinstance(e, cls))
        print("relso {}: {}".format(args.command, e), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
