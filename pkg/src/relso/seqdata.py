"""Sequences, fitness datasets and toy fitness landscapes"""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from relso.exceptions import ImproperlyConfigured, ShapeError, ValidationError
from relso.validators import FitnessValidator, SequenceValidator

logger = logging.getLogger(__name__)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
PAD = "<pad>"
UNK = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

# largest sequence space gen_toy_landscape will enumerate exhaustively
MAX_ENUMERABLE = 200_000

# seed pool / Phi threshold for log-fluorescence style data
THRESHOLD_PRESETS = {
    "gfp": {"seed_max_fitness": 1.3, "phi_threshold": 3.76},
}


class Alphabet:
    """PAD and UNK followed by the residue symbols; PAD is always index 0"""

    def __init__(self, residues=AMINO_ACIDS):
        residues = tuple(residues)
        if len(set(residues)) != len(residues):
            raise ImproperlyConfigured("alphabet residues must be unique")
        if not residues:
            raise ImproperlyConfigured("alphabet needs at least one residue")
        self.residues = residues
        self.symbols = (PAD, UNK) + residues
        self.index = {symbol: i for i, symbol in enumerate(self.symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Alphabet) and self.residues == other.residues

    def __hash__(self):
        return hash(self.residues)

    def __repr__(self):
        return "Alphabet({!r})".format("".join(self.residues))

    @property
    def residue_indices(self):
        return np.arange(2, len(self.symbols))

    def encode(self, sequence, max_len=None):
        max_len = len(sequence) if max_len is None else max_len
        if len(sequence) > max_len:
            raise ShapeError("sequence of length {} exceeds max_len {}".format(len(sequence), max_len))
        tokens = np.full(max_len, PAD_INDEX, dtype=np.int64)
        for i, symbol in enumerate(sequence):
            if symbol not in self.index or symbol in (PAD, UNK):
                raise ValidationError("unknown symbol {!r}".format(symbol))
            tokens[i] = self.index[symbol]
        return EncodedSequence(tokens=tokens, length=len(sequence))

    def encode_batch(self, sequences, max_len=None):
        max_len = max(len(s) for s in sequences) if max_len is None else max_len
        encoded = [self.encode(s, max_len) for s in sequences]
        tokens = np.stack([e.tokens for e in encoded]) if encoded else np.zeros((0, max_len), dtype=np.int64)
        return tokens, np.array([e.length for e in encoded], dtype=np.int64)

    def decode(self, tokens, length=None):
        tokens = np.asarray(tokens)
        if length is not None:
            tokens = tokens[:length]
        return "".join(self.symbols[t] for t in tokens if t != PAD_INDEX)

    def to_dict(self):
        return {"residues": "".join(self.residues)}


@dataclass(frozen=True)
class EncodedSequence:
    tokens: np.ndarray
    length: int


@dataclass(frozen=True)
class CsvSchema:
    sequence: str = "sequence"
    fitness: str = "fitness"
    split: str = "split"


@dataclass(eq=False)
class FitnessDataset:
    name: str
    alphabet: Alphabet
    sequences: tuple
    fitness: np.ndarray
    splits: np.ndarray
    max_len: int
    tokens: np.ndarray = field(init=False, repr=False)
    lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.sequences = tuple(self.sequences)
        self.fitness = np.asarray(self.fitness, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype=object)
        if not (len(self.sequences) == len(self.fitness) == len(self.splits)):
            raise ValidationError("sequences, fitness and splits differ in length")
        if not np.all(np.isfinite(self.fitness)):
            raise ValidationError("fitness values must be finite")
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ValidationError("unknown split name(s): {}".format(", ".join(sorted(unknown))))
        for split in SPLITS:
            members = [s for s, name in zip(self.sequences, self.splits) if name == split]
            if len(members) != len(set(members)):
                raise ValidationError("duplicate sequences within split {}".format(split))
        self.tokens, self.lengths = self.alphabet.encode_batch(self.sequences, self.max_len)

    def __len__(self):
        return len(self.sequences)

    def subset(self, split):
        if split not in SPLITS:
            raise ValidationError("unknown split {}".format(split))
        keep = np.flatnonzero(self.splits == split)
        return self.take(keep, name="{}:{}".format(self.name, split))

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return FitnessDataset(
            name=name or self.name,
            alphabet=self.alphabet,
            sequences=[self.sequences[i] for i in indices],
            fitness=self.fitness[indices],
            splits=self.splits[indices],
            max_len=self.max_len,
        )

    def split_sizes(self):
        return {split: int((self.splits == split).sum()) for split in SPLITS}

    def min_fitness(self, split="train"):
        part = self.fitness[self.splits == split]
        if part.size == 0:
            raise ValidationError("split {} is empty".format(split))
        return float(part.min())


def assign_splits(sequences, seed, fractions=SPLIT_FRACTIONS):
    """Deterministic train/val/test labels; a pure function of (content, seed)"""
    n = len(sequences)
    order = np.argsort(np.array(sequences, dtype=object).astype(str), kind="stable")
    ranked = order[np.random.default_rng(seed).permutation(n)]
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    labels = np.empty(n, dtype=object)
    labels[ranked[:n_train]] = "train"
    labels[ranked[n_train : n_train + n_val]] = "val"
    labels[ranked[n_train + n_val :]] = "test"
    return labels


def load_csv(path, schema=None, alphabet=None, max_len=None, seed=0, name=None):
    """Read a ``sequence,fitness[,split]`` CSV into a tokenized dataset

    Rows are numbered from 1 (first record after the header) in errors.
    """
    schema = schema or CsvSchema()
    alphabet = alphabet or Alphabet()
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise ValidationError("empty file: {}".format(path))
    except FileNotFoundError:
        raise ValidationError("no such dataset file: {}".format(path))
    if frame.empty:
        raise ValidationError("empty file: {}".format(path))
    missing = [c for c in (schema.sequence, schema.fitness) if c not in frame.columns]
    if missing:
        raise ValidationError("missing column(s) {} in {}".format(", ".join(missing), path))

    validate_sequence = SequenceValidator(alphabet, max_len=max_len)
    validate_fitness = FitnessValidator()
    sequences, fitness, seen = [], [], {}
    for row, (raw_seq, raw_fit) in enumerate(zip(frame[schema.sequence], frame[schema.fitness]), start=1):
        sequence = validate_sequence(raw_seq, row=row)
        if sequence in seen:
            raise ValidationError("duplicate sequence {} (rows {} and {})".format(sequence, seen[sequence], row))
        seen[sequence] = row
        sequences.append(sequence)
        fitness.append(validate_fitness(raw_fit, row=row))

    if schema.split in frame.columns:
        splits = np.array([s.strip() for s in frame[schema.split]], dtype=object)
        for row, split in enumerate(splits, start=1):
            if split not in SPLITS:
                raise ValidationError("unknown split {!r}".format(split), row=row)
    else:
        splits = assign_splits(sequences, seed)

    dataset = FitnessDataset(
        name=name or str(path),
        alphabet=alphabet,
        sequences=sequences,
        fitness=fitness,
        splits=splits,
        max_len=max_len or max(len(s) for s in sequences),
    )
    logger.info("loaded %s: %s", dataset.name, dataset.split_sizes())
    return dataset


def write_csv(dataset, path):
    from relso.serializers import DatasetSerializer

    rows = [
        {"sequence": s, "fitness": f, "split": split}
        for s, f, split in zip(dataset.sequences, dataset.fitness, dataset.splits)
    ]
    DatasetSerializer(rows).write(path)


def hamming(a, b):
    if len(a) != len(b):
        raise ShapeError("hamming distance needs equal lengths, got {} and {}".format(len(a), len(b)))
    if isinstance(a, str):
        return sum(x != y for x, y in zip(a, b))
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def enumerate_single_mutants(seed, alphabet):
    """Every sequence one substitution away from ``seed``, position-major order"""
    SequenceValidator(alphabet)(seed)
    mutants = []
    for position, current in enumerate(seed):
        for residue in alphabet.residues:
            if residue != current:
                mutants.append(seed[:position] + residue + seed[position + 1 :])
    return mutants


@dataclass
class ToyLandscapeSpec:
    length: int = 8
    alphabet_size: int = 20
    n_epistatic_pairs: int = 2
    seed: int = 0
    noise_std: float = 0.0
    n_samples: int = 512
    exhaustive: bool = False
    epistasis_scale: float = 1.0

    def __post_init__(self):
        if self.length < 2:
            raise ImproperlyConfigured("toy landscape length must be at least 2")
        if not 2 <= self.alphabet_size <= len(AMINO_ACIDS):
            raise ImproperlyConfigured("toy alphabet_size must lie in [2, {}]".format(len(AMINO_ACIDS)))
        if self.n_epistatic_pairs < 0 or 2 * self.n_epistatic_pairs > self.length:
            raise ImproperlyConfigured("epistatic pairs need distinct positions: at most length // 2 pairs")
        if self.noise_std < 0:
            raise ImproperlyConfigured("noise_std must be nonnegative")

    @property
    def space_size(self):
        return self.alphabet_size**self.length


class ToyLandscape:
    """Additive site weights plus disjoint pairwise epistatic couplings"""

    def __init__(self, alphabet, site_weights, pairs, couplings):
        self.alphabet = alphabet
        self.site_weights = np.asarray(site_weights, dtype=np.float64)
        self.pairs = [tuple(int(p) for p in pair) for pair in pairs]
        width = self.site_weights.shape[1]
        self.couplings = np.asarray(couplings, dtype=np.float64).reshape(len(self.pairs), width, width)
        self.length = self.site_weights.shape[0]

    def __call__(self, sequences):
        return self.evaluate(sequences)

    def residue_matrix(self, sequences):
        lookup = {r: i for i, r in enumerate(self.alphabet.residues)}
        try:
            return np.array([[lookup[c] for c in s] for s in sequences], dtype=np.int64).reshape(-1, self.length)
        except KeyError as e:
            raise ValidationError("symbol {} outside the toy alphabet".format(e))

    def evaluate(self, sequences):
        if isinstance(sequences, str):
            sequences = [sequences]
        x = self.residue_matrix(sequences)
        fitness = self.site_weights[np.arange(self.length), x].sum(axis=1)
        for (i, j), table in zip(self.pairs, self.couplings):
            fitness = fitness + table[x[:, i], x[:, j]]
        return fitness

    def optimum(self):
        """Exact noiseless optimum; ties resolve to the lowest residue index"""
        best = self.site_weights.argmax(axis=1)
        for (i, j), table in zip(self.pairs, self.couplings):
            joint = self.site_weights[i][:, None] + self.site_weights[j][None, :] + table
            best[i], best[j] = np.unravel_index(np.argmax(joint), joint.shape)
        sequence = "".join(self.alphabet.residues[k] for k in best)
        return sequence, float(self.evaluate([sequence])[0])

    def is_separable(self):
        return not self.pairs or not np.any(self.couplings)

    def enumerate_all(self):
        size = len(self.alphabet.residues) ** self.length
        if size > MAX_ENUMERABLE:
            raise ImproperlyConfigured("{} sequences exceed the enumerable limit {}".format(size, MAX_ENUMERABLE))
        return ["".join(p) for p in itertools.product(self.alphabet.residues, repeat=self.length)]

    def to_dict(self):
        sequence, fitness = self.optimum()
        return {
            "alphabet": self.alphabet.to_dict(),
            "site_weights": self.site_weights.tolist(),
            "pairs": [list(p) for p in self.pairs],
            "couplings": self.couplings.tolist(),
            "optimum": {"sequence": sequence, "fitness": fitness},
        }


def gen_toy_landscape(spec):
    """Build a toy landscape and a dataset drawn from it

    Returns ``(dataset, landscape)``; dataset fitness carries the configured
    Gaussian noise, ``landscape`` evaluates the noiseless ground truth.
    """
    rng = np.random.default_rng(spec.seed)
    alphabet = Alphabet(AMINO_ACIDS[: spec.alphabet_size])
    width = spec.alphabet_size
    site_weights = rng.normal(0.0, 1.0, size=(spec.length, width))
    positions = rng.permutation(spec.length)[: 2 * spec.n_epistatic_pairs].reshape(-1, 2)
    pairs = [tuple(sorted(int(p) for p in pair)) for pair in positions]
    couplings = rng.normal(0.0, spec.epistasis_scale, size=(len(pairs), width, width))
    landscape = ToyLandscape(alphabet, site_weights, pairs, couplings)

    if spec.exhaustive:
        if spec.space_size > MAX_ENUMERABLE:
            raise ImproperlyConfigured(
                "exhaustive toy landscape of {} sequences exceeds {}".format(spec.space_size, MAX_ENUMERABLE)
            )
        sequences = landscape.enumerate_all()
    else:
        if spec.n_samples > spec.space_size:
            raise ImproperlyConfigured("n_samples exceeds the size of the sequence space")
        seen = {}
        while len(seen) < spec.n_samples:
            draws = rng.integers(0, width, size=(spec.n_samples, spec.length))
            for row in draws:
                seen.setdefault("".join(alphabet.residues[k] for k in row), None)
                if len(seen) == spec.n_samples:
                    break
        sequences = list(seen)

    fitness = landscape.evaluate(sequences)
    if spec.noise_std > 0:
        fitness = fitness + rng.normal(0.0, spec.noise_std, size=len(sequences))
    dataset = FitnessDataset(
        name="toy-L{}-A{}-P{}-s{}".format(spec.length, width, spec.n_epistatic_pairs, spec.seed),
        alphabet=alphabet,
        sequences=sequences,
        fitness=fitness,
        splits=assign_splits(sequences, spec.seed),
        max_len=spec.length,
    )
    logger.info("generated %s: %s", dataset.name, dataset.split_sizes())
    return dataset, landscape
