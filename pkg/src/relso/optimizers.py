"""Sequence and latent-space optimizers sharing one evaluation-budget contract

Every call that asks a fitness model (surrogate or ground truth) for a score
is charged to a ``Budget``, one unit per scored point.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from relso import diffcore as dc
from relso.exceptions import BudgetExhausted, ImproperlyConfigured, NumericalError, ValidationError
from relso.models import Checkpoint, ReLSOModel
from relso.seqdata import hamming
from relso.utils import percentile_threshold, rng_stream

logger = logging.getLogger(__name__)

METHODS = ("ga", "ga-cycle", "hc", "shc", "mcmc-latent", "mcmc-seq", "de")

DEFAULT_BUDGET = 60
DEFAULT_N_SEEDS = 30
SEED_QUANTILE = 25

DEFAULT_HYPERPARAMS = {
    "ga": {"eps": 0.05, "K": 60, "tol": 1e-4},
    "ga-cycle": {"eps": 0.05, "K": 60, "tol": 1e-4},
    "hc": {"n_candidates": 5, "step_scale": 0.1},
    "shc": {"n_candidates": 5, "step_scale": 0.1},
    "mcmc-latent": {"step_scale": 0.1, "kT": 0.05},
    "mcmc-seq": {"kT": 0.05},
    "de": {},
}


@dataclass
class Budget:
    total: int
    spent: int = 0

    def __post_init__(self):
        if self.total < 0:
            raise ImproperlyConfigured("budget must be nonnegative")

    @property
    def remaining(self):
        return self.total - self.spent

    def can_afford(self, count=1):
        return self.spent + count <= self.total

    def charge(self, count=1):
        if not self.can_afford(count):
            raise BudgetExhausted("charging {} exceeds budget ({} of {} spent)".format(count, self.spent, self.total))
        self.spent += count


@dataclass
class TrajectoryStep:
    sequence: str
    predicted: float
    z: np.ndarray = None
    accepted: bool = True

    def to_dict(self):
        return {
            "z": None if self.z is None else [float(v) for v in self.z],
            "sequence": self.sequence,
            "predicted": None if math.isnan(self.predicted) else float(self.predicted),
            "accepted": bool(self.accepted),
        }


@dataclass
class Trajectory:
    method: str
    seed_id: int
    hyperparams: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    skipped_positions: list = field(default_factory=list)
    evaluations: int = 0

    def record(self, sequence, predicted, z=None, accepted=True):
        step = TrajectoryStep(sequence=sequence, predicted=float(predicted), z=z, accepted=accepted)
        self.steps.append(step)
        return step

    @property
    def final(self):
        """Current state at the end of the run: the last accepted step"""
        for step in reversed(self.steps):
            if step.accepted:
                return step
        raise ValidationError("trajectory {} has no accepted step".format(self.method))

    def to_dict(self):
        return {
            "method": self.method,
            "seed_id": self.seed_id,
            "hyperparams": self.hyperparams,
            "evaluations": self.evaluations,
            "skipped_positions": list(self.skipped_positions),
            "steps": [step.to_dict() for step in self.steps],
        }


class ModelSurrogate:
    """Latent fitness surface, decoder and encoder of a trained model"""

    def __init__(self, model, length):
        if isinstance(model, Checkpoint):
            model = ReLSOModel.from_checkpoint(model)
        if not model.config.use_fitness_head:
            raise ImproperlyConfigured("optimization needs a model trained with a fitness head")
        self.model = model.eval()
        self.length = length

    def predict(self, z):
        with dc.no_grad():
            return self.model.predict_fitness(np.atleast_2d(z)).data.copy()

    def value_and_grad(self, z):
        with dc.Tape() as tape:
            point = dc.Tensor(np.atleast_2d(z), requires_grad=True)
            value = self.model.predict_fitness(point).sum()
            grads = tape.backward(value, inputs=[point])
        return value.item(), grads[point][0]

    def decode(self, z):
        return self.model.decode_sequences(np.atleast_2d(z), lengths=self.length)[0]

    def encode(self, sequences):
        tokens, lengths = self.model.alphabet.encode_batch(sequences, self.model.config.max_len)
        with dc.no_grad():
            return self.model.encode(tokens, lengths).z.data.copy()

    def score_sequences(self, sequences):
        return self.predict(self.encode(sequences))


class OracleScorer:
    """Ground-truth scores from a toy landscape or any callable over a list of sequences"""

    def __init__(self, landscape):
        self.evaluate = getattr(landscape, "evaluate", landscape)
        if not callable(self.evaluate):
            raise ImproperlyConfigured("oracle {!r} is not callable".format(landscape))

    def score_sequences(self, sequences):
        return np.asarray(self.evaluate(list(sequences)), dtype=np.float64).reshape(-1)


def gradient_ascent(z0, surrogate, eps=0.05, K=60, budget=None, tol=1e-4, cycle=False, seed_id=0):
    """Climb ``z <- z + eps * grad`` on the surrogate

    Each evaluated point is recorded; the run stops after K updates, when the
    budget cannot pay for another evaluation or when the gradient norm drops
    below ``tol``. With ``cycle`` every update is followed by a decode and
    re-encode of the new point.
    """
    if eps <= 0:
        raise ImproperlyConfigured("step size must be positive")
    if K < 1:
        raise ImproperlyConfigured("K must be at least 1")
    budget = budget or Budget(K + 1)
    if budget.total < 1:
        raise ImproperlyConfigured("gradient ascent needs a budget of at least 1")
    trajectory = Trajectory(
        method="ga-cycle" if cycle else "ga",
        seed_id=seed_id,
        hyperparams={"eps": eps, "K": K, "tol": tol},
    )
    z = np.array(z0, dtype=np.float64).reshape(-1)
    updates = 0
    while True:
        budget.charge()
        value, grad = surrogate.value_and_grad(z)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient at update {}".format(updates))
        trajectory.record(surrogate.decode(z), value, z=z.copy())
        if np.linalg.norm(grad) < tol or updates == K or not budget.can_afford():
            break
        z = z + eps * grad
        if cycle:
            z = surrogate.encode([surrogate.decode(z)])[0]
        updates += 1
    trajectory.evaluations = budget.spent
    return trajectory


def hill_climb(z0, surrogate, n_candidates=5, step_scale=0.1, budget=None, stochastic=False, rng=None, seed_id=0):
    """Greedy (or stochastic) local search over Gaussian perturbations in latent space"""
    if n_candidates < 1:
        raise ImproperlyConfigured("n_candidates must be at least 1")
    budget = budget or Budget(DEFAULT_BUDGET)
    rng = rng or np.random.default_rng(0)
    trajectory = Trajectory(
        method="shc" if stochastic else "hc",
        seed_id=seed_id,
        hyperparams={"n_candidates": n_candidates, "step_scale": step_scale},
    )
    z = np.array(z0, dtype=np.float64).reshape(-1)
    budget.charge()
    y = float(surrogate.predict(z)[0])
    trajectory.record(surrogate.decode(z), y, z=z.copy())
    while budget.can_afford(n_candidates):
        budget.charge(n_candidates)
        candidates = z + rng.normal(0.0, step_scale, size=(n_candidates, z.size))
        scores = surrogate.predict(candidates)
        improvers = np.flatnonzero(scores > y)
        if improvers.size == 0:
            break
        if stochastic:
            pick = int(rng.choice(improvers))
        else:
            pick = int(improvers[np.argmax(scores[improvers])])
        z, y = candidates[pick], float(scores[pick])
        trajectory.record(surrogate.decode(z), y, z=z.copy())
    trajectory.evaluations = budget.spent
    return trajectory


def acceptance_probability(dy, kT):
    if kT <= 0:
        raise ImproperlyConfigured("kT must be positive")
    if dy >= 0:
        return 1.0
    return math.exp(dy / kT)


def metropolis_accept(dy, kT, rng):
    return rng.random() < acceptance_probability(dy, kT)


def mcmc_latent(z0, surrogate, step_scale=0.1, kT=0.05, budget=None, rng=None, seed_id=0):
    """Metropolis chain over latent points; rejected proposals are recorded with ``accepted=False``"""
    acceptance_probability(0.0, kT)
    budget = budget or Budget(DEFAULT_BUDGET)
    rng = rng or np.random.default_rng(0)
    trajectory = Trajectory(method="mcmc-latent", seed_id=seed_id, hyperparams={"step_scale": step_scale, "kT": kT})
    z = np.array(z0, dtype=np.float64).reshape(-1)
    budget.charge()
    y = float(surrogate.predict(z)[0])
    trajectory.record(surrogate.decode(z), y, z=z.copy())
    while budget.can_afford():
        budget.charge()
        proposal = z + rng.normal(0.0, step_scale, size=z.size)
        y_new = float(surrogate.predict(proposal)[0])
        accepted = metropolis_accept(y_new - y, kT, rng)
        if accepted:
            z, y = proposal, y_new
        trajectory.record(surrogate.decode(proposal), y_new, z=proposal.copy(), accepted=accepted)
    trajectory.evaluations = budget.spent
    return trajectory


def mcmc_sequence(x0, scorer, alphabet, kT=0.05, budget=None, rng=None, seed_id=0):
    """Metropolis chain of single substitutions in sequence space"""
    acceptance_probability(0.0, kT)
    if not x0:
        raise ValidationError("mcmc_sequence needs a nonempty start sequence")
    budget = budget or Budget(DEFAULT_BUDGET)
    rng = rng or np.random.default_rng(0)
    residues = alphabet.residues
    trajectory = Trajectory(method="mcmc-seq", seed_id=seed_id, hyperparams={"kT": kT})
    x = x0
    budget.charge()
    y = float(scorer.score_sequences([x])[0])
    trajectory.record(x, y)
    while budget.can_afford():
        budget.charge()
        position = int(rng.integers(len(x)))
        choices = [r for r in residues if r != x[position]]
        proposal = x[:position] + choices[int(rng.integers(len(choices)))] + x[position + 1 :]
        y_new = float(scorer.score_sequences([proposal])[0])
        accepted = metropolis_accept(y_new - y, kT, rng)
        if accepted:
            x, y = proposal, y_new
        trajectory.record(proposal, y_new, accepted=accepted)
    trajectory.evaluations = budget.spent
    return trajectory


def directed_evolution(x0, scorer, alphabet, position_order=None, budget=None, seed_id=0):
    """Fix the best residue at each position in turn

    All residues are scored at a position; ties go to the lowest alphabet
    index. Positions the remaining budget cannot cover are skipped and listed
    in ``skipped_positions``.
    """
    order = list(range(len(x0))) if position_order is None else [int(p) for p in position_order]
    if sorted(order) != list(range(len(x0))):
        raise ImproperlyConfigured("position_order must be a permutation of 0..{}".format(len(x0) - 1))
    budget = budget or Budget(DEFAULT_BUDGET)
    residues = alphabet.residues
    trajectory = Trajectory(method="de", seed_id=seed_id, hyperparams={"position_order": order})
    x = x0
    trajectory.record(x, math.nan)
    for position in order:
        if not budget.can_afford(len(residues)):
            trajectory.skipped_positions.append(position)
            continue
        budget.charge(len(residues))
        candidates = [x[:position] + r + x[position + 1 :] for r in residues]
        scores = np.asarray(scorer.score_sequences(candidates), dtype=np.float64)
        best = int(np.argmax(scores))
        x = candidates[best]
        trajectory.record(x, scores[best])
    trajectory.evaluations = budget.spent
    return trajectory


def run_method(method, seed_sequence, surrogate, alphabet, budget, rng, seed_id=0, hyperparams=None):
    if method not in METHODS:
        raise ImproperlyConfigured("unknown method {!r}; choose from {}".format(method, ", ".join(METHODS)))
    params = dict(DEFAULT_HYPERPARAMS[method])
    params.update(hyperparams or {})
    budget = Budget(budget)
    if method in ("mcmc-seq", "de"):
        if method == "de":
            return directed_evolution(seed_sequence, surrogate, alphabet, budget=budget, seed_id=seed_id, **params)
        return mcmc_sequence(seed_sequence, surrogate, alphabet, budget=budget, rng=rng, seed_id=seed_id, **params)
    z0 = surrogate.encode([seed_sequence])[0]
    if method in ("ga", "ga-cycle"):
        return gradient_ascent(z0, surrogate, budget=budget, cycle=method == "ga-cycle", seed_id=seed_id, **params)
    if method in ("hc", "shc"):
        return hill_climb(z0, surrogate, budget=budget, stochastic=method == "shc", rng=rng, seed_id=seed_id, **params)
    return mcmc_latent(z0, surrogate, budget=budget, rng=rng, seed_id=seed_id, **params)


def select_seeds(dataset, n_seeds, seed=0, split="test", quantile=SEED_QUANTILE, max_fitness=None):
    """``n_seeds`` sequences sampled from the lowest-fitness quartile of ``split``

    ``max_fitness`` replaces the quartile cutoff with a fixed ceiling.
    """
    part = dataset.subset(split)
    if len(part) == 0:
        raise ValidationError("split {} is empty".format(split))
    cutoff = np.percentile(part.fitness, quantile) if max_fitness is None else max_fitness
    pool = np.flatnonzero(part.fitness <= cutoff)
    if len(pool) < n_seeds:
        raise ValidationError(
            "insufficient held-out sequences: {} in the bottom {}% of {}, {} seeds requested".format(
                len(pool), quantile, split, n_seeds
            )
        )
    chosen = np.sort(rng_stream(seed, "seeds").choice(pool, size=n_seeds, replace=False))
    return [part.sequences[i] for i in chosen]


def diversity(sequences):
    """Mean pairwise Hamming distance normalized by length"""
    if len(sequences) < 2:
        return 0.0
    distances = [hamming(a, b) / len(a) for a, b in itertools.combinations(sequences, 2)]
    return float(np.mean(distances))


@dataclass
class BenchmarkReport:
    threshold: float
    seeds: list
    trajectories: dict
    rows: list
    summary: list


def summarize(method, trajectories, surrogate_scores, threshold, train_sequences, oracle=None):
    finals = [t.final.sequence for t in trajectories]
    members = sorted({seq for seq, score in zip(finals, surrogate_scores) if score >= threshold})
    predicted = {seq: score for seq, score in zip(finals, surrogate_scores)}
    values = np.array([predicted[s] for s in members])
    row = {
        "method": method,
        "phi_size": len(members),
        "max_fitness": float(values.max()) if members else math.nan,
        "mean_fitness": float(values.mean()) if members else math.nan,
        "std_fitness": float(values.std()) if members else math.nan,
        "novelty": float(np.mean([s not in train_sequences for s in members])) if members else math.nan,
        "diversity": diversity(members),
        "true_max_fitness": math.nan,
        "true_mean_fitness": math.nan,
        "evaluations": int(sum(t.evaluations for t in trajectories)),
    }
    if oracle is not None and members:
        truth = oracle.score_sequences(members)
        row["true_max_fitness"] = float(truth.max())
        row["true_mean_fitness"] = float(truth.mean())
    return row, members


def run_benchmark(
    dataset,
    checkpoint,
    methods=METHODS,
    n_seeds=DEFAULT_N_SEEDS,
    budget=DEFAULT_BUDGET,
    threshold=None,
    threshold_pct=95.0,
    seed=0,
    landscape=None,
    hyperparams=None,
    seed_max_fitness=None,
):
    """Run every method from the same low-fitness seeds and tabulate the Phi set

    Phi holds the distinct final sequences whose surrogate-predicted fitness
    is at least ``threshold`` (default: the ``threshold_pct`` percentile of
    the dataset fitness).
    """
    model = ReLSOModel.from_checkpoint(checkpoint) if isinstance(checkpoint, Checkpoint) else checkpoint
    hyperparams = hyperparams or {}
    seeds = select_seeds(dataset, n_seeds, seed=seed, max_fitness=seed_max_fitness)
    if threshold is None:
        threshold = percentile_threshold(dataset.fitness, threshold_pct)
    train_sequences = set(dataset.subset("train").sequences)
    oracle = OracleScorer(landscape) if landscape is not None else None

    trajectories, rows, summary = {}, [], []
    for method in methods:
        runs = []
        for seed_id, sequence in enumerate(seeds):
            surrogate = ModelSurrogate(model, length=len(sequence))
            rng = rng_stream(seed, "proposals", method, seed_id)
            trajectory = run_method(
                method, sequence, surrogate, dataset.alphabet, budget, rng, seed_id, hyperparams.get(method)
            )
            if trajectory.evaluations > budget:
                raise BudgetExhausted("{} spent {} of {}".format(method, trajectory.evaluations, budget))
            runs.append(trajectory)
            for index, step in enumerate(trajectory.steps):
                rows.append(
                    {
                        "method": method,
                        "seed_id": seed_id,
                        "step": index,
                        "predicted_fitness": step.predicted,
                        "accepted": step.accepted,
                        "sequence": step.sequence,
                    }
                )
        finals = [t.final.sequence for t in runs]
        scores = ModelSurrogate(model, length=None).score_sequences(finals)
        row, members = summarize(method, runs, scores, threshold, train_sequences, oracle)
        logger.info(
            "%s: |Phi|=%d max=%.3f mean=%.3f novelty=%.2f diversity=%.3f",
            method,
            row["phi_size"],
            row["max_fitness"],
            row["mean_fitness"],
            row["novelty"],
            row["diversity"],
        )
        trajectories[method] = runs
        summary.append(row)
    return BenchmarkReport(threshold=threshold, seeds=seeds, trajectories=trajectories, rows=rows, summary=summary)
