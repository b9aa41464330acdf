"""Joint training loop, validation metrics and rank correlation"""
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.stats import rankdata
from tqdm import tqdm

from relso import diffcore as dc
from relso.exceptions import ImproperlyConfigured, NumericalError, ValidationError
from relso.models import Checkpoint, ReLSOModel, save_checkpoint
from relso.objectives import (
    fitness_loss,
    interp_penalty,
    latent_norm_penalty,
    make_negative_samples,
    negative_target_loss,
    recon_loss,
    total_loss,
)
from relso.seqdata import PAD_INDEX
from relso.utils import rng_state, rng_stream

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 64
TRAIN_STREAMS = ("batching", "negatives", "interp")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = dc.DEFAULT_LR
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0
    preset: str = None
    clip_norm: float = 1.0
    optimizer: str = "adam"
    progress: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ImproperlyConfigured("steps must be at least 1")
        if self.batch_size < 1:
            raise ImproperlyConfigured("batch_size must be at least 1")
        if self.lr <= 0:
            raise ImproperlyConfigured("lr must be positive")
        if self.eval_every < 1:
            raise ImproperlyConfigured("eval_every must be at least 1")
        if self.checkpoint_every < 0:
            raise ImproperlyConfigured("checkpoint_every must be nonnegative")
        if self.optimizer not in dc.OPTIMIZERS:
            raise ImproperlyConfigured(
                "unknown optimizer {!r}; choose from {}".format(self.optimizer, ", ".join(dc.OPTIMIZERS))
            )

    def to_dict(self):
        return asdict(self)


@dataclass
class TaskMetrics:
    accuracy: float
    perplexity: float
    mse: float = math.nan
    spearman: float = math.nan

    def as_row(self, prefix="val_"):
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainResult:
    model: ReLSOModel
    log: list
    metrics: TaskMetrics
    checkpoint: Checkpoint


def spearman(a, b):
    """Rank correlation with average ranks for ties; 0 when either side is constant"""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("spearman needs equal lengths, got {} and {}".format(a.size, b.size))
    if a.size < 2:
        raise ValueError("spearman needs at least 2 observations")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = math.sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)


def fit_config_to_dataset(config, dataset):
    """Model config with vocabulary and length taken from the dataset"""
    return replace(config, vocab_size=len(dataset.alphabet), max_len=dataset.max_len)


def pad_tokens(tokens, max_len):
    if tokens.shape[1] > max_len:
        raise ImproperlyConfigured("tokens of length {} exceed max_len {}".format(tokens.shape[1], max_len))
    return np.pad(tokens, ((0, 0), (0, max_len - tokens.shape[1])), constant_values=PAD_INDEX)


def make_streams(seed):
    return {name: rng_stream(seed, name) for name in TRAIN_STREAMS}


def stream_states(streams):
    return {name: rng_state(stream) for name, stream in streams.items()}


def compute_loss(model, tokens, lengths, fitness, streams, y_neg):
    """Forward pass over one batch; returns a LossBreakdown whose ``graph`` is differentiable"""
    c = model.config
    tokens = pad_tokens(np.asarray(tokens), c.max_len)
    encoded = model.encode(tokens, lengths)
    z = encoded.z
    logits = model.decode(z)
    components = {"recon": recon_loss(logits, tokens, tokens != PAD_INDEX)}
    if c.use_fitness_head:
        components["fitness"] = fitness_loss(model.predict_fitness(z), fitness)
        if c.use_neg_sampling:
            negatives = make_negative_samples(z, c.neg_samples, c.neg_scale, streams["negatives"], y_neg)
            components["neg_sampling"] = negative_target_loss(model.predict_fitness(negatives.points), negatives.y_neg)
        if c.spectral_weight > 0:
            components["spectral"] = model.spectral_penalty()
    if c.use_interp:
        components["interp"] = interp_penalty(
            z,
            lambda points: model.decode(points, update_stats=False),
            c.interp_fraction,
            c.interp_k,
            streams["interp"],
        )
    if c.latent_norm_weight > 0:
        components["latent_norm"] = latent_norm_penalty(z)
    return total_loss(components, c)


def validate(model, dataset, split="val", batch_size=256):
    """Reconstruction and fitness metrics in eval mode; parameters and buffers are left untouched"""
    if isinstance(model, Checkpoint):
        model = ReLSOModel.from_checkpoint(model)
    part = dataset.subset(split) if split else dataset
    if len(part) == 0:
        raise ValidationError("split {} is empty".format(split))
    was_training = model.training
    model.eval()
    nll, correct, count = 0.0, 0, 0
    predictions = []
    try:
        with dc.no_grad():
            for start in range(0, len(part), batch_size):
                tokens = pad_tokens(part.tokens[start : start + batch_size], model.config.max_len)
                lengths = part.lengths[start : start + batch_size]
                encoded = model.encode(tokens, lengths)
                logits = model.decode(encoded.z, update_stats=False).data
                mask = tokens != PAD_INDEX
                shifted = logits - logits.max(axis=-1, keepdims=True)
                log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
                picked = np.take_along_axis(log_probs, tokens[..., None], axis=-1)[..., 0]
                nll -= float(picked[mask].sum())
                correct += int((logits.argmax(axis=-1) == tokens)[mask].sum())
                count += int(mask.sum())
                if model.config.use_fitness_head:
                    predictions.append(model.predict_fitness(encoded.z).data)
    finally:
        model.training = was_training

    metrics = TaskMetrics(accuracy=correct / count, perplexity=math.exp(nll / count))
    if predictions:
        predicted = np.concatenate(predictions)
        metrics.mse = float(((predicted - part.fitness) ** 2).mean())
        metrics.spearman = spearman(predicted, part.fitness) if len(part) >= 2 else math.nan
    return metrics


def train(dataset, model_config, train_config, out_dir=None):
    if train_config.preset and train_config.preset != model_config.preset:
        raise ImproperlyConfigured(
            "train preset {!r} does not match model preset {!r}".format(train_config.preset, model_config.preset)
        )
    if model_config.use_interp and train_config.batch_size < 2:
        raise ImproperlyConfigured("interpolation penalty needs batch_size >= 2")
    train_part = dataset.subset("train")
    val_part = dataset.subset("val")
    for name, part in (("train", train_part), ("val", val_part)):
        if len(part) == 0:
            raise ValidationError("split {} is empty".format(name))

    config = fit_config_to_dataset(model_config, dataset)
    seed = train_config.seed
    init = rng_stream(seed, "init")
    init_seed = int(init.integers(2**32))
    model = ReLSOModel(config, alphabet=dataset.alphabet, seed=init_seed).train()
    streams = make_streams(seed)
    streams_with_init = dict(streams, init=init)
    y_neg = train_part.min_fitness()
    update = dc.OPTIMIZERS[train_config.optimizer]
    logger.info(
        "training %s on %s: %d steps, batch %d, lr %g",
        config.preset,
        dataset.name,
        train_config.steps,
        train_config.batch_size,
        train_config.lr,
    )

    log = []
    metrics = None
    for step in tqdm(range(1, train_config.steps + 1), desc="train", disable=not train_config.progress):
        batch = streams["batching"].integers(0, len(train_part), size=train_config.batch_size)
        try:
            with dc.Tape() as tape:
                breakdown = compute_loss(
                    model,
                    train_part.tokens[batch],
                    train_part.lengths[batch],
                    train_part.fitness[batch],
                    streams,
                    y_neg,
                )
                if not math.isfinite(breakdown.total):
                    raise NumericalError("non-finite training loss {}".format(breakdown.total))
                grads = model.params.named_grads(tape.backward(breakdown.graph))
            grads, _ = dc.clip_grad_norm(grads, train_config.clip_norm)
        except NumericalError as e:
            if e.step is not None:
                raise
            raise NumericalError(str(e), step=step)
        model.params.zero_grad()
        update(model.params, grads, lr=train_config.lr)

        row = {"step": step}
        row.update(breakdown.as_row())
        row.update(TaskMetrics(math.nan, math.nan).as_row())
        if step % train_config.eval_every == 0 or step == train_config.steps:
            metrics = validate(model, dataset, "val")
            row.update(metrics.as_row())
            logger.info(
                "step %d: loss %.4f, val accuracy %.3f, perplexity %.3f, mse %.4f, spearman %.3f",
                step,
                breakdown.total,
                metrics.accuracy,
                metrics.perplexity,
                metrics.mse,
                metrics.spearman,
            )
        log.append(row)

        if out_dir and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
            path = os.path.join(out_dir, "checkpoint-{}.rlso".format(step))
            save_checkpoint(model.to_checkpoint(stream_states(streams_with_init), step), path)

    checkpoint = model.to_checkpoint(stream_states(streams_with_init), train_config.steps)
    model.eval()
    return TrainResult(model=model, log=log, metrics=metrics, checkpoint=checkpoint)
