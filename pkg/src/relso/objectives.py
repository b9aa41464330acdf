"""Loss terms of the jointly trained autoencoder and their weighted total"""
import math
from dataclasses import dataclass, field

import numpy as np

from relso import diffcore as dc
from relso.exceptions import ImproperlyConfigured, ShapeError, ValidationError
from relso.models import WEIGHT_FIELDS

COMPONENTS = ("recon", "fitness", "neg_sampling", "interp", "latent_norm", "spectral")


@dataclass
class LossBreakdown:
    recon: float = 0.0
    fitness: float = 0.0
    neg_sampling: float = 0.0
    interp: float = 0.0
    latent_norm: float = 0.0
    spectral: float = 0.0
    total: float = 0.0
    graph: dc.Tensor = field(default=None, repr=False, compare=False)

    def as_row(self):
        return {name: getattr(self, name) for name in COMPONENTS + ("total",)}


@dataclass
class NegativeSampleBatch:
    points: np.ndarray
    y_neg: float
    r_max: float


def recon_loss(logits, targets, mask):
    """Mean token cross entropy over non-PAD positions"""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ShapeError("reconstruction mask is empty")
    return dc.cross_entropy(logits, targets, mask)


def fitness_loss(predicted, target):
    target = target if isinstance(target, dc.Tensor) else dc.Tensor(np.asarray(target, dtype=np.float64))
    return dc.squared_error(predicted, target)


def make_negative_samples(z_batch, count, scale, rng, y_neg):
    """``count`` latent points with norms in [scale*r_max, 2*scale*r_max]

    Directions are uniform on the unit sphere; r_max is the largest norm in
    ``z_batch``.
    """
    if count <= 0:
        raise ShapeError("number of negative samples must be positive")
    if scale <= 1:
        raise ImproperlyConfigured("negative-sample scale must exceed 1")
    z_batch = np.atleast_2d(z_batch.data if isinstance(z_batch, dc.Tensor) else np.asarray(z_batch))
    if z_batch.shape[0] == 0:
        raise ShapeError("negative sampling needs a nonempty latent batch")
    r_max = float(np.linalg.norm(z_batch, axis=1).max())
    if r_max <= 0:
        raise ValidationError("latent batch has zero radius; negative samples are undefined")
    directions = rng.normal(size=(count, z_batch.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rng.uniform(scale * r_max, 2.0 * scale * r_max, size=(count, 1))
    return NegativeSampleBatch(points=directions * radii, y_neg=float(y_neg), r_max=r_max)


def negative_target_loss(predicted_neg, y_neg):
    """Mean squared gap between predictions on negatives and the preset low fitness"""
    return dc.squared_error(predicted_neg, dc.Tensor(np.full(predicted_neg.shape, float(y_neg))))


def neg_sampling_loss(predicted_real, y_real, predicted_neg, y_neg):
    return fitness_loss(predicted_real, y_real) + negative_target_loss(predicted_neg, y_neg)


def latent_norm_penalty(z):
    return (z * z).sum(axis=-1).mean()


def nearest_pairs(points, anchors, k=1):
    """(anchor, neighbour) index pairs: each anchor with its k nearest other points

    Ties in distance go to the lower index.
    """
    diff = points[anchors][:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    dist[np.arange(len(anchors)), anchors] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return [(int(a), int(b)) for a, row in zip(anchors, order) for b in row]


def interp_penalty(z_batch, decoder, fraction, k, rng):
    """Hinge keeping the decoded midpoint of latent neighbours between their decodings

    ``decoder`` maps a latent Tensor (P, d) to logits (P, L, V). Distances are
    L1 between position-wise probability distributions.
    """
    batch = z_batch.shape[0]
    if batch < 2:
        raise ShapeError("interpolation penalty needs a batch of at least 2")
    if not 0 < fraction <= 1:
        raise ImproperlyConfigured("interpolation fraction must lie in (0, 1]")
    size = math.ceil(fraction * batch)
    anchors = np.sort(rng.choice(batch, size=size, replace=False))
    pairs = nearest_pairs(z_batch.data, anchors, k=min(k, batch - 1))
    first = np.array([a for a, _ in pairs])
    second = np.array([b for _, b in pairs])

    z1, z2 = z_batch[first], z_batch[second]
    midpoints = (z1 + z2) * 0.5
    probs = dc.softmax(decoder(dc.concat([z1, z2, midpoints], axis=0)))
    n = len(pairs)
    x1, x2, xi = probs[:n], probs[n : 2 * n], probs[2 * n :]

    def distance(a, b):
        return dc.abs_(a - b).sum(axis=(1, 2))

    hinge = dc.relu((distance(x1, xi) + distance(x2, xi)) * 0.5 - distance(x1, x2))
    return hinge.mean()


def total_loss(components, config):
    """Weighted total of the available components

    ``components`` maps component names to scalar Tensors (or None when the
    term was not computed). Terms whose ablation flag is off contribute 0.
    """
    for name in WEIGHT_FIELDS:
        if getattr(config, name) < 0:
            raise ImproperlyConfigured("loss weight {} must be nonnegative".format(name))
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError("unknown loss component(s): {}".format(", ".join(sorted(unknown))))

    enabled = {
        "recon": True,
        "fitness": config.use_fitness_head,
        "neg_sampling": config.use_fitness_head and config.use_neg_sampling,
        "interp": config.use_interp,
        "latent_norm": True,
        "spectral": config.use_fitness_head,
    }
    weights = {
        "recon": config.gamma,
        "fitness": config.alpha,
        "neg_sampling": config.alpha * config.eta,
        "interp": config.interp_weight,
        "latent_norm": config.latent_norm_weight,
        "spectral": config.spectral_weight,
    }
    breakdown = LossBreakdown()
    graph = None
    for name in COMPONENTS:
        term = components.get(name)
        if term is None or not enabled[name]:
            continue
        setattr(breakdown, name, term.item())
        if weights[name] == 0:
            continue
        weighted = term * weights[name]
        graph = weighted if graph is None else graph + weighted
    breakdown.total = graph.item() if graph is not None else 0.0
    breakdown.graph = graph
    return breakdown
