import math

import numpy as np

import pytest

from relso import diffcore as dc
from relso.exceptions import ImproperlyConfigured, ShapeError, ValidationError
from relso.models import ReLSOModel, make_config
from relso.objectives import (
    fitness_loss,
    interp_penalty,
    latent_norm_penalty,
    make_negative_samples,
    nearest_pairs,
    neg_sampling_loss,
    recon_loss,
    total_loss,
)
from relso.trainer import compute_loss, make_streams
from tests import factories


def test_recon_loss_uniform_logits():
    logits = dc.Tensor(np.zeros((1, 3, 22)))
    loss = recon_loss(logits, np.array([[2, 5, 9]]), np.ones((1, 3), dtype=bool))
    assert loss.item() == pytest.approx(math.log(22))


def test_recon_loss_confident_logits():
    targets = np.array([[2, 5, 0]])
    logits = np.full((1, 3, 22), -50.0)
    logits[0, np.arange(3), targets[0]] = 50.0
    loss = recon_loss(dc.Tensor(logits), targets, targets != 0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_recon_loss_empty_mask():
    with pytest.raises(ShapeError):
        recon_loss(dc.Tensor(np.zeros((1, 2, 4))), np.zeros((1, 2), dtype=int), np.zeros((1, 2), dtype=bool))


def test_fitness_loss():
    assert fitness_loss(dc.Tensor([0.0, 0.0]), [1.0, 3.0]).item() == pytest.approx(5.0)


def test_neg_sampling_loss():
    loss = neg_sampling_loss(dc.Tensor([1.0]), [1.0], dc.Tensor([0.0, 4.0]), 2.0)
    assert loss.item() == pytest.approx(4.0)


def test_latent_norm_penalty():
    assert latent_norm_penalty(dc.Tensor([[3.0, 4.0], [0.0, 1.0]])).item() == pytest.approx(13.0)


def test_negative_sample_radii(rng):
    z = np.array([[2.0, 0.0], [1.0, 0.0]])
    batch = make_negative_samples(z, 10_000, 1.2, rng, y_neg=-1.0)
    norms = np.linalg.norm(batch.points, axis=1)
    assert batch.r_max == pytest.approx(2.0)
    assert batch.y_neg == -1.0
    assert norms.min() >= 2.4 - 1e-12
    assert norms.max() <= 4.8 + 1e-12


def test_negative_samples_errors(rng):
    with pytest.raises(ValidationError):
        make_negative_samples(np.zeros((3, 2)), 4, 1.2, rng, 0.0)
    with pytest.raises(ShapeError):
        make_negative_samples(np.ones((3, 2)), 0, 1.2, rng, 0.0)
    with pytest.raises(ImproperlyConfigured):
        make_negative_samples(np.ones((3, 2)), 4, 1.0, rng, 0.0)


def test_nearest_pairs_breaks_ties_low():
    points = np.array([[0.0], [1.0], [-1.0], [5.0]])
    assert nearest_pairs(points, np.array([0, 3]), k=1) == [(0, 1), (3, 1)]
    assert nearest_pairs(points, np.array([0]), k=2) == [(0, 1), (0, 2)]


def test_interp_penalty_hinge():
    def decoder(z):
        return dc.concat([(z * z) * 50.0, z * 0.0], axis=1).reshape(z.shape[0], 1, 2)

    z = dc.Tensor([[-1.0], [1.0]])
    penalty = interp_penalty(z, decoder, fraction=1.0, k=1, rng=np.random.default_rng(0))
    assert penalty.item() == pytest.approx(1.0, rel=1e-9)


def test_interp_penalty_zero_for_constant_decoder(rng):
    def decoder(z):
        return (z[:, :1] * 0.0 + 1.0).reshape(z.shape[0], 1, 1) * dc.Tensor(np.ones((1, 3, 4)))

    z = dc.Tensor(rng.normal(size=(6, 3)))
    assert interp_penalty(z, decoder, fraction=0.5, k=2, rng=rng).item() == pytest.approx(0.0)


def test_interp_penalty_needs_pairs(rng):
    with pytest.raises(ShapeError):
        interp_penalty(dc.Tensor(np.ones((1, 2))), lambda z: z, 1.0, 1, rng)


def test_total_loss_weights():
    config = make_config("jtae")
    breakdown = total_loss({"recon": dc.Tensor(2.0), "fitness": dc.Tensor(3.0)}, config)
    assert breakdown.total == pytest.approx(5.0)
    assert breakdown.recon == 2.0
    assert breakdown.fitness == 3.0


def test_total_loss_ignores_disabled_terms():
    config = make_config("ae")
    breakdown = total_loss({"recon": dc.Tensor(2.0), "fitness": dc.Tensor(3.0), "interp": dc.Tensor(7.0)}, config)
    assert breakdown.total == pytest.approx(2.0)
    assert breakdown.fitness == 0.0


def test_total_loss_negative_sampling_weight():
    config = make_config("relso-neg", alpha=2.0, eta=0.5)
    breakdown = total_loss({"recon": dc.Tensor(1.0), "neg_sampling": dc.Tensor(4.0)}, config)
    assert breakdown.total == pytest.approx(5.0)


def test_total_loss_rejects_bad_input():
    config = make_config("jtae")
    with pytest.raises(ValueError):
        total_loss({"recon": dc.Tensor(1.0), "kl": dc.Tensor(1.0)}, config)
    config.alpha = -1.0
    with pytest.raises(ImproperlyConfigured):
        total_loss({"recon": dc.Tensor(1.0)}, config)


def test_joint_loss_gradient(alphabet, dataset):
    config = factories.ModelConfigFactory(
        preset="relso-interp", use_neg_sampling=False, spectral_weight=0.0, latent_norm_weight=0.1
    )
    model = ReLSOModel(config, alphabet=alphabet, seed=1)
    names = [
        "embed.weight",
        "encoder.0.attn.q.weight",
        "pool.proj.out.weight",
        "decoder.conv1.weight",
        "fitness.in.weight",
    ]
    batch = slice(0, 4)

    def fn(*tensors):
        for name, tensor in zip(names, tensors):
            model.params.params[name] = tensor
        breakdown = compute_loss(
            model, dataset.tokens[batch], dataset.lengths[batch], dataset.fitness[batch], make_streams(0), 0.0
        )
        return breakdown.graph

    arrays = [model.params[name].data.copy() for name in names]
    assert dc.gradcheck(fn, arrays) < 1e-4


def test_full_loss_gradient(alphabet, dataset):
    config = factories.ModelConfigFactory(preset="relso", spectral_weight=0.1, latent_norm_weight=0.1)
    model = ReLSOModel(config, alphabet=alphabet, seed=2)
    for _ in range(100):
        model.spectral_penalty()
    converged = {name: value.copy() for name, value in model.buffers.items()}
    # negatives scale with the batch radius, so only parameters downstream of z are perturbed
    names = ["decoder.conv1.weight", "fitness.in.weight", "fitness.out.weight"]
    batch = slice(0, 4)

    def fn(*tensors):
        model.buffers.update({name: value.copy() for name, value in converged.items()})
        for name, tensor in zip(names, tensors):
            model.params.params[name] = tensor
        breakdown = compute_loss(
            model, dataset.tokens[batch], dataset.lengths[batch], dataset.fitness[batch], make_streams(0), 0.0
        )
        assert breakdown.neg_sampling > 0 and breakdown.spectral > 0
        return breakdown.graph

    arrays = [model.params[name].data.copy() for name in names]
    assert dc.gradcheck(fn, arrays) < 1e-4
