import math

import numpy as np
import pandas as pd

import pytest

from relso.exceptions import BudgetExhausted, ImproperlyConfigured, ValidationError
from relso.models import ReLSOModel
from relso.optimizers import (
    METHODS,
    Budget,
    ModelSurrogate,
    OracleScorer,
    acceptance_probability,
    directed_evolution,
    diversity,
    gradient_ascent,
    hill_climb,
    mcmc_latent,
    mcmc_sequence,
    metropolis_accept,
    run_benchmark,
    run_method,
    select_seeds,
)
from relso.seqdata import Alphabet, gen_toy_landscape, hamming
from tests import factories


class QuadraticSurrogate:
    """h(z) = -|z - centre|^2"""

    def __init__(self, centre):
        self.centre = np.asarray(centre, dtype=np.float64)

    def predict(self, z):
        z = np.atleast_2d(z)
        return -((z - self.centre) ** 2).sum(axis=1)

    def value_and_grad(self, z):
        return float(self.predict(z)[0]), -2.0 * (np.asarray(z) - self.centre)

    def decode(self, z):
        return "A" * len(self.centre)

    def encode(self, sequences):
        return np.zeros((len(sequences), len(self.centre)))


class TableScorer:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def score_sequences(self, sequences):
        self.calls += len(sequences)
        return np.array([self.fn(s) for s in sequences], dtype=np.float64)


def test_budget():
    budget = Budget(3)
    budget.charge(2)
    assert budget.remaining == 1
    assert not budget.can_afford(2)
    with pytest.raises(BudgetExhausted):
        budget.charge(2)
    with pytest.raises(ImproperlyConfigured):
        Budget(-1)


def test_gradient_ascent_first_update():
    trajectory = gradient_ascent(np.zeros(2), QuadraticSurrogate([0.5, 0.0]), eps=0.1, K=5)
    np.testing.assert_allclose(trajectory.steps[1].z, [0.1, 0.0])


def test_gradient_ascent_converges():
    surrogate = QuadraticSurrogate([0.5, -0.25])
    trajectory = gradient_ascent(np.zeros(2), surrogate, eps=0.1, K=100, budget=Budget(101))
    np.testing.assert_allclose(trajectory.final.z, surrogate.centre, atol=1e-4)
    values = [step.predicted for step in trajectory.steps]
    assert values == sorted(values)


def test_gradient_ascent_respects_budget():
    trajectory = gradient_ascent(np.zeros(2), QuadraticSurrogate([5.0, 0.0]), eps=0.01, K=60, budget=Budget(10))
    assert trajectory.evaluations == 10
    assert len(trajectory.steps) == 10


def test_gradient_ascent_stops_at_flat_point():
    trajectory = gradient_ascent(np.zeros(2), QuadraticSurrogate([0.0, 0.0]), K=10)
    assert len(trajectory.steps) == 1


def test_hill_climb_stops_at_optimum():
    budget = Budget(60)
    trajectory = hill_climb(np.zeros(2), QuadraticSurrogate([0.0, 0.0]), n_candidates=5, budget=budget)
    assert len(trajectory.steps) == 1
    assert budget.spent == 6


def test_hill_climb_improves():
    trajectory = hill_climb(
        np.zeros(2), QuadraticSurrogate([1.0, 1.0]), budget=Budget(61), rng=np.random.default_rng(3)
    )
    values = [step.predicted for step in trajectory.steps]
    assert values == sorted(values)
    assert len(set(values)) == len(values)
    assert trajectory.evaluations <= 61


def test_stochastic_hill_climb_accepts_improvers_only():
    trajectory = hill_climb(
        np.zeros(2), QuadraticSurrogate([1.0, 1.0]), budget=Budget(61), stochastic=True, rng=np.random.default_rng(3)
    )
    values = [step.predicted for step in trajectory.steps]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert trajectory.method == "shc"


def test_acceptance_probability():
    assert acceptance_probability(0.3, 0.1) == 1.0
    assert acceptance_probability(0.0, 0.1) == 1.0
    assert acceptance_probability(-0.1 * math.log(2), 0.1) == pytest.approx(0.5)
    with pytest.raises(ImproperlyConfigured):
        acceptance_probability(-1.0, 0.0)


def test_metropolis_frequency(rng):
    dy, kT = -0.05, 0.05
    accepted = sum(metropolis_accept(dy, kT, rng) for _ in range(100_000))
    assert accepted / 100_000 == pytest.approx(math.exp(-1), abs=0.02)


def test_mcmc_latent_records_every_proposal():
    trajectory = mcmc_latent(np.zeros(2), QuadraticSurrogate([1.0, 0.0]), budget=Budget(20))
    assert len(trajectory.steps) == 20
    assert trajectory.evaluations == 20
    assert trajectory.steps[0].accepted


def test_mcmc_sequence_proposals_are_single_substitutions(alphabet):
    scorer = TableScorer(lambda s: s.count("E") / len(s))
    trajectory = mcmc_sequence("AAAA", scorer, alphabet, kT=0.1, budget=Budget(40), rng=np.random.default_rng(1))
    current = trajectory.steps[0].sequence
    for step in trajectory.steps[1:]:
        assert hamming(step.sequence, current) == 1
        if step.accepted:
            current = step.sequence
    assert trajectory.final.sequence == current
    assert scorer.calls == 40


def test_mcmc_sequence_accepts_equal_fitness(alphabet):
    trajectory = mcmc_sequence("ACDE", TableScorer(lambda s: 1.0), alphabet, budget=Budget(15))
    assert all(step.accepted for step in trajectory.steps)


def test_directed_evolution_finds_separable_optimum():
    _, landscape = gen_toy_landscape(factories.ToyLandscapeSpecFactory(n_epistatic_pairs=0, seed=4))
    trajectory = directed_evolution("AAAA", OracleScorer(landscape), landscape.alphabet, budget=Budget(16))
    sequence, _ = landscape.optimum()
    assert trajectory.final.sequence == sequence
    assert trajectory.evaluations == 16
    assert math.isnan(trajectory.steps[0].predicted)


def test_directed_evolution_skips_unaffordable_positions():
    alphabet = Alphabet()
    scorer = TableScorer(lambda s: s.count("W"))
    trajectory = directed_evolution("A" * 8, scorer, alphabet, budget=Budget(60))
    assert trajectory.final.sequence == "WWWAAAAA"
    assert trajectory.skipped_positions == [3, 4, 5, 6, 7]
    assert trajectory.evaluations == 60


def test_directed_evolution_single_position_is_exhaustive(alphabet):
    scores = {"A": 0.1, "C": 0.9, "D": 0.5, "E": 0.2}
    trajectory = directed_evolution("A", TableScorer(lambda s: scores[s]), alphabet, budget=Budget(4))
    assert trajectory.final.sequence == "C"


def test_directed_evolution_ties_pick_lowest_index(alphabet):
    trajectory = directed_evolution("EE", TableScorer(lambda s: 0.0), alphabet, budget=Budget(8))
    assert trajectory.final.sequence == "AA"


def test_directed_evolution_position_order(alphabet):
    with pytest.raises(ImproperlyConfigured):
        directed_evolution("AC", TableScorer(len), alphabet, position_order=[0, 0])


def test_run_method_unknown(alphabet):
    with pytest.raises(ImproperlyConfigured):
        run_method("annealing", "ACDE", QuadraticSurrogate([0.0]), alphabet, 10, np.random.default_rng(0))


def test_model_surrogate_gradient(trained):
    surrogate = ModelSurrogate(trained.checkpoint, length=4)
    z = np.random.default_rng(2).normal(size=4)
    value, grad = surrogate.value_and_grad(z)
    assert value == pytest.approx(surrogate.predict(z)[0])
    numeric = np.zeros(4)
    for i in range(4):
        step = np.zeros(4)
        step[i] = 1e-6
        numeric[i] = (surrogate.predict(z + step)[0] - surrogate.predict(z - step)[0]) / 2e-6
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)
    assert all(p.grad is None for _, p in surrogate.model.params.items())


def test_model_surrogate_needs_fitness_head(alphabet):
    model = ReLSOModel(factories.ModelConfigFactory(preset="ae", use_fitness_head=False), alphabet=alphabet)
    with pytest.raises(ImproperlyConfigured):
        ModelSurrogate(model, length=4)


def test_model_surrogate_decode_round_trip(trained):
    surrogate = ModelSurrogate(trained.checkpoint, length=4)
    z = surrogate.encode(["ACDE", "EDCA"])
    assert z.shape == (2, 4)
    assert len(surrogate.decode(z[0])) == 4
    np.testing.assert_allclose(surrogate.score_sequences(["ACDE"]), surrogate.predict(z[:1]))


def test_select_seeds(toy):
    dataset, _ = toy
    seeds = select_seeds(dataset, 3, seed=0)
    test = dataset.subset("test")
    cutoff = np.percentile(test.fitness, 25)
    lookup = dict(zip(test.sequences, test.fitness))
    assert len(set(seeds)) == 3
    assert all(lookup[s] <= cutoff for s in seeds)
    assert select_seeds(dataset, 3, seed=0) == seeds


def test_select_seeds_insufficient(toy):
    dataset, _ = toy
    with pytest.raises(ValidationError, match="insufficient held-out sequences"):
        select_seeds(dataset, 30, seed=0)


def test_diversity():
    assert diversity(["AAAA"]) == 0.0
    assert diversity(["AAAA", "AACC"]) == pytest.approx(0.5)


def test_run_benchmark(toy, trained):
    dataset, landscape = toy
    kwargs = dict(methods=METHODS, n_seeds=3, budget=20, seed=0, landscape=landscape)
    report = run_benchmark(dataset, trained.checkpoint, **kwargs)
    assert [row["method"] for row in report.summary] == list(METHODS)
    assert len(report.seeds) == 3
    for method, runs in report.trajectories.items():
        assert len(runs) == 3
        for trajectory in runs:
            assert trajectory.evaluations <= 20
            assert all(len(step.sequence) == 4 for step in trajectory.steps)
            assert set("".join(step.sequence for step in trajectory.steps)) <= set("ACDE")
    for row in report.summary:
        assert row["evaluations"] <= 60
        assert row["phi_size"] <= 3
        if row["phi_size"]:
            assert row["max_fitness"] >= report.threshold
            assert math.isfinite(row["true_max_fitness"])

    again = run_benchmark(dataset, trained.checkpoint, **kwargs)
    assert pd.DataFrame(again.rows).equals(pd.DataFrame(report.rows))
    assert pd.DataFrame(again.summary).equals(pd.DataFrame(report.summary))


def test_run_benchmark_fixed_threshold(toy, trained):
    dataset, _ = toy
    report = run_benchmark(dataset, trained.checkpoint, methods=["de"], n_seeds=2, budget=8, threshold=-1e9)
    assert report.threshold == -1e9
    assert report.summary[0]["phi_size"] >= 1
    assert math.isnan(report.summary[0]["true_max_fitness"])


def ascent_finals(result, seeds, eps, steps, tol):
    surrogate = ModelSurrogate(result.model, length=len(seeds[0]))
    starts = surrogate.encode(seeds)
    finals = []
    for seed_id, z0 in enumerate(starts):
        trajectory = gradient_ascent(z0, surrogate, eps=eps, K=steps, tol=tol, seed_id=seed_id)
        finals.append(trajectory.steps[-1].z)
    return surrogate, np.array(finals)


def latent_bound(result, dataset):
    surrogate = ModelSurrogate(result.model, length=dataset.max_len)
    r_max = np.linalg.norm(surrogate.encode(list(dataset.subset("train").sequences)), axis=1).max()
    return 2.0 * result.model.config.neg_scale * r_max


@pytest.mark.slow
def test_negative_sampling_bounds_gradient_ascent(desk_toy, desk_models):
    dataset, _ = desk_toy
    seeds = select_seeds(dataset, 30, split="train")

    relso = desk_models("relso")
    surrogate, finals = ascent_finals(relso, seeds, eps=0.1, steps=5000, tol=1e-3)
    for z in finals:
        _, grad = surrogate.value_and_grad(z)
        assert np.linalg.norm(grad) < 1e-3
    assert (np.linalg.norm(finals, axis=1) <= latent_bound(relso, dataset)).all()

    jtae = desk_models("jtae")
    _, finals = ascent_finals(jtae, seeds, eps=2.0, steps=100, tol=0.0)
    assert (np.linalg.norm(finals, axis=1) > latent_bound(jtae, dataset)).any()


def landscape_percentile(landscape, pct, n=100_000, seed=0):
    residues = np.array(landscape.alphabet.residues)
    draws = residues[np.random.default_rng(seed).integers(0, len(residues), size=(n, landscape.length))]
    return float(np.percentile(landscape.evaluate(["".join(row) for row in draws]), pct))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_ascent_leads_phi_size(desk_toy, desk_models, seed):
    dataset, landscape = desk_toy
    methods = ["ga", "hc", "shc", "mcmc-latent", "mcmc-seq", "de"]
    threshold = landscape_percentile(landscape, 95.0)
    report = run_benchmark(
        dataset,
        desk_models("relso").model,
        methods=methods,
        n_seeds=30,
        budget=60,
        threshold=threshold,
        seed=seed,
        landscape=landscape,
    )
    phi = {row["method"]: row["phi_size"] for row in report.summary}
    assert all(phi["ga"] >= phi[method] for method in methods[1:]), phi
    if phi["ga"]:
        assert math.isfinite(report.summary[0]["true_mean_fitness"])
