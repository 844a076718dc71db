"""
End-to-end properties checked against independent oracles: grid-integrated
Gaussian products, finite differences, a hand-coded single-domain VAE,
brute-force metrics and pairwise Pareto dominance. The transfer checks train
real models on synthetic data and are marked slow.
"""
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from cli import RunConfig, cmd_eval, cmd_synth, cmd_train
from evaluation import (
    ParetoPoint,
    PopularityRecommender,
    eval_cross_domain,
    ndcg_at_k,
    pareto_front,
    recall_at_k,
)
from ingest import SplitSpec, make_bundle
from model import GaussianPosterior, LossConfig, ModelConfig, PoeModel, elbo, product_of_experts, subsampled_objective
from numerics import Rng, grad_check
from synthgen import SynthConfig, generate
from training import TrainConfig, train

GRID = np.linspace(-10.0, 10.0, 20001)


def grid_product_moments(means, variances):
    log_density = np.zeros_like(GRID)
    for m, v in zip(means, variances):
        log_density -= 0.5 * (GRID - m) ** 2 / v
    density = np.exp(log_density - log_density.max())
    density /= density.sum()
    mean = float(np.sum(GRID * density))
    return mean, float(np.sum((GRID - mean) ** 2 * density))


def test_gaussian_product_matches_grid_integration():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        size = int(rng.integers(1, 5))
        means = rng.uniform(-3.0, 3.0, size)
        variances = rng.uniform(0.1, 5.0, size)
        experts = [GaussianPosterior(np.array([m]), np.array([v])) for m, v in zip(means, variances)]
        fused = product_of_experts(experts, include_prior=True)
        grid_mean, grid_variance = grid_product_moments([0.0, *means], [1.0, *variances])
        assert abs(fused.mean[0] - grid_mean) < 1e-5
        assert abs(fused.variance[0] - grid_variance) / grid_variance < 1e-5


@pytest.fixture
def toy_users():
    rng = np.random.default_rng(4)
    users = []
    for _ in range(4):
        x0 = (rng.random(6) < 0.5).astype(float)
        x1 = (rng.random(5) < 0.5).astype(float)
        x0[0] = x1[-1] = 1.0
        users.append({0: x0, 1: x1})
    return users


@pytest.mark.parametrize("objective", ["joint", "subsampled"])
def test_gradients_of_both_objectives(toy_users, objective):
    model = PoeModel.initialize([6, 5], ModelConfig(latent_dim=3, hidden_dims=[8], seed=6))
    cfg = LossConfig(beta=0.2, domain_weights=[1.0, 0.6], input_dropout=0.5)

    def func(flat):
        model.set_flat_parameters(flat)
        total, grad = 0.0, np.zeros_like(flat)
        for u, feedback in enumerate(toy_users):
            if objective == "joint":
                loss, grads = elbo(model, feedback, [0, 1], [0, 1], cfg, Rng(3).child(u))
            else:
                loss, grads = subsampled_objective(model, feedback, cfg, Rng(3).child(u))
            total += loss
            grad += model.flatten_gradients(grads)
        return total, grad

    assert grad_check(func, model.flat_parameters()) < 1e-4


def reference_vae_loss(model, x, beta, eps):
    """Single-domain VAE negative ELBO coded straight from the layer weights."""
    encoder, decoder = model.encoders[0], model.decoders[0]
    k = model.latent_dim
    h = x / np.sqrt(np.sum(x * x))
    for i, (W, b) in enumerate(zip(encoder.weights, encoder.biases)):
        h = W @ h + b
        if i < len(encoder.weights) - 1:
            h = np.tanh(h)
    mu, sigma = h[:k], np.exp(h[k:])
    z = mu + sigma * eps
    for i, (W, b) in enumerate(zip(decoder.weights, decoder.biases)):
        z = W @ z + b
        if i < len(decoder.weights) - 1:
            z = np.tanh(z)
    log_likelihood = np.sum(x * (z - logsumexp(z)))
    kl = 0.5 * np.sum(sigma ** 2 + mu ** 2 - 1.0 - 2.0 * np.log(sigma))
    return -log_likelihood + beta * kl


def test_one_domain_without_prior_is_a_plain_vae():
    model = PoeModel.initialize([12], ModelConfig(latent_dim=4, hidden_dims=[7], seed=2))
    x = np.zeros(12)
    x[[0, 3, 4, 9]] = 1.0
    cfg = LossConfig(beta=0.3, domain_weights=[1.0], input_dropout=0.0, include_prior=False)
    rng = Rng(17)
    loss, _ = elbo(model, {0: x}, [0], [0], cfg, rng)
    # the single-input term draws its noise from child(1, input bitmask, sample)
    eps = rng.child(1, 1, 0).generator().standard_normal(4)
    assert loss == pytest.approx(reference_vae_loss(model, x, 0.3, eps), abs=1e-6)


def brute_recall(ranked, held, k):
    hits = 0
    for item in ranked[:k]:
        if item in held:
            hits += 1
    return hits / min(k, len(held))


def brute_ndcg(ranked, held, k):
    dcg = 0.0
    for i, item in enumerate(ranked[:k]):
        if item in held:
            dcg += 1.0 / math.log2(i + 2)
    ideal = 0.0
    for i in range(min(k, len(held))):
        ideal += 1.0 / math.log2(i + 2)
    return dcg / ideal


def test_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        ranked = rng.permutation(n).tolist()
        held = set(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 1))
        assert recall_at_k(ranked, held, k) == brute_recall(ranked, held, k)
        assert ndcg_at_k(ranked, held, k) == pytest.approx(brute_ndcg(ranked, held, k), rel=1e-12)


def brute_front(vectors):
    front = []
    for i, a in enumerate(vectors):
        beaten = any(
            all(b_j >= a_j for a_j, b_j in zip(a, b)) and any(b_j > a_j for a_j, b_j in zip(a, b))
            for j, b in enumerate(vectors) if j != i
        )
        if not beaten:
            front.append(i)
    return front


def test_pareto_front_matches_pairwise_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, dims = int(rng.integers(1, 40)), int(rng.integers(2, 5))
        # coarse values so that ties and duplicates occur
        vectors = (rng.integers(0, 6, size=(n, dims)) / 5.0).tolist()
        points = [ParetoPoint(label=str(i), w=v) for i, v in enumerate(vectors)]
        assert [int(p.label) for p in pareto_front(points)] == brute_front(vectors)


def test_pipeline_is_byte_identical_across_runs(tmp_path):
    config = RunConfig(
        model=ModelConfig(latent_dim=4, hidden_dims=[10], seed=1),
        train=TrainConfig(epochs=2, batch_size=40, seed=2),
        split=SplitSpec(train_fraction=0.75, seed=3),
    )
    synth = SynthConfig(n_users=120, n_items=[18, 14], latent_dim=3, mean_interactions=4.0,
                        missing_domain_fraction=0.25, seed=9)
    for name in ("a", "b"):
        root = tmp_path / name
        cmd_synth(synth, config.split, root / "data")
        cmd_train(root / "data", config, root / "run")
        cmd_eval(root / "run" / "checkpoint", root / "data", root / "eval", "cross", source=0, target=1)

    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert any(p.name == "report.json" for p in files)
    assert any(p.suffix == ".f64" for p in files)
    for relative in files:
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes(), relative


def transfer_ratio(rho, missing_fraction=0.0):
    """Cross-domain NDCG@10 of a trained model over the popularity baseline, source 0 to target 1."""
    ds = generate(SynthConfig(
        n_users=5000, n_items=[300, 300], latent_dim=8, mean_interactions=15.0,
        cross_domain_correlation=rho, missing_domain_fraction=missing_fraction,
        popularity_exponent=1.0, seed=11,
    ))
    bundle = make_bundle(ds, SplitSpec(train_fraction=0.8, seed=1))
    model = PoeModel.initialize(bundle.train.item_counts, ModelConfig(latent_dim=32, hidden_dims=[128], seed=1))
    cfg = TrainConfig(epochs=25, batch_size=100, learning_rate=3e-3, anneal_steps=2000, seed=1)
    result = train(model, bundle.train, cfg)
    assert all(np.isfinite(row.mean_loss) for row in result.trace)

    poe = eval_cross_domain(result.model, bundle.test_input, bundle.test_heldout, 0, 1, ks=[10])
    popular = eval_cross_domain(PopularityRecommender(bundle.train), bundle.test_input, bundle.test_heldout,
                                0, 1, ks=[10])
    return poe.mean("ndcg", 10) / popular.mean("ndcg", 10)


@pytest.mark.slow
def test_correlated_domains_transfer():
    assert transfer_ratio(0.9) >= 1.2


@pytest.mark.slow
def test_uncorrelated_domains_do_not_transfer():
    assert transfer_ratio(0.0) < 1.05


@pytest.mark.slow
def test_transfer_survives_missing_domains():
    assert transfer_ratio(0.9, missing_fraction=0.5) >= 1.15
