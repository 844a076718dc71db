"""
Product-of-experts VAE over D item domains.

Each domain d has an encoder g_phi_d: x -> [mu, log sigma] (I_d -> hidden -> 2k)
and a decoder f_theta_d: z -> logits (k -> hidden -> I_d). Posteriors of the
observed domains are fused with a standard normal prior expert by precision
addition; the objective is the domain-weighted multinomial ELBO, optionally
sub-sampled over single-domain inputs.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from errors import DimensionError
from ingest import MultiDomainDataset
from numerics import DenseMatrix, Mlp, Rng, log_softmax, standard_normal

logger = logging.getLogger(__name__)

LAYOUTS = ("per_domain", "concat")
OBJECTIVES = ("subsampled", "joint_only")


class ModelConfig(BaseModel):
    latent_dim: int = Field(200, ge=1, description="Latent dimension k.")
    hidden_dims: List[int] = Field(default_factory=lambda: [600], description="Hidden tanh layer widths of every encoder and decoder.")
    seed: int = Field(0, ge=0, description="Seed for weight initialization.")


class LossConfig(BaseModel):
    beta: float = Field(0.0, ge=0, description="Weight of the KL term.")
    domain_weights: List[float] = Field(..., min_length=1, description="Reconstruction weight lambda_d per domain.")
    input_dropout: float = Field(0.5, ge=0, lt=1, description="Element dropout on the encoder input during training.")
    include_prior: bool = Field(True, description="Include the N(0, I) prior expert in the product.")
    normalize_input: bool = Field(True, description="L2-normalize encoder inputs.")
    deduplicate_single_domain: bool = Field(False, description="Count a single-domain user's ELBO once in the sub-sampled objective.")
    n_samples: int = Field(1, ge=1, description="Monte-Carlo samples of z per ELBO term.")

    @field_validator("domain_weights")
    @classmethod
    def _check_weights(cls, weights: List[float]) -> List[float]:
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValueError("domain weights must be finite and non-negative")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one domain weight must be positive")
        return weights


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    mean: DenseMatrix
    variance: DenseMatrix

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != variance.shape:
            raise DimensionError(f"mean {mean.shape} and variance {variance.shape} differ in shape")
        if not np.all(variance > 0):
            raise ValueError("posterior variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def precision(self) -> DenseMatrix:
        return 1.0 / self.variance

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, latent_dim: int) -> "GaussianPosterior":
        return cls(np.zeros(latent_dim), np.ones(latent_dim))


class PoeModel:
    def __init__(
        self,
        latent_dim: int,
        encoders: List[Mlp],
        decoders: List[Mlp],
        domain_ids: Optional[Sequence[int]] = None,
        layout: str = "per_domain",
        config: Optional[ModelConfig] = None,
    ):
        if not encoders or len(encoders) != len(decoders):
            raise DimensionError("a model needs one encoder and one decoder per domain")
        for d, (encoder, decoder) in enumerate(zip(encoders, decoders)):
            if encoder.dims[-1] != 2 * latent_dim:
                raise DimensionError(f"domain {d}: encoder output {encoder.dims[-1]} != 2k = {2 * latent_dim}")
            if decoder.dims[0] != latent_dim:
                raise DimensionError(f"domain {d}: decoder input {decoder.dims[0]} != k = {latent_dim}")
            if encoder.dims[0] != decoder.dims[-1]:
                raise DimensionError(f"domain {d}: encoder reads {encoder.dims[0]} items, decoder emits {decoder.dims[-1]}")
        if layout not in LAYOUTS:
            raise ValueError(f"Unsupported model layout: {layout}")
        self.latent_dim = latent_dim
        self.encoders = encoders
        self.decoders = decoders
        self.domain_ids = list(range(len(encoders))) if domain_ids is None else [int(d) for d in domain_ids]
        # a concat model has one encoder spanning every listed dataset domain
        if layout == "per_domain" and len(self.domain_ids) != len(encoders):
            raise DimensionError(f"{len(self.domain_ids)} domain ids for {len(encoders)} domains")
        if layout == "concat" and len(encoders) != 1:
            raise DimensionError("a concat model has exactly one encoder")
        self.layout = layout
        self.config = config or ModelConfig(
            latent_dim=latent_dim, hidden_dims=encoders[0].dims[1:-1]
        )

    @classmethod
    def initialize(
        cls,
        item_counts: Sequence[int],
        config: ModelConfig,
        domain_ids: Optional[Sequence[int]] = None,
        layout: str = "per_domain",
    ) -> "PoeModel":
        if not item_counts:
            raise DimensionError("a model needs at least one domain")
        k = config.latent_dim
        rng = Rng(config.seed)
        encoders = [Mlp.initialize([n, *config.hidden_dims, 2 * k], rng.child(0, d)) for d, n in enumerate(item_counts)]
        decoders = [Mlp.initialize([k, *config.hidden_dims, n], rng.child(1, d)) for d, n in enumerate(item_counts)]
        logger.info(f"Initialized POE model: k={k}, hidden={config.hidden_dims}, items={list(item_counts)}")
        return cls(k, encoders, decoders, domain_ids=domain_ids, layout=layout, config=config)

    @property
    def n_domains(self) -> int:
        return len(self.encoders)

    @property
    def item_counts(self) -> List[int]:
        return [encoder.dims[0] for encoder in self.encoders]

    @property
    def hidden_dims(self) -> List[int]:
        return self.encoders[0].dims[1:-1]

    def parameters(self) -> Dict[str, DenseMatrix]:
        """Ordered name -> array views of every trainable tensor."""
        params: Dict[str, DenseMatrix] = {}
        for d, encoder in enumerate(self.encoders):
            params.update(encoder.parameters(f"encoder.{d}"))
        for d, decoder in enumerate(self.decoders):
            params.update(decoder.parameters(f"decoder.{d}"))
        return params

    def flat_parameters(self) -> DenseMatrix:
        return np.concatenate([p.ravel() for p in self.parameters().values()])

    def set_flat_parameters(self, vector) -> None:
        vector = np.asarray(vector, dtype=np.float64).ravel()
        params = self.parameters()
        expected = sum(p.size for p in params.values())
        if vector.size != expected:
            raise DimensionError(f"expected {expected} parameters, got {vector.size}")
        offset = 0
        for p in params.values():
            p[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def flatten_gradients(self, grads: Mapping[str, DenseMatrix]) -> DenseMatrix:
        return np.concatenate([
            np.asarray(grads[name]).ravel() if name in grads else np.zeros(p.size)
            for name, p in self.parameters().items()
        ])

    def copy(self) -> "PoeModel":
        return PoeModel(
            self.latent_dim,
            [e.copy() for e in self.encoders],
            [d.copy() for d in self.decoders],
            domain_ids=self.domain_ids,
            layout=self.layout,
            config=self.config,
        )


@dataclass(eq=False)
class FeedbackBatch:
    """Dense feedback of a batch of users with one keyed random stream per user."""

    x: List[DenseMatrix]
    present: np.ndarray
    rngs: List[Rng]

    @property
    def size(self) -> int:
        return self.present.shape[0]

    @classmethod
    def from_dataset(cls, ds: MultiDomainDataset, rows, rngs: Sequence[Rng]) -> "FeedbackBatch":
        rows = np.asarray(rows, dtype=np.int64)
        x = [domain.dense_rows(rows) for domain in ds.domains]
        present = np.stack([ds.present(d)[rows] for d in range(ds.n_domains)], axis=1)
        return cls(x, present, list(rngs))

    @classmethod
    def from_feedback(cls, feedback: Mapping[int, DenseMatrix], item_counts: Sequence[int], rng: Rng) -> "FeedbackBatch":
        x = []
        for d, n in enumerate(item_counts):
            if d in feedback:
                row = np.asarray(feedback[d], dtype=np.float64)
                if row.shape != (n,):
                    raise DimensionError(f"domain {d}: feedback of shape {row.shape}, expected ({n},)")
                x.append(row[None, :])
            else:
                x.append(np.zeros((1, n)))
        unknown = set(feedback) - set(range(len(item_counts)))
        if unknown:
            raise DimensionError(f"feedback for unknown domains {sorted(unknown)}")
        present = np.array([[x[d].sum() > 0 for d in range(len(item_counts))]])
        return cls(x, present, [rng])


@dataclass(eq=False)
class ObjectiveTerm:
    """One ELBO term: which domains each user feeds in and which it reconstructs."""

    inputs: np.ndarray
    targets: np.ndarray

    def keys(self) -> np.ndarray:
        weights = np.left_shift(1, np.arange(self.inputs.shape[1], dtype=np.int64))
        return (self.inputs.astype(np.int64) * weights).sum(axis=1)


def objective_terms(present: np.ndarray, objective: str = "subsampled", deduplicate: bool = False) -> List[ObjectiveTerm]:
    """Terms of the joint objective or of the sub-sampled one (joint + each single domain)."""
    if objective not in OBJECTIVES:
        raise ValueError(f"Unsupported objective: {objective}")
    present = present.astype(bool)
    terms = [ObjectiveTerm(present.copy(), present)]
    if objective == "joint_only":
        return terms
    multi = present.sum(axis=1) > 1
    for d in range(present.shape[1]):
        inputs = np.zeros_like(present)
        inputs[:, d] = present[:, d] & multi if deduplicate else present[:, d]
        terms.append(ObjectiveTerm(inputs, present))
    return terms


def _prepare_input(x: DenseMatrix, d: int, normalize: bool, dropout: float, rngs: Sequence[Rng]) -> DenseMatrix:
    x = np.asarray(x, dtype=np.float64)
    if normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    if dropout > 0:
        keep = 1.0 - dropout
        masks = np.stack([rng.child(0, d).generator().random(x.shape[1]) < keep for rng in rngs])
        x = x * masks / keep
    return x


def encode_domain(
    model: PoeModel,
    d: int,
    x,
    normalize: bool = True,
    dropout: float = 0.0,
    rng: Optional[Union[Rng, Sequence[Rng]]] = None,
) -> GaussianPosterior:
    """Posterior of one domain's encoder for a feedback vector (or a row batch)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.item_counts[d]:
        raise DimensionError(f"domain {d} expects {model.item_counts[d]} items, got {x2.shape[1]}")
    if np.any(x2.sum(axis=1) == 0):
        raise ValueError(f"cannot encode a user without interactions in domain {d}")
    rngs: List[Rng] = []
    if dropout > 0:
        if rng is None:
            raise ValueError("input dropout needs a random stream")
        rngs = [rng] * len(x2) if isinstance(rng, Rng) else list(rng)
    out, _ = model.encoders[d].forward(_prepare_input(x2, d, normalize, dropout, rngs))
    k = model.latent_dim
    mean, variance = out[:, :k], np.exp(2.0 * out[:, k:])
    if single:
        mean, variance = mean[0], variance[0]
    return GaussianPosterior(mean, variance)


def product_of_experts(
    posteriors: Sequence[GaussianPosterior],
    include_prior: bool = True,
    latent_dim: Optional[int] = None,
) -> GaussianPosterior:
    """Gaussian product: precisions add, the mean is precision-weighted."""
    if not posteriors:
        if not include_prior:
            raise ValueError("product of experts over an empty list needs the prior expert")
        if latent_dim is None:
            raise ValueError("latent_dim is required to return the bare prior")
        return GaussianPosterior.standard(latent_dim)
    shape = posteriors[0].mean.shape
    if any(q.mean.shape != shape for q in posteriors):
        raise DimensionError("experts must share one latent shape")
    precision = np.ones(shape) if include_prior else np.zeros(shape)
    weighted_mean = np.zeros(shape)
    for q in posteriors:
        precision = precision + q.precision
        weighted_mean = weighted_mean + q.mean * q.precision
    variance = 1.0 / precision
    return GaussianPosterior(weighted_mean * variance, variance)


def decode_domain(model: PoeModel, t: int, z) -> DenseMatrix:
    """Raw logits f_theta_t(z); ranking uses them directly."""
    logits, _ = model.decoders[t].forward(np.asarray(z, dtype=np.float64))
    return logits


def multinomial_log_likelihood(x, logits):
    x = np.asarray(x, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if x.shape != logits.shape:
        raise DimensionError(f"feedback {x.shape} and logits {logits.shape} differ in shape")
    ll = np.sum(x * log_softmax(logits, axis=-1), axis=-1)
    return float(ll) if ll.ndim == 0 else ll


def kl_to_standard_normal(q: GaussianPosterior):
    if not np.all(q.variance > 0):
        raise ValueError("KL needs a strictly positive variance")
    kl = 0.5 * np.sum(q.variance + q.mean ** 2 - 1.0 - np.log(q.variance), axis=-1)
    return float(kl) if kl.ndim == 0 else kl


@dataclass(eq=False)
class _Encoding:
    rows: np.ndarray
    mean: DenseMatrix
    log_sigma: DenseMatrix
    activations: List[DenseMatrix]
    grad: DenseMatrix


def _add_grads(total: Dict[str, DenseMatrix], grads: Mapping[str, DenseMatrix]):
    for name, g in grads.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g.copy()


def batch_objective(
    model: PoeModel,
    batch: FeedbackBatch,
    terms: Sequence[ObjectiveTerm],
    cfg: LossConfig,
) -> Tuple[np.ndarray, Dict[str, DenseMatrix]]:
    """Per-user negative ELBO summed over terms, and gradients of the batch sum.

    Every present domain is encoded once per call (one dropout mask per user
    and domain, drawn from rng.child(0, d)) and the encodings are shared by all
    terms. The noise of a term comes from rng.child(1, input bitmask, sample).
    """
    D, k = model.n_domains, model.latent_dim
    if len(cfg.domain_weights) != D:
        raise DimensionError(f"{len(cfg.domain_weights)} domain weights for a {D}-domain model")
    if len(batch.x) != D or batch.present.shape != (batch.size, D):
        raise DimensionError(f"batch has {len(batch.x)} domains, model has {D}")
    weights = np.asarray(cfg.domain_weights, dtype=np.float64)

    encodings: Dict[int, _Encoding] = {}
    for d in range(D):
        rows = np.flatnonzero(np.any([term.inputs[:, d] for term in terms], axis=0))
        if rows.size == 0:
            continue
        x_in = _prepare_input(batch.x[d][rows], d, cfg.normalize_input, cfg.input_dropout,
                              [batch.rngs[r] for r in rows])
        out, activations = model.encoders[d].forward(x_in)
        encodings[d] = _Encoding(rows, out[:, :k], out[:, k:], activations, np.zeros_like(out))

    losses = np.zeros(batch.size)
    grads: Dict[str, DenseMatrix] = {}
    for term in terms:
        rows = np.flatnonzero(term.inputs.any(axis=1))
        if rows.size == 0:
            continue
        n = rows.size
        precision = np.ones((n, k)) if cfg.include_prior else np.zeros((n, k))
        weighted_mean = np.zeros((n, k))
        experts = []
        for d, enc in encodings.items():
            selected = term.inputs[rows, d]
            if not selected.any():
                continue
            positions = np.searchsorted(enc.rows, rows[selected])
            expert_precision = np.exp(-2.0 * enc.log_sigma[positions])
            precision[selected] += expert_precision
            weighted_mean[selected] += expert_precision * enc.mean[positions]
            experts.append((d, selected, positions, expert_precision))
        variance = 1.0 / precision
        mean = weighted_mean * variance
        std = np.sqrt(variance)

        grad_mean = np.zeros((n, k))
        grad_variance = np.zeros((n, k))
        keys = term.keys()[rows]
        for s in range(cfg.n_samples):
            eps = np.stack([standard_normal(batch.rngs[r].child(1, key, s), k) for r, key in zip(rows, keys)])
            z = mean + std * eps
            grad_z = np.zeros((n, k))
            for t in range(D):
                targeted = term.targets[rows, t]
                if weights[t] == 0 or not targeted.any():
                    continue
                x_t = batch.x[t][rows[targeted]]
                logits, activations = model.decoders[t].forward(z[targeted])
                log_pi = log_softmax(logits, axis=1)
                losses[rows[targeted]] -= weights[t] * np.sum(x_t * log_pi, axis=1) / cfg.n_samples
                grad_logits = -weights[t] * (x_t - x_t.sum(axis=1, keepdims=True) * np.exp(log_pi)) / cfg.n_samples
                decoder_grads, grad_in = model.decoders[t].backward(activations, grad_logits, f"decoder.{t}")
                _add_grads(grads, decoder_grads)
                grad_z[targeted] += grad_in
            grad_mean += grad_z
            grad_variance += grad_z * eps / (2.0 * std)

        kl = 0.5 * np.sum(variance + mean ** 2 - 1.0 - np.log(variance), axis=1)
        losses[rows] += cfg.beta * kl
        grad_mean += cfg.beta * mean
        grad_variance += cfg.beta * 0.5 * (1.0 - precision)

        # mean = W / P, variance = 1 / P with P = sum of precisions, W = sum of precision * mu
        grad_precision = -variance * (grad_mean * mean + grad_variance * variance)
        grad_weighted = grad_mean * variance
        for d, selected, positions, expert_precision in experts:
            enc = encodings[d]
            grad_expert_precision = grad_precision[selected] + grad_weighted[selected] * enc.mean[positions]
            enc.grad[positions, :k] += grad_weighted[selected] * expert_precision
            enc.grad[positions, k:] += -2.0 * expert_precision * grad_expert_precision

    for d, enc in encodings.items():
        encoder_grads, _ = model.encoders[d].backward(enc.activations, enc.grad, f"encoder.{d}")
        _add_grads(grads, encoder_grads)
    return losses, grads


def _check_feedback(feedback: Mapping[int, DenseMatrix], domains: Sequence[int], what: str):
    for d in domains:
        if d not in feedback or not np.any(np.asarray(feedback[d])):
            raise ValueError(f"{what} domain {d} has no feedback for this user")


def elbo(
    model: PoeModel,
    feedback: Mapping[int, DenseMatrix],
    input_domains: Sequence[int],
    target_domains: Optional[Sequence[int]],
    cfg: LossConfig,
    rng: Rng,
) -> Tuple[float, Dict[str, DenseMatrix]]:
    """Negative domain-weighted ELBO of one user for input set X_u, reconstructing X~_u.

    `target_domains=None` reconstructs every domain present in `feedback`.
    """
    if not input_domains:
        raise ValueError("the ELBO needs at least one input domain")
    if target_domains is None:
        target_domains = [d for d in sorted(feedback) if np.any(np.asarray(feedback[d]))]
    missing = set(input_domains) - set(target_domains)
    if missing:
        raise ValueError(f"input domains {sorted(missing)} are not among the reconstructed domains")
    _check_feedback(feedback, target_domains, "target")

    batch = FeedbackBatch.from_feedback(feedback, model.item_counts, rng)
    inputs = np.zeros((1, model.n_domains), dtype=bool)
    targets = np.zeros((1, model.n_domains), dtype=bool)
    inputs[0, list(input_domains)] = True
    targets[0, list(target_domains)] = True
    losses, grads = batch_objective(model, batch, [ObjectiveTerm(inputs, targets)], cfg)
    return float(losses[0]), grads


def subsampled_objective(
    model: PoeModel,
    feedback: Mapping[int, DenseMatrix],
    cfg: LossConfig,
    rng: Rng,
) -> Tuple[float, Dict[str, DenseMatrix]]:
    """elbo(X~_u) plus elbo({x_u^d}) for every present d, all reconstructing X~_u."""
    batch = FeedbackBatch.from_feedback(feedback, model.item_counts, rng)
    if not batch.present.any():
        raise ValueError("the user has no feedback in any domain")
    terms = objective_terms(batch.present, "subsampled", cfg.deduplicate_single_domain)
    losses, grads = batch_objective(model, batch, terms, cfg)
    return float(losses[0]), grads


def infer_latent_batch(
    model: PoeModel,
    inputs: Mapping[int, DenseMatrix],
    include_prior: bool = True,
    normalize: bool = True,
) -> DenseMatrix:
    """Posterior means for a batch; all-zero rows of a domain are left out of that row's product."""
    if not inputs:
        raise ValueError("inference needs at least one input domain")
    n_rows = {np.atleast_2d(x).shape[0] for x in inputs.values()}
    if len(n_rows) != 1:
        raise DimensionError("input domains disagree on the number of users")
    B, k = n_rows.pop(), model.latent_dim
    precision = np.ones((B, k)) if include_prior else np.zeros((B, k))
    weighted_mean = np.zeros((B, k))
    covered = np.zeros(B, dtype=bool)
    for d in sorted(inputs):
        x = np.atleast_2d(np.asarray(inputs[d], dtype=np.float64))
        if x.shape[1] != model.item_counts[d]:
            raise DimensionError(f"domain {d} expects {model.item_counts[d]} items, got {x.shape[1]}")
        nonzero = x.sum(axis=1) > 0
        if not nonzero.any():
            continue
        out, _ = model.encoders[d].forward(_prepare_input(x[nonzero], d, normalize, 0.0, []))
        expert_precision = np.exp(-2.0 * out[:, k:])
        precision[nonzero] += expert_precision
        weighted_mean[nonzero] += expert_precision * out[:, :k]
        covered |= nonzero
    if not covered.all():
        raise ValueError(f"{int((~covered).sum())} user(s) have no input in any domain")
    return weighted_mean / precision


def infer_latent(
    model: PoeModel,
    feedback: Mapping[int, DenseMatrix],
    input_domains: Optional[Sequence[int]] = None,
    include_prior: bool = True,
    normalize: bool = True,
) -> DenseMatrix:
    """Mean of the product-of-experts posterior; no sampling, no dropout."""
    if input_domains is None:
        input_domains = [d for d in sorted(feedback) if np.any(np.asarray(feedback[d]))]
    if not input_domains:
        raise ValueError("inference needs at least one input domain")
    _check_feedback(feedback, input_domains, "input")
    inputs = {d: np.asarray(feedback[d], dtype=np.float64)[None, :] for d in input_domains}
    return infer_latent_batch(model, inputs, include_prior=include_prior, normalize=normalize)[0]


def rank_items(scores, exclude: Sequence[int] = (), k: Optional[int] = None) -> List[int]:
    """Items by descending score, excluded items removed, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    excluded = np.zeros(scores.size, dtype=bool)
    exclude = np.fromiter((int(i) for i in set(exclude)), dtype=np.int64)
    if exclude.size and (exclude.min() < 0 or exclude.max() >= scores.size):
        raise DimensionError(f"excluded item ids fall outside [0, {scores.size})")
    excluded[exclude] = True
    available = int(scores.size - excluded.sum())
    k = available if k is None else k
    if k < 0 or k > available:
        raise ValueError(f"K={k} exceeds the {available} rankable items")
    order = np.argsort(-scores, kind="stable")
    return order[~excluded[order]][:k].tolist()


def recommend(model: PoeModel, z, t: int, exclude: Sequence[int], k: int) -> List[int]:
    return rank_items(decode_domain(model, t, z), exclude, k)
