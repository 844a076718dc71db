"""
Mini-batch training of the POE model: Adam updates, KL annealing on the
global step counter, per-user keyed randomness, loss traces and checkpoints.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from errors import CheckpointError, ConfigError, DatasetError, DimensionError, TrainingError
from ingest import MultiDomainDataset
from model import FeedbackBatch, LossConfig, ModelConfig, PoeModel, batch_objective, objective_terms
from numerics import DenseMatrix, Mlp, Rng

logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_FORMAT_VERSION = 1
TENSOR_DTYPE = "<f8"


class AnnealSchedule(BaseModel):
    cap: float = Field(0.2, ge=0, le=1, description="Largest KL weight.")
    total_steps: int = Field(200000, ge=1, description="Steps until the cap is reached.")

    def beta(self, step: int) -> float:
        return self.cap * min(1.0, step / self.total_steps)


class TrainConfig(BaseModel):
    batch_size: int = Field(500, ge=1, description="Users per mini-batch.")
    epochs: int = Field(..., ge=1, description="Number of passes over the training users.")
    learning_rate: float = Field(1e-3, gt=0, description="Adam step size.")
    anneal_cap: float = Field(0.2, ge=0, le=1, description="KL annealing cap.")
    anneal_steps: int = Field(200000, ge=1, description="Steps over which beta rises to the cap.")
    seed: int = Field(0, ge=0, description="Seed of shuffling, dropout and latent noise.")
    domain_weights: Optional[List[float]] = Field(None, description="Lambda per domain; all ones when unset.")
    objective: Literal["joint_only", "subsampled"] = Field("subsampled", description="Training objective.")
    input_dropout: float = Field(0.5, ge=0, lt=1, description="Encoder input dropout.")
    include_prior: bool = Field(True, description="Include the prior expert.")
    normalize_input: bool = Field(True, description="L2-normalize encoder inputs.")
    deduplicate_single_domain: bool = Field(False, description="Count a single-domain user's ELBO once.")
    n_samples: int = Field(1, ge=1, description="Latent samples per ELBO term.")
    track_gradient_norms: bool = Field(False, description="Record per-epoch decoder gradient norms.")

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(cap=self.anneal_cap, total_steps=self.anneal_steps)

    def loss_config(self, n_domains: int, beta: float = 0.0) -> LossConfig:
        weights = self.domain_weights if self.domain_weights is not None else [1.0] * n_domains
        if len(weights) != n_domains:
            raise ConfigError(
                f"{len(weights)} domain weights given for {n_domains} domains",
                details={"train.domain_weights": weights},
            )
        return LossConfig(
            beta=beta,
            domain_weights=weights,
            input_dropout=self.input_dropout,
            include_prior=self.include_prior,
            normalize_input=self.normalize_input,
            deduplicate_single_domain=self.deduplicate_single_domain,
            n_samples=self.n_samples,
        )


class AdamOptimizer:
    """Adam over a dict of parameter arrays, updated in place.

    Parameters without an entry in the gradient dict are left untouched,
    moments included.
    """

    def __init__(
        self,
        params: Dict[str, DenseMatrix],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, DenseMatrix]) -> None:
        unknown = set(grads) - set(self.params)
        if unknown:
            raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if name not in grads:
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            p -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class LossTraceRow(BaseModel):
    epoch: int
    step: int
    beta: float
    mean_loss: float


class GradientNormRow(BaseModel):
    epoch: int
    domain: int
    decoder_grad_norm: float


@dataclass
class TrainResult:
    model: PoeModel
    trace: List[LossTraceRow] = field(default_factory=list)
    gradient_norms: List[GradientNormRow] = field(default_factory=list)
    step: int = 0

    @property
    def final_loss(self) -> float:
        return self.trace[-1].mean_loss


def _decoder_norms(grads: Dict[str, DenseMatrix], n_domains: int) -> np.ndarray:
    norms = np.zeros(n_domains)
    for name, g in grads.items():
        part, d = name.split(".")[:2]
        if part == "decoder":
            norms[int(d)] += float(np.sum(g * g))
    return np.sqrt(norms)


def eligible_users(train_set: MultiDomainDataset, objective: str) -> np.ndarray:
    if objective == "joint_only":
        full = (1 << train_set.n_domains) - 1
        rows = np.flatnonzero(train_set.presence == full)
        skipped = train_set.n_users - rows.size
        if skipped:
            logger.warning(f"joint_only objective: skipping {skipped} users not present in every domain")
        return rows
    return np.arange(train_set.n_users)


def train(
    model: PoeModel,
    train_set: MultiDomainDataset,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[LossTraceRow], None]] = None,
) -> TrainResult:
    """Train a copy of `model`; the caller's model is left unchanged."""
    if train_set.n_users == 0:
        raise DatasetError("training set has no users")
    if train_set.n_domains != model.n_domains:
        raise DimensionError(f"model has {model.n_domains} domains, training set has {train_set.n_domains}")
    for d, (expected, actual) in enumerate(zip(model.item_counts, train_set.item_counts)):
        if expected != actual:
            raise DimensionError(f"domain {d}: model expects {expected} items, training set has {actual}",
                                 details={"domain": d})
    if np.any(train_set.presence == 0):
        raise DatasetError("every training user needs at least one present domain")

    rows_all = eligible_users(train_set, cfg.objective)
    if rows_all.size == 0:
        raise DatasetError(f"no users eligible for the {cfg.objective} objective")

    model = model.copy()
    base_loss = cfg.loss_config(model.n_domains)
    schedule = cfg.schedule()
    optimizer = AdamOptimizer(model.parameters(), cfg.learning_rate)
    rng = Rng(cfg.seed)
    result = TrainResult(model=model)
    step = 0
    logger.info(
        f"Training on {rows_all.size} users for {cfg.epochs} epochs "
        f"(objective={cfg.objective}, batch_size={cfg.batch_size}, lambda={base_loss.domain_weights})"
    )

    for epoch in range(1, cfg.epochs + 1):
        order = rows_all[rng.child(0, epoch).generator().permutation(rows_all.size)]
        total_loss = 0.0
        norm_sum = np.zeros(model.n_domains)
        n_batches = 0
        for start in range(0, order.size, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            beta = schedule.beta(step)
            loss_cfg = base_loss.model_copy(update={"beta": beta})
            batch = FeedbackBatch.from_dataset(train_set, rows, [rng.child(1, epoch, r) for r in rows])
            terms = objective_terms(batch.present, cfg.objective, cfg.deduplicate_single_domain)
            losses, grads = batch_objective(model, batch, terms, loss_cfg)

            finite = np.isfinite(losses)
            if not finite.all():
                bad = [train_set.user_keys[r] for r in rows[~finite][:10]]
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    details={"epoch": epoch, "step": step, "beta": beta, "users": bad},
                )
            scale = 1.0 / rows.size
            grads = {name: g * scale for name, g in grads.items()}
            if cfg.track_gradient_norms:
                norm_sum += _decoder_norms(grads, model.n_domains)
            optimizer.step(grads)
            step += 1
            n_batches += 1
            total_loss += float(losses.sum())
            logger.debug(f"epoch {epoch} step {step}: batch loss {losses.mean():.4f}, beta {beta:.4f}")

        row = LossTraceRow(epoch=epoch, step=step, beta=schedule.beta(step), mean_loss=total_loss / order.size)
        result.trace.append(row)
        if cfg.track_gradient_norms:
            result.gradient_norms.extend(
                GradientNormRow(epoch=epoch, domain=d, decoder_grad_norm=float(norm_sum[d] / n_batches))
                for d in range(model.n_domains)
            )
        logger.info(f"Epoch {epoch}/{cfg.epochs}: mean loss {row.mean_loss:.4f}, beta {row.beta:.4f}")
        if on_epoch is not None:
            on_epoch(row)

    result.step = step
    return result


def write_loss_trace(rows: Sequence[LossTraceRow], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=list(LossTraceRow.model_fields))
    frame.to_csv(path, index=False)
    return path


def write_gradient_norms(rows: Sequence[GradientNormRow], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=list(GradientNormRow.model_fields))
    frame.to_csv(path, index=False)
    return path


def save_checkpoint(
    model: PoeModel,
    path,
    step: int = 0,
    domain_weights: Optional[Sequence[float]] = None,
) -> Path:
    """JSON manifest plus one little-endian float64 file per tensor, row-major."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, p in model.parameters().items():
        filename = f"{name}.f64"
        np.ascontiguousarray(p, dtype=TENSOR_DTYPE).tofile(path / filename)
        tensors.append({"name": name, "file": filename, "shape": list(p.shape)})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "latent_dim": model.latent_dim,
        "n_domains": model.n_domains,
        "item_counts": model.item_counts,
        "hidden_dims": model.hidden_dims,
        "seed": model.config.seed,
        "step": step,
        "domain_ids": model.domain_ids,
        "layout": model.layout,
        "domain_weights": list(domain_weights) if domain_weights is not None else None,
        "tensors": tensors,
    }
    with open(path / CHECKPOINT_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def read_checkpoint_manifest(path) -> dict:
    manifest_path = Path(path) / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {e}") from e
    required = ("latent_dim", "n_domains", "item_counts", "hidden_dims", "tensors")
    missing = [key for key in required if key not in manifest]
    if missing:
        raise CheckpointError(f"checkpoint manifest lacks {missing}", details={"missing": missing})
    return manifest


def _empty_mlp(dims: Sequence[int]) -> Mlp:
    return Mlp(
        [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)],
        [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)],
    )


def load_checkpoint(path) -> PoeModel:
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    try:
        k = int(manifest["latent_dim"])
        n_domains = int(manifest["n_domains"])
        item_counts = [int(n) for n in manifest["item_counts"]]
        hidden = [int(h) for h in manifest["hidden_dims"]]
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint manifest has malformed sizes: {e}") from e
    if len(item_counts) != n_domains:
        raise CheckpointError(f"manifest declares {n_domains} domains but lists {len(item_counts)} item counts")

    try:
        model = PoeModel(
            k,
            [_empty_mlp([n, *hidden, 2 * k]) for n in item_counts],
            [_empty_mlp([k, *hidden, n]) for n in item_counts],
            domain_ids=manifest.get("domain_ids"),
            layout=manifest.get("layout", "per_domain"),
            config=ModelConfig(latent_dim=k, hidden_dims=hidden, seed=manifest.get("seed", 0)),
        )
    except (DimensionError, ValueError) as e:
        raise CheckpointError(f"checkpoint manifest describes an invalid model: {e}") from e

    params = model.parameters()
    entries = manifest["tensors"]
    if len(entries) != len(params):
        raise CheckpointError(
            f"manifest lists {len(entries)} tensors, a {n_domains}-domain model has {len(params)}",
            details={"tensors": len(entries), "expected": len(params)},
        )
    for entry in entries:
        name = entry.get("name")
        if name not in params:
            raise CheckpointError(f"unexpected tensor {name} in checkpoint", details={"tensor": name})
        target = params[name]
        if list(entry.get("shape", [])) != list(target.shape):
            raise CheckpointError(
                f"tensor {name}: manifest shape {entry.get('shape')} does not match {list(target.shape)}",
                details={"tensor": name},
            )
        tensor_path = path / entry.get("file", f"{name}.f64")
        if not tensor_path.exists():
            raise CheckpointError(f"missing tensor file for {name}: {tensor_path}", details={"tensor": name})
        data = np.fromfile(tensor_path, dtype=TENSOR_DTYPE)
        if data.size != target.size:
            raise CheckpointError(
                f"tensor {name}: expected {target.size} values, file holds {data.size}",
                details={"tensor": name, "file": str(tensor_path)},
            )
        target[...] = data.reshape(target.shape)
    logger.info(f"Loaded checkpoint from {path}: k={k}, items={item_counts}")
    return model
