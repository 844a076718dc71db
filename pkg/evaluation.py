"""
Top-K evaluation: Recall@K and NDCG@K, the recommenders being compared
(POE model, popularity, concatenated-domain VAE), the single-domain and
cross-domain protocols, report files and Pareto fronts over weight sweeps.
"""
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from pydantic import BaseModel, Field, field_validator

from errors import DimensionError, EvaluationError
from ingest import MultiDomainDataset, concat_offsets, merge_parts
from model import PoeModel, decode_domain, infer_latent_batch, rank_items
from numerics import DenseMatrix

logger = logging.getLogger(__name__)

METRICS = ("recall", "ndcg")
EVAL_MODES = ("single", "cross", "baseline-popularity", "baseline-concat")


class EvalConfig(BaseModel):
    ks: List[int] = Field(default_factory=lambda: [10, 50], min_length=1, description="Cutoffs K.")
    target_ground_truth: Literal["held_out", "full"] = Field(
        "held_out", description="Cross-domain ground truth: the target held-out split or the full target history."
    )
    source_fraction: Literal["full", "input"] = Field(
        "full", description="Cross-domain input: the full source history or only its fold-in part."
    )
    include_prior: bool = Field(True, description="Include the prior expert at inference.")
    normalize_input: bool = Field(True, description="L2-normalize inference inputs.")
    batch_size: int = Field(1000, ge=1, description="Users scored per batch.")

    @field_validator("ks")
    @classmethod
    def _check_ks(cls, ks: List[int]) -> List[int]:
        if any(k < 1 for k in ks):
            raise ValueError("every K must be positive")
        return sorted(set(ks))


def _check_metric_args(held_out: Set[int], k: int):
    if k < 1:
        raise ValueError(f"K must be positive, got {k}")
    if not held_out:
        raise ValueError("held-out set is empty")


def recall_at_k(ranked: Sequence[int], held_out, k: int) -> float:
    """|top-K ∩ held_out| / min(K, |held_out|)."""
    held_out = set(held_out)
    _check_metric_args(held_out, k)
    hits = len(set(ranked[:k]) & held_out)
    return hits / min(k, len(held_out))


def ndcg_at_k(ranked: Sequence[int], held_out, k: int) -> float:
    held_out = set(held_out)
    _check_metric_args(held_out, k)
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(ranked[:k]) if item in held_out)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(held_out))))
    return float(dcg / idcg)


def popularity_baseline(train_set: MultiDomainDataset, t: int) -> List[int]:
    """Items of domain t by training interaction count, ties by ascending id."""
    counts = item_popularity(train_set, t)
    return np.argsort(-counts, kind="stable").tolist()


def item_popularity(train_set: MultiDomainDataset, t: int) -> DenseMatrix:
    if not 0 <= t < train_set.n_domains:
        raise DimensionError(f"unknown domain {t} for a {train_set.n_domains}-domain dataset")
    return np.asarray(train_set.domains[t].rows.sum(axis=0), dtype=np.float64).ravel()


class Recommender(ABC):
    name = "recommender"

    @abstractmethod
    def score(self, inputs: Mapping[int, DenseMatrix], target: int) -> DenseMatrix:
        """Scores (users x I_target) for a batch of dense inputs keyed by dataset domain."""
        pass


class PoeRecommender(Recommender):
    name = "poe"

    def __init__(self, model: PoeModel, include_prior: bool = True, normalize: bool = True):
        if model.layout != "per_domain":
            raise EvaluationError(f"PoeRecommender needs a per_domain model, got layout {model.layout}")
        self.model = model
        self.include_prior = include_prior
        self.normalize = normalize
        self.positions = {domain_id: pos for pos, domain_id in enumerate(model.domain_ids)}

    def _position(self, domain: int) -> int:
        if domain not in self.positions:
            raise EvaluationError(
                f"domain {domain} is not covered by the checkpoint (domains {self.model.domain_ids})",
                details={"domain": domain},
            )
        return self.positions[domain]

    def score(self, inputs: Mapping[int, DenseMatrix], target: int) -> DenseMatrix:
        model_inputs = {self._position(d): x for d, x in inputs.items()}
        z = infer_latent_batch(self.model, model_inputs, include_prior=self.include_prior, normalize=self.normalize)
        return decode_domain(self.model, self._position(target), z)


class PopularityRecommender(Recommender):
    name = "popularity"

    def __init__(self, train_set: MultiDomainDataset):
        self.counts = [item_popularity(train_set, t) for t in range(train_set.n_domains)]

    def score(self, inputs: Mapping[int, DenseMatrix], target: int) -> DenseMatrix:
        n_users = next(iter(inputs.values())).shape[0] if inputs else 1
        return np.tile(self.counts[target], (n_users, 1))


class ConcatRecommender(Recommender):
    """Single-domain VAE over the disjoint union of item spaces."""

    name = "concat"

    def __init__(self, model: PoeModel, item_counts: Sequence[int], include_prior: bool = True, normalize: bool = True):
        if model.n_domains != 1:
            raise EvaluationError("the concatenated baseline needs a one-domain model")
        if sum(item_counts) != model.item_counts[0]:
            raise DimensionError(
                f"concat model covers {model.item_counts[0]} items, the dataset domains sum to {sum(item_counts)}"
            )
        self.model = model
        self.offsets = concat_offsets(item_counts)
        self.include_prior = include_prior
        self.normalize = normalize

    def score(self, inputs: Mapping[int, DenseMatrix], target: int) -> DenseMatrix:
        n_users = next(iter(inputs.values())).shape[0]
        x = np.zeros((n_users, self.offsets[-1]))
        for d, rows in inputs.items():
            x[:, self.offsets[d]:self.offsets[d + 1]] = rows
        z = infer_latent_batch(self.model, {0: x}, include_prior=self.include_prior, normalize=self.normalize)
        return decode_domain(self.model, 0, z)[:, self.offsets[target]:self.offsets[target + 1]]


def get_recommender(
    mode: str,
    model: Optional[PoeModel] = None,
    train_set: Optional[MultiDomainDataset] = None,
    item_counts: Optional[Sequence[int]] = None,
    include_prior: bool = True,
    normalize: bool = True,
) -> Recommender:
    if mode in ("single", "cross"):
        if model is None:
            raise EvaluationError(f"mode {mode} needs a model")
        return PoeRecommender(model, include_prior=include_prior, normalize=normalize)
    elif mode == "baseline-popularity":
        if train_set is None:
            raise EvaluationError("the popularity baseline needs the training set")
        return PopularityRecommender(train_set)
    elif mode == "baseline-concat":
        if model is None or item_counts is None:
            raise EvaluationError("the concatenated baseline needs a model and the dataset item counts")
        return ConcatRecommender(model, item_counts, include_prior=include_prior, normalize=normalize)
    else:
        raise ValueError(f"Unsupported evaluation mode: {mode}")


def _as_recommender(model: Union[PoeModel, Recommender]) -> Recommender:
    return PoeRecommender(model) if isinstance(model, PoeModel) else model


@dataclass
class UserMetrics:
    """Per-user metric values of one evaluation run on one target domain."""

    target: int
    ks: List[int]
    users: np.ndarray
    recall: Dict[int, np.ndarray] = field(default_factory=dict)
    ndcg: Dict[int, np.ndarray] = field(default_factory=dict)
    n_skipped: int = 0

    @property
    def n_users(self) -> int:
        return int(self.users.size)

    def values(self, metric: str, k: int) -> np.ndarray:
        if metric not in METRICS:
            raise ValueError(f"Unsupported metric: {metric}")
        return getattr(self, metric)[k]

    def mean(self, metric: str, k: int) -> float:
        values = self.values(metric, k)
        return float(values.mean()) if values.size else 0.0


def _row_items(matrix: sp.csr_matrix, row: int) -> np.ndarray:
    return matrix.indices[matrix.indptr[row]:matrix.indptr[row + 1]]


def _evaluate(
    recommender: Recommender,
    inputs: Mapping[int, sp.csr_matrix],
    truth: sp.csr_matrix,
    exclude: Optional[sp.csr_matrix],
    rows: np.ndarray,
    target: int,
    ks: Sequence[int],
    n_skipped: int,
    batch_size: int = 1000,
) -> UserMetrics:
    ks = sorted(set(ks))
    metrics = UserMetrics(
        target=target,
        ks=ks,
        users=rows,
        recall={k: np.zeros(rows.size) for k in ks},
        ndcg={k: np.zeros(rows.size) for k in ks},
        n_skipped=n_skipped,
    )
    n_items = truth.shape[1]
    for start in range(0, rows.size, batch_size):
        chunk = rows[start:start + batch_size]
        scores = recommender.score({d: m[chunk].toarray() for d, m in inputs.items()}, target)
        if scores.shape != (chunk.size, n_items):
            raise DimensionError(f"domain {target}: scores of shape {scores.shape}, expected ({chunk.size}, {n_items})",
                                 details={"domain": target})
        for i, row in enumerate(chunk):
            excluded = _row_items(exclude, row) if exclude is not None else np.empty(0, dtype=np.int64)
            held_out = set(_row_items(truth, row).tolist())
            if held_out.intersection(excluded.tolist()):
                raise EvaluationError(f"user row {row}: fold-in and held-out items overlap in domain {target}")
            ranked = rank_items(scores[i], excluded, min(ks[-1], n_items - excluded.size))
            for k in ks:
                metrics.recall[k][start + i] = recall_at_k(ranked, held_out, k)
                metrics.ndcg[k][start + i] = ndcg_at_k(ranked, held_out, k)
    logger.info(
        f"Evaluated domain {target} on {rows.size} users ({n_skipped} skipped): "
        + ", ".join(f"NDCG@{k}={metrics.mean('ndcg', k):.4f}" for k in ks)
    )
    return metrics


def _nonempty(matrix: sp.csr_matrix) -> np.ndarray:
    return np.diff(matrix.indptr) > 0


def _check_parts(test_input: MultiDomainDataset, test_heldout: MultiDomainDataset, *domains: int):
    if test_input.user_keys != test_heldout.user_keys or test_input.item_counts != test_heldout.item_counts:
        raise DimensionError("fold-in and held-out parts must share users and item spaces")
    for d in domains:
        if not 0 <= d < test_input.n_domains:
            raise DimensionError(f"unknown domain {d} for a {test_input.n_domains}-domain dataset",
                                 details={"domain": d})


def eval_single_domain(
    model: Union[PoeModel, Recommender],
    test_input: MultiDomainDataset,
    test_heldout: MultiDomainDataset,
    target: int,
    ks: Sequence[int] = (10, 50),
    batch_size: int = 1000,
) -> UserMetrics:
    """Fold in x_u^t(input), rank domain t without the input items, score against the held-out items."""
    _check_parts(test_input, test_heldout, target)
    x_in = test_input.domains[target].rows
    truth = test_heldout.domains[target].rows
    eligible = _nonempty(x_in) & _nonempty(truth)
    rows = np.flatnonzero(eligible)
    n_skipped = int(np.sum(_nonempty(x_in) | _nonempty(truth)) - rows.size)
    return _evaluate(_as_recommender(model), {target: x_in}, truth, x_in, rows, target, ks, n_skipped, batch_size)


def eval_cross_domain(
    model: Union[PoeModel, Recommender],
    test_input: MultiDomainDataset,
    test_heldout: MultiDomainDataset,
    source: int,
    target: int,
    ks: Sequence[int] = (10, 50),
    target_ground_truth: str = "held_out",
    source_fraction: str = "full",
    batch_size: int = 1000,
) -> UserMetrics:
    """Infer z from the source domain only and rank the target domain.

    Users are the test users present in both domains. With held-out ground
    truth the target fold-in items are excluded from the ranking; with the
    full target history as ground truth nothing is excluded. When source and
    target coincide, the source input is the fold-in part, so the result is
    the single-domain evaluation.
    """
    _check_parts(test_input, test_heldout, source, target)
    if target_ground_truth not in ("held_out", "full"):
        raise ValueError(f"Unsupported target ground truth: {target_ground_truth}")
    if source_fraction not in ("full", "input"):
        raise ValueError(f"Unsupported source fraction: {source_fraction}")
    if source == target:
        return eval_single_domain(model, test_input, test_heldout, target, ks, batch_size)

    full = merge_parts(test_input, test_heldout)
    both = full.present(source) & full.present(target)
    x_source = full.domains[source].rows if source_fraction == "full" else test_input.domains[source].rows
    if target_ground_truth == "held_out":
        truth = test_heldout.domains[target].rows
        exclude = test_input.domains[target].rows
    else:
        truth = full.domains[target].rows
        exclude = None
    rows = np.flatnonzero(both & _nonempty(x_source) & _nonempty(truth))
    n_skipped = int(both.sum() - rows.size)
    return _evaluate(_as_recommender(model), {source: x_source}, truth, exclude, rows, target, ks, n_skipped, batch_size)


def eval_concat_baseline(
    model: Union[PoeModel, Recommender],
    test_input: MultiDomainDataset,
    test_heldout: MultiDomainDataset,
    target: int,
    ks: Sequence[int] = (10, 50),
    batch_size: int = 1000,
) -> UserMetrics:
    """Fully supervised: users present in every domain fold in all their domains' input parts."""
    _check_parts(test_input, test_heldout, target)
    recommender = model if isinstance(model, Recommender) else ConcatRecommender(model, test_input.item_counts)
    full = merge_parts(test_input, test_heldout)
    everywhere = full.presence == (1 << full.n_domains) - 1
    inputs = {d: domain.rows for d, domain in enumerate(test_input.domains)}
    truth = test_heldout.domains[target].rows
    fed = np.all([_nonempty(m) for m in inputs.values()], axis=0)
    rows = np.flatnonzero(everywhere & fed & _nonempty(truth))
    n_skipped = int(everywhere.sum() - rows.size)
    return _evaluate(recommender, inputs, truth, inputs[target], rows, target, ks, n_skipped, batch_size)


class DomainMetrics(BaseModel):
    domain: int
    name: str
    n_users: int
    n_skipped: int = 0
    recall: Dict[int, float] = Field(default_factory=dict)
    ndcg: Dict[int, float] = Field(default_factory=dict)

    @field_validator("recall", "ndcg")
    @classmethod
    def _in_unit_interval(cls, values: Dict[int, float]) -> Dict[int, float]:
        if any(not 0.0 <= v <= 1.0 for v in values.values()):
            raise ValueError("metric values must lie in [0, 1]")
        return values


class EvalReport(BaseModel):
    setting: str = Field(..., description="single, cross, baseline-popularity or baseline-concat.")
    ks: List[int]
    domains: List[DomainMetrics]
    source: Optional[int] = None
    label: Optional[str] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_user_metrics(
        cls,
        setting: str,
        metrics: Sequence[UserMetrics],
        names: Sequence[str],
        source: Optional[int] = None,
        label: Optional[str] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> "EvalReport":
        if not metrics:
            raise EvaluationError("a report needs at least one evaluated domain")
        ks = metrics[0].ks
        domains = [
            DomainMetrics(
                domain=m.target,
                name=names[m.target],
                n_users=m.n_users,
                n_skipped=m.n_skipped,
                recall={k: m.mean("recall", k) for k in ks},
                ndcg={k: m.mean("ndcg", k) for k in ks},
            )
            for m in metrics
        ]
        return cls(setting=setting, ks=ks, domains=domains, source=source, label=label, metadata=metadata or {})

    def value(self, domain: int, metric: str, k: int) -> float:
        for d in self.domains:
            if d.domain == domain:
                return getattr(d, metric)[k]
        raise EvaluationError(f"report has no domain {domain}")


def report_rows(report: EvalReport) -> pd.DataFrame:
    rows = [
        {"setting": report.setting, "domain": d.name, "metric": metric, "K": k,
         "value": getattr(d, metric)[k], "n_users": d.n_users}
        for d in report.domains
        for metric in METRICS
        for k in report.ks
    ]
    return pd.DataFrame(rows, columns=["setting", "domain", "metric", "K", "value", "n_users"])


def write_report_json(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(report.model_dump_json(indent=2))
    return path


def write_report_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    report_rows(report).to_csv(path, index=False)
    return path


def read_report_json(path) -> EvalReport:
    try:
        return EvalReport.model_validate_json(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise EvaluationError(f"cannot read evaluation report {path}: {e}") from e


class ParetoPoint(BaseModel):
    label: str
    w: List[float] = Field(..., min_length=1)

    @field_validator("w")
    @classmethod
    def _finite(cls, w: List[float]) -> List[float]:
        if not all(np.isfinite(w)):
            raise ValueError("Pareto coordinates must be finite")
        return w


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    wa, wb = np.asarray(a.w), np.asarray(b.w)
    return bool(np.all(wa >= wb) and np.any(wa > wb))


def pareto_front(points: Sequence[ParetoPoint]) -> List[ParetoPoint]:
    """Points not dominated by any other; equal points are all kept."""
    if not points:
        return []
    if len({len(p.w) for p in points}) != 1:
        raise ValueError("all Pareto points need the same dimension")
    return [p for p in points if not any(dominates(q, p) for q in points if q is not p)]


def pareto_table(points: Sequence[ParetoPoint]) -> pd.DataFrame:
    front = {id(p) for p in pareto_front(points)}
    n = len(points[0].w) if points else 0
    rows = [
        {"label": p.label, **{f"w_{d + 1}": v for d, v in enumerate(p.w)}, "on_front": id(p) in front}
        for p in points
    ]
    return pd.DataFrame(rows, columns=["label", *[f"w_{d + 1}" for d in range(n)], "on_front"])


def write_pareto_csv(points: Sequence[ParetoPoint], path) -> Path:
    path = Path(path)
    pareto_table(points).to_csv(path, index=False)
    return path


def pareto_points(reports: Sequence[EvalReport], metric: str = "ndcg", k: int = 50) -> List[ParetoPoint]:
    """One point per report: its metric@K on every evaluated domain, ordered by domain id."""
    if not reports:
        raise EvaluationError("at least one report is required")
    if metric not in METRICS:
        raise EvaluationError(f"Unsupported metric: {metric}")
    settings = {r.setting for r in reports}
    domain_sets = {tuple(sorted(d.domain for d in r.domains)) for r in reports}
    if len(settings) != 1 or len(domain_sets) != 1:
        raise EvaluationError(
            "reports disagree on setting or evaluated domains",
            details={"settings": sorted(settings), "domains": [list(s) for s in domain_sets]},
        )
    if any(k not in r.ks for r in reports):
        raise EvaluationError(f"not every report carries K={k}", details={"ks": [r.ks for r in reports]})
    domains = domain_sets.pop()
    points = []
    for i, report in enumerate(reports):
        label = report.label
        if label is None:
            weights = report.metadata.get("domain_weights")
            label = json.dumps(weights) if weights is not None else f"run-{i}"
        points.append(ParetoPoint(label=label, w=[report.value(d, metric, k) for d in domains]))
    return points
