"""
Synthetic multi-domain implicit feedback with a known latent structure.

Every user has a shared latent vector; domain d > 0 sees a copy correlated by
rho with it. Items are sampled without replacement from a softmax over
latent-embedding affinities, the same multinomial family the model assumes.
"""
import logging
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.special import softmax

from errors import ConfigError
from ingest import DomainDataset, MultiDomainDataset, binary_csr
from numerics import DenseMatrix, Rng, standard_normal

logger = logging.getLogger(__name__)


class SynthConfig(BaseModel):
    n_users: int = Field(..., ge=1, description="Number of users.")
    n_items: List[int] = Field(..., min_length=1, description="Items per domain.")
    latent_dim: int = Field(8, ge=1, description="Dimension g of the generating latents.")
    mean_interactions: Union[float, List[float]] = Field(
        10.0, description="Poisson mean of interactions per user and domain, one value or one per domain."
    )
    cross_domain_correlation: float = Field(0.9, ge=0, le=1, description="Correlation rho between domain latents.")
    missing_domain_fraction: float = Field(0.0, ge=0, lt=1, description="Share of users with one domain erased.")
    shared_item_embeddings: bool = Field(False, description="Use the domain-0 item embeddings in every domain.")
    affinity_scale: float = Field(3.0, gt=0, description="Multiplier of the latent-embedding affinities.")
    popularity_exponent: float = Field(0.0, ge=0, description="Power-law item bias; 0 disables it.")
    domain_names: Optional[List[str]] = Field(None, description="Domain names; synth-<d> when unset.")
    seed: int = Field(0, ge=0, description="Seed of every draw.")

    @model_validator(mode="after")
    def _check_shapes(self) -> "SynthConfig":
        if any(n < 1 for n in self.n_items):
            raise ValueError("every domain needs at least one item")
        means = self.means()
        if len(means) != len(self.n_items):
            raise ValueError(f"{len(means)} interaction means for {len(self.n_items)} domains")
        if any(m <= 0 for m in means):
            raise ValueError("interaction means must be positive")
        if self.shared_item_embeddings and len(set(self.n_items)) != 1:
            raise ValueError("shared item embeddings need equal item counts in every domain")
        if self.missing_domain_fraction > 0 and len(self.n_items) < 2:
            raise ValueError("erasing a domain needs at least two domains")
        if self.domain_names is not None and len(self.domain_names) != len(self.n_items):
            raise ValueError("one name per domain is required")
        return self

    @property
    def n_domains(self) -> int:
        return len(self.n_items)

    def means(self) -> List[float]:
        if isinstance(self.mean_interactions, list):
            return [float(m) for m in self.mean_interactions]
        return [float(self.mean_interactions)] * len(self.n_items)

    def names(self) -> List[str]:
        return self.domain_names or [f"synth-{d}" for d in range(len(self.n_items))]


def item_embeddings(cfg: SynthConfig) -> List[DenseMatrix]:
    rng = Rng(cfg.seed)
    return [
        standard_normal(rng.child(0, 0 if cfg.shared_item_embeddings else d), (n, cfg.latent_dim))
        for d, n in enumerate(cfg.n_items)
    ]


def user_latents(cfg: SynthConfig) -> np.ndarray:
    """(users, domains, g) latents; domain d > 0 mixes the shared vector with fresh noise."""
    rho = cfg.cross_domain_correlation
    noise_scale = np.sqrt(1.0 - rho * rho)
    latents = np.empty((cfg.n_users, cfg.n_domains, cfg.latent_dim))
    for u in range(cfg.n_users):
        gen = Rng(cfg.seed).child(1, u, 0).generator()
        shared = gen.standard_normal(cfg.latent_dim)
        latents[u, 0] = shared
        for d in range(1, cfg.n_domains):
            latents[u, d] = rho * shared + noise_scale * gen.standard_normal(cfg.latent_dim)
    return latents


def user_affinities(cfg: SynthConfig, latents: Optional[np.ndarray] = None) -> List[DenseMatrix]:
    """Unnormalized log-probabilities (users x I_d) of every domain."""
    latents = user_latents(cfg) if latents is None else latents
    affinities = []
    for d, embeddings in enumerate(item_embeddings(cfg)):
        bias = -cfg.popularity_exponent * np.log(np.arange(cfg.n_items[d]) + 1.0)
        affinities.append(cfg.affinity_scale * latents[:, d] @ embeddings.T / np.sqrt(cfg.latent_dim) + bias)
    return affinities


def generate(cfg: SynthConfig) -> MultiDomainDataset:
    means = cfg.means()
    for d, (mean, n) in enumerate(zip(means, cfg.n_items)):
        if mean > n:
            raise ConfigError(
                f"domain {d}: mean of {mean} interactions exceeds its {n} items",
                details={"domain": d, "mean_interactions": mean, "n_items": n},
            )

    affinities = user_affinities(cfg)
    coords = [([], []) for _ in range(cfg.n_domains)]
    n_erased = 0
    for u in range(cfg.n_users):
        gen = Rng(cfg.seed).child(1, u, 1).generator()
        erased = None
        if gen.random() < cfg.missing_domain_fraction:
            erased = 1 + int(gen.integers(cfg.n_domains - 1))
            n_erased += 1
        for d in range(cfg.n_domains):
            count = int(np.clip(gen.poisson(means[d]), 1, cfg.n_items[d]))
            if d == erased:
                continue
            items = gen.choice(cfg.n_items[d], size=count, replace=False, p=softmax(affinities[d][u]))
            coords[d][0].extend([u] * count)
            coords[d][1].extend(items.tolist())

    user_keys = tuple(f"u{u:07d}" for u in range(cfg.n_users))
    domains = [
        DomainDataset(
            domain_id=d,
            name=name,
            item_keys=tuple(f"i{i:05d}" for i in range(cfg.n_items[d])),
            user_keys=user_keys,
            rows=binary_csr(rows, cols, (cfg.n_users, cfg.n_items[d])),
        )
        for d, (name, (rows, cols)) in enumerate(zip(cfg.names(), coords))
    ]
    ds = MultiDomainDataset.from_domains(user_keys, domains)
    ds.validate()
    logger.info(
        f"Generated {cfg.n_users} users over {cfg.n_domains} domains "
        f"(rho={cfg.cross_domain_correlation}, {n_erased} users with an erased domain, "
        f"interactions {[d.rows.nnz for d in domains]})"
    )
    return ds
