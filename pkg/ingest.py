"""
Raw rating records to multi-domain implicit-feedback datasets: binarization,
item/user filtering, indexing, user split, fold-in masking and the on-disk
dataset directory format.
"""
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from pydantic import BaseModel, Field

from errors import ConfigError, DatasetError, DimensionError
from numerics import Rng

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["user_key", "item_key", "rating", "domain_id"]
BUNDLE_FORMAT_VERSION = 1
BUNDLE_PARTS = ("train", "test_input", "test_heldout")
# Two fold-in parts share the test user index.
PART_USERS = {"train": "train", "test_input": "test", "test_heldout": "test"}


class RatingRecord(NamedTuple):
    user_key: str
    item_key: str
    rating: float
    domain_id: int


class SplitSpec(BaseModel):
    train_fraction: float = Field(0.95, gt=0, lt=1, description="Share of users in the train set.")
    fold_in_fraction: float = Field(0.80, gt=0, lt=1, description="Share of a test user's interactions fed to the encoder.")
    seed: int = Field(0, ge=0, description="Seed for the user split and the fold-in masking.")


def validate_records(records: pd.DataFrame, n_domains: Optional[int] = None) -> pd.DataFrame:
    missing = [c for c in RECORD_COLUMNS if c not in records.columns]
    if missing:
        raise DatasetError(f"record table is missing columns {missing}")
    records = records[RECORD_COLUMNS].astype(
        {"user_key": str, "item_key": str, "rating": np.float64, "domain_id": np.int64}
    )
    if not np.isfinite(records["rating"].to_numpy()).all():
        raise DatasetError("record table contains non-finite ratings")
    domain_ids = records["domain_id"].to_numpy()
    if (domain_ids < 0).any() or (n_domains is not None and (domain_ids >= n_domains).any()):
        raise DatasetError(f"domain_id outside [0, {n_domains})", details={"n_domains": n_domains})
    return records.reset_index(drop=True)


def records_frame(records: Iterable[RatingRecord], n_domains: Optional[int] = None) -> pd.DataFrame:
    return validate_records(pd.DataFrame(list(records), columns=RECORD_COLUMNS), n_domains)


def read_domain_tsv(path, domain_id: int) -> pd.DataFrame:
    """Reads `user_key<TAB>item_key<TAB>rating` (UTF-8, no header)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"input file not found: {path}", details={"path": str(path)})
    frame = pd.read_csv(
        path,
        sep="\t",
        header=None,
        names=["user_key", "item_key", "rating"],
        dtype={"user_key": str, "item_key": str, "rating": np.float64},
        quoting=csv.QUOTE_NONE,
        keep_default_na=False,
        encoding="utf-8",
    )
    frame["domain_id"] = domain_id
    logger.info(f"Read {len(frame)} records for domain {domain_id} from {path}")
    return validate_records(frame)


def read_amazon_json(path, domain_id: int) -> pd.DataFrame:
    """Adapter for raw review dumps: JSON lines with reviewerID, asin, overall."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"input file not found: {path}", details={"path": str(path)})
    raw = pd.read_json(path, lines=True, dtype={"reviewerID": str, "asin": str})
    frame = pd.DataFrame({
        "user_key": raw["reviewerID"],
        "item_key": raw["asin"],
        "rating": raw["overall"],
        "domain_id": domain_id,
    })
    logger.info(f"Read {len(frame)} reviews for domain {domain_id} from {path}")
    return validate_records(frame)


def binarize(records: pd.DataFrame, threshold: float) -> pd.DataFrame:
    if not math.isfinite(threshold):
        raise ConfigError(f"rating threshold must be finite, got {threshold}")
    kept = records[records["rating"] >= threshold].copy()
    kept["rating"] = 1.0
    logger.info(f"Binarized at {threshold}: kept {len(kept)} of {len(records)} records")
    return kept.reset_index(drop=True)


def filter_items(
    records: pd.DataFrame,
    min_reviews_per_item: Mapping[int, int],
    n_domains: Optional[int] = None,
) -> pd.DataFrame:
    """Drops every record of items reviewed fewer times than their domain's threshold.

    Domains absent from the map keep all items.
    """
    known = set(range(n_domains)) if n_domains is not None else set(records["domain_id"].unique())
    unknown = sorted(set(min_reviews_per_item) - known)
    if unknown:
        raise ConfigError(f"item thresholds given for unknown domains {unknown}")
    bad = {d: t for d, t in min_reviews_per_item.items() if t < 1}
    if bad:
        raise ConfigError(f"item thresholds must be >= 1, got {bad}")

    counts = records.groupby(["domain_id", "item_key"])["item_key"].transform("size")
    thresholds = records["domain_id"].map(dict(min_reviews_per_item)).fillna(1)
    kept = records[counts >= thresholds]
    logger.info(f"Item filter {dict(min_reviews_per_item)}: kept {len(kept)} of {len(records)} records")
    return kept.reset_index(drop=True)


def filter_users(records: pd.DataFrame, min_interactions: int, per_domain: bool = False) -> pd.DataFrame:
    """Keeps users with at least `min_interactions` records.

    Counts are taken across all domains; with `per_domain` a user is kept or
    dropped separately in each domain.
    """
    if min_interactions < 0:
        raise ConfigError(f"min_interactions must be >= 0, got {min_interactions}")
    keys = ["domain_id", "user_key"] if per_domain else ["user_key"]
    counts = records.groupby(keys)["user_key"].transform("size")
    kept = records[counts >= min_interactions]
    logger.info(f"User filter >= {min_interactions}: kept {len(kept)} of {len(records)} records")
    return kept.reset_index(drop=True)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain_id: int
    name: str
    item_keys: Tuple[str, ...]
    user_keys: Tuple[str, ...]
    rows: sp.csr_matrix

    @property
    def item_count(self) -> int:
        return len(self.item_keys)

    @property
    def user_count(self) -> int:
        return len(self.user_keys)

    @property
    def item_index(self) -> Dict[str, int]:
        return {key: i for i, key in enumerate(self.item_keys)}

    @property
    def user_index(self) -> Dict[str, int]:
        return {key: u for u, key in enumerate(self.user_keys)}

    def interaction_counts(self) -> np.ndarray:
        return np.diff(self.rows.indptr)

    def row_items(self, row: int) -> np.ndarray:
        return self.rows.indices[self.rows.indptr[row]:self.rows.indptr[row + 1]]

    def dense_rows(self, rows) -> np.ndarray:
        return self.rows[rows].toarray()

    def with_rows(self, rows: sp.csr_matrix, user_keys: Tuple[str, ...], domain_id: Optional[int] = None):
        return DomainDataset(
            domain_id=self.domain_id if domain_id is None else domain_id,
            name=self.name,
            item_keys=self.item_keys,
            user_keys=user_keys,
            rows=rows,
        )


def binary_csr(rows, cols, shape) -> sp.csr_matrix:
    """Binary CSR matrix; repeated coordinates collapse to a single 1."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    matrix = sp.csr_matrix((np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=shape)
    matrix.sum_duplicates()
    matrix.data = np.ones_like(matrix.data)
    matrix.sort_indices()
    return matrix


def presence_mask(domains: Sequence[DomainDataset], n_users: int) -> np.ndarray:
    presence = np.zeros(n_users, dtype=np.int64)
    for d, domain in enumerate(domains):
        presence |= (domain.interaction_counts() > 0).astype(np.int64) << d
    return presence


@dataclass(eq=False)
class MultiDomainDataset:
    user_keys: Tuple[str, ...]
    domains: List[DomainDataset]
    presence: np.ndarray

    @classmethod
    def from_domains(cls, user_keys: Sequence[str], domains: Sequence[DomainDataset]) -> "MultiDomainDataset":
        user_keys = tuple(user_keys)
        domains = [d.with_rows(d.rows, user_keys, domain_id=i) for i, d in enumerate(domains)]
        return cls(user_keys=user_keys, domains=domains, presence=presence_mask(domains, len(user_keys)))

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def item_counts(self) -> List[int]:
        return [d.item_count for d in self.domains]

    @property
    def domain_names(self) -> List[str]:
        return [d.name for d in self.domains]

    @property
    def user_index(self) -> Dict[str, int]:
        return {key: u for u, key in enumerate(self.user_keys)}

    def present(self, domain: int) -> np.ndarray:
        return (self.presence >> domain) & 1 == 1

    def present_domains(self, row: int) -> List[int]:
        return [d for d in range(self.n_domains) if (self.presence[row] >> d) & 1]

    def feedback(self, row: int) -> Dict[int, np.ndarray]:
        """Dense feedback vectors of one user, keyed by present domain."""
        return {d: self.domains[d].dense_rows([row])[0] for d in self.present_domains(row)}

    def validate(self):
        if not self.domains:
            raise DatasetError("dataset has no domains")
        for d, domain in enumerate(self.domains):
            rows = domain.rows
            if domain.domain_id != d:
                raise DatasetError(f"domain at position {d} carries id {domain.domain_id}")
            if rows.shape != (self.n_users, domain.item_count):
                raise DimensionError(
                    f"domain {domain.name}: matrix {rows.shape} != ({self.n_users}, {domain.item_count})"
                )
            if domain.item_count < 1:
                raise DatasetError(f"domain {domain.name} has no items")
            if rows.nnz and not np.all(rows.data == 1.0):
                raise DatasetError(f"domain {domain.name} stores non-binary entries")
        if not np.array_equal(presence_mask(self.domains, self.n_users), self.presence):
            raise DatasetError("stored presence mask disagrees with the interaction matrices")


def build_multidomain(
    records: pd.DataFrame,
    domain_names: Optional[Sequence[str]] = None,
    n_domains: Optional[int] = None,
) -> MultiDomainDataset:
    """Indexes binarized records into one sparse binary matrix per domain.

    Keys get ids in order of first appearance after a stable sort of the
    input, so any permutation of the same records builds the same dataset.
    """
    if records.empty:
        raise DatasetError("no records left to build a dataset from")
    if n_domains is None:
        n_domains = len(domain_names) if domain_names is not None else int(records["domain_id"].max()) + 1
    names = list(domain_names) if domain_names is not None else [f"domain_{d}" for d in range(n_domains)]
    if len(names) != n_domains:
        raise ConfigError(f"{len(names)} domain names given for {n_domains} domains")
    records = validate_records(records, n_domains)

    ordered = records.sort_values(["user_key", "domain_id", "item_key"], kind="mergesort")
    user_keys = tuple(pd.unique(ordered["user_key"]))
    user_index = {key: u for u, key in enumerate(user_keys)}

    domains = []
    for d in range(n_domains):
        part = ordered[ordered["domain_id"] == d]
        if part.empty:
            raise DatasetError(f"domain {names[d]} has no records", details={"domain": names[d]})
        item_keys = tuple(pd.unique(part.sort_values("item_key", kind="mergesort")["item_key"]))
        item_index = {key: i for i, key in enumerate(item_keys)}
        rows = binary_csr(
            part["user_key"].map(user_index).to_numpy(),
            part["item_key"].map(item_index).to_numpy(),
            (len(user_keys), len(item_keys)),
        )
        domains.append(DomainDataset(d, names[d], item_keys, user_keys, rows))

    dataset = MultiDomainDataset.from_domains(user_keys, domains)
    logger.info(
        f"Built dataset: {dataset.n_users} users, items per domain {dataset.item_counts}, "
        f"interactions per domain {[d.rows.nnz for d in dataset.domains]}"
    )
    return dataset


def subset_users(ds: MultiDomainDataset, rows) -> MultiDomainDataset:
    rows = np.asarray(rows, dtype=np.int64)
    user_keys = tuple(ds.user_keys[r] for r in rows)
    domains = [d.with_rows(d.rows[rows], user_keys) for d in ds.domains]
    return MultiDomainDataset.from_domains(user_keys, domains)


def _user_hash(seed: int, row: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{row}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def split_users(ds: MultiDomainDataset, spec: SplitSpec) -> Tuple[MultiDomainDataset, MultiDomainDataset]:
    """User-disjoint train/test partition ordered by a seeded hash of the row id."""
    if ds.n_users < 2:
        raise DatasetError(f"cannot split {ds.n_users} user(s) into train and test")
    n_train = int(math.floor(ds.n_users * spec.train_fraction + 1e-9))
    n_train = min(max(n_train, 1), ds.n_users - 1)
    order = sorted(range(ds.n_users), key=lambda r: (_user_hash(spec.seed, r), r))
    train_rows = np.sort(order[:n_train])
    test_rows = np.sort(order[n_train:])
    logger.info(f"Split {ds.n_users} users into {len(train_rows)} train / {len(test_rows)} test")
    return subset_users(ds, train_rows), subset_users(ds, test_rows)


def held_out_count(n: int, fold_in_fraction: float) -> int:
    if n < 2:
        return 0
    held = int(math.floor(n * (1.0 - fold_in_fraction) + 1e-9))
    return max(held, 1)


def fold_in_split(test: MultiDomainDataset, spec: SplitSpec) -> Tuple[MultiDomainDataset, MultiDomainDataset]:
    """Masks a seeded random share of each test user's interactions per domain."""
    rng = Rng(spec.seed)
    input_domains, held_domains = [], []
    for d, domain in enumerate(test.domains):
        input_coords: Tuple[List[int], List[int]] = ([], [])
        held_coords: Tuple[List[int], List[int]] = ([], [])
        for row in range(test.n_users):
            items = domain.row_items(row)
            n_held = held_out_count(len(items), spec.fold_in_fraction)
            held = rng.child(d, row).generator().choice(items, size=n_held, replace=False) if n_held else []
            held_set = set(int(i) for i in held)
            for item in items:
                target = held_coords if int(item) in held_set else input_coords
                target[0].append(row)
                target[1].append(int(item))
        shape = domain.rows.shape
        input_domains.append(domain.with_rows(binary_csr(*input_coords, shape), test.user_keys))
        held_domains.append(domain.with_rows(binary_csr(*held_coords, shape), test.user_keys))
    input_part = MultiDomainDataset.from_domains(test.user_keys, input_domains)
    held_part = MultiDomainDataset.from_domains(test.user_keys, held_domains)
    logger.info(
        f"Fold-in split: {[d.rows.nnz for d in input_domains]} input / "
        f"{[d.rows.nnz for d in held_domains]} held-out interactions"
    )
    return input_part, held_part


def merge_parts(a: MultiDomainDataset, b: MultiDomainDataset) -> MultiDomainDataset:
    if a.user_keys != b.user_keys or a.item_counts != b.item_counts:
        raise DimensionError("datasets to merge must share users and item spaces")
    domains = []
    for da, db in zip(a.domains, b.domains):
        merged = (da.rows + db.rows).tocsr()
        merged.data = np.ones_like(merged.data)
        merged.sort_indices()
        domains.append(da.with_rows(merged, a.user_keys))
    return MultiDomainDataset.from_domains(a.user_keys, domains)


def select_domains(ds: MultiDomainDataset, domain_ids: Sequence[int], drop_empty_users: bool = True) -> MultiDomainDataset:
    """Keeps only the listed domains (renumbered in the given order)."""
    if not domain_ids:
        raise ConfigError("select_domains needs at least one domain")
    bad = [d for d in domain_ids if not 0 <= d < ds.n_domains]
    if bad:
        raise ConfigError(f"unknown domains {bad} for a {ds.n_domains}-domain dataset")
    selected = MultiDomainDataset.from_domains(ds.user_keys, [ds.domains[d] for d in domain_ids])
    if drop_empty_users:
        selected = subset_users(selected, np.flatnonzero(selected.presence != 0))
    return selected


def restrict_to_intersection(ds: MultiDomainDataset, domain_ids: Optional[Sequence[int]] = None) -> MultiDomainDataset:
    domain_ids = list(range(ds.n_domains)) if domain_ids is None else list(domain_ids)
    keep = np.ones(ds.n_users, dtype=bool)
    for d in domain_ids:
        keep &= ds.present(d)
    return subset_users(ds, np.flatnonzero(keep))


def concat_offsets(item_counts: Sequence[int]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(item_counts)]).astype(np.int64)


def concat_domains(ds: MultiDomainDataset) -> MultiDomainDataset:
    """One domain whose item space is the disjoint union, over fully present users."""
    full = restrict_to_intersection(ds)
    if full.n_users == 0:
        raise DatasetError("no user is present in every domain")
    rows = sp.hstack([d.rows for d in full.domains], format="csr")
    rows.sort_indices()
    item_keys = tuple(f"{d.name}:{key}" for d in full.domains for key in d.item_keys)
    name = "+".join(full.domain_names)
    domain = DomainDataset(0, name, item_keys, full.user_keys, rows)
    return MultiDomainDataset.from_domains(full.user_keys, [domain])


def dataset_statistics(ds: MultiDomainDataset, item_thresholds: Optional[Mapping[str, int]] = None) -> pd.DataFrame:
    """Per-domain users / items / interactions / density table."""
    rows = []
    for domain in ds.domains:
        interactions = int(domain.rows.nnz)
        rows.append({
            "domain": domain.name,
            "item_threshold": (item_thresholds or {}).get(domain.name),
            "users": ds.n_users,
            "items": domain.item_count,
            "interactions": interactions,
            "density": interactions / float(ds.n_users * domain.item_count) if ds.n_users else 0.0,
        })
    return pd.DataFrame(rows, columns=["domain", "item_threshold", "users", "items", "interactions", "density"])


@dataclass(eq=False)
class DatasetBundle:
    train: MultiDomainDataset
    test_input: MultiDomainDataset
    test_heldout: MultiDomainDataset
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def domain_names(self) -> List[str]:
        return self.train.domain_names

    @property
    def test(self) -> MultiDomainDataset:
        return merge_parts(self.test_input, self.test_heldout)

    def part(self, name: str) -> MultiDomainDataset:
        if name not in BUNDLE_PARTS:
            raise ValueError(f"Unknown dataset part: {name}")
        return getattr(self, name)


def make_bundle(ds: MultiDomainDataset, spec: SplitSpec, metadata: Optional[Dict[str, Any]] = None) -> DatasetBundle:
    ds.validate()
    train, test = split_users(ds, spec)
    test_input, test_heldout = fold_in_split(test, spec)
    meta = {"split": spec.model_dump(), "n_users": ds.n_users}
    meta.update(metadata or {})
    return DatasetBundle(train, test_input, test_heldout, meta)


def _write_index(path: Path, keys: Sequence[str]):
    frame = pd.DataFrame({"key": list(keys), "id": np.arange(len(keys))})
    frame.to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE, lineterminator="\n")


def _read_index(path: Path) -> Tuple[str, ...]:
    if not path.is_file():
        raise DatasetError(f"missing index file {path.name}", details={"path": str(path)})
    frame = pd.read_csv(
        path, sep="\t", header=None, names=["key", "id"], dtype={"key": str, "id": np.int64},
        quoting=csv.QUOTE_NONE, keep_default_na=False,
    )
    if not np.array_equal(frame["id"].to_numpy(), np.arange(len(frame))):
        raise DatasetError(f"index file {path.name} is not densely numbered")
    return tuple(frame["key"])


def write_coo(path: Path, matrix: sp.csr_matrix):
    coo = matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]} {matrix.nnz}\n")
        np.savetxt(fh, np.column_stack([coo.row[order], coo.col[order]]), fmt="%d")


def read_coo(path: Path) -> sp.csr_matrix:
    if not path.is_file():
        raise DatasetError(f"missing matrix file {path.name}", details={"path": str(path)})
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        body = fh.read().split()
    if len(header) != 3:
        raise DatasetError(f"{path.name}: header must read 'U I NNZ'")
    n_rows, n_cols, nnz = (int(v) for v in header)
    pairs = np.array(body, dtype=np.int64).reshape(-1, 2) if body else np.zeros((0, 2), dtype=np.int64)
    if len(pairs) != nnz:
        raise DatasetError(f"{path.name}: header announces {nnz} entries, found {len(pairs)}")
    if nnz and (pairs[:, 0].max() >= n_rows or pairs[:, 1].max() >= n_cols or pairs.min() < 0):
        raise DatasetError(f"{path.name}: coordinates outside {n_rows}x{n_cols}")
    return binary_csr(pairs[:, 0], pairs[:, 1], (n_rows, n_cols))


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = bundle.domain_names
    for d, domain in enumerate(bundle.train.domains):
        _write_index(directory / f"items.{d}.tsv", domain.item_keys)
    _write_index(directory / "train.users.tsv", bundle.train.user_keys)
    _write_index(directory / "test.users.tsv", bundle.test_input.user_keys)
    for part in BUNDLE_PARTS:
        for d, domain in enumerate(bundle.part(part).domains):
            write_coo(directory / f"{part}.{d}.coo", domain.rows)

    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "n_domains": len(names),
        "domains": [
            {
                "id": d,
                "name": name,
                "item_count": bundle.train.domains[d].item_count,
                "interactions": {part: int(bundle.part(part).domains[d].rows.nnz) for part in BUNDLE_PARTS},
            }
            for d, name in enumerate(names)
        ],
        "users": {"train": bundle.train.n_users, "test": bundle.test_input.n_users},
        "metadata": bundle.metadata,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info(f"Saved dataset bundle to {directory}")
    return directory


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"no dataset manifest in {directory}", details={"path": str(directory)})
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        n_domains = int(manifest["n_domains"])
        names = [entry["name"] for entry in manifest["domains"]]
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"corrupt dataset manifest: {e}") from e

    item_keys = [_read_index(directory / f"items.{d}.tsv") for d in range(n_domains)]
    user_keys = {"train": _read_index(directory / "train.users.tsv"), "test": _read_index(directory / "test.users.tsv")}
    parts = {}
    for part in BUNDLE_PARTS:
        users = user_keys[PART_USERS[part]]
        domains = []
        for d in range(n_domains):
            rows = read_coo(directory / f"{part}.{d}.coo")
            if rows.shape != (len(users), len(item_keys[d])):
                raise DatasetError(f"{part}.{d}.coo has shape {rows.shape}, index files say "
                                   f"({len(users)}, {len(item_keys[d])})")
            domains.append(DomainDataset(d, names[d], item_keys[d], users, rows))
        parts[part] = MultiDomainDataset.from_domains(users, domains)
    logger.info(f"Loaded dataset bundle from {directory}")
    return DatasetBundle(parts["train"], parts["test_input"], parts["test_heldout"], manifest.get("metadata", {}))
