import numpy as np
import pandas as pd
import pytest

from errors import ConfigError, DatasetError
from ingest import (
    RatingRecord,
    SplitSpec,
    binarize,
    build_multidomain,
    concat_domains,
    dataset_statistics,
    filter_items,
    filter_users,
    fold_in_split,
    held_out_count,
    load_bundle,
    make_bundle,
    merge_parts,
    read_coo,
    read_domain_tsv,
    records_frame,
    restrict_to_intersection,
    save_bundle,
    select_domains,
    split_users,
    subset_users,
)


@pytest.fixture
def records():
    return records_frame([
        RatingRecord("u1", "b1", 5.0, 0),
        RatingRecord("u1", "b2", 4.0, 0),
        RatingRecord("u1", "k1", 5.0, 1),
        RatingRecord("u2", "b1", 4.0, 0),
        RatingRecord("u3", "k1", 5.0, 1),
        RatingRecord("u3", "k2", 2.0, 1),
    ])


@pytest.fixture
def dataset(records):
    return build_multidomain(binarize(records, 3.5), ["Books", "Kindle"])


def _many_users(n_users=40, n_items=12, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        for d in range(2):
            for i in rng.choice(n_items, size=rng.integers(1, 8), replace=False):
                rows.append(RatingRecord(f"user{u:03d}", f"item{i:02d}", 5.0, d))
    return build_multidomain(records_frame(rows), ["A", "B"])


def test_binarize_threshold(records):
    kept = binarize(records, 3.5)
    assert len(kept) == 5
    assert set(kept["rating"]) == {1.0}
    assert "k2" not in set(kept["item_key"])


def test_binarize_rejects_nan_threshold(records):
    with pytest.raises(ConfigError):
        binarize(records, float("nan"))


def test_filter_items_per_domain(records):
    kept = filter_items(binarize(records, 3.5), {0: 2, 1: 1}, n_domains=2)
    assert set(kept[kept["domain_id"] == 0]["item_key"]) == {"b1"}
    assert set(kept[kept["domain_id"] == 1]["item_key"]) == {"k1"}


def test_filter_items_unknown_domain(records):
    with pytest.raises(ConfigError):
        filter_items(records, {5: 2}, n_domains=2)


def test_filter_users_counts_across_domains(records):
    kept = filter_users(binarize(records, 3.5), 2)
    assert set(kept["user_key"]) == {"u1"}


def test_filter_users_per_domain(records):
    kept = filter_users(binarize(records, 3.5), 2, per_domain=True)
    assert set(zip(kept["user_key"], kept["domain_id"])) == {("u1", 0)}


def _reviewed(counts, domain_id=0):
    """One record per (user, item); item i is reviewed counts[i] times."""
    return records_frame([
        RatingRecord(f"u{u:04d}", item, 1.0, domain_id)
        for item, c in counts.items() for u in range(c)
    ])


def test_filter_items_threshold_boundary():
    kept = filter_items(_reviewed({"popular": 200, "almost": 199}), {0: 200}, n_domains=1)
    assert set(kept["item_key"]) == {"popular"}
    assert len(kept) == 200


def test_filter_items_idempotent(records):
    once = filter_items(binarize(records, 3.5), {0: 2, 1: 1}, n_domains=2)
    twice = filter_items(once, {0: 2, 1: 1}, n_domains=2)
    pd.testing.assert_frame_equal(once, twice)


def test_filter_users_zero_minimum_keeps_everyone(records):
    pd.testing.assert_frame_equal(filter_users(records, 0), records.reset_index(drop=True))


def test_filter_users_boundary():
    frame = records_frame(
        [RatingRecord("five", f"i{i}", 1.0, i % 2) for i in range(5)]
        + [RatingRecord("four", f"i{i}", 1.0, i % 2) for i in range(4)]
    )
    kept = filter_users(frame, 5)
    assert set(kept["user_key"]) == {"five"}
    assert len(kept) == 5


class TestBuildMultidomain:
    def test_indexing(self, dataset):
        assert dataset.user_keys == ("u1", "u2", "u3")
        assert dataset.domains[0].item_keys == ("b1", "b2")
        assert dataset.domains[1].item_keys == ("k1",)
        np.testing.assert_array_equal(dataset.presence, [3, 1, 2])
        np.testing.assert_array_equal(dataset.domains[0].rows.toarray(), [[1, 1], [1, 0], [0, 0]])
        dataset.validate()

    def test_permutation_invariant(self, records):
        shuffled = records.sample(frac=1.0, random_state=3)
        a = build_multidomain(binarize(records, 3.5), ["Books", "Kindle"])
        b = build_multidomain(binarize(shuffled, 3.5), ["Books", "Kindle"])
        assert a.user_keys == b.user_keys
        for da, db in zip(a.domains, b.domains):
            assert da.item_keys == db.item_keys
            assert (da.rows != db.rows).nnz == 0

    def test_duplicates_collapse(self):
        ds = build_multidomain(records_frame([
            RatingRecord("u", "i", 1.0, 0), RatingRecord("u", "i", 1.0, 0),
        ]))
        assert ds.domains[0].rows.nnz == 1
        assert ds.domains[0].rows.data.tolist() == [1.0]

    def test_empty_records(self):
        with pytest.raises(DatasetError):
            build_multidomain(records_frame([]))

    def test_empty_domain(self):
        with pytest.raises(DatasetError):
            build_multidomain(records_frame([RatingRecord("u", "i", 1.0, 0)]), n_domains=2)

    def test_feedback_only_present_domains(self, dataset):
        feedback = dataset.feedback(1)
        assert list(feedback) == [0]
        np.testing.assert_array_equal(feedback[0], [1.0, 0.0])


class TestSplits:
    def test_split_users_disjoint_and_deterministic(self):
        ds = _many_users()
        train, test = split_users(ds, SplitSpec(train_fraction=0.75, seed=4))
        assert train.n_users == 30 and test.n_users == 10
        assert not set(train.user_keys) & set(test.user_keys)
        again, _ = split_users(ds, SplitSpec(train_fraction=0.75, seed=4))
        assert again.user_keys == train.user_keys

    @pytest.mark.parametrize("n_users,expected", [(100, (95, 5)), (20, (19, 1))])
    def test_split_sizes(self, n_users, expected):
        train, test = split_users(_many_users(n_users=n_users), SplitSpec(train_fraction=0.95))
        assert (train.n_users, test.n_users) == expected

    def test_fold_in_split_same_seed_same_masking(self):
        test = _many_users()
        first = fold_in_split(test, SplitSpec(seed=6))
        second = fold_in_split(test, SplitSpec(seed=6))
        for a, b in zip(first, second):
            for da, db in zip(a.domains, b.domains):
                assert (da.rows != db.rows).nnz == 0

    def test_split_needs_two_users(self, records):
        single = subset_users(build_multidomain(binarize(records, 3.5)), [0])
        with pytest.raises(DatasetError):
            split_users(single, SplitSpec())

    @pytest.mark.parametrize("n,expected", [(0, 0), (1, 0), (2, 1), (5, 1), (10, 2), (11, 2)])
    def test_held_out_count(self, n, expected):
        assert held_out_count(n, 0.8) == expected

    def test_fold_in_split_partitions_each_row(self):
        test = _many_users()
        input_part, held = fold_in_split(test, SplitSpec(seed=2))
        for d in range(test.n_domains):
            full = test.domains[d].rows
            a, b = input_part.domains[d].rows, held.domains[d].rows
            assert a.multiply(b).nnz == 0
            assert ((a + b) != full).nnz == 0
            for row in range(test.n_users):
                n = len(test.domains[d].row_items(row))
                assert len(held.domains[d].row_items(row)) == held_out_count(n, 0.8)

    def test_merge_parts_reconstructs(self):
        test = _many_users()
        input_part, held = fold_in_split(test, SplitSpec(seed=2))
        merged = merge_parts(input_part, held)
        for d in range(test.n_domains):
            assert (merged.domains[d].rows != test.domains[d].rows).nnz == 0
        np.testing.assert_array_equal(merged.presence, test.presence)


class TestDomainSelection:
    def test_select_domains_drops_absent_users(self, dataset):
        kindle = select_domains(dataset, [1])
        assert kindle.user_keys == ("u1", "u3")
        assert kindle.domain_names == ["Kindle"]
        assert kindle.domains[0].domain_id == 0

    def test_restrict_to_intersection(self, dataset):
        assert restrict_to_intersection(dataset).user_keys == ("u1",)

    def test_concat_domains(self, dataset):
        concat = concat_domains(dataset)
        assert concat.n_domains == 1
        assert concat.domains[0].item_keys == ("Books:b1", "Books:b2", "Kindle:k1")
        np.testing.assert_array_equal(concat.domains[0].rows.toarray(), [[1, 1, 1]])
        assert concat.domain_names == ["Books+Kindle"]


def test_dataset_statistics(dataset):
    stats = dataset_statistics(dataset, {"Books": 200, "Kindle": 30})
    books = stats[stats["domain"] == "Books"].iloc[0]
    assert books["items"] == 2 and books["interactions"] == 3 and books["item_threshold"] == 200
    assert books["density"] == pytest.approx(3 / 6)


def test_read_domain_tsv(tmp_path):
    path = tmp_path / "books.tsv"
    path.write_text("u1\tb1\t5\nu2\tNA\t3.0\n", encoding="utf-8")
    frame = read_domain_tsv(path, 0)
    assert frame["item_key"].tolist() == ["b1", "NA"]
    assert frame["domain_id"].tolist() == [0, 0]


def test_read_domain_tsv_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        read_domain_tsv(tmp_path / "absent.tsv", 0)


class TestBundleIO:
    @pytest.fixture
    def bundle(self):
        return make_bundle(_many_users(), SplitSpec(train_fraction=0.8, seed=1), metadata={"source": "test"})

    def test_round_trip(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path / "data")
        loaded = load_bundle(tmp_path / "data")
        assert loaded.domain_names == ["A", "B"]
        assert loaded.metadata["source"] == "test"
        for part in ("train", "test_input", "test_heldout"):
            original, restored = bundle.part(part), loaded.part(part)
            assert original.user_keys == restored.user_keys
            for da, db in zip(original.domains, restored.domains):
                assert da.item_keys == db.item_keys
                assert (da.rows != db.rows).nnz == 0

    def test_coo_header(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path)
        lines = (tmp_path / "train.0.coo").read_text().splitlines()
        matrix = bundle.train.domains[0].rows
        assert lines[0] == f"{matrix.shape[0]} {matrix.shape[1]} {matrix.nnz}"
        pairs = [tuple(map(int, line.split())) for line in lines[1:]]
        assert pairs == sorted(pairs)

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            save_bundle(make_bundle(_many_users(), SplitSpec(seed=1)), tmp_path / name)
        for path in sorted((tmp_path / "a").iterdir()):
            assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()

    def test_truncated_matrix(self, bundle, tmp_path):
        save_bundle(bundle, tmp_path)
        path = tmp_path / "train.1.coo"
        path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(DatasetError):
            read_coo(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_bundle(tmp_path)
