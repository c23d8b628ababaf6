import math

import numpy as np
import pytest

from clientdata.models import Dataset, PartitionSpec, SyntheticSpec
from clientdata.utils import (
    class_histograms,
    dirichlet_partition,
    generate_synthetic,
    label_entropy,
    load_csv,
    mean_client_entropy,
    natural_partition,
    split_4_3_3,
    subsample,
    write_csv,
)
from lorafed.exceptions import ConfigurationError, InputError, PartitionError


def balanced_labels(classes: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(classes), per_class)


def assert_valid_partition(spec: PartitionSpec, n: int):
    joined = np.concatenate(spec.client_indices)
    assert all(ix.size > 0 for ix in spec.client_indices)
    assert joined.size == n
    assert np.array_equal(np.sort(joined), np.arange(n))


def nearest_mean_accuracy(dataset: Dataset, seed: int) -> float:
    """Fit class means on half the data, classify the other half."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    fit, held = order[: len(order) // 2], order[len(order) // 2 :]
    means = np.vstack(
        [dataset.features[fit][dataset.labels[fit] == c].mean(axis=0) for c in range(dataset.n_classes)]
    )
    dists = ((dataset.features[held][:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(dists, axis=1) == dataset.labels[held]))


# -- SYNTHETIC --
class TestGenerateSynthetic:
    def test_deterministic(self):
        spec = SyntheticSpec(classes=3, dim=4, samples_per_class=20, separation=2.0, clusters=2)
        a, b = generate_synthetic(spec, 5), generate_synthetic(spec, 5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.features, generate_synthetic(spec, 6).features)

    def test_shapes_and_balance(self):
        spec = SyntheticSpec(
            classes=4, dim=3, samples_per_class=10, separation=1.0, clusters=2, groups_per_cluster=5
        )
        data = generate_synthetic(spec, 0)
        assert data.features.shape == (80, 3)
        assert np.array_equal(np.bincount(data.labels), [20, 20, 20, 20])
        assert np.unique(data.group_ids).size == 10
        assert np.array_equal(np.bincount(data.cluster_ids), [40, 40])

    def test_well_separated_is_learnable(self):
        spec = SyntheticSpec(classes=5, dim=8, samples_per_class=100, separation=10.0)
        assert nearest_mean_accuracy(generate_synthetic(spec, 1), 1) >= 0.95

    def test_no_separation_is_chance(self):
        spec = SyntheticSpec(classes=4, dim=8, samples_per_class=200, separation=0.0)
        for seed in range(3):
            acc = nearest_mean_accuracy(generate_synthetic(spec, seed), seed)
            assert abs(acc - 0.25) < 0.1

    def test_clusters_disagree_on_labels(self):
        spec = SyntheticSpec(classes=4, dim=8, samples_per_class=100, separation=10.0, clusters=2)
        data = generate_synthetic(spec, 3)
        for label in range(4):
            means = [
                data.features[(data.cluster_ids == g) & (data.labels == label)].mean(axis=0)
                for g in (0, 1)
            ]
            assert np.linalg.norm(means[0] - means[1]) > 1.0

    def test_degenerate_spec(self):
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticSpec(classes=1, dim=2, samples_per_class=5, separation=1.0), 0)
        with pytest.raises(ConfigurationError):
            generate_synthetic(SyntheticSpec(classes=2, dim=0, samples_per_class=5, separation=1.0), 0)


def test_subsample():
    spec = SyntheticSpec(classes=2, dim=2, samples_per_class=50, separation=1.0)
    data = generate_synthetic(spec, 0)
    half = subsample(data, 0.5, 9)
    assert len(half) == 50
    assert np.array_equal(half.features, subsample(data, 0.5, 9).features)
    assert subsample(data, 1.0, 9) is data
    with pytest.raises(ConfigurationError):
        subsample(data, 0.0, 9)


# -- CSV --
class TestCsv:
    def test_label_densification(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1.0,2.0,b\n3.0,4.0,a\n5.0,6.0,b\n")
        data = load_csv(str(path))
        assert data.labels.tolist() == [0, 1, 0]
        assert data.n_classes == 2
        assert data.class_names == ["b", "a"]
        assert data.group_ids is None
        np.testing.assert_array_equal(data.features, [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])

    def test_group_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,label,group\n1.0,0,p1\n2.0,1,p2\n3.0,1,p1\n")
        data = load_csv(str(path))
        assert data.group_ids.tolist() == ["p1", "p2", "p1"]
        assert data.dim == 1

    def test_integer_labels_keep_first_appearance(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,label\n1.0,1\n2.0,0\n3.0,1\n")
        data = load_csv(str(path))
        assert data.labels.tolist() == [0, 1, 0]
        assert data.class_names == ["1", "0"]

    def test_round_trip(self, tmp_path):
        spec = SyntheticSpec(classes=3, dim=4, samples_per_class=15, separation=2.0)
        data = generate_synthetic(spec, 2)
        path = str(tmp_path / "round_trip.csv")
        write_csv(data, path)
        loaded = load_csv(path)
        assert np.array_equal(loaded.features, data.features)
        assert np.array_equal(loaded.labels, data.labels)
        assert loaded.n_classes == 3

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,x1\n1.0,2.0\n")
        with pytest.raises(InputError):
            load_csv(str(path))

    def test_non_numeric_feature_names_row(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1.0,2.0,a\n1.5,oops,b\n")
        with pytest.raises(InputError, match="row 3"):
            load_csv(str(path))

    def test_ragged_rows(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1.0,2.0,a\n1.5,2.5,b,extra\n")
        with pytest.raises(InputError):
            load_csv(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_csv(str(tmp_path / "absent.csv"))


# -- PARTITIONS --
class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        spec = dirichlet_partition(balanced_labels(3, 10), 1, 0.5, 0)
        assert np.array_equal(spec.client_indices[0], np.arange(30))

    def test_valid_for_all_alphas(self):
        labels = balanced_labels(5, 100)
        for alpha in (0.1, 1.0, 10.0):
            for seed in range(3):
                spec = dirichlet_partition(labels, 10, alpha, seed, min_per_client=1)
                assert_valid_partition(spec, labels.size)
                assert spec.kind == "dirichlet" and spec.alpha == alpha

    def test_deterministic(self):
        labels = balanced_labels(4, 50)
        a = dirichlet_partition(labels, 5, 0.5, 3)
        b = dirichlet_partition(labels, 5, 0.5, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a.client_indices, b.client_indices))

    def test_large_alpha_is_near_iid(self):
        labels = balanced_labels(5, 1000)
        spec = dirichlet_partition(labels, 4, 1000.0, 0)
        hist = class_histograms(labels, spec, 5)
        proportions = hist / hist.sum(axis=1, keepdims=True)
        assert np.all(np.abs(proportions - 0.2) <= 0.1 * 0.2)

    def test_entropy_grows_with_alpha(self):
        labels = balanced_labels(10, 500)
        means = []
        for alpha in (0.1, 1.0, 10.0):
            per_seed = [
                mean_client_entropy(
                    labels, dirichlet_partition(labels, 20, alpha, seed, min_per_client=1), 10
                )
                for seed in range(3)
            ]
            means.append(np.mean(per_seed))
        assert means[0] < means[1] < means[2]

    def test_too_many_clients(self):
        with pytest.raises(PartitionError):
            dirichlet_partition(balanced_labels(2, 3), 7, 1.0, 0, min_per_client=1)

    def test_unreachable_minimum(self):
        with pytest.raises(PartitionError):
            dirichlet_partition(balanced_labels(2, 10), 4, 0.01, 0, min_per_client=5, max_retries=0)

    def test_bad_alpha(self):
        with pytest.raises(ConfigurationError):
            dirichlet_partition(balanced_labels(2, 10), 2, 0.0, 0)


class TestNaturalPartition:
    def test_one_group_per_client(self):
        groups = np.array([0, 1, 2, 0, 1, 2, 2])
        spec = natural_partition(groups, 3)
        owners = [set(groups[ix]) for ix in spec.client_indices]
        assert sorted(len(o) for o in owners) == [1, 1, 1]
        assert_valid_partition(spec, groups.size)

    def test_descending_round_robin(self):
        sizes = {"a": 50, "b": 40, "c": 30, "d": 20, "e": 10}
        groups = np.concatenate([[g] * n for g, n in sizes.items()])
        spec = natural_partition(groups, 2)
        assert [set(groups[ix]) for ix in spec.client_indices] == [{"a", "c", "e"}, {"b", "d"}]
        assert [ix.size for ix in spec.client_indices] == [90, 60]

    def test_never_splits_a_group(self):
        groups = np.random.default_rng(0).integers(0, 12, size=300)
        spec = natural_partition(groups, 5)
        owner = {}
        for client, ix in enumerate(spec.client_indices):
            for g in set(groups[ix].tolist()):
                assert owner.setdefault(g, client) == client

    def test_needs_groups(self):
        data = Dataset(np.zeros((4, 1)), [0, 1, 0, 1], 2)
        with pytest.raises(InputError):
            natural_partition(data, 2)
        with pytest.raises(InputError):
            natural_partition(np.array([0, 0, 1]), 3)


class TestSplit:
    @pytest.mark.parametrize("n, sizes", [(100, (40, 30, 30)), (10, (4, 3, 3)), (5, (2, 2, 1))])
    def test_sizes(self, n, sizes):
        splits = split_4_3_3(np.arange(n), 0)
        assert (splits.train.size, splits.test.size, splits.val.size) == sizes

    def test_disjoint_and_exhaustive(self):
        indices = np.arange(100, 137)
        splits = split_4_3_3(indices, 4, client=2)
        joined = np.concatenate([splits.train, splits.test, splits.val])
        assert np.array_equal(np.sort(joined), indices)

    def test_too_few(self):
        with pytest.raises(InputError):
            split_4_3_3([1, 2], 0)


def test_partition_spec_json_form():
    spec = PartitionSpec([[0, 2], [1]], "dirichlet", 0.1)
    doc = spec.to_dict()
    assert doc == {"kind": "dirichlet", "alpha": 0.1, "clients": [[0, 2], [1]]}
    again = PartitionSpec.from_dict(doc)
    assert [ix.tolist() for ix in again.client_indices] == [[0, 2], [1]]


def test_partition_spec_rejects_overlap():
    with pytest.raises(PartitionError):
        PartitionSpec([[0, 1], [1, 2]], "natural").validate(3)


def test_label_entropy():
    assert math.isclose(label_entropy([5, 5, 5, 5]), math.log(4), rel_tol=1e-12)
    assert label_entropy([7, 0, 0]) == 0.0
    assert label_entropy([0, 0]) == 0.0
