import json

import numpy as np
import pytest

from llplearn.datagen import (
    BlobSpec,
    DataGenerationError,
    generate_blobs,
    holdout_split,
    make_bags,
    random_blob_spec,
    split_train_validation,
    write_dataset_dir,
)
from llplearn.domain import dataset_from_csv, read_instances_csv, round_counts


def simple_spec(num_classes=3, feature_dim=2, scale=0.5, separation=10.0, seed=0):
    return random_blob_spec(num_classes, feature_dim, separation, scale, seed)


class TestBlobSpec:
    def test_separation_is_exact_after_rescaling(self):
        spec = simple_spec(num_classes=4, feature_dim=3, separation=7.5)
        d = np.linalg.norm(spec.class_centers[:, None] - spec.class_centers[None], axis=-1)
        off = d[~np.eye(4, dtype=bool)]
        assert off.min() == pytest.approx(7.5)

    def test_rejects_too_close_centers(self):
        with pytest.raises(ValueError):
            BlobSpec(num_classes=2, feature_dim=1,
                     class_centers=np.array([[0.0], [1.0]]),
                     class_scale=1.0, separation=5.0)

    def test_dict_round_trip(self):
        spec = simple_spec()
        back = BlobSpec.from_dict(spec.to_dict())
        np.testing.assert_array_equal(back.class_centers, spec.class_centers)


class TestGenerateBlobs:
    def test_zero_scale_places_instances_on_centers(self):
        spec = simple_spec(scale=0.0)
        pool = generate_blobs(spec, 9, seed=1)
        for feats, label in zip(pool.features, pool.labels):
            np.testing.assert_array_equal(feats, spec.class_centers[label])

    def test_balanced_class_counts(self):
        pool = generate_blobs(simple_spec(), 12, seed=2)
        assert np.bincount(pool.labels).tolist() == [4, 4, 4]
        pool = generate_blobs(simple_spec(), 11, seed=2)
        assert np.bincount(pool.labels).tolist() == [4, 4, 3]

    def test_well_separated_blobs_nearest_center_oracle(self):
        spec = simple_spec(num_classes=3, feature_dim=2, scale=1.0, separation=10.0)
        pool = generate_blobs(spec, 3000, seed=3)
        dists = np.linalg.norm(pool.features[:, None, :] - spec.class_centers[None],
                               axis=-1)
        accuracy = (dists.argmin(axis=1) == pool.labels).mean()
        assert accuracy >= 0.999

    def test_fixed_seed_is_bitwise_reproducible(self):
        a = generate_blobs(simple_spec(), 100, seed=5)
        b = generate_blobs(simple_spec(), 100, seed=5)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


class TestMakeBags:
    def test_whole_pool_single_bag_has_pool_proportions(self):
        pool = generate_blobs(simple_spec(), 12, seed=1)  # balanced: 4/4/4
        ds = make_bags(pool, bag_size=12, n_bags=1, seed=0)
        assert ds.bags[0].proportions.tolist() == [1 / 3, 1 / 3, 1 / 3]

    def test_stored_proportions_are_realized_ratios(self):
        pool = generate_blobs(simple_spec(), 400, seed=2)
        ds = make_bags(pool, bag_size=20, n_bags=10, seed=3)
        for bag in ds.bags:
            counts = np.bincount(bag.true_labels, minlength=3)
            np.testing.assert_array_equal(bag.class_counts, counts)
            np.testing.assert_allclose(bag.proportions, counts / bag.size)
            assert round_counts(bag.proportions, bag.size).tolist() == counts.tolist()

    def test_no_instance_is_shared_between_bags(self):
        pool = generate_blobs(simple_spec(feature_dim=1), 300, seed=4)
        ds = make_bags(pool, bag_size=25, n_bags=8, seed=5)
        seen = np.concatenate([bag.features[:, 0] for bag in ds.bags])
        # features are continuous draws, so duplicates would mean reuse
        assert len(np.unique(seen)) == len(seen)

    def test_budget_arithmetic(self):
        pool = generate_blobs(simple_spec(), 1400, seed=6)
        ds = make_bags(pool, bag_size=128, n_bags=10, seed=7)
        assert sum(bag.size for bag in ds.bags) == 1280

    def test_pool_too_small_rejected(self):
        pool = generate_blobs(simple_spec(), 30, seed=8)
        with pytest.raises(DataGenerationError):
            make_bags(pool, bag_size=16, n_bags=3, seed=9)

    def test_determinism(self):
        pool = generate_blobs(simple_spec(), 200, seed=10)
        a = make_bags(pool, bag_size=16, n_bags=8, seed=11)
        b = make_bags(pool, bag_size=16, n_bags=8, seed=11)
        for x, y in zip(a.bags, b.bags):
            assert x.features.tobytes() == y.features.tobytes()


class TestSplits:
    def test_seven_three_split(self):
        pool = generate_blobs(simple_spec(), 420, seed=1)
        ds = make_bags(pool, bag_size=40, n_bags=10, seed=2)
        train, val = split_train_validation(ds, 0.7)
        assert train.num_bags == 7
        assert val.num_bags == 3

    def test_two_bag_split(self):
        pool = generate_blobs(simple_spec(), 100, seed=1)
        ds = make_bags(pool, bag_size=40, n_bags=2, seed=2)
        train, val = split_train_validation(ds, 0.5)
        assert train.num_bags == 1 and val.num_bags == 1

    def test_partition_property(self):
        pool = generate_blobs(simple_spec(), 500, seed=3)
        ds = make_bags(pool, bag_size=30, n_bags=9, seed=4)
        train, val = split_train_validation(ds, 0.7)
        train_ids = {b.bag_id for b in train.bags}
        val_ids = {b.bag_id for b in val.bags}
        assert train_ids | val_ids == {b.bag_id for b in ds.bags}
        assert not train_ids & val_ids

    def test_single_bag_rejected(self):
        pool = generate_blobs(simple_spec(), 100, seed=1)
        ds = make_bags(pool, bag_size=50, n_bags=1, seed=2)
        with pytest.raises(ValueError):
            split_train_validation(ds, 0.7)

    def test_holdout_split_sizes(self):
        pool = generate_blobs(simple_spec(), 100, seed=5)
        rest, held = holdout_split(pool, 0.2, seed=6)
        assert held.size == 20 and rest.size == 80


class TestDatasetDir:
    def test_written_files_reload(self, tmp_path):
        spec = simple_spec()
        pool = generate_blobs(spec, 500, seed=1)
        bag_pool, test_pool = holdout_split(pool, 0.2, seed=2)
        ds = make_bags(bag_pool, bag_size=20, n_bags=10, seed=3)
        train, val = split_train_validation(ds, 0.7)
        write_dataset_dir(tmp_path, train, val, test_pool, spec, seed=1, bag_size=20)

        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["bag_size"] == 20
        assert len(manifest["splits"]["train"]) == 7
        back = dataset_from_csv(tmp_path / "train.csv",
                                tmp_path / "train_proportions.csv")
        assert back.num_bags == 7
        feats, ids, labels = read_instances_csv(tmp_path / "test.csv")
        assert (ids == -1).all()
        assert labels.size == test_pool.size
