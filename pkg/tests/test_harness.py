import json

import numpy as np
import pytest

from llplearn.classifier import SoftmaxLinear
from llplearn.domain import Bag
from llplearn.harness import (
    EpochRecord,
    ExperimentConfig,
    Method,
    desk_scale_config,
    evaluate_instance_accuracy,
    mean_abs_proportion_error,
    paper_scale_config,
    persist_run,
    prepare_data,
    read_records_jsonl,
    records_to_jsonl,
    run_llp_training,
    sweep_bag_sizes,
)


def tiny_config(**overrides):
    base = dict(method="fpl", num_classes=3, feature_dim=4, class_scale=0.8,
                separation=6.0, bag_size=16, n_bags=6, epochs=3,
                learning_rate=0.01, model_kind="softmax_linear",
                master_seed=0)
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_reference_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.epochs == 400
        assert cfg.learning_rate == pytest.approx(0.0003)
        assert cfg.batch_bags == 4
        assert cfg.eta == pytest.approx(5.0)
        assert cfg.instance_budget == 102400
        assert cfg.validation_ratio == pytest.approx(0.7)

    def test_presets(self):
        desk = desk_scale_config()
        assert desk.instance_budget == 10240
        assert desk.epochs == 60
        paper = paper_scale_config()
        assert paper.instance_budget == 102400
        assert paper.epochs == 400

    def test_dict_round_trip(self):
        cfg = tiny_config(method="greedy")
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_fields_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"methodz": "fpl"})

    def test_method_parsing(self):
        assert Method.parse("FPL-Simple") is Method.FPL_SIMPLE
        assert Method.parse("pl") is Method.PL
        with pytest.raises(ValueError):
            Method.parse("boosting")

    def test_full_scale_bag_size_grid_arithmetic(self):
        budget = ExperimentConfig(bag_size=64, n_bags=1600).instance_budget
        assert budget == 102400
        sizes = [64, 128, 256, 512, 1024, 2048, 4096]
        assert [budget // s for s in sizes] == [1600, 800, 400, 200, 100, 50, 25]
        assert all(budget % s == 0 for s in sizes)


class TestMetrics:
    def test_proportion_error_perfect_predictions(self):
        rng = np.random.default_rng(0)
        bag = Bag.from_labeled(np.eye(2)[rng.integers(0, 2, size=8)],
                               rng.integers(0, 2, size=8), 2)
        # a saturated linear model predicting the one-hot features themselves
        model = SoftmaxLinear(2, 2, seed=0)
        model.params["W"][:] = 200.0 * np.eye(2)
        model.params["b"][:] = 0.0
        bag = Bag.from_labeled(np.eye(2)[bag.true_labels], bag.true_labels, 2)
        assert mean_abs_proportion_error(model, [bag]) == pytest.approx(0.0, abs=1e-9)

    def test_proportion_error_uniform_model(self):
        model = SoftmaxLinear(3, 2, seed=0)
        model.params["W"][:] = 0.0
        bag = Bag.from_labeled(np.zeros((4, 3)), np.zeros(4, dtype=int), 2)
        # p = (1, 0), prediction = (1/2, 1/2): mean abs error = 1/2
        assert mean_abs_proportion_error(model, [bag]) == pytest.approx(0.5)

    def test_proportion_error_hand_built_two_bags(self):
        model = SoftmaxLinear(2, 2, seed=0)
        model.params["W"][:] = 0.0  # uniform predictions
        b1 = Bag.from_labeled(np.zeros((4, 2)), np.array([0, 0, 0, 1]), 2)
        b2 = Bag.from_labeled(np.zeros((4, 2)), np.array([0, 1, 1, 1]), 2)
        # each bag: mean(|0.75-0.5|, |0.25-0.5|) = 0.25
        assert mean_abs_proportion_error(model, [b1, b2]) == pytest.approx(0.25)

    def test_empty_validation_rejected(self):
        with pytest.raises(ValueError):
            mean_abs_proportion_error(SoftmaxLinear(2, 2), [])

    def test_instance_accuracy_constant_model(self):
        model = SoftmaxLinear(2, 2, seed=0)
        model.params["W"][:] = 0.0
        model.params["b"][:] = np.array([10.0, 0.0])  # always class 0
        X = np.random.default_rng(0).normal(size=(10, 2))
        y = np.array([0, 1] * 5)
        assert evaluate_instance_accuracy(model, X, y) == pytest.approx(0.5)

    def test_instance_accuracy_tie_breaks_low_index(self):
        model = SoftmaxLinear(2, 3, seed=0)
        model.params["W"][:] = 0.0
        model.params["b"][:] = 0.0  # all ties -> argmax picks class 0
        X = np.zeros((6, 2))
        assert evaluate_instance_accuracy(model, X, np.zeros(6, dtype=int)) == 1.0
        assert evaluate_instance_accuracy(model, X, np.ones(6, dtype=int)) == 0.0


class TestRunTraining:
    def test_single_epoch_run(self):
        result = run_llp_training(tiny_config(epochs=1))
        assert len(result.records) == 1
        assert result.selected_epoch == 1
        assert result.records[0].update_rate == 1.0

    def test_single_class_dataset_has_perfect_pseudo_labels(self):
        cfg = tiny_config(num_classes=1, epochs=2)
        result = run_llp_training(cfg)
        assert all(r.pseudo_label_accuracy == 1.0 for r in result.records)

    def test_pl_method_skips_pseudo_fields(self):
        result = run_llp_training(tiny_config(method="pl", epochs=2))
        assert all(r.pseudo_label_accuracy is None for r in result.records)
        assert all(r.update_rate is None for r in result.records)

    def test_records_fractions_in_range(self):
        result = run_llp_training(tiny_config(epochs=4))
        for r in result.records:
            assert 0.0 <= r.pseudo_label_accuracy <= 1.0
            assert 0.0 <= r.update_rate <= 1.0
            assert 0.0 <= r.test_accuracy <= 1.0
            assert r.validation_proportion_error >= 0.0

    def test_selected_model_attains_min_validation_error(self):
        result = run_llp_training(tiny_config(epochs=5))
        errors = [r.validation_proportion_error for r in result.records]
        assert result.selected_epoch == int(np.argmin(errors)) + 1
        assert result.selected_record.validation_proportion_error == min(errors)

    def test_reproducibility_identical_records(self):
        a = run_llp_training(tiny_config(epochs=3, master_seed=5))
        b = run_llp_training(tiny_config(epochs=3, master_seed=5))
        assert records_to_jsonl(a.records) == records_to_jsonl(b.records)

    def test_different_seeds_differ(self):
        a = run_llp_training(tiny_config(epochs=3, master_seed=5))
        b = run_llp_training(tiny_config(epochs=3, master_seed=6))
        assert records_to_jsonl(a.records) != records_to_jsonl(b.records)

    def test_every_method_runs(self):
        for method in Method:
            result = run_llp_training(tiny_config(method=method.value, epochs=2))
            assert len(result.records) == 2

    def test_budget_bookkeeping(self):
        cfg = tiny_config()
        train, validation, test_pool, _ = prepare_data(cfg)
        total = sum(b.size for b in train.bags) + sum(b.size for b in validation.bags)
        assert total == cfg.instance_budget
        ids = [b.bag_id for b in train.bags] + [b.bag_id for b in validation.bags]
        assert len(set(ids)) == cfg.n_bags

    def test_persist_and_reload(self, tmp_path):
        result = run_llp_training(tiny_config(epochs=2))
        persist_run(result, tmp_path)
        records = read_records_jsonl(tmp_path / "records.jsonl")
        assert [r.epoch for r in records] == [1, 2]
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["selected_epoch"] == result.selected_epoch
        assert (tmp_path / "model_final.json").exists()
        assert (tmp_path / "model_selected.json").exists()


class TestSweep:
    def test_bag_size_grid_arithmetic(self):
        cfg = tiny_config(bag_size=16, n_bags=6, epochs=1)  # budget 96
        result = sweep_bag_sizes(cfg, [16, 32], methods=["naive", "pl"], n_seeds=2)
        assert result.budget == 96
        assert len(result.cells) == 2 * 2 * 2
        table = result.accuracy_table()
        assert set(table) == {"naive", "pl"}
        assert set(table["pl"]) == {16, 32}

    def test_non_divisible_budget_rejected(self):
        cfg = tiny_config(bag_size=16, n_bags=6, epochs=1)
        with pytest.raises(ValueError):
            sweep_bag_sizes(cfg, [13], n_seeds=1)

    def test_single_bag_size_single_method(self):
        cfg = tiny_config(epochs=1)
        result = sweep_bag_sizes(cfg, [16], n_seeds=1)
        assert len(result.cells) == 1
        assert result.methods == ["fpl"]

    def test_csv_outputs(self, tmp_path):
        cfg = tiny_config(epochs=1)
        result = sweep_bag_sizes(cfg, [16], methods=["pl"], n_seeds=2,
                                 out_dir=tmp_path)
        runs = (tmp_path / "sweep_runs.csv").read_text().splitlines()
        assert len(runs) == 3  # header + 2 cells
        table = (tmp_path / "sweep_table.csv").read_text().splitlines()
        assert table[0] == "method,16"
        assert (tmp_path / "sweep_summary.json").exists()

    def test_shared_seeds_share_datasets(self):
        cfg = tiny_config(epochs=1)
        res = sweep_bag_sizes(cfg, [16], methods=["naive", "greedy"], n_seeds=1)
        # same seed + same bag size -> identical dataset, so both methods see
        # the same validation landscape on epoch 1 before decisions diverge
        assert res.cells[0].seed == res.cells[1].seed


class TestEpochRecord:
    def test_jsonl_round_trip(self):
        rec = EpochRecord(epoch=1, train_loss=0.5, pseudo_label_accuracy=0.9,
                          update_rate=0.1, validation_proportion_error=0.05,
                          test_accuracy=0.8)
        line = records_to_jsonl([rec])
        assert json.loads(line)["epoch"] == 1
        assert EpochRecord.from_dict(json.loads(line)) == rec

    def test_none_fields_serialize_as_null(self):
        rec = EpochRecord(epoch=1, train_loss=0.5, pseudo_label_accuracy=None,
                          update_rate=None, validation_proportion_error=0.05,
                          test_accuracy=0.8)
        assert json.loads(records_to_jsonl([rec]))["update_rate"] is None
