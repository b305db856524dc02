"""End-to-end experiment orchestration: the alternating train/score/relabel
loop, the proportion-loss baseline, metrics, model selection, bag-size
sweeps, and result persistence.

One run is fully determined by its :class:`ExperimentConfig` (including the
master seed): data generation, model init, epoch shuffling, and per-bag
perturbations all derive their randomness from it, so identical configs
produce byte-identical epoch records.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import classifier, datagen, labeler
from .classifier import Adam, ClassifierModel, init_model, predict_proba
from .datagen import BlobSpec, InstancePool, random_blob_spec
from .domain import LLPDataset
from .labeler import LabelerConfig, Strategy, UnlikelihoodVariant

# Seed-stream tags (master seed entropy, tag spawn key); bag-level streams
# use (bag_id, purpose, epoch) keys inside the labeler.
_TAG_CENTERS = 101
_TAG_POOL = 102
_TAG_HOLDOUT = 103
_TAG_BAGS = 104
_TAG_EPOCH_ORDER = 105
_TAG_MODEL = 106

# Extra bag-pool fraction beyond the instance budget (see prepare_data).
_BAG_POOL_SLACK = 0.25


class HarnessError(RuntimeError):
    """A run failed; the message carries the epoch (and bag) context."""


class Method(str, Enum):
    FPL = "fpl"
    FPL_SIMPLE = "fpl-simple"
    GREEDY = "greedy"
    NAIVE = "naive"
    PL = "pl"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("_", "-"))


_METHOD_TO_LABELER = {
    Method.FPL: (Strategy.FPL, UnlikelihoodVariant.FULL),
    Method.FPL_SIMPLE: (Strategy.FPL, UnlikelihoodVariant.SIMPLE),
    Method.GREEDY: (Strategy.GREEDY, UnlikelihoodVariant.FULL),
    Method.NAIVE: (Strategy.NAIVE, UnlikelihoodVariant.FULL),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run depends on.

    Dataclass defaults follow the reference hyperparameters (400 epochs,
    Adam at 3e-4, mini-batches of 4 bags, perturbation rate 5, a 102400
    instance budget split 7:3 into train/validation bags); use the
    ``desk_scale_config`` preset for laptop-sized runs.
    """

    method: str = "fpl"
    # dataset geometry
    num_classes: int = 3
    feature_dim: int = 16
    class_scale: float = 1.0
    separation: float = 4.0
    bag_size: int = 1024
    n_bags: int = 100
    test_fraction: float = 0.2
    validation_ratio: float = 0.7
    # model
    model_kind: str = "mlp"
    hidden_width: int = 64
    activation: str = "relu"
    # training
    epochs: int = 400
    learning_rate: float = 0.0003
    batch_bags: int = 4
    eta: float = 5.0
    perturbation_grows_with_epoch: bool = False
    audit_regret: bool = False
    # bookkeeping
    master_seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        Method.parse(self.method)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.bag_size < 1 or self.n_bags < 2:
            raise ValueError("need bag_size >= 1 and at least 2 bags")
        if self.batch_bags < 1:
            raise ValueError("batch_bags must be positive")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")

    @property
    def instance_budget(self) -> int:
        return self.bag_size * self.n_bags

    def labeler_config(self) -> LabelerConfig:
        strategy, variant = _METHOD_TO_LABELER[Method.parse(self.method)]
        return LabelerConfig(eta=self.eta, strategy=strategy,
                             unlikelihood_variant=variant,
                             audit_regret=self.audit_regret,
                             perturbation_grows_with_epoch=self.perturbation_grows_with_epoch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def desk_scale_config(**overrides) -> ExperimentConfig:
    """Laptop preset: 10240-instance budget, 60 epochs, tuned blob geometry."""
    base = dict(
        num_classes=3, feature_dim=16, class_scale=1.0, separation=4.0,
        bag_size=1024, n_bags=10, epochs=60, learning_rate=0.003,
        model_kind="mlp", hidden_width=64,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def paper_scale_config(**overrides) -> ExperimentConfig:
    """Full-scale preset: 102400-instance budget, 400 epochs."""
    base = dict(bag_size=1024, n_bags=100, epochs=400, learning_rate=0.0003)
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass(frozen=True)
class EpochRecord:
    """Per-epoch metrics; pseudo-label fields are None for the PL baseline."""

    epoch: int
    train_loss: float
    pseudo_label_accuracy: float | None
    update_rate: float | None
    validation_proportion_error: float
    test_accuracy: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "pseudo_label_accuracy": self.pseudo_label_accuracy,
            "update_rate": self.update_rate,
            "validation_proportion_error": self.validation_proportion_error,
            "test_accuracy": self.test_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        return cls(**d)


@dataclass
class RunResult:
    config: ExperimentConfig
    final_model: ClassifierModel
    records: list[EpochRecord]
    selected_model: ClassifierModel
    selected_epoch: int

    @property
    def selected_record(self) -> EpochRecord:
        return self.records[self.selected_epoch - 1]


def mean_abs_proportion_error(model: ClassifierModel, bags) -> float:
    """Mean over bags of the mean absolute gap between the given proportion
    and the bag's mean predicted class probabilities."""
    bags = list(bags)
    if not bags:
        raise ValueError("validation set is empty")
    total = 0.0
    for bag in bags:
        predicted = predict_proba(model, bag.features).mean(axis=0)
        total += float(np.abs(bag.proportions - predicted).mean())
    return total / len(bags)


def evaluate_instance_accuracy(model: ClassifierModel, features: np.ndarray,
                               true_labels: np.ndarray) -> float:
    """Fraction of instances whose argmax class matches the true label
    (argmax ties resolve to the lowest class index)."""
    features = np.asarray(features, dtype=np.float64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted = predict_proba(model, features).argmax(axis=1)
    return float((predicted == true_labels).mean())


def prepare_data(cfg: ExperimentConfig) -> tuple[LLPDataset, LLPDataset, InstancePool, BlobSpec]:
    """Generate the (train, validation, test) splits for a config."""
    def seq(tag, *extra):
        return np.random.SeedSequence(entropy=cfg.master_seed,
                                      spawn_key=(tag, *extra))

    spec = random_blob_spec(cfg.num_classes, cfg.feature_dim, cfg.separation,
                            cfg.class_scale, seed=seq(_TAG_CENTERS))
    budget = cfg.instance_budget
    # The bag pool carries slack beyond the budget: random proportions skew
    # per-class demand, and bags never reuse instances, so an exact-size pool
    # would leave the last bags unfillable.
    pool_size = int(round(budget * (1.0 + _BAG_POOL_SLACK) / (1.0 - cfg.test_fraction)))
    pool = datagen.generate_blobs(spec, pool_size, seed=seq(_TAG_POOL))
    bag_pool, test_pool = datagen.holdout_split(
        pool, cfg.test_fraction, seed=seq(_TAG_HOLDOUT))
    dataset = datagen.make_bags(bag_pool, cfg.bag_size, cfg.n_bags, seed=seq(_TAG_BAGS))
    train, validation = datagen.split_train_validation(dataset, cfg.validation_ratio)
    return train, validation, test_pool, spec


def _pseudo_label_accuracy(states, train: LLPDataset) -> float:
    correct = 0
    total = 0
    for state, bag in zip(states, train.bags):
        assigned = state.current_labels.column_labels
        correct += int((assigned == bag.true_labels).sum())
        total += bag.size
    return correct / total


def _update_rate(states, previous_labels) -> float:
    changed = 0
    total = 0
    for state, prev in zip(states, previous_labels):
        changed += int((state.current_labels.column_labels != prev).sum())
        total += state.bag.size
    return changed / total


def run_llp_training(cfg: ExperimentConfig) -> RunResult:
    """Run one experiment: alternate classifier training and pseudo-label
    decisions (or plain proportion-loss training for the PL baseline).

    Per epoch: (1) train on the current pseudo labels, (2) score every bag
    with the updated model, (3) re-decide each bag's labels under its exact
    count constraints.  The selected model is the epoch checkpoint with the
    lowest validation proportion error.
    """
    method = Method.parse(cfg.method)
    train, validation, test_pool, _ = prepare_data(cfg)
    model = init_model(cfg.model_kind, cfg.feature_dim, cfg.num_classes,
                       hidden_width=cfg.hidden_width, activation=cfg.activation,
                       seed=np.random.SeedSequence(entropy=cfg.master_seed,
                                                   spawn_key=(_TAG_MODEL,)))
    opt = Adam(learning_rate=cfg.learning_rate)

    use_pseudo = method is not Method.PL
    states = []
    previous_labels = []
    if use_pseudo:
        lab_cfg = cfg.labeler_config()
        states = [labeler.new_bag_state(bag, cfg.master_seed, lab_cfg)
                  for bag in train.bags]
        previous_labels = [s.current_labels.column_labels for s in states]

    records: list[EpochRecord] = []
    best_error = np.inf
    best_model = model.copy()
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        order_rng = np.random.default_rng(np.random.SeedSequence(
            entropy=cfg.master_seed, spawn_key=(_TAG_EPOCH_ORDER, epoch)))
        order = order_rng.permutation(train.num_bags)
        ordered_bags = [train.bags[i] for i in order]

        pl_accuracy = None
        update_rate = None
        try:
            if use_pseudo:
                pl_accuracy = _pseudo_label_accuracy(states, train)
                update_rate = 1.0 if epoch == 1 else _update_rate(states, previous_labels)
                previous_labels = [s.current_labels.column_labels for s in states]
                ordered_labels = [states[i].current_labels for i in order]
                _, train_loss = classifier.train_epoch_cross_entropy(
                    model, ordered_bags, ordered_labels, opt, cfg.batch_bags)
            else:
                _, train_loss = classifier.train_epoch_proportion_loss(
                    model, ordered_bags, opt, cfg.batch_bags)
        except Exception as exc:
            raise HarnessError(f"epoch {epoch}: training failed: {exc}") from exc

        if use_pseudo:
            simple = lab_cfg.unlikelihood_variant is UnlikelihoodVariant.SIMPLE
            for state, bag in zip(states, train.bags):
                try:
                    conf = classifier.predict_confidences(model, bag)
                    if simple:
                        losses = labeler.compute_simple_unlikelihood(conf)
                    else:
                        losses = labeler.compute_unlikelihood(conf, state.current_labels)
                    labeler.apply_update(state, losses, lab_cfg)
                except Exception as exc:
                    raise HarnessError(
                        f"epoch {epoch}, bag {bag.bag_id}: label update failed: {exc}"
                    ) from exc

        val_error = mean_abs_proportion_error(model, validation.bags)
        test_accuracy = evaluate_instance_accuracy(model, test_pool.features,
                                                   test_pool.labels)
        records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss,
            pseudo_label_accuracy=pl_accuracy, update_rate=update_rate,
            validation_proportion_error=val_error, test_accuracy=test_accuracy))
        if val_error < best_error:
            best_error = val_error
            best_model = model.copy()
            best_epoch = epoch

    result = RunResult(config=cfg, final_model=model, records=records,
                       selected_model=best_model, selected_epoch=best_epoch)
    if cfg.output_dir:
        persist_run(result, cfg.output_dir)
    return result


# ---------------------------------------------------------------------------
# Persistence: append-only JSON-lines of epoch records plus a summary file.
# ---------------------------------------------------------------------------

def records_to_jsonl(records: list[EpochRecord]) -> str:
    return "".join(json.dumps(r.to_dict()) + "\n" for r in records)


def read_records_jsonl(path) -> list[EpochRecord]:
    lines = Path(path).read_text().splitlines()
    return [EpochRecord.from_dict(json.loads(line)) for line in lines if line]


def persist_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.jsonl").write_text(records_to_jsonl(result.records))
    classifier.save_checkpoint(result.final_model, out / "model_final.json")
    classifier.save_checkpoint(result.selected_model, out / "model_selected.json")
    summary = {
        "config": result.config.to_dict(),
        "selected_epoch": result.selected_epoch,
        "selected_validation_proportion_error":
            result.selected_record.validation_proportion_error,
        "selected_test_accuracy": result.selected_record.test_accuracy,
        "final_test_accuracy": result.records[-1].test_accuracy,
        "epochs": len(result.records),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


# ---------------------------------------------------------------------------
# Bag-size sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepCell:
    method: str
    bag_size: int
    seed: int
    test_accuracy: float
    selected_epoch: int
    validation_proportion_error: float


@dataclass
class SweepResult:
    budget: int
    bag_sizes: list[int]
    methods: list[str]
    seeds: list[int]
    cells: list[SweepCell]

    def accuracy_table(self) -> dict[str, dict[int, tuple[float, float]]]:
        """method -> bag size -> (mean accuracy, std) over seeds."""
        table: dict[str, dict[int, tuple[float, float]]] = {}
        for method in self.methods:
            table[method] = {}
            for size in self.bag_sizes:
                vals = [c.test_accuracy for c in self.cells
                        if c.method == method and c.bag_size == size]
                table[method][size] = (float(np.mean(vals)), float(np.std(vals)))
        return table

    def to_csv(self) -> str:
        lines = ["method,bag_size,n_bags,seed,test_accuracy,selected_epoch,"
                 "validation_proportion_error"]
        for c in self.cells:
            lines.append(f"{c.method},{c.bag_size},{self.budget // c.bag_size},"
                         f"{c.seed},{c.test_accuracy!r},{c.selected_epoch},"
                         f"{c.validation_proportion_error!r}")
        return "\n".join(lines) + "\n"

    def table_csv(self) -> str:
        table = self.accuracy_table()
        header = "method," + ",".join(str(s) for s in self.bag_sizes)
        lines = [header]
        for method in self.methods:
            cells = [f"{table[method][s][0]:.4f}+-{table[method][s][1]:.4f}"
                     for s in self.bag_sizes]
            lines.append(",".join([method] + cells))
        return "\n".join(lines) + "\n"


def sweep_bag_sizes(base: ExperimentConfig, bag_sizes: list[int],
                    methods: list[str] | None = None, n_seeds: int = 5,
                    out_dir=None) -> SweepResult:
    """Run every (method, bag size, seed) cell at a fixed instance budget.

    The budget is ``base.bag_size * base.n_bags``; each requested bag size
    must divide it exactly.  Seeds are shared across methods and sizes so
    cells are comparable.
    """
    budget = base.instance_budget
    bag_sizes = [int(s) for s in bag_sizes]
    for size in bag_sizes:
        if size < 1 or budget % size != 0:
            raise ValueError(f"bag size {size} does not divide the budget {budget}")
        if budget // size < 2:
            raise ValueError(f"bag size {size} leaves fewer than 2 bags")
    method_names = [Method.parse(m).value for m in (methods or [base.method])]
    seeds = [base.master_seed + i for i in range(n_seeds)]

    cells = []
    for method in method_names:
        for size in bag_sizes:
            for seed in seeds:
                cfg = replace(base, method=method, bag_size=size,
                              n_bags=budget // size, master_seed=seed,
                              output_dir=None)
                result = run_llp_training(cfg)
                rec = result.selected_record
                cells.append(SweepCell(
                    method=method, bag_size=size, seed=seed,
                    test_accuracy=rec.test_accuracy,
                    selected_epoch=result.selected_epoch,
                    validation_proportion_error=rec.validation_proportion_error))
    result = SweepResult(budget=budget, bag_sizes=bag_sizes,
                         methods=method_names, seeds=seeds, cells=cells)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_runs.csv").write_text(result.to_csv())
        (out / "sweep_table.csv").write_text(result.table_csv())
        (out / "sweep_summary.json").write_text(json.dumps({
            "budget": budget, "bag_sizes": bag_sizes, "methods": method_names,
            "seeds": seeds,
            "accuracy_table": {m: {str(s): list(v) for s, v in row.items()}
                               for m, row in result.accuracy_table().items()},
        }, indent=2))
    return result
