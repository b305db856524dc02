"""Online pseudo-label decisions under exact per-bag class-count constraints.

Each epoch the classifier produces a confidence matrix per bag.  From it we
compute a per-cell "unlikelihood" score (how implausible it is that instance
``j`` belongs to class ``c``), accumulate those scores over epochs, and pick
the next feasible label matrix by one of three rules:

* ``fpl``    minimize cumulative unlikelihood plus a fresh Gaussian
             perturbation (follow the perturbed leader),
* ``greedy`` minimize cumulative unlikelihood alone,
* ``naive``  minimize only the latest epoch's unlikelihood.

All three reduce to one exact transportation solve per bag per epoch.
Randomness is drawn from streams keyed by (master seed, bag id, epoch), so
results do not depend on bag processing order or parallel scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .assignment import TransportInstance, assignment_objective, solve_assignment
from .domain import Bag, PseudoLabelMatrix, ScoreMatrix

_CONF_COLUMN_TOL = 1e-6

_STREAM_INIT = 0
_STREAM_PERTURB = 1


class Strategy(str, Enum):
    FPL = "fpl"
    GREEDY = "greedy"
    NAIVE = "naive"


class UnlikelihoodVariant(str, Enum):
    #: assigned cells score 1 - conf; unassigned cells score max conf - conf
    FULL = "full"
    #: every cell scores 1 - conf
    SIMPLE = "simple"


@dataclass(frozen=True)
class LabelerConfig:
    """Knobs for the per-bag decision rule.

    ``eta`` scales the Gaussian perturbation (only used by ``fpl``).  With
    ``eta == 0`` fpl degenerates exactly to greedy.  When
    ``perturbation_grows_with_epoch`` is set, the perturbation drawn at epoch
    ``t`` is additionally multiplied by ``t``; the default keeps a constant
    scale, which fades relative to the growing cumulative loss.
    """

    eta: float = 5.0
    strategy: Strategy = Strategy.FPL
    unlikelihood_variant: UnlikelihoodVariant = UnlikelihoodVariant.FULL
    audit_regret: bool = False
    perturbation_grows_with_epoch: bool = False

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "unlikelihood_variant",
                           UnlikelihoodVariant(self.unlikelihood_variant))


def _check_confidences(conf: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2:
        raise ValueError("confidence matrix must be 2-D (classes x instances)")
    if not np.isfinite(conf).all():
        raise ValueError("confidence matrix must be finite")
    if conf.min() < -1e-9:
        raise ValueError("confidences must be nonnegative")
    sums = conf.sum(axis=0)
    if np.abs(sums - 1.0).max() > _CONF_COLUMN_TOL:
        raise ValueError("each confidence column must sum to 1")
    return conf


def compute_unlikelihood(conf: ScoreMatrix,
                         current_labels: PseudoLabelMatrix) -> ScoreMatrix:
    """Score how implausible each (class, instance) cell is.

    The cell holding the current pseudo label scores ``1 - conf``: a low
    confidence in the label the model was just trained on marks that label
    as suspect.  Every other cell scores ``max-column-confidence - conf``,
    so a class that rivals the model's favourite is *not* penalized even if
    the bag is generally hard.  All outputs lie in [0, 1].
    """
    conf = _check_confidences(conf)
    if conf.shape != (current_labels.num_classes, current_labels.bag_size):
        raise ValueError("confidence and label matrices must share a shape")
    col_max = conf.max(axis=0)
    scores = col_max[np.newaxis, :] - conf
    labels = current_labels.column_labels
    cols = np.arange(conf.shape[1])
    scores[labels, cols] = 1.0 - conf[labels, cols]
    np.clip(scores, 0.0, 1.0, out=scores)
    return scores


def compute_simple_unlikelihood(conf: ScoreMatrix) -> ScoreMatrix:
    """Ablation variant: every cell scores ``1 - conf``."""
    conf = _check_confidences(conf)
    return np.clip(1.0 - conf, 0.0, 1.0)


def init_pseudo_labels(bag: Bag, rng: np.random.Generator) -> PseudoLabelMatrix:
    """A uniformly random feasible label matrix for the bag.

    Permutes the multiset holding ``k_c`` copies of each class over the
    columns, so every feasible matrix is equally likely.
    """
    classes = np.repeat(np.arange(bag.num_classes, dtype=np.int64), bag.class_counts)
    return PseudoLabelMatrix.from_labels(rng.permutation(classes), bag.num_classes)


@dataclass(frozen=True)
class PerBagStream:
    """Random streams keyed by (master seed, bag id, purpose, epoch).

    Key-derived generators make every draw independent of processing order:
    bag 7's epoch-3 perturbation is the same whether bags run serially or in
    parallel.
    """

    master_seed: int
    bag_id: int

    def _generator(self, *key: int) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.master_seed,
                                     spawn_key=(self.bag_id, *key))
        return np.random.default_rng(seq)

    def init_generator(self) -> np.random.Generator:
        return self._generator(_STREAM_INIT)

    def perturbation(self, epoch: int, shape: tuple[int, int]) -> np.ndarray:
        return self._generator(_STREAM_PERTURB, epoch).standard_normal(shape)


class BagLabelerState:
    """Mutable per-bag decision state carried across epochs."""

    def __init__(self, bag: Bag, initial_labels: PseudoLabelMatrix,
                 stream: PerBagStream, audit_regret: bool = False):
        if not _labels_feasible(initial_labels, bag):
            raise ValueError("initial labels are not feasible for the bag")
        self.bag = bag
        self.current_labels = initial_labels
        self.cumulative_unlikelihood = np.zeros((bag.num_classes, bag.size))
        self.epoch = 0
        self.stream = stream
        self.loss_history: list[np.ndarray] | None = [] if audit_regret else None
        self.decision_history: list[PseudoLabelMatrix] | None = [] if audit_regret else None


def new_bag_state(bag: Bag, master_seed: int, cfg: LabelerConfig,
                  bag_id: int | None = None) -> BagLabelerState:
    """Create a state with uniformly random initial labels from the bag's stream."""
    stream = PerBagStream(master_seed, bag.bag_id if bag_id is None else bag_id)
    initial = init_pseudo_labels(bag, stream.init_generator())
    return BagLabelerState(bag, initial, stream, audit_regret=cfg.audit_regret)


def _labels_feasible(labels: PseudoLabelMatrix, bag: Bag) -> bool:
    return (labels.num_classes == bag.num_classes
            and labels.bag_size == bag.size
            and bool((labels.row_sums() == bag.class_counts).all()))


def _observe(state: BagLabelerState, new_L: np.ndarray) -> np.ndarray:
    new_L = np.asarray(new_L, dtype=np.float64)
    if new_L.shape != state.cumulative_unlikelihood.shape:
        raise ValueError("loss matrix shape does not match the bag")
    if not np.isfinite(new_L).all():
        raise ValueError("loss matrix must be finite")
    if state.loss_history is not None:
        state.loss_history.append(new_L.copy())
        state.decision_history.append(state.current_labels)
    state.cumulative_unlikelihood = state.cumulative_unlikelihood + new_L
    state.epoch += 1
    return new_L


def fpl_update(state: BagLabelerState, new_L: ScoreMatrix,
               cfg: LabelerConfig) -> PseudoLabelMatrix:
    """Perturbed-leader step: solve over cumulative loss plus fresh noise."""
    if Strategy(cfg.strategy) is not Strategy.FPL:
        raise ValueError(f"fpl_update called with strategy {cfg.strategy}")
    _observe(state, new_L)
    noise = state.stream.perturbation(state.epoch,
                                      state.cumulative_unlikelihood.shape)
    scale = cfg.eta * (state.epoch if cfg.perturbation_grows_with_epoch else 1.0)
    costs = state.cumulative_unlikelihood + scale * noise
    decided = solve_assignment(TransportInstance(costs, state.bag.class_counts))
    state.current_labels = decided
    return decided


def greedy_update(state: BagLabelerState, new_L: ScoreMatrix) -> PseudoLabelMatrix:
    """Leader step without perturbation: solve over the cumulative loss."""
    _observe(state, new_L)
    decided = solve_assignment(
        TransportInstance(state.cumulative_unlikelihood, state.bag.class_counts))
    state.current_labels = decided
    return decided


def naive_update(bag: Bag, new_L: ScoreMatrix) -> PseudoLabelMatrix:
    """Stateless step: solve over the latest loss matrix only."""
    new_L = np.asarray(new_L, dtype=np.float64)
    return solve_assignment(TransportInstance(new_L, bag.class_counts))


def apply_update(state: BagLabelerState, new_L: ScoreMatrix,
                 cfg: LabelerConfig) -> PseudoLabelMatrix:
    """Dispatch one epoch's decision according to the configured strategy."""
    strategy = Strategy(cfg.strategy)
    if strategy is Strategy.FPL:
        return fpl_update(state, new_L, cfg)
    if strategy is Strategy.GREEDY:
        return greedy_update(state, new_L)
    _observe(state, new_L)
    decided = naive_update(state.bag, new_L)
    state.current_labels = decided
    return decided


def measure_regret(decision_history: list[PseudoLabelMatrix],
                   loss_history: list[ScoreMatrix], bag: Bag) -> float:
    """Played cumulative loss minus the best fixed assignment in hindsight.

    The hindsight optimum is computed exactly by solving the assignment over
    the summed loss matrices, so the result is nonnegative up to float
    round-off.
    """
    if not decision_history or not loss_history:
        raise ValueError("regret needs non-empty decision and loss histories")
    if len(decision_history) != len(loss_history):
        raise ValueError("decision and loss histories must have equal length")
    played = 0.0
    total = np.zeros((bag.num_classes, bag.size))
    for decided, loss in zip(decision_history, loss_history):
        loss = np.asarray(loss, dtype=np.float64)
        played += assignment_objective(decided, loss)
        total += loss
    best = solve_assignment(TransportInstance(total, bag.class_counts))
    return played - assignment_objective(best, total)
