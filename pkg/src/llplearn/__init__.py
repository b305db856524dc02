"""Learning from label proportions via online pseudo-labeling.

Train an instance-level classifier when the only supervision is each bag's
class-proportion vector: alternate supervised training on pseudo labels with
an exact, count-constrained relabeling step driven by regret-minimizing
online decisions.
"""

from .assignment import TransportInstance, brute_force_assignment, solve_assignment
from .classifier import (
    MLP,
    Adam,
    SoftmaxLinear,
    gradient_check,
    load_checkpoint,
    predict_confidences,
    proportion_loss,
    save_checkpoint,
    train_epoch_cross_entropy,
    train_epoch_proportion_loss,
)
from .datagen import BlobSpec, generate_blobs, make_bags, split_train_validation
from .domain import (
    Bag,
    Instance,
    LLPDataset,
    PseudoLabelMatrix,
    label_proportion,
    round_counts,
    validate_feasible,
)
from .harness import (
    EpochRecord,
    ExperimentConfig,
    desk_scale_config,
    evaluate_instance_accuracy,
    mean_abs_proportion_error,
    paper_scale_config,
    run_llp_training,
    sweep_bag_sizes,
)
from .labeler import (
    BagLabelerState,
    LabelerConfig,
    compute_simple_unlikelihood,
    compute_unlikelihood,
    fpl_update,
    greedy_update,
    init_pseudo_labels,
    measure_regret,
    naive_update,
)

__version__ = "0.1.0"
