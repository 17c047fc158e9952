"""unlearnkit: desk-scale class forgetting with five paradigms and a full
evaluation harness (UA, MIA-Efficacy, RA, TA, RTE, memory proxy)."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    ClassSplit,
    Dataset,
    balanced_mia_sample,
    batch_iter,
    blob_train_test,
    gen_synthetic_blobs,
    load_cifar10_bin,
    load_idx,
    split_by_class,
)
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FormatError,
    IntegrityError,
    NumericError,
    StateError,
    UnlearnkitError,
)
from .evaluate import (
    MetricsReport,
    MiaPredictor,
    accuracy,
    build_report,
    confidence_feature,
    evaluate_model,
    loss_split,
    mia_efficacy,
    train_mia,
    unlearning_accuracy,
)
from .layers import Param
from .lora import LoraAdapter, LoraConfig, attach_adapters, lora_trainable_count, merge_adapter, merge_all
from .models import Model, build_from_descriptor, build_small_cnn, build_tiny_vit, count_params
from .optim import Adam, AdamState, adam_step
from .pipeline import PARADIGMS, Paradigm, RunRecord, memory_proxy, run_paradigm, train_epochs
from .pruning import (
    PruneTargetSpec,
    apply_prune,
    compute_structure_norms,
    enforce_masks,
    select_prune_set,
    sparsity_report,
)
from .tensor import conv2d, finite_difference_grad, matmul, softmax_cross_entropy

__version__ = "0.1.0"
