"""Merge pre-trained feed-forward networks by layer-wise neuron sharing."""
from .data import Dataset, SyntheticTaskSpec, evaluate, gen_correlated_tasks, load_idx, load_mnist
from .hessian import CalibrationSet, HessianEstimate, layer_hessian, merge_hessians
from .linalg import Permutation, SpdMatrix, accumulate_outer, quadratic_form, spd_solve
from .model import (
    Layer,
    Network,
    SharedLayer,
    ZippedModel,
    forward,
    infer_task,
    load_model,
    save_model,
)
from .trainer import RetrainSchedule, TrainConfig, gradient, retrain_joint, train
from .zipper import (
    MergePlan,
    functional_difference,
    merge_sparse,
    optimal_updates,
    output_drift,
    select_pairs,
    zip_additional,
    zip_conv_layer,
    zip_layer,
    zip_models,
    zip_residual_block,
)

__version__ = "0.1.0"
