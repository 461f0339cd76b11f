"""Early-exit inference: cascaded heads, per-stage fusion, exit policies."""

from .autodiff import Tensor
from .backbone import BackboneModel, make_cnn_backbone, make_mlp_backbone, pretrain_backbone
from .bundle import ModelBundle
from .data import Dataset, DigitSpec, SpiralSpec, gen_digits, gen_spirals, read_idx, split
from .ensembles import EnsembleParams, additive_combine, geometric_combine, train_ensembles
from .heads import InternalClassifier, cascade_forward_all, head_forward, make_heads
from .metrics import hindsight_improvability, select_tau_for_budget, sweep_frontier
from .policies import PolicyConfig, evaluate_policy, run_patience_exit, run_threshold_exit
from .training import TrainConfig, grad_cosine_diagnostic, train_full_pipeline, train_heads

__all__ = [
    "Tensor", "BackboneModel", "ModelBundle", "Dataset", "DigitSpec", "SpiralSpec",
    "EnsembleParams", "InternalClassifier", "PolicyConfig", "TrainConfig",
    "additive_combine", "cascade_forward_all", "evaluate_policy", "gen_digits",
    "gen_spirals", "geometric_combine", "grad_cosine_diagnostic", "head_forward",
    "hindsight_improvability", "make_cnn_backbone", "make_heads", "make_mlp_backbone",
    "pretrain_backbone", "read_idx", "run_patience_exit", "run_threshold_exit",
    "select_tau_for_budget", "split", "sweep_frontier", "train_ensembles",
    "train_full_pipeline", "train_heads",
]
