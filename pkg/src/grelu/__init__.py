"""Graph-adaptive rectifiers for graph neural networks, on a small numpy autodiff core."""

from .activations import ActivationSpec, activate, build_activation
from .adaptive import GReLU, GReluConfig, HyperWeights, grelu_forward, make_variant
from .autodiff import SparseMatrix, Tensor, backward, finite_diff_check
from .diffusion import DiffusionConfig, diffuse_features, ppr_exact, ppr_power
from .graph import DataSplit, Graph, karate_club, load_graph, random_split, save_graph, sym_normalize, synthetic_sbm
from .models import ModelConfig, build_model, model_forward
from .training import TrainConfig, run_protocol, train_one

__version__ = "0.1.0"

__all__ = [
    "ActivationSpec", "DataSplit", "DiffusionConfig", "GReLU", "GReluConfig", "Graph", "HyperWeights",
    "ModelConfig", "SparseMatrix", "Tensor", "TrainConfig", "activate", "backward", "build_activation",
    "build_model", "diffuse_features", "finite_diff_check", "grelu_forward", "karate_club", "load_graph",
    "make_variant", "model_forward", "ppr_exact", "ppr_power", "random_split", "run_protocol", "save_graph",
    "sym_normalize", "synthetic_sbm", "train_one",
]
