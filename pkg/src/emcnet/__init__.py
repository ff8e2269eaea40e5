"""EMCNet: graph-network classification of electron micrographs.

Images are tokenized into patch grids with 8-neighborhood connectivity and
classified by three parallel graph encoders (master-node message passing,
hierarchical top-k pooled attention, clique-tree message passing) fused by
a softmax output layer. Everything trains through the package's own
reverse-mode autodiff tape.
"""

from .autodiff import Tape, Tensor
from .estimator import EMCNetClassifier
from .imaging import Image, generate_synthetic_dataset, load_image, load_manifest
from .model import ModelConfig, emcnet_forward, init_params, load_model, predict, save_checkpoint
from .training import TrainConfig, compute_metrics, run_experiment, train_model

__version__ = "0.1.0"

__all__ = [
    "EMCNetClassifier",
    "Image",
    "ModelConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "compute_metrics",
    "emcnet_forward",
    "generate_synthetic_dataset",
    "init_params",
    "load_image",
    "load_manifest",
    "load_model",
    "predict",
    "run_experiment",
    "save_checkpoint",
    "train_model",
]
