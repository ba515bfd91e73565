"""Head-gated low-rank adaptation on a toy transformer, with a synthetic
multi-domain benchmark and a reproducible experiment harness."""

from .data import DomainDataset, DomainSpec, lodo_split, make_dataset
from .encoder import Encoder, EncoderConfig, GatedEncoderModel, load_model, save_model
from .errors import ConfigError, NumericError, ShapeError
from .experiments import ExperimentConfig, run_lodo, run_single
from .gating import GateConfig, GateParams
from .lora import HeadAwareLoRA, LoRAConfig
from .losses import ClassAnchors, KernelSpec, cls_loss, mmd_layered, mmd_pair
from .tensor import Parameter, Tensor, no_grad, reverse_grad
from .trainer import TrainConfig, Trainer, train_run

__version__ = "0.1.0"

__all__ = [
    "ClassAnchors", "ConfigError", "DomainDataset", "DomainSpec", "Encoder",
    "EncoderConfig", "ExperimentConfig", "GateConfig", "GateParams",
    "GatedEncoderModel", "HeadAwareLoRA", "KernelSpec", "LoRAConfig",
    "NumericError", "Parameter", "ShapeError", "Tensor", "TrainConfig",
    "Trainer", "cls_loss", "lodo_split", "load_model", "make_dataset",
    "mmd_layered", "mmd_pair", "no_grad", "reverse_grad", "run_lodo",
    "run_single", "save_model", "train_run",
]
