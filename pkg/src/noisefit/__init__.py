"""Toy-scale SNR-guided adaptive noise fine-tuning for small transformers."""

from .analysis import epps_singleton, holm_adjust, layer_metrics
from .config import RunConfig, load_config
from .data import DatasetRecord, format_prompt, load_dataset, make_copy_task
from .model import GenerationConfig, ModelConfig, TransformerModel, build_model, generate, loraify
from .noise import NoiseConfig, NoisePlan, NoiseState, effective_sigma, inject
from .objective import LossConfig, hybrid_objective
from .snr import SNRReport, profile, select_layers
from .tensor import Rng, Tensor, backward, grad_check, no_grad
from .trainer import TrainConfig, exact_match, train

__version__ = "0.1.0"
