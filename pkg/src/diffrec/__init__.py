"""Diffusion-based sequential recommendation.

Noises the target item's embedding through a predefined schedule, trains a
transformer denoiser with importance-sampled diffusion steps, and recommends
by seed-averaged one-shot denoising (or the full reverse chain).
"""

from .config import RunConfig, load_config
from .data import InteractionDataset, load_dataset, save_dataset, synth_generate
from .inference import InferenceConfig, infer_efficient, infer_full_chain
from .metrics import evaluate_model
from .model import DsrConfig, init_params
from .schedule import make_schedule
from .training import ImportanceSampler, train_epoch

__version__ = "0.1.0"

__all__ = [
    "DsrConfig",
    "ImportanceSampler",
    "InferenceConfig",
    "InteractionDataset",
    "RunConfig",
    "__version__",
    "evaluate_model",
    "infer_efficient",
    "infer_full_chain",
    "init_params",
    "load_config",
    "load_dataset",
    "make_schedule",
    "save_dataset",
    "synth_generate",
    "train_epoch",
]
