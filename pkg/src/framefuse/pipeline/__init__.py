from .config import CALCULATORS, VARIANTS, TrainConfig, variant_config
from .data import Dataset, load_dataset, pad_and_mask, stack_frames, synth_dataset
from .featio import read_feat, write_feat
from .optim import adam_step, cosine_lr
from .train import Checkpoint, TrainingError, evaluate, train

__all__ = [
    "CALCULATORS",
    "VARIANTS",
    "Checkpoint",
    "Dataset",
    "TrainConfig",
    "TrainingError",
    "adam_step",
    "cosine_lr",
    "evaluate",
    "load_dataset",
    "pad_and_mask",
    "read_feat",
    "stack_frames",
    "synth_dataset",
    "train",
    "variant_config",
    "write_feat",
]
