"""Self-distilled self-supervised learning on a small vision transformer.

SimCLR / BYOL / MoCo-v3-style training where every intermediate block's
[CLS] representation additionally learns to match the final-layer target,
plus the evaluation toolkit: k-NN, linear probing, per-layer multi-exit
evaluation, and hypersphere geometry metrics.
"""

from .config import ExperimentConfig, load_config
from .encoder import EncoderConfig, ViTEncoder
from .heads import HeadBank, HeadConfig
from .losses import LossBundle, LossConfig
from .schedules import ScheduleConfig, ScheduleState
from .trainer import Trainer, load_checkpoint, run, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "ViTEncoder", "HeadBank", "HeadConfig", "LossBundle",
    "LossConfig", "ScheduleConfig", "ScheduleState", "ExperimentConfig",
    "load_config", "Trainer", "run", "save_checkpoint", "load_checkpoint",
    "__version__",
]
