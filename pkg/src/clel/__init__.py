"""Spherical latent-variable energy models trained jointly with a contrastive encoder."""

from .config import RunConfig, load_config
from .energy_model import DirectionalProjector, EnergyModel, direction, ood_score
from .errors import (ArgumentError, ChainDiverged, ClelError, ConfigError, DataError, DegenerateAggregate,
                     DegenerateFeature, DegenerateProjection, TrainingDiverged)
from .latent_encoder import JitterRotatePolicy, LatentEncoder, mode_latent, sample_latent
from .objectives import LossConfig, TrainBatch, ebm_loss, encoder_loss, nt_xent
from .sgld import ReplayBuffer, SGLDConfig, run_chain, sample_batch, sgld_step
from .trainer import load_models, train, train_step

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "ChainDiverged", "ClelError", "ConfigError", "DataError", "DegenerateAggregate",
    "DegenerateFeature", "DegenerateProjection", "DirectionalProjector", "EnergyModel", "JitterRotatePolicy",
    "LatentEncoder", "LossConfig", "ReplayBuffer", "RunConfig", "SGLDConfig", "TrainBatch", "TrainingDiverged",
    "direction", "ebm_loss", "encoder_loss", "load_config", "load_models", "mode_latent", "nt_xent", "ood_score",
    "run_chain", "sample_batch", "sample_latent", "sgld_step", "train", "train_step",
]
