"""Force-aware trajectory GAN with a CVAE goal module."""
from .config import TINY, ModelConfig
from .losses import (
    adversarial_losses,
    cvae_loss,
    discriminator_loss,
    generator_loss,
    goal_loss,
    kl_divergence,
    total_loss,
    variety_loss,
)
from .model import ModeError, SoFGAN, load_model, save_model
from .sampling import InferenceEngine, kmeans, kmeans_select, predict_multimodal, tape_sample
from .train import EpochRecord, TrainingError, train

__all__ = [
    "TINY", "EpochRecord", "InferenceEngine", "ModeError", "ModelConfig", "SoFGAN", "TrainingError",
    "adversarial_losses", "cvae_loss", "discriminator_loss", "generator_loss", "goal_loss", "kl_divergence",
    "kmeans", "kmeans_select", "load_model", "predict_multimodal", "save_model", "tape_sample", "total_loss",
    "train", "variety_loss",
]
