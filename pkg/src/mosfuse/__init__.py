"""MOS prediction by fusing spectrogram-image features with SSL speech features."""

from .objective import LossConfig, combined_loss, contrastive_loss, mse_loss

__version__ = "0.1.0"

__all__ = ["LossConfig", "combined_loss", "contrastive_loss", "mse_loss", "__version__"]
