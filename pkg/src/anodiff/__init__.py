"""anodiff: diffusion-based anomaly detection on synthetic phantoms.

A from-scratch denoising diffusion core (numpy), a small trainable U-Net
noise predictor with hand-derived gradients, the mask/stitch/re-sample
inpainting pipeline for pseudo-healthy reconstruction, pixel-level
segmentation metrics, a phantom data generator, and an experiment CLI.
"""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, make_schedule, simple_loss

__all__ = ["NoiseSchedule", "make_schedule", "simple_loss", "__version__"]
