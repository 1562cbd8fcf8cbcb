from .adam import Adam
from .layers import Conv2d, GroupNorm, Linear, SiLU, UpsampleNearest2x, sigmoid
from .unet import ArchConfig, ResBlock, TinyUNet, expected_param_count, sinusoidal_table

__all__ = [
    "Adam", "ArchConfig", "Conv2d", "GroupNorm", "Linear", "ResBlock", "SiLU",
    "TinyUNet", "UpsampleNearest2x", "expected_param_count", "sigmoid",
    "sinusoidal_table",
]
