"""Layered learned image codec: conventional base layer plus a learned enhancement layer."""
from .image import PlanarImage, bicubic_resample, load_image, rgb_to_yuv420, save_image, yuv_to_rgb
from .networks import CaesrModel, CodingMode, ModelConfig, build_model

__version__ = "0.1.0"
