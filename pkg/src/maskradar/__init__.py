"""Radar object detection on range-azimuth sequences with shift operators,
3D window attention and class masking attention, in plain numpy."""
from .config import Config, load_config, toy_config
from .network import MaskRadarNet, loss, train_step
from .numerics import Adam

__all__ = ["Adam", "Config", "MaskRadarNet", "load_config", "loss", "toy_config", "train_step"]
__version__ = "0.1.0"
