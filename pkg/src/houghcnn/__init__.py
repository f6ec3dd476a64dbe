"""Registration-free volumetric segmentation by Hough voting on CNN features."""

from .volume import LabelVolume, Volume, VolumeFormatError, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["LabelVolume", "Volume", "VolumeFormatError", "load_volume", "save_volume", "__version__"]
