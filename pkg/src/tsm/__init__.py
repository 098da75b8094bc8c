"""Temporal-spatial mapping of frame features into VideoMaps, classified by a
small attention-gated ConvNet head built on a numpy autodiff core."""

__version__ = "0.1.0"
