"""Salient-object detection with multilevel interaction and mixed attention, on a numpy autodiff core."""

__version__ = "0.1.0"
