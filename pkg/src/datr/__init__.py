"""Distortion-aware neighborhood attention, the DATR segmentation transformer and
class-wise feature aggregation for pinhole-to-panorama domain adaptation."""

__version__ = "0.1.0"
