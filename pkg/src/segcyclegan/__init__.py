"""Segmentation-guided CycleGAN for SAR-to-optical translation."""

__version__ = "0.1.0"
