"""Breast-ultrasound diagnosis pipeline: superpixel preprocessing, U-Net
segmentation and frozen-backbone classification."""

__version__ = "0.1.0"
