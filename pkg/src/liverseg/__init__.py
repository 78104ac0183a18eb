"""Couinaud liver-segment segmentation: NIfTI I/O, preprocessing, diffeomorphic
augmentation, a numpy LiverFormer / 3D U-Net, metrics and synthetic phantoms."""

__version__ = "0.1.0"
