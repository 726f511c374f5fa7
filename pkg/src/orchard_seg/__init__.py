"""Fruit segmentation on colorized point clouds."""

__version__ = "0.1.0"
