"""Latency-constrained differentiable architecture search for segmentation at desk scale."""

__version__ = "0.1.0"
