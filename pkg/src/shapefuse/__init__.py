"""Probabilistic 3D body shape and pose estimation toolkit.

Synthetic proxy-input generation, a trainable Gaussian-distribution
predictor, closed-form multi-input shape fusion, Monte-Carlo uncertainty
and evaluation metrics, all at desk scale.
"""

__version__ = "0.1.0"
