"""Degradation-invariant person re-identification: disentangling GAN plus feature embedding."""

__version__ = "0.1.0"
