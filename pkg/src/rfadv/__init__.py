"""Adversarial risk of random-features regression: limit theory and finite-size experiments."""

__version__ = "0.1.0"
