"""Routed sparse autoencoders over multi-layer residual activations, with the
baselines, toy host model, synthetic benchmark and evaluation tooling around them."""

__version__ = "0.1.0"
