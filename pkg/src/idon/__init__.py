"""Invertible DeepONets with physics-informed semi-supervised training and
closed-form Gaussian-mixture posteriors for PDE inverse problems."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
