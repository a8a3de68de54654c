"""Recover latent codes of a trained GAN generator by gradient descent on pixel reconstruction."""

from ganinv.inversion import (ClipToSupport, InversionConfig, InversionResult, NoConstraint,
                              StatsRegularize, bce_loss, clip_to_support, cross_gradient_probe,
                              invert_batch, mean_abs_pixel_error, stats_regularizer)
from ganinv.nn import BnMode, Network, backward_input, backward_params, forward
from ganinv.prior import Gaussian, Uniform, init_latents, parse_prior

__version__ = "0.1.0"

__all__ = [
    "BnMode", "ClipToSupport", "Gaussian", "InversionConfig", "InversionResult", "Network",
    "NoConstraint", "StatsRegularize", "Uniform", "backward_input", "backward_params", "bce_loss",
    "clip_to_support", "cross_gradient_probe", "forward", "init_latents", "invert_batch",
    "mean_abs_pixel_error", "parse_prior", "stats_regularizer",
]
