"""Latent priors P(Z): uniform on [a, b] or Gaussian with mean mu and std sigma."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ganinv.errors import ConfigError


@dataclass(frozen=True)
class Uniform:
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.a < self.b:
            raise ConfigError(f"uniform prior needs a < b, got [{self.a}, {self.b}]")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.uniform(self.a, self.b, size=shape)

    def __str__(self):
        return f"uniform:{self.a!r},{self.b!r}"


@dataclass(frozen=True)
class Gaussian:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"gaussian prior needs sigma > 0, got {self.sigma}")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.normal(self.mu, self.sigma, size=shape)

    def __str__(self):
        return f"normal:{self.mu!r},{self.sigma!r}"


PriorSpec = Uniform | Gaussian


def parse_prior(text: str) -> PriorSpec:
    """``uniform:a,b`` or ``normal:mu,sigma`` (``gaussian:`` is accepted too)."""
    kind, _, args = text.partition(":")
    try:
        vals = [float(v) for v in args.split(",")] if args else []
    except ValueError:
        raise ConfigError(f"bad prior parameters in {text!r}") from None
    if kind == "uniform":
        return Uniform(*vals) if vals else Uniform()
    if kind in ("normal", "gaussian"):
        return Gaussian(*vals) if vals else Gaussian()
    raise ConfigError(f"unknown prior {text!r}")


def init_latents(prior: PriorSpec, batch: int, dim: int, seed) -> np.ndarray:
    """Draw a (batch, dim) latent batch i.i.d. from ``prior``; deterministic in ``seed``."""
    if batch < 1 or dim < 1:
        raise ConfigError(f"latent batch needs B >= 1 and d >= 1, got ({batch}, {dim})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return prior.sample(rng, (batch, dim))
