"""Latent recovery: find z* with G(z*) close to target images by first-order descent
on binary cross-entropy, with optional clipping or prior-statistics regularization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ganinv import nn
from ganinv.errors import ConfigError, DimensionError, DomainError, ModeError, NumericError
from ganinv.prior import Gaussian, PriorSpec, Uniform, init_latents, parse_prior
from ganinv.train import AdamState, adam_step

__all__ = [
    "Uniform", "Gaussian", "PriorSpec", "parse_prior", "init_latents",
    "NoConstraint", "ClipToSupport", "StatsRegularize", "ConstraintPolicy", "parse_constraint",
    "InversionConfig", "InversionResult", "bce_loss", "stats_regularizer", "clip_to_support",
    "invert_batch", "mean_abs_pixel_error", "cross_gradient_probe",
]

BCE_CLAMP = 1e-7
STD_EPS = 1e-12


# ---------------------------------------------------------------- constraint policies

@dataclass(frozen=True)
class NoConstraint:
    def check(self, prior):
        pass

    def __str__(self):
        return "none"


@dataclass(frozen=True)
class ClipToSupport:
    """Project z back onto [a, b] after every step (uniform priors only)."""

    def check(self, prior):
        if not isinstance(prior, Uniform):
            raise ConfigError("clipping needs a uniform prior")

    def __str__(self):
        return "clip"


@dataclass(frozen=True)
class StatsRegularize:
    """Penalize batch mean/std of z drifting from the prior's (Gaussian priors only)."""
    gamma1: float = 1.0
    gamma2: float = 1.0

    def __post_init__(self):
        if not (self.gamma1 >= 0 and self.gamma2 >= 0):
            raise ConfigError(f"regularizer weights must be non-negative, got "
                              f"{self.gamma1}, {self.gamma2}")

    def check(self, prior):
        if not isinstance(prior, Gaussian):
            raise ConfigError("statistics regularization needs a gaussian prior")

    def __str__(self):
        return f"reg:{self.gamma1!r},{self.gamma2!r}"


ConstraintPolicy = NoConstraint | ClipToSupport | StatsRegularize


def parse_constraint(text: str) -> ConstraintPolicy:
    """``none``, ``clip`` or ``reg[:g1,g2]``."""
    kind, _, args = text.partition(":")
    if kind == "none" and not args:
        return NoConstraint()
    if kind == "clip" and not args:
        return ClipToSupport()
    if kind == "reg":
        if not args:
            return StatsRegularize()
        try:
            g1, g2 = (float(v) for v in args.split(","))
        except ValueError:
            raise ConfigError(f"expected reg:g1,g2, got {text!r}") from None
        return StatsRegularize(g1, g2)
    raise ConfigError(f"unknown constraint {text!r}")


# ---------------------------------------------------------------- losses and projections

def _check_target(target):
    target = np.asarray(target, dtype=np.float64)
    if not np.isfinite(target).all() or target.min() < 0 or target.max() > 1:
        raise DomainError("target pixels must lie in [0, 1]")
    return target


def bce_loss(target, recon):
    """Mean binary cross-entropy over every pixel of the batch.

    ``recon`` is clamped to [1e-7, 1 - 1e-7]. Returns ``(loss, grad_recon)``
    with the gradient evaluated at the clamped reconstruction.
    """
    x = _check_target(target)
    g = np.clip(np.asarray(recon, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    if x.shape != g.shape:
        raise DimensionError(f"target {x.shape} and reconstruction {g.shape} differ")
    n = x.size
    loss = -np.mean(x * np.log(g) + (1.0 - x) * np.log1p(-g))
    grad = (-x / g + (1.0 - x) / (1.0 - g)) / n
    return float(loss), grad


def _per_sample_bce(x, recon):
    """BCE of each sample, averaged over its own pixels; shape (B,)."""
    g = np.clip(recon, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_pixel = -(x * np.log(g) + (1.0 - x) * np.log1p(-g))
    return per_pixel.reshape(x.shape[0], -1).mean(axis=1)


def stats_regularizer(z, prior: Gaussian, gamma1: float = 1.0, gamma2: float = 1.0):
    """gamma1 (mu - mean z)^2 + gamma2 (sigma - std z)^2 over all entries of z jointly.

    Returns ``(penalty, grad)``. The std derivative divides by
    sqrt(var + 1e-12) so a constant batch still has a finite gradient.
    Zero-weighted terms are skipped entirely.
    """
    if not isinstance(prior, Gaussian):
        raise ConfigError("statistics regularization needs a gaussian prior")
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    mean = z.mean()
    dev = z - mean
    var = np.mean(dev * dev)
    std = math.sqrt(var)
    penalty = 0.0
    grad = np.zeros_like(z)
    if gamma1:
        penalty += gamma1 * (prior.mu - mean) ** 2
        grad -= 2.0 * gamma1 * (prior.mu - mean) / n
    if gamma2:
        penalty += gamma2 * (prior.sigma - std) ** 2
        grad -= (2.0 * gamma2 * (prior.sigma - std) / (n * math.sqrt(var + STD_EPS))) * dev
    return float(penalty), grad


def clip_to_support(z, prior: Uniform) -> np.ndarray:
    if not isinstance(prior, Uniform):
        raise ConfigError("clipping needs a uniform prior")
    return np.clip(np.asarray(z, dtype=np.float64), prior.a, prior.b)


def mean_abs_pixel_error(targets, reconstructions):
    """Returns ``(per_image, mean)``: mean |x - G(z*)| per image, then over the batch."""
    x = np.asarray(targets, dtype=np.float64)
    r = np.asarray(reconstructions, dtype=np.float64)
    if x.shape != r.shape:
        raise DimensionError(f"targets {x.shape} and reconstructions {r.shape} differ")
    if x.ndim < 2:
        raise DimensionError("expected a batch of images")
    per_image = np.abs(x - r).reshape(x.shape[0], -1).mean(axis=1)
    return per_image, float(per_image.mean())


# ---------------------------------------------------------------- inversion loop

@dataclass(frozen=True)
class InversionConfig:
    alpha: float = 0.01
    optimizer: str = "adam"          # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    policy: ConstraintPolicy = field(default_factory=NoConstraint)
    bn_mode: nn.BnMode | None = None  # None: batch statistics if G has batch norm
    max_iters: int = 1000
    tol: float = 1e-5
    patience: int = 10
    restarts: int = 1
    seed: int = 0
    reduction: str = "mean"          # "mean" over the batch, or "per_sample" (sum of means)
    record_trajectory: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iters < 1 or self.restarts < 1 or self.patience < 1:
            raise ConfigError("max_iters, restarts and patience must be at least 1")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.reduction not in ("mean", "per_sample"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.bn_mode is not None:
            object.__setattr__(self, "bn_mode", nn.BnMode(self.bn_mode))

    def resolved_bn_mode(self, g: nn.Network) -> nn.BnMode:
        if self.bn_mode is not None:
            return self.bn_mode
        return nn.BnMode.BATCH_STATS if g.has_batchnorm else nn.BnMode.FIXED_STATS


@dataclass
class InversionResult:
    z_star: np.ndarray
    reconstructions: np.ndarray
    loss_history: list
    per_image_mae: np.ndarray
    mean_mae: float
    iterations_used: int
    restart_index_chosen: int
    final_bce: float
    z_history: list | None = None


def _sigmoid_terminated(g):
    last = g.layers[-1]
    return isinstance(last, nn.Activation) and last.kind == "sigmoid"


def _objective(g, z, x, mode, per_sample, policy, prior):
    """Loss, BCE and gradient with respect to z at the current iterate."""
    recon, trace = nn.forward(g, z, mode)
    b = x.shape[0]
    if per_sample:
        bce = float(np.sum(_per_sample_bce(x, recon)))
        scale = x.size // b
    else:
        bce = bce_loss(x, recon)[0]
        scale = x.size
    if _sigmoid_terminated(g):
        # exact derivative through the final sigmoid: d BCE / d logit = (G - x) / n
        grad_z = nn.backward(g, trace, (recon - x) / scale, need_params=False,
                             start=len(g.layers) - 1)[0]
    else:
        grad_recon = bce_loss(x, recon)[1] * (b if per_sample else 1)
        grad_z = nn.backward_input(g, trace, grad_recon)
    loss = bce
    if isinstance(policy, StatsRegularize):
        penalty, grad_pen = stats_regularizer(z, prior, policy.gamma1, policy.gamma2)
        if policy.gamma1 or policy.gamma2:
            loss = bce + penalty
            grad_z = grad_z + grad_pen
    return loss, bce, grad_z


def _run_restart(g, x, z, prior, cfg, mode):
    per_sample = cfg.reduction == "per_sample"
    clip = isinstance(cfg.policy, ClipToSupport)
    state = AdamState.zeros_like(z) if cfg.optimizer == "adam" else None
    history, trajectory = [], [z.copy()] if cfg.record_trajectory else None
    prev, calm = None, 0
    for it in range(cfg.max_iters):
        try:
            loss, bce, grad = _objective(g, z, x, mode, per_sample, cfg.policy, prior)
        except NumericError as exc:
            raise NumericError(str(exc), iteration=it) from exc
        if not (math.isfinite(loss) and np.isfinite(grad).all()):
            raise NumericError("non-finite inversion loss", iteration=it)
        history.append(loss)
        if prev is not None:
            calm = calm + 1 if abs(loss - prev) / max(prev, 1e-12) < cfg.tol else 0
        prev = loss
        if calm >= cfg.patience:
            break
        if state is not None:
            z, state = adam_step(z, grad, state, cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps)
        else:
            z = z - cfg.alpha * grad
        if clip:
            z = clip_to_support(z, prior)
        if trajectory is not None:
            trajectory.append(z.copy())
    return z, history, trajectory


def invert_batch(g: nn.Network, targets, prior: PriorSpec, cfg: InversionConfig | None = None,
                 z_init=None) -> InversionResult:
    """Recover latent codes for ``targets`` (B, C, H, W) under generator ``g``.

    Each restart r starts from ``init_latents(prior, B, d, [seed, r])`` (or
    from ``z_init`` for the first restart) and runs until the relative loss
    change stays below ``tol`` for ``patience`` consecutive iterations or
    ``max_iters`` is reached. The restart with the lowest final BCE wins.
    """
    cfg = cfg or InversionConfig()
    cfg.policy.check(prior)
    x = _check_target(targets)
    if x.ndim != 1 + len(g.output_shape) or tuple(x.shape[1:]) != g.output_shape:
        raise DimensionError(f"targets {x.shape} do not match generator output {g.output_shape}")
    b, d = x.shape[0], g.latent_dim
    mode = cfg.resolved_bn_mode(g)
    if mode is nn.BnMode.BATCH_STATS and g.has_batchnorm and b < 2:
        raise ModeError("batch-statistics inversion needs at least 2 targets")
    best = None
    for r in range(cfg.restarts):
        if r == 0 and z_init is not None:
            z0 = np.array(z_init, dtype=np.float64)
            if z0.shape != (b, d):
                raise DimensionError(f"z_init shape {z0.shape} != {(b, d)}")
        else:
            z0 = init_latents(prior, b, d, [cfg.seed, r])
        z, history, trajectory = _run_restart(g, x, z0, prior, cfg, mode)
        recon, _ = nn.forward(g, z, mode)
        if cfg.reduction == "per_sample":
            final_bce = float(np.sum(_per_sample_bce(x, recon)))
        else:
            final_bce = bce_loss(x, recon)[0]
        if best is None or final_bce < best[0]:
            best = (final_bce, r, z, recon, history, trajectory)
    final_bce, r, z, recon, history, trajectory = best
    per_image, mean = mean_abs_pixel_error(x, recon)
    return InversionResult(z, recon, history, per_image, mean, len(history), r, final_bce,
                           trajectory)


def cross_gradient_probe(g: nn.Network, z, targets, bn_mode, i: int, j: int,
                         h: float = 1e-4) -> float:
    """Finite-difference size of dL_i/dz_j: max over coordinates of |L_i(z + h e) - L_i(z)| / h.

    L_i is sample i's own BCE (mean over its pixels).
    """
    z = np.asarray(z, dtype=np.float64)
    x = _check_target(targets)
    b = z.shape[0]
    if i == j or not (0 <= i < b and 0 <= j < b):
        raise ValueError(f"need distinct sample indices below {b}, got {i}, {j}")
    mode = nn.BnMode(bn_mode)
    base = _per_sample_bce(x, nn.forward(g, z, mode)[0])[i]
    worst = 0.0
    for k in range(z.shape[1]):
        zp = z.copy()
        zp[j, k] += h
        li = _per_sample_bce(x, nn.forward(g, zp, mode)[0])[i]
        worst = max(worst, abs(li - base) / h)
    return worst
