"""Adam and a minimal alternating GAN trainer producing "pre-trained" generators."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ganinv import nn
from ganinv.errors import ConfigError, DimensionError, TrainingDivergenceError
from ganinv.prior import PriorSpec, Uniform

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7


# ---------------------------------------------------------------- parameter trees

def tree_map(fn, *trees):
    """Apply ``fn`` leafwise over matching nests of tuples/lists/dicts of arrays."""
    first = trees[0]
    if isinstance(first, dict):
        if any(set(t) != set(first) for t in trees[1:]):
            raise DimensionError("parameter dicts have different keys")
        return {k: tree_map(fn, *(t[k] for t in trees)) for k in first}
    if isinstance(first, (list, tuple)):
        if any(len(t) != len(first) for t in trees[1:]):
            raise DimensionError("parameter lists have different lengths")
        return type(first)(tree_map(fn, *parts) for parts in zip(*trees))
    arrays = [np.asarray(t, dtype=np.float64) for t in trees]
    if any(a.shape != arrays[0].shape for a in arrays[1:]):
        raise DimensionError(f"shape mismatch: {[a.shape for a in arrays]}")
    return fn(*arrays)


def tree_leaves(tree):
    if isinstance(tree, dict):
        return [leaf for k in tree for leaf in tree_leaves(tree[k])]
    if isinstance(tree, (list, tuple)):
        return [leaf for t in tree for leaf in tree_leaves(t)]
    return [tree]


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0

    @classmethod
    def zeros_like(cls, variables) -> "AdamState":
        zeros = tree_map(np.zeros_like, variables)
        return cls(zeros, tree_map(np.zeros_like, variables), 0)


def adam_step(variables, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_variables, new_state)``.

    Inputs are not modified.
    """
    state = AdamState(tree_map(np.copy, state.m), tree_map(np.copy, state.v), state.t)
    return _adam_update(variables, grads, state, lr, beta1, beta2, eps), state


def _adam_update(variables, grads, state: AdamState, lr, beta1, beta2, eps):
    """Adam with the moment buffers of ``state`` updated in place.

    The new variables are fresh read-only arrays, so a Network adopts them
    without copying.
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t

    def update(x, g, m, v):
        # m = beta1 m + (1 - beta1) g;  v = beta2 v + (1 - beta2) g^2
        scratch = np.multiply(g, 1.0 - beta1)
        m *= beta1
        m += scratch
        np.multiply(g, g, out=scratch)
        scratch *= 1.0 - beta2
        v *= beta2
        v += scratch
        denom = np.divide(v, c2, out=scratch)
        np.sqrt(denom, out=denom)
        denom += eps
        step = np.divide(m, c1)
        step *= lr
        step /= denom
        new = np.subtract(x, step, out=step)
        new.flags.writeable = False
        return new

    _check_same_structure(variables, grads, state.m, state.v)
    return tree_map(update, variables, grads, state.m, state.v)


def _check_same_structure(*trees):
    tree_map(lambda *leaves: None, *trees)


# ---------------------------------------------------------------- adversarial losses

def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), LOG_CLAMP, 1.0 - LOG_CLAMP)


def discriminator_loss(d_real, d_fake):
    """-mean ln D(x) - mean ln(1 - D(G(z))) with probabilities clamped to [1e-7, 1-1e-7].

    Returns ``(loss, grad_real, grad_fake)``; gradients are evaluated at the
    clamped values.
    """
    r, f = _clamp(d_real), _clamp(d_fake)
    loss = -np.mean(np.log(r)) - np.mean(np.log1p(-f))
    return float(loss), -1.0 / (r * r.size), 1.0 / ((1.0 - f) * f.size)


def generator_loss(d_fake):
    """Non-saturating generator objective -mean ln D(G(z)); returns ``(loss, grad)``."""
    f = _clamp(d_fake)
    return float(-np.mean(np.log(f))), -1.0 / (f * f.size)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    iterations: int = 500
    batch_size: int = 128
    learning_rate: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    prior: PriorSpec = field(default_factory=Uniform)
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")


def _blend(net, stats, momentum=nn.BN_MOMENTUM):
    params = [dict(p) for p in net.params]
    for i, (mean, var) in stats.items():
        params[i]["running_mean"] = momentum * params[i]["running_mean"] + (1 - momentum) * mean
        params[i]["running_var"] = momentum * params[i]["running_var"] + (1 - momentum) * var
    return params


def _add(a, b):
    return tree_map(np.add, a, b)


def _ends_in_sigmoid(d):
    last = d.layers[-1]
    return isinstance(last, nn.Activation) and last.kind == "sigmoid"


def _d_backward(d, trace, grad_prob, label, need_input):
    """Backpropagate a cross-entropy gradient through D.

    When D ends in a sigmoid the gradient is taken with respect to its
    logits, (D - label) / n, which stays informative when the sigmoid
    saturates; ``grad_prob`` (the clamped-loss gradient) is used otherwise.
    """
    if _ends_in_sigmoid(d):
        p = trace.output
        return nn.backward(d, trace, (p - label) / p.size, need_input=need_input,
                           need_params=not need_input, start=len(d.layers) - 1)
    return nn.backward(d, trace, grad_prob, need_input=need_input, need_params=not need_input)


def train_gan(g: nn.Network, d: nn.Network, images, cfg: TrainConfig, progress=None):
    """Alternate one discriminator and one generator Adam step per iteration.

    ``images`` is an (N, C, H, W) array in [0, 1]. Both networks run batch norm
    on batch statistics; the running statistics are blended in with momentum
    0.9 after every step. Returns ``(g, d, history)`` where ``history`` lists
    ``(iteration, d_loss, g_loss)`` tuples.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != g.output_shape or images.shape[1:] != d.input_shape:
        raise DimensionError(
            f"data {images.shape[1:]}, generator {g.output_shape}, discriminator {d.input_shape}")
    if images.min() < 0 or images.max() > 1:
        raise ConfigError("training images must lie in [0, 1]")
    if images.shape[0] < cfg.batch_size:
        raise ConfigError(f"dataset has {images.shape[0]} images, batch is {cfg.batch_size}")
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.batch_size
    g_opt = AdamState.zeros_like(g.trainable())
    d_opt = AdamState.zeros_like(d.trainable())
    adam = (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    bs = nn.BnMode.BATCH_STATS
    order, cursor = rng.permutation(images.shape[0]), 0
    history = []
    for it in range(cfg.iterations):
        if cursor + batch > order.size:
            order, cursor = rng.permutation(images.shape[0]), 0
        real = images[order[cursor:cursor + batch]]
        cursor += batch
        z = cfg.prior.sample(rng, (batch, g.latent_dim))

        fake, g_trace = nn.forward(g, z, bs)

        # discriminator step: real labelled 1, generated labelled 0
        d_real, real_trace = nn.forward(d, real, bs)
        d_fake, fake_trace = nn.forward(d, fake, bs)
        d_loss, g_real, g_fake = discriminator_loss(d_real, d_fake)
        d_grads = _add(_d_backward(d, real_trace, g_real, 1.0, False)[1],
                       _d_backward(d, fake_trace, g_fake, 0.0, False)[1])
        d_params = _adam_update(d.trainable(), d_grads, d_opt, *adam)
        d_new = d.with_trainable(d_params)
        d_new = d_new.with_params(_blend(d_new, real_trace.batch_stats))
        d_new = d_new.with_params(_blend(d_new, fake_trace.batch_stats))
        d = d_new

        # generator step through the updated discriminator, same generated batch
        d_out, out_trace = nn.forward(d, fake, bs)
        g_loss, g_out = generator_loss(d_out)
        grad_fake = _d_backward(d, out_trace, g_out, 1.0, True)[0]
        g_grads = nn.backward_params(g, g_trace, grad_fake)
        g_params = _adam_update(g.trainable(), g_grads, g_opt, *adam)
        g = g.with_trainable(g_params)
        g = g.with_params(_blend(g, g_trace.batch_stats))

        if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
            raise TrainingDivergenceError("non-finite training loss", iteration=it)
        history.append((it, d_loss, g_loss))
        if progress is not None:
            progress(it, d_loss, g_loss)
        elif it % 50 == 0 or it == cfg.iterations - 1:
            log.info("iter %d  d_loss %.4f  g_loss %.4f", it, d_loss, g_loss)
    return g, d, history


def discriminator_accuracy(g: nn.Network, d: nn.Network, real, prior: PriorSpec, seed=0) -> float:
    """Fraction of a balanced real/generated set that D classifies correctly at 0.5.

    Real and generated halves are scored as separate batch-statistics batches,
    the way the discriminator saw them in training.
    """
    real = np.asarray(real, dtype=np.float64)
    rng = np.random.default_rng(seed)
    z = prior.sample(rng, (real.shape[0], g.latent_dim))
    fake, _ = nn.forward(g, z, nn.BnMode.BATCH_STATS)
    p_real, _ = nn.forward(d, real, nn.BnMode.BATCH_STATS)
    p_fake, _ = nn.forward(d, fake, nn.BnMode.BATCH_STATS)
    correct = np.count_nonzero(p_real > 0.5) + np.count_nonzero(p_fake < 0.5)
    return correct / (2 * real.shape[0])

