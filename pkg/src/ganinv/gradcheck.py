"""Central finite-difference audits of the analytic reverse passes."""

from __future__ import annotations

import numpy as np

from ganinv import nn
from ganinv.inversion import BCE_CLAMP, bce_loss

# entries smaller than this fraction of the largest gradient entry count as zero
SCALE_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float | None = None) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    ``floor`` defaults to 1e-6 of the largest |a|, so entries that are zero
    up to rounding (e.g. biases feeding batch-statistics normalization) are
    compared on an absolute scale instead of against their own noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if floor is None:
        floor = SCALE_FLOOR * float(np.abs(a).max(initial=0.0))
    floor = max(floor, np.finfo(np.float64).tiny)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(fn, x, h: float, coords=None) -> np.ndarray:
    """(fn(x + h e_k) - fn(x - h e_k)) / 2h for each flat coordinate k (or ``coords``).

    ``fn`` may return an array of terms whose sum is the function value; the
    terms are then differenced before summing, which keeps the cancellation
    error at the size of the individual terms rather than of their total.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for k in coords:
        keep = flat[k]
        flat[k] = keep + h
        up = fn(x)
        flat[k] = keep - h
        down = fn(x)
        flat[k] = keep
        out[k] = np.sum(np.subtract(up, down)) / (2 * h)
    return out.reshape(x.shape)


def latent_gradient_audit(g: nn.Network, batch: int = 4, h: float = 1e-5, seed=0,
                          mode: nn.BnMode = nn.BnMode.FIXED_STATS):
    """Compare backward_input of the mean BCE against central differences in z.

    Targets and z are drawn from ``seed``. Returns ``(max_rel_err, analytic, numeric)``.
    """
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, size=(batch, g.latent_dim))
    targets = rng.uniform(0.0, 1.0, size=(batch,) + g.output_shape)

    def loss(zz):
        # per-pixel terms of the mean BCE
        recon = np.clip(nn.forward(g, zz, mode)[0], BCE_CLAMP, 1.0 - BCE_CLAMP)
        return -(targets * np.log(recon) + (1.0 - targets) * np.log1p(-recon)) / targets.size

    out, trace = nn.forward(g, z, mode)
    analytic = nn.backward_input(g, trace, bce_loss(targets, out)[1])
    numeric = central_difference(loss, z, h)
    return float(relative_error(analytic, numeric).max()), analytic, numeric


def param_gradient_audit(net: nn.Network, batch: int = 4, h: float = 1e-5, seed=0,
                         mode: nn.BnMode = nn.BnMode.BATCH_STATS, max_coords: int | None = None):
    """Compare backward_params of <w, net(x)> (random w) against central differences.

    With ``max_coords``, each parameter tensor is audited on that many
    randomly chosen coordinates. Returns ``(max_rel_err, {layer: {name: err}})``.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(batch,) + net.input_shape)
    out, trace = nn.forward(net, x, mode)
    weights = rng.standard_normal(out.shape)
    grads = nn.backward_params(net, trace, weights)
    floor = SCALE_FLOOR * max(float(np.abs(a).max()) for p in grads for a in p.values())
    report, worst = {}, 0.0
    for i, layer_grads in enumerate(grads):
        for name, analytic in layer_grads.items():
            def loss(value, i=i, name=name):
                params = [dict(p) for p in net.params]
                params[i][name] = value
                return weights * nn.forward(net.with_params(params), x, mode)[0]

            size = analytic.size
            coords = None
            if max_coords is not None and size > max_coords:
                coords = rng.choice(size, max_coords, replace=False)
            numeric = central_difference(loss, net.params[i][name], h, coords)
            picked = np.arange(size) if coords is None else coords
            err = float(relative_error(analytic.reshape(-1)[picked],
                                       numeric.reshape(-1)[picked], floor).max())
            report.setdefault(nn.layer_name(i, net.layers[i]), {})[name] = err
            worst = max(worst, err)
    return worst, report
