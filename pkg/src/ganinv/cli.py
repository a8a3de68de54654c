"""Command-line entry point: ``ganinv {train,invert,generate,gradcheck,metrics}``.

Exit status is 0 on success, 1 on a runtime or numeric failure and 2 on a
usage error (bad flags, inconsistent options).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ganinv import nn
from ganinv.errors import ConfigError, GanInvError
from ganinv.gradcheck import latent_gradient_audit
from ganinv.inversion import InversionConfig, invert_batch, mean_abs_pixel_error, parse_constraint
from ganinv.modelio import (atomic_write, load_idx_images, load_weights, parse_arch_config,
                            read_csv, resolve_config, save_weights, write_csv, write_image_grid,
                            write_pair_grid)
from ganinv.prior import init_latents, parse_prior
from ganinv.train import TrainConfig, train_gan

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, obj):
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _bn_mode(text):
    return None if text == "auto" else nn.BnMode(text)


def _net_seed(seed, role):
    return np.random.default_rng([seed, role])


# ---------------------------------------------------------------- subcommands

def cmd_train(args):
    prior = parse_prior(args.prior)
    arch_g, arch_d = resolve_config(args.arch_g), resolve_config(args.arch_d)
    cfg = TrainConfig(iterations=args.iters, batch_size=args.batch, learning_rate=args.lr,
                      prior=prior, seed=args.seed)
    images = load_idx_images(args.data, limit=args.limit).images
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "train", "arch_g": arch_g.text, "arch_d": arch_d.text, "data": args.data,
        "images": int(images.shape[0]), "iterations": cfg.iterations, "batch": cfg.batch_size,
        "lr": cfg.learning_rate, "beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps,
        "prior": str(prior), "seed": cfg.seed, "init_seeds": {"g": [args.seed, 1],
                                                             "d": [args.seed, 2]},
    }
    _write_json(out.with_name(out.name + ".config.json"), resolved)
    g = arch_g.build(_net_seed(args.seed, 1))
    d = arch_d.build(_net_seed(args.seed, 2))
    g, d, history = train_gan(g, d, images, cfg)
    save_weights(g, out)
    save_weights(d, out.with_name(out.name + ".disc"))
    write_csv(out.with_name(out.name + ".loss.csv"), ["iteration", "d_loss", "g_loss"], history)
    print(f"trained {cfg.iterations} iterations; generator weights in {out}")
    return 0


def _invert_config(args, prior):
    policy = parse_constraint(args.constraint)
    policy.check(prior)
    return InversionConfig(alpha=args.alpha, optimizer=args.optimizer, policy=policy,
                           bn_mode=_bn_mode(args.bn), max_iters=args.iters, tol=args.tol,
                           patience=args.patience, restarts=args.restarts, seed=args.seed)


def cmd_invert(args):
    prior = parse_prior(args.prior)
    cfg = _invert_config(args, prior)
    arch = resolve_config(args.arch_g)
    g = load_weights(args.weights, arch)
    batch = load_idx_images(args.images, limit=args.count, offset=args.offset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {
        "command": "invert", "weights": args.weights, "arch_g": arch.text,
        "images": args.images, "offset": batch.start, "count": batch.stop - batch.start,
        "prior": str(prior), "constraint": str(cfg.policy), "bn": cfg.resolved_bn_mode(g).value,
        "optimizer": cfg.optimizer, "alpha": cfg.alpha, "beta1": cfg.beta1, "beta2": cfg.beta2,
        "eps": cfg.eps, "max_iters": cfg.max_iters, "tol": cfg.tol, "patience": cfg.patience,
        "restarts": cfg.restarts, "seed": cfg.seed, "reduction": cfg.reduction,
    }
    _write_json(out / "config.json", resolved)
    res = invert_batch(g, batch.images, prior, cfg)
    write_csv(out / "z_star.csv", [f"z{k}" for k in range(res.z_star.shape[1])], res.z_star)
    write_csv(out / "loss.csv", ["iteration", "loss"], enumerate(res.loss_history))
    write_csv(out / "mae.csv", ["image", "mae"],
              ((batch.start + k, v) for k, v in enumerate(res.per_image_mae)))
    write_pair_grid(batch.images, res.reconstructions, out / "pairs.pgm")
    print(f"mean absolute pixel error {res.mean_mae:.6f} over {len(res.per_image_mae)} images "
          f"({res.iterations_used} iterations, restart {res.restart_index_chosen})")
    return 0


def cmd_generate(args):
    prior = parse_prior(args.prior)
    arch = resolve_config(args.arch_g)
    g = load_weights(args.weights, arch)
    z = init_latents(prior, args.count, g.latent_dim, args.seed)
    mode = nn.BnMode(args.bn)
    if mode is nn.BnMode.BATCH_STATS and args.count < 2:
        raise ConfigError("--bn batch needs --count of at least 2")
    images, _ = nn.forward(g, z, mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image_grid(images, args.columns, out)
    print(f"wrote {args.count} samples to {out}")
    return 0


def cmd_gradcheck(args):
    arch = resolve_config(args.arch_g)
    g = load_weights(args.weights, arch) if args.weights else arch.build(args.seed)
    err, _, _ = latent_gradient_audit(g, batch=args.batch, h=args.h, seed=args.seed)
    ok = err <= GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOL:g})")
    return 0 if ok else 1


def cmd_metrics(args):
    recon_dir = Path(args.recon_dir)
    resolved = json.loads((recon_dir / "config.json").read_text())
    _, rows = read_csv(recon_dir / "z_star.csv")
    z = np.array([[float(v) for v in row] for row in rows])
    targets = load_idx_images(args.targets, limit=resolved["count"],
                              offset=resolved["offset"]).images
    arch = resolve_config(args.arch_g) if args.arch_g else parse_arch_config(resolved["arch_g"])
    g = load_weights(args.weights or resolved["weights"], arch)
    recon, _ = nn.forward(g, z, nn.BnMode(resolved["bn"]))
    per_image, mean = mean_abs_pixel_error(targets, recon)
    print(f"mean absolute pixel error {mean:.6f} over {len(per_image)} images")
    return 0


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ganinv", description="Recover GAN latent codes by gradient descent.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a GAN and save the generator")
    t.add_argument("--arch-g", default="mnist_g.cfg")
    t.add_argument("--arch-d", default="mnist_d.cfg")
    t.add_argument("--data", required=True, help="IDX image file")
    t.add_argument("--limit", type=int, default=None, help="use only the first N images")
    t.add_argument("--iters", type=int, default=500)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=0.002)
    t.add_argument("--prior", default="uniform:-1,1")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="generator weight file")
    t.set_defaults(run=cmd_train)

    v = sub.add_parser("invert", help="invert a batch of images")
    v.add_argument("--weights", required=True)
    v.add_argument("--arch-g", default="mnist_g.cfg")
    v.add_argument("--images", required=True, help="IDX image file")
    v.add_argument("--count", type=int, default=100)
    v.add_argument("--offset", type=int, default=0)
    v.add_argument("--prior", default="uniform:-1,1")
    v.add_argument("--constraint", default="none", help="none | clip | reg:g1,g2")
    v.add_argument("--bn", choices=("auto", "batch", "fixed"), default="auto")
    v.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    v.add_argument("--alpha", type=float, default=0.01)
    v.add_argument("--iters", type=int, default=1000)
    v.add_argument("--tol", type=float, default=1e-5)
    v.add_argument("--patience", type=int, default=10)
    v.add_argument("--restarts", type=int, default=1)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(run=cmd_invert)

    gen = sub.add_parser("generate", help="sample the prior and save an image grid")
    gen.add_argument("--weights", required=True)
    gen.add_argument("--arch-g", default="mnist_g.cfg")
    gen.add_argument("--count", type=int, default=64)
    gen.add_argument("--columns", type=int, default=8)
    gen.add_argument("--prior", default="uniform:-1,1")
    gen.add_argument("--bn", choices=("batch", "fixed"), default="batch")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="PGM file")
    gen.set_defaults(run=cmd_generate)

    c = sub.add_parser("gradcheck", help="finite-difference audit of the latent gradient")
    c.add_argument("--arch-g", default="mnist_g.cfg")
    c.add_argument("--weights", default=None, help="default: seeded random weights")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--batch", type=int, default=4)
    c.add_argument("--h", type=float, default=1e-5)
    c.set_defaults(run=cmd_gradcheck)

    m = sub.add_parser("metrics", help="recompute reconstruction error of an invert run")
    m.add_argument("--targets", required=True, help="IDX image file the run inverted")
    m.add_argument("--recon-dir", required=True, help="output directory of `invert`")
    m.add_argument("--weights", default=None, help="override the recorded weight file")
    m.add_argument("--arch-g", default=None, help="override the recorded architecture")
    m.set_defaults(run=cmd_metrics)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.run(args)
    except ConfigError as exc:
        print(f"ganinv {args.command}: {exc}", file=sys.stderr)
        return 2
    except (GanInvError, OSError, ValueError) as exc:
        print(f"ganinv {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
