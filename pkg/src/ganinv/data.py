"""Local MNIST files.

The sandboxed build cannot reach the canonical MNIST mirrors, so the default
dataset is the 5000-digit MNIST sample that ships inside the ``mlxtend``
wheel (500 per class, drawn from the MNIST training set). It is split with a
fixed permutation into a training file and a held-out file, both written as
IDX so the rest of the pipeline reads them exactly like the original
distribution files. Real ``*-idx3-ubyte`` files work everywhere this does.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ganinv.modelio import write_idx_images, write_idx_labels

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"
SPLIT_SEED = 20161116


def load_mlxtend_sample():
    """(images uint8 (5000, 28, 28), labels uint8 (5000,)) from mlxtend's bundled sample."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("the bundled MNIST sample needs `pip install mlxtend`") from exc
    x, y = mnist_data()
    return x.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)


def prepare_mnist(out_dir, held_out: int = 100) -> dict:
    """Write train/held-out IDX files into ``out_dir`` (idempotent); returns their paths."""
    out = Path(out_dir)
    paths = {name: out / name for name in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS)}
    if all(p.exists() for p in paths.values()):
        return {k: str(v) for k, v in paths.items()}
    out.mkdir(parents=True, exist_ok=True)
    images, labels = load_mlxtend_sample()
    order = np.random.default_rng(SPLIT_SEED).permutation(len(images))
    test, train = order[:held_out], order[held_out:]
    write_idx_images(images[train], paths[TRAIN_IMAGES])
    write_idx_labels(labels[train], paths[TRAIN_LABELS])
    write_idx_images(images[test], paths[TEST_IMAGES])
    write_idx_labels(labels[test], paths[TEST_LABELS])
    return {k: str(v) for k, v in paths.items()}


def default_data_dir() -> Path:
    return Path(os.environ.get("GANINV_DATA", Path.home() / ".cache" / "ganinv" / "mnist"))


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Write the bundled MNIST sample as IDX files.")
    parser.add_argument("out_dir", nargs="?", default=None,
                        help="default: $GANINV_DATA or ~/.cache/ganinv/mnist")
    parser.add_argument("--held-out", type=int, default=100)
    args = parser.parse_args()
    for name, path in prepare_mnist(args.out_dir or default_data_dir(), args.held_out).items():
        print(f"{name}: {path}")
