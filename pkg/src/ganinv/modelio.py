"""Persistence: architecture configs, weight files, IDX images, PGM grids, CSV.

Weight file layout (all integers little-endian)::

    b"GINV"  u32 version
    per layer, in network order:
        u32 name length, name bytes (utf-8)
        u32 tensor count
        per tensor: u32 rank, rank x u64 extents, float64 data (row-major)

Every layer gets a record, parameter-free layers with a tensor count of 0.
Tensors appear in the order of ``layer.param_shapes()``.
"""

from __future__ import annotations

import contextlib
import csv
import gzip
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ganinv import nn
from ganinv.errors import (ArchParseError, BadMagicError, ExtentMismatchError,
                           IdxFormatError, TruncatedFileError, VersionMismatchError,
                           WeightFileError, DimensionError)

MAGIC = b"GINV"
FORMAT_VERSION = 1
IDX_IMAGE_MAGIC = 2051
GUTTER = 2


# ---------------------------------------------------------------- atomic output

@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows) -> None:
    """CSV with a header row, ``,`` separators, ``\\n`` line ends, round-trip floats."""
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------- architecture configs

@dataclass
class ArchConfig:
    input_shape: tuple
    layers: list
    output_shape: tuple | None = None
    text: str = field(default="", repr=False)

    @property
    def latent_dim(self) -> int:
        return math.prod(self.input_shape)

    def build(self, seed=0) -> nn.Network:
        return nn.build_network(self.layers, self.input_shape, seed)


def _parse_shape(value, lineno):
    try:
        dims = tuple(int(v) for v in value.lower().split("x"))
    except ValueError:
        raise ArchParseError(f"bad shape {value!r}", lineno) from None
    if not dims or any(d < 1 for d in dims):
        raise ArchParseError(f"bad shape {value!r}", lineno)
    return dims


def _parse_bool(value, lineno):
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise ArchParseError(f"bad boolean {value!r}", lineno)


def _parse_act(value, lineno):
    kind, _, slope = value.partition(":")
    try:
        if kind == "leaky_relu":
            return nn.Activation(kind, float(slope) if slope else 0.2)
        if slope:
            raise ValueError(f"{kind} takes no parameter")
        return nn.Activation(kind)
    except ValueError as exc:
        raise ArchParseError(str(exc), lineno) from None


def _kv(tokens, lineno, allowed):
    out = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq or key not in allowed:
            raise ArchParseError(f"unexpected option {tok!r}", lineno)
        out[key] = value
    return out


def _int(opts, key, lineno, default=None):
    if key not in opts:
        if default is None:
            raise ArchParseError(f"missing {key}=", lineno)
        return default
    try:
        return int(opts[key])
    except ValueError:
        raise ArchParseError(f"{key} must be an integer, got {opts[key]!r}", lineno) from None


def parse_arch_config(text: str) -> ArchConfig:
    """Parse the line-oriented architecture format.

    Header lines: ``latent_dim=D`` (network input is a D-vector) and
    ``image=CxHxW``. With ``latent_dim`` the image is the output shape (a
    generator); without it the image is the input shape (a discriminator).
    ``input=`` and ``output=`` set either side explicitly.

    Layer lines::

        fc out=N [bn=true] [act=KIND]
        conv out=N k=K [stride=S] [pad=P | pad=BEFORE,AFTER] [up=2] [bn=true] [act=KIND]
        reshape D1 [D2 ...]
        act KIND            (KIND: relu, leaky_relu[:slope], sigmoid, tanh)
        up

    ``up=2`` on a conv line inserts a 2x nearest upsample before the conv.
    ``#`` starts a comment.
    """
    headers = {}
    entries = []  # (lineno, layer)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if "=" in head and len(tokens) == 1:
            key, _, value = head.partition("=")
            if key not in ("latent_dim", "image", "input", "output"):
                raise ArchParseError(f"unknown header {key!r}", lineno)
            if key == "latent_dim":
                headers[key] = (_parse_shape(value, lineno), lineno)
                if len(headers[key][0]) != 1:
                    raise ArchParseError("latent_dim must be a single integer", lineno)
            else:
                headers[key] = (_parse_shape(value, lineno), lineno)
            continue
        if head == "fc":
            opts = _kv(tokens[1:], lineno, {"out", "bn", "act"})
            entries.append((lineno, ("fc", _int(opts, "out", lineno))))
            if _parse_bool(opts.get("bn", "false"), lineno):
                entries.append((lineno, ("bn",)))
            if "act" in opts:
                entries.append((lineno, _parse_act(opts["act"], lineno)))
        elif head == "conv":
            opts = _kv(tokens[1:], lineno, {"out", "k", "stride", "pad", "up", "bn", "act"})
            up = _int(opts, "up", lineno, 1)
            if up not in (1, 2):
                raise ArchParseError("only up=2 upsampling is supported", lineno)
            if up == 2:
                entries.append((lineno, nn.Upsample2x()))
            pad_txt = opts.get("pad", "0")
            try:
                pad = tuple(int(p) for p in pad_txt.split(","))
            except ValueError:
                raise ArchParseError(f"bad pad {pad_txt!r}", lineno) from None
            if len(pad) not in (1, 2) or min(pad) < 0:
                raise ArchParseError(f"bad pad {pad_txt!r}", lineno)
            pad = pad[0] if len(pad) == 1 else pad
            entries.append((lineno, ("conv", _int(opts, "out", lineno), _int(opts, "k", lineno),
                                     _int(opts, "stride", lineno, 1), pad)))
            if _parse_bool(opts.get("bn", "false"), lineno):
                entries.append((lineno, ("bn",)))
            if "act" in opts:
                entries.append((lineno, _parse_act(opts["act"], lineno)))
        elif head == "reshape":
            try:
                dims = tuple(int(t) for t in tokens[1:])
            except ValueError:
                raise ArchParseError("reshape takes integer extents", lineno) from None
            if not dims or min(dims) < 1:
                raise ArchParseError("reshape takes positive extents", lineno)
            entries.append((lineno, nn.Reshape(dims)))
        elif head == "act":
            if len(tokens) != 2:
                raise ArchParseError("act takes exactly one kind", lineno)
            entries.append((lineno, _parse_act(tokens[1], lineno)))
        elif head == "up":
            if len(tokens) != 1:
                raise ArchParseError("up takes no options", lineno)
            entries.append((lineno, nn.Upsample2x()))
        else:
            raise ArchParseError(f"unknown keyword {head!r}", lineno)
    if not entries:
        raise ArchParseError("no layers")

    if "input" in headers:
        input_shape = headers["input"][0]
    elif "latent_dim" in headers:
        input_shape = headers["latent_dim"][0]
    elif "image" in headers:
        input_shape = headers["image"][0]
    else:
        raise ArchParseError("missing latent_dim=, image= or input= header")
    if "output" in headers:
        declared = headers["output"]
    elif "latent_dim" in headers and "image" in headers:
        declared = headers["image"]
    else:
        declared = None

    # resolve in/out extents layer by layer
    layers = []
    shape = tuple(input_shape)
    for lineno, item in entries:
        try:
            if isinstance(item, tuple):
                if item[0] == "fc":
                    if len(shape) != 1:
                        raise DimensionError(f"fc needs a flat input, got {shape}")
                    layer = nn.FullyConnected(shape[0], item[1])
                elif item[0] == "conv":
                    if len(shape) != 3:
                        raise DimensionError(f"conv needs a (C, H, W) input, got {shape}")
                    layer = nn.Conv(shape[0], item[1], item[2], item[3], item[4])
                else:
                    layer = nn.BatchNorm(shape[0])
            else:
                layer = item
            shape = tuple(layer.output_shape(shape))
        except DimensionError as exc:
            raise ArchParseError(f"shape inconsistency: {exc}", lineno) from None
        layers.append(layer)
    if declared is not None and shape != declared[0]:
        raise ArchParseError(f"network produces {shape}, header declares {declared[0]}",
                             declared[1])
    return ArchConfig(tuple(input_shape), layers, shape, text)


def load_arch_config(path) -> ArchConfig:
    return parse_arch_config(Path(path).read_text())


def shipped_config(name: str) -> ArchConfig:
    """One of the configs bundled with the package, e.g. ``"mnist_g.cfg"``."""
    return parse_arch_config(resources.files("ganinv.configs").joinpath(name).read_text())


def resolve_config(spec: str) -> ArchConfig:
    """A filesystem path, or the bare name of a shipped config."""
    if os.path.exists(spec):
        return load_arch_config(spec)
    try:
        return shipped_config(spec)
    except FileNotFoundError:
        raise FileNotFoundError(f"architecture config not found: {spec}") from None


# ---------------------------------------------------------------- weight files

def weights_to_bytes(net: nn.Network) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for i, (layer, params) in enumerate(zip(net.layers, net.params)):
        name = nn.layer_name(i, layer).encode()
        order = list(layer.param_shapes())
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(order)))
        for key in order:
            arr = params[key]
            parts.append(struct.pack("<I", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_weights(net: nn.Network, path) -> None:
    with atomic_write(path, "wb") as fh:
        fh.write(weights_to_bytes(net))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file truncated in {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def weights_from_bytes(buf: bytes, arch: ArchConfig) -> nn.Network:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"weight format version {version}, expected {FORMAT_VERSION}")
    params = []
    for i, layer in enumerate(arch.layers):
        expect_name = nn.layer_name(i, layer)
        where = f"layer {expect_name}"
        if r.pos == len(buf):
            raise TruncatedFileError(f"file ends before {where}")
        name = bytes(r.take(r.u32(where), where)).decode(errors="replace")
        if name != expect_name:
            raise ExtentMismatchError(f"record {i} is {name!r}, architecture expects {expect_name!r}")
        shapes = layer.param_shapes()
        count = r.u32(where)
        if count != len(shapes):
            raise ExtentMismatchError(f"{where}: {count} tensors stored, {len(shapes)} expected")
        layer_params = {}
        for key, shape in shapes.items():
            rank = r.u32(where)
            dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, where))
            if tuple(dims) != tuple(shape):
                raise ExtentMismatchError(f"{where} {key}: stored extents {dims}, expected {shape}")
            n = math.prod(dims)
            data = np.frombuffer(r.take(8 * n, where), dtype="<f8")
            layer_params[key] = data.astype(np.float64).reshape(dims)
        params.append(layer_params)
    if r.pos != len(buf):
        raise WeightFileError(f"{len(buf) - r.pos} trailing bytes after the last layer")
    return nn.Network(tuple(arch.layers), params, arch.input_shape)


def load_weights(path, arch: ArchConfig) -> nn.Network:
    return weights_from_bytes(Path(path).read_bytes(), arch)


# ---------------------------------------------------------------- IDX images

@dataclass
class ImageBatch:
    images: np.ndarray  # (B, 1, rows, cols) in [0, 1]
    dataset: str
    start: int
    stop: int


def _open_maybe_gz(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def idx_header(path) -> tuple[int, int, int]:
    """(count, rows, cols) of an IDX image file."""
    with _open_maybe_gz(path) as fh:
        return _read_idx_header(fh, path)


def _read_idx_header(fh, path):
    head = fh.read(16)
    if len(head) < 16:
        raise IdxFormatError(f"{path}: short header")
    magic, count, rows, cols = struct.unpack(">IIII", head)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: magic {magic}, expected {IDX_IMAGE_MAGIC}")
    return count, rows, cols


def load_idx_images(path, limit: int | None = None, offset: int = 0) -> ImageBatch:
    """Read images ``offset .. offset+limit`` and scale bytes to [0, 1] by /255."""
    with _open_maybe_gz(path) as fh:
        count, rows, cols = _read_idx_header(fh, path)
        if offset < 0 or offset > count:
            raise IdxFormatError(f"{path}: offset {offset} outside 0..{count}")
        stop = count if limit is None else min(count, offset + limit)
        size = rows * cols
        fh.seek(16 + offset * size)
        raw = fh.read((stop - offset) * size)
    if len(raw) != (stop - offset) * size:
        raise IdxFormatError(f"{path}: short read ({len(raw)} of {(stop - offset) * size} bytes)")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(stop - offset, 1, rows, cols)
    return ImageBatch(images.astype(np.float64) / 255.0, Path(path).name, offset, stop)


def write_idx_images(images, path) -> None:
    """Write (N, rows, cols) or (N, 1, rows, cols) uint8 images as an IDX file."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        arr = arr[:, 0]
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise DimensionError("expected uint8 images of shape (N, rows, cols)")
    with atomic_write(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_idx_labels(labels, path) -> None:
    arr = np.asarray(labels, dtype=np.uint8)
    with atomic_write(path, "wb") as fh:
        fh.write(struct.pack(">II", 2049, arr.size))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------- PGM grids

def to_bytes(v) -> np.ndarray:
    """Map [0, 1] values to bytes as round(255 * v)."""
    return np.rint(np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def image_grid(images, columns: int) -> np.ndarray:
    """Tile same-sized images row-major with 2-pixel white gutters; returns uint8."""
    imgs = [np.asarray(im, dtype=np.float64) for im in images]
    if not imgs or columns < 1:
        raise DimensionError("need at least one image and one column")
    imgs = [im.reshape(im.shape[-2:]) for im in imgs]
    m, n = imgs[0].shape
    if any(im.shape != (m, n) for im in imgs):
        raise DimensionError("all images in a grid must share one size")
    if any(im.min() < 0 or im.max() > 1 for im in imgs):
        raise DimensionError("grid pixels must lie in [0, 1]")
    cols = min(columns, len(imgs))
    rows = -(-len(imgs) // cols)
    grid = np.full((rows * m + (rows - 1) * GUTTER, cols * n + (cols - 1) * GUTTER), 255,
                   dtype=np.uint8)
    for k, im in enumerate(imgs):
        r, c = divmod(k, cols)
        y, x = r * (m + GUTTER), c * (n + GUTTER)
        grid[y:y + m, x:x + n] = to_bytes(im)
    return grid


def write_pgm(pixels: np.ndarray, path) -> None:
    h, w = pixels.shape
    with atomic_write(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def write_image_grid(images, columns: int, path) -> None:
    write_pgm(image_grid(images, columns), path)


def write_pair_grid(targets, reconstructions, path, pairs_per_row: int = 5) -> None:
    """Reconstruction on the left, original on the right, pairs laid out row-major."""
    items = []
    for x, g in zip(targets, reconstructions):
        items.extend([g, x])
    write_image_grid(items, 2 * pairs_per_row, path)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
