"""Colour-biased digit datasets.

Training images are tinted with a colour drawn around a per-digit mean, so
colour alone predicts the label.  Test images draw the mean uniformly from
the same ten colours, independent of the digit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COLOR_TABLE = (
    ("Crimson", (220, 20, 60)),
    ("Teal", (0, 128, 128)),
    ("Lemon", (253, 233, 16)),
    ("Bondi Blue", (0, 149, 182)),
    ("Carrot orange", (237, 145, 33)),
    ("Strong Violet", (145, 30, 188)),
    ("Cyan", (70, 240, 240)),
    ("Your pink", (250, 197, 187)),
    ("Lime", (210, 245, 60)),
    ("Maroon", (128, 0, 0)),
)
MEAN_COLORS = np.array([rgb for _, rgb in COLOR_TABLE], dtype=np.float64) / 255.0

MAX_SAMPLE_ITERS = 10_000
LEVELS = 8
SUBSAMPLE = 4

DATASET_MAGIC = b"UNLRNDS\x00"
DATASET_VERSION = 1


@dataclass
class RawDigits:
    images: np.ndarray  # [N, 28, 28] in [0, 1]
    labels: np.ndarray  # [N] uint8

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "RawDigits":
        return RawDigits(self.images[idx], self.labels[idx])


@dataclass
class BiasedDataset:
    images: np.ndarray       # [N, 3, 28, 28] float32
    labels: np.ndarray       # [N] uint8
    bias_labels: np.ndarray  # [N, 3, 7, 7] uint8
    color_index: np.ndarray  # [N] uint8, which mean colour was used
    split: str
    seed: int
    sigma2: float

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "BiasedDataset":
        return BiasedDataset(self.images[idx], self.labels[idx], self.bias_labels[idx],
                             self.color_index[idx], self.split, self.seed, self.sigma2)


# ---------------------------------------------------------------------------
# raw digit sources


def load_idx(images_path, labels_path) -> RawDigits:
    images = _read_idx(images_path, 0x00000803)
    labels = _read_idx(labels_path, 0x00000801)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return RawDigits(images.astype(np.float64) / 255.0, labels.astype(np.uint8))


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated IDX body ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _ellipse(cx, cy, rx, ry, start=0.0, stop=2 * np.pi, n=18):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.sin(t), cy - ry * np.cos(t)], axis=1)


def _glyphs():
    # polylines in unit coordinates, x to the right, y downward
    p = np.array
    return {
        0: [_ellipse(0.5, 0.5, 0.28, 0.42)],
        1: [p([[0.36, 0.24], [0.52, 0.08], [0.52, 0.92]])],
        2: [np.concatenate([_ellipse(0.5, 0.32, 0.27, 0.24, -1.4, 2.3, 10),
                            p([[0.2, 0.92], [0.82, 0.92]])])],
        3: [_ellipse(0.48, 0.29, 0.25, 0.21, -1.6, 3.2, 10),
            _ellipse(0.48, 0.7, 0.28, 0.22, -0.1, 4.6, 10)],
        4: [p([[0.66, 0.92], [0.66, 0.08], [0.18, 0.64], [0.86, 0.64]])],
        5: [np.concatenate([p([[0.78, 0.08], [0.3, 0.08], [0.26, 0.46]]),
                            _ellipse(0.5, 0.66, 0.28, 0.26, -0.6, 3.9, 10)])],
        6: [np.concatenate([p([[0.7, 0.08], [0.42, 0.3]]),
                            _ellipse(0.5, 0.68, 0.26, 0.24, 4.4, 4.4 + 2 * np.pi, 16)])],
        7: [p([[0.18, 0.1], [0.82, 0.1], [0.42, 0.92]])],
        8: [_ellipse(0.5, 0.28, 0.22, 0.2), _ellipse(0.5, 0.7, 0.27, 0.22)],
        9: [np.concatenate([_ellipse(0.5, 0.32, 0.25, 0.23, 1.57, 1.57 + 2 * np.pi, 16),
                            p([[0.72, 0.92]])])],
    }


_GRID = np.stack(np.meshgrid(np.arange(28) + 0.5, np.arange(28) + 0.5, indexing="xy"), -1).reshape(-1, 2)


def _render(strokes, width: float) -> np.ndarray:
    a = np.concatenate([s[:-1] for s in strokes])
    b = np.concatenate([s[1:] for s in strokes])
    ab = b - a
    denom = np.maximum((ab * ab).sum(1), 1e-12)
    rel = _GRID[:, None, :] - a[None]
    t = np.clip((rel * ab[None]).sum(-1) / denom, 0.0, 1.0)
    d = np.sqrt(((rel - t[..., None] * ab[None]) ** 2).sum(-1)).min(axis=1)
    return np.clip(width + 0.5 - d, 0.0, 1.0).reshape(28, 28)


def synth_digits(n_per_class: int, seed: int = 0) -> RawDigits:
    """Procedural stand-in for handwritten digits.

    Each sample jitters the control points of a fixed glyph, then applies a
    random rotation, scale, shear and translation and renders anti-aliased
    strokes of random width.  Classes are interleaved 0..9.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    glyphs = _glyphs()
    n = 10 * n_per_class
    images = np.empty((n, 28, 28))
    labels = np.tile(np.arange(10, dtype=np.uint8), n_per_class)
    for i, digit in enumerate(labels):
        angle = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(15.0, 20.0)
        aspect = rng.uniform(0.75, 1.15)
        shear = rng.uniform(-0.3, 0.3)
        shift = rng.uniform(-2.0, 2.0, size=2)
        width = rng.uniform(0.8, 1.8)
        cos, sin = np.cos(angle), np.sin(angle)
        m = np.array([[cos, -sin], [sin, cos]]) @ np.array([[aspect, shear], [0.0, 1.0]]) * scale
        strokes = []
        for s in glyphs[int(digit)]:
            pts = s + rng.normal(0.0, 0.035, size=s.shape)
            strokes.append((pts - 0.5) @ m.T + 14.0 + shift)
        images[i] = _render(strokes, width)
    return RawDigits(images, labels)


# ---------------------------------------------------------------------------
# colour sampling and colouring


def sample_color(mean_rgb, sigma2: float, rng: np.random.Generator,
                 max_iters: int = MAX_SAMPLE_ITERS) -> np.ndarray:
    """Per channel, redraw from N(mean, sigma2) until the value lies in (0, 1)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    sd = np.sqrt(sigma2)
    out = np.empty(3)
    for ch, m in enumerate(np.asarray(mean_rgb, dtype=np.float64)):
        for _ in range(max_iters):
            c = rng.normal(m, sd)
            if 0.0 < c < 1.0:
                out[ch] = c
                break
        else:
            raise RuntimeError(f"colour sampler exhausted {max_iters} draws for mean {m}")
    return out


def sample_colors(means: np.ndarray, sigma2: float, rng: np.random.Generator,
                  max_iters: int = MAX_SAMPLE_ITERS) -> np.ndarray:
    """Vectorized rejection sampling for an [N, 3] array of means."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    sd = np.sqrt(sigma2)
    means = np.asarray(means, dtype=np.float64)
    out = rng.normal(means, sd)
    bad = (out <= 0.0) | (out >= 1.0)
    for _ in range(max_iters - 1):
        if not bad.any():
            return out
        out[bad] = rng.normal(means[bad], sd)
        bad = (out <= 0.0) | (out >= 1.0)
    if bad.any():
        raise RuntimeError(f"colour sampler exhausted {max_iters} draws")
    return out


def colorize(gray: np.ndarray, rgb) -> np.ndarray:
    """Tint the foreground; black background stays black."""
    gray = np.asarray(gray, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    return gray[..., None, :, :] * rgb[..., :, None, None]


def bias_labels_of(images: np.ndarray) -> np.ndarray:
    """4x4 average pool per channel, then 8 even bins over [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    *lead, c, h, w = images.shape
    pooled = images.reshape(*lead, c, h // SUBSAMPLE, SUBSAMPLE, w // SUBSAMPLE, SUBSAMPLE).mean(axis=(-3, -1))
    return np.minimum(np.floor(pooled * LEVELS), LEVELS - 1).astype(np.uint8)


def to_grayscale(images: np.ndarray) -> np.ndarray:
    """Luma 0.299R + 0.587G + 0.114B copied into all three channels."""
    images = np.asarray(images)
    r, g, b = images[..., 0, :, :], images[..., 1, :, :], images[..., 2, :, :]
    # written relative to R so that equal channels map to themselves exactly
    lum = r + 0.587 * (g - r) + 0.114 * (b - r)
    return np.repeat(lum[..., None, :, :], 3, axis=-3).astype(images.dtype)


def grayscale_dataset(ds: BiasedDataset) -> BiasedDataset:
    # bias labels keep describing the planted colour, which a gray input no longer shows
    images = to_grayscale(ds.images)
    return BiasedDataset(images, ds.labels, ds.bias_labels, ds.color_index,
                         ds.split + "-gray", ds.seed, ds.sigma2)


def split_colors(labels: np.ndarray, kind: str, sigma2: float, seed: int,
                 k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Colour index and sampled RGB per image for a ``train``, ``test`` or ``fixed`` split.

    Train colours follow the digit, test colours are drawn uniformly, and ``fixed``
    paints every image with mean colour ``k``.
    """
    _check_sigma2(sigma2)
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if kind == "train":
        idx = labels.astype(np.intp)
    elif kind == "test":
        idx = rng.integers(0, len(MEAN_COLORS), size=len(labels))
    elif kind == "fixed":
        if k is None or not 0 <= k < len(MEAN_COLORS):
            raise ValueError(f"colour index must be in [0, 10), got {k}")
        idx = np.full(len(labels), k, dtype=np.intp)
    else:
        raise ValueError(f"unknown split kind {kind!r}")
    return idx, sample_colors(MEAN_COLORS[idx], sigma2, rng)


def _assemble(raw: RawDigits, kind: str, sigma2: float, seed: int, split: str,
              k: int | None = None) -> BiasedDataset:
    idx, colors = split_colors(raw.labels, kind, sigma2, seed, k)
    images = colorize(raw.images, colors).astype(np.float32)
    return BiasedDataset(images, raw.labels.astype(np.uint8).copy(), bias_labels_of(images),
                         idx.astype(np.uint8), split, int(seed), float(sigma2))


def _check_sigma2(sigma2: float) -> None:
    if not 0 < sigma2 < 1:
        raise ValueError(f"sigma2 must lie in (0, 1), got {sigma2}")


def build_train_set(raw: RawDigits, sigma2: float, seed: int) -> BiasedDataset:
    return _assemble(raw, "train", sigma2, seed, f"train-{sigma2:g}")


def build_test_set(raw: RawDigits, sigma2: float, seed: int) -> BiasedDataset:
    return _assemble(raw, "test", sigma2, seed, f"test-{sigma2:g}")


def recolor_fixed(raw: RawDigits, k: int, sigma2: float, seed: int) -> BiasedDataset:
    return _assemble(raw, "fixed", sigma2, seed, f"recolored-{k}", k)


def raw_of(ds: BiasedDataset) -> RawDigits:
    """Recover grayscale strokes from a coloured set.

    Colouring scales every pixel by the same per-channel factor, so the
    brightest channel divided by its peak gives the strokes back up to the
    peak intensity of the original digit.
    """
    flat = ds.images.reshape(len(ds), 3, -1).astype(np.float64)
    peak = flat.max(axis=2)
    ch = peak.argmax(axis=1)
    gray = flat[np.arange(len(ds)), ch] / np.maximum(peak.max(axis=1), 1e-12)[:, None]
    return RawDigits(gray.reshape(len(ds), *ds.images.shape[2:]), ds.labels.copy())


# ---------------------------------------------------------------------------
# container IO


def save_dataset(ds: BiasedDataset, path) -> None:
    meta = json.dumps({"seed": ds.seed, "sigma2": ds.sigma2, "split": ds.split,
                       "n": len(ds), "shape": list(ds.images.shape[1:]),
                       "grid": list(ds.bias_labels.shape[1:])}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.bias_labels, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.color_index, dtype=np.uint8).tobytes())


def load_dataset(path) -> BiasedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container (bad magic)")
    version, meta_len = struct.unpack("<II", raw[8:16])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    meta = json.loads(raw[16 : 16 + meta_len])
    n, shape, grid = meta["n"], tuple(meta["shape"]), tuple(meta["grid"])
    pos = 16 + meta_len
    sizes = [n * int(np.prod(shape)) * 4, n, n * int(np.prod(grid)), n]
    if len(raw) != pos + sum(sizes):
        raise ValueError(f"{path}: size mismatch, container truncated or padded")
    images = np.frombuffer(raw, "<f4", n * int(np.prod(shape)), pos).reshape(n, *shape).astype(np.float32)
    pos += sizes[0]
    labels = np.frombuffer(raw, np.uint8, n, pos).copy()
    pos += sizes[1]
    bias = np.frombuffer(raw, np.uint8, sizes[2], pos).reshape(n, *grid).copy()
    pos += sizes[2]
    color_index = np.frombuffer(raw, np.uint8, n, pos).copy()
    return BiasedDataset(images, labels, bias, color_index, meta["split"], int(meta["seed"]),
                         float(meta["sigma2"]))


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) of a [3, H, W] image in [0, 1]."""
    image = np.asarray(image)
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def sample_sheet(ds: BiasedDataset, per_class: int = 8) -> np.ndarray:
    """Tile ``per_class`` images of each digit into one [3, 10*28, per_class*28] image."""
    rows = []
    for d in range(10):
        idx = np.flatnonzero(ds.labels == d)[:per_class]
        tiles = [ds.images[i] for i in idx] + [np.zeros_like(ds.images[0])] * (per_class - len(idx))
        rows.append(np.concatenate(tiles, axis=2))
    return np.concatenate(rows, axis=1)
