"""Seeded desk-scale datasets and the TSDS dataset file format.

``digits`` is a 10-class Gaussian mixture over 8x8 images.  A seed fixes 16
smooth "atom" images; every class prototype is a sparse signed combination of
atoms, and samples add noise inside the atom span plus pixel noise.  The
*public* split is a wider task (many more classes) over the same atoms, so a
backbone pre-trained on it learns features that transfer, while knowing nothing
about the private class prototypes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .errors import FormatError, InputError

MAGIC = b"TSDS"
_HEADER = struct.Struct("<4sIHB")

# private splits mirror a four-way split: victim train / eval, attacker query / eval
SPLITS = ("public", "train", "eval", "query", "attack_eval")


@dataclass
class Dataset:
    x: np.ndarray  # (N, D) float32
    y: np.ndarray  # (N,) int64
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.n_classes)


def _bump_images(rng, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
    imgs = np.zeros((count, 8, 8))
    for n in range(count):
        for _ in range(3):
            cy, cx = rng.uniform(0, 7, size=2)
            width = rng.uniform(1.0, 2.5)
            imgs[n] += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    imgs /= np.linalg.norm(imgs.reshape(count, -1), axis=1)[:, None, None]
    return imgs.reshape(count, 64)


def _mixture(rng, task_rng, atoms, n: int, n_classes: int, noise: float, atom_noise: float,
             per_proto: int, components: int) -> Dataset:
    # each prototype is a sparse signed combination of the shared atoms
    k = atoms.shape[0]
    coef = np.zeros((n_classes * components, k))
    for row in coef:
        picks = task_rng.choice(k, size=per_proto, replace=False)
        row[picks] = task_rng.choice([-1.0, 1.0], size=per_proto) * task_rng.uniform(1.0, 2.0, size=per_proto)
    protos = coef @ atoms
    y = rng.integers(0, n_classes, size=n)
    comp = rng.integers(0, components, size=n)
    x = protos[y * components + comp]
    x = x + rng.normal(size=(n, k)) @ atoms * atom_noise
    x = x + rng.normal(size=(n, 64)) * noise
    return Dataset(x.astype(np.float32), y.astype(np.int64), n_classes)


def make_digits(
    seed: int,
    sizes: dict[str, int] | None = None,
    noise: float = 0.3,
    atom_noise: float = 0.3,
    public_classes: int = 200,
    per_proto: int = 8,
    public_per_proto: int | None = None,
    components: int = 1,
) -> dict[str, Dataset]:
    """Build every split; ``components`` prototypes per class, ``per_proto`` atoms each."""
    sizes = {"public": 8000, "train": 2000, "eval": 1000, "query": 200, "attack_eval": 1000, **(sizes or {})}
    atoms = _bump_images(make_rng(seed, "atoms"), 16)
    out = {}
    for name in SPLITS:
        task = "public" if name == "public" else "private"
        out[name] = _mixture(
            make_rng(seed, "digits", name), make_rng(seed, "task", task), atoms, sizes[name],
            public_classes if task == "public" else 10, noise, atom_noise,
            (public_per_proto or per_proto) if task == "public" else per_proto, components,
        )
    return out


def make_spirals(seed: int, n: int = 400, noise: float = 0.05, turns: float = 1.5) -> Dataset:
    """Two interleaved spirals in 2-D, labels 0/1."""
    rng = make_rng(seed, "spirals")
    t = np.sqrt(rng.uniform(0.05, 1.0, size=n)) * turns * 2 * np.pi
    y = rng.integers(0, 2, size=n)
    r = t / (turns * 2 * np.pi)
    ang = t + np.pi * y
    x = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + rng.normal(size=(n, 2)) * noise
    return Dataset(x.astype(np.float32), y.astype(np.int64), 2)


def make_blobs(seed: int, n: int = 400, dim: int = 2) -> Dataset:
    """Two well-separated Gaussian blobs (a linearly separable toy)."""
    rng = make_rng(seed, "blobs")
    y = rng.integers(0, 2, size=n)
    centers = np.array([[-1.5] * dim, [1.5] * dim])
    x = centers[y] + rng.normal(size=(n, dim)) * 0.5
    return Dataset(x.astype(np.float32), y.astype(np.int64), 2)


def encode_dataset(ds: Dataset) -> bytes:
    n, dim = ds.x.shape
    if dim > 0xFFFF or ds.n_classes > 0xFF:
        raise InputError("dataset too wide for the TSDS format")
    rec = np.zeros(n, dtype=np.dtype([("label", "u1"), ("x", "<f4", (dim,))]))
    rec["label"] = ds.y
    rec["x"] = ds.x
    return _HEADER.pack(MAGIC, n, dim, ds.n_classes) + rec.tobytes()


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise FormatError("dataset file truncated in header")
    magic, n, dim, n_classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    dt = np.dtype([("label", "u1"), ("x", "<f4", (dim,))])
    if len(blob) != _HEADER.size + n * dt.itemsize:
        raise FormatError(f"dataset body is {len(blob) - _HEADER.size} bytes, expected {n * dt.itemsize}")
    rec = np.frombuffer(blob, dtype=dt, offset=_HEADER.size)
    return Dataset(rec["x"].astype(np.float32), rec["label"].astype(np.int64), n_classes)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path) -> Dataset:
    try:
        return decode_dataset(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise InputError(f"dataset not found: {path}") from exc
