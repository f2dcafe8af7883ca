"""Datasets: spiral arms, patch-augmented synthetic images, MNIST IDX, batching.

Every generator is a pure function of its arguments and the rng stream passed
in, drawing in a fixed documented order, so datasets are bit-identical across
runs. The patch recipe writes a class-dependent but nearly label-free value
into a centered square patch: patch-only images are zero except for one
constant v = z + s*scale*a*offset[label] over the patch (z per-image normal, a
uniform in [0,1), s a fair-coin sign), mixed images get v = z + s*offset[label]
added on top of a base image. Since s and z hide the offset's sign and size,
patch values can essentially only be memorized, which is the point.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, FormatError, ShapeError

TAG_PATCH_FREE = 0
TAG_PATCH_ONLY = 1
TAG_MIXED = 2

_SOURCES = ("spiral", "patch", "mnist", "synthetic")


@dataclass
class Dataset:
    """Feature matrix plus integer labels; tags mark per-image subcategories."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: str
    tags: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} do not line up"
            )
        if self.inputs.shape[0] < 1:
            raise DomainError("dataset needs at least one sample")
        if not np.isfinite(self.inputs).all():
            raise DomainError("inputs contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DomainError(f"labels outside [0, {self.n_classes})")
        if self.source not in _SOURCES:
            raise DomainError(f"unknown source tag {self.source!r}")

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        tags = None if self.tags is None else self.tags[idx]
        return Dataset(self.inputs[idx], self.labels[idx], self.n_classes, self.source, tags)


def gen_spiral(turns, n_per_class, noise_std, rng):
    """Two interleaved spiral arms, class 1 the point reflection of class 0.

    Radius r = t and angle 2*pi*turns*t for t uniform in (0, 1]; the two arms
    share their t draws so at zero noise every class-1 point is the exact
    negation of a class-0 point.
    """
    if turns <= 0:
        raise DomainError(f"turns must be > 0, got {turns}")
    if n_per_class < 1:
        raise DomainError(f"n_per_class must be >= 1, got {n_per_class}")
    if noise_std < 0:
        raise DomainError(f"noise_std must be >= 0, got {noise_std}")
    t = 1.0 - rng.random(n_per_class)
    phi = 2.0 * np.pi * turns * t
    arm = np.stack([t * np.cos(phi), t * np.sin(phi)], axis=1)
    points = np.concatenate([arm, -arm], axis=0)
    if noise_std > 0:
        points = points + rng.normal(0.0, noise_std, points.shape)
    labels = np.concatenate([np.zeros(n_per_class, dtype=np.int64), np.ones(n_per_class, dtype=np.int64)])
    return Dataset(points, labels, 2, "spiral")


def gen_blobs(n, side, rng, n_classes=2, freq=3.0, signal=0.8, cutoff=4):
    """Smooth random single-channel images with an orientation-grating class signal.

    Each image is low-pass-filtered white noise (per-image unit std) plus a
    sinusoidal grating whose orientation encodes the class; the grating phase
    is random per image so the signal lives in orientation, not raw pixels.
    """
    if n < 1 or side < 2:
        raise DomainError(f"need n >= 1 and side >= 2, got {n}, {side}")
    if not 2 <= n_classes <= 36:
        raise DomainError(f"n_classes out of range: {n_classes}")
    labels = (np.arange(n) % n_classes)[rng.permutation(n)].astype(np.int64)
    noise = rng.normal(0.0, 1.0, (n, side, side))
    fx = np.fft.fftfreq(side)[None, :, None] * side
    fy = np.fft.fftfreq(side)[None, None, :] * side
    keep = (fx * fx + fy * fy) <= cutoff * cutoff
    smooth = np.real(np.fft.ifft2(np.fft.fft2(noise) * keep))
    smooth /= smooth.std(axis=(1, 2), keepdims=True)
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    angles = labels * np.pi / n_classes
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    proj = (
        xx[None, :, :] * np.cos(angles)[:, None, None]
        + yy[None, :, :] * np.sin(angles)[:, None, None]
    )
    grating = np.sin(2.0 * np.pi * freq * proj / side + phases[:, None, None])
    images = smooth + signal * grating
    return Dataset(images.reshape(n, side * side), labels, n_classes, "synthetic")


@dataclass(frozen=True)
class PatchSpec:
    """Geometry and distribution constants of the patch recipe."""

    side: int
    patch_side: int = 7
    z_std: float = 1.25
    patch_only_scale: float = 1.75
    fractions: tuple = (0.20, 0.16, 0.64)
    class_offsets: tuple = ()

    def __post_init__(self):
        if self.patch_side < 1 or self.side < self.patch_side:
            raise DomainError(f"patch {self.patch_side} does not fit side {self.side}")
        if self.z_std < 0 or self.patch_only_scale < 0:
            raise DomainError("z_std and patch_only_scale must be >= 0")
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DomainError(f"fractions must be 3 nonnegatives summing to 1, got {fr}")
        object.__setattr__(self, "fractions", fr)
        offs = tuple(float(o) for o in self.class_offsets)
        if any(abs(o) > 0.1 + 1e-12 for o in offs):
            raise DomainError(f"class offsets must lie in [-0.1, 0.1], got {offs}")
        object.__setattr__(self, "class_offsets", offs)

    def patch_slice(self):
        start = (self.side - self.patch_side) // 2
        return slice(start, start + self.patch_side)


def random_class_offsets(n_classes, rng):
    """Per-class patch offsets drawn uniform in [-0.1, 0.1]."""
    return tuple(rng.uniform(-0.1, 0.1, n_classes))


def _category_counts(n, fractions):
    n_free = int(round(n * fractions[0]))
    n_patch = int(round(n * fractions[1]))
    if n_free + n_patch > n:
        raise DomainError(f"fractions {fractions} over-allocate {n} samples")
    return n_free, n_patch, n - n_free - n_patch


def gen_patch_dataset(spec, base, n, rng):
    """Apply the patch recipe to ``n`` images.

    Index order is a deterministic partition: the first block stays patch-free,
    the second becomes patch-only (zero image, constant patch), the rest get
    the mixed patch added. Labels (and pixels, where kept) come from ``base``,
    which must hold at least n images; base may be None only when the
    patch-free and mixed fractions are zero, in which case labels are drawn
    uniformly. Per-image draws happen in index order: patch-only (z, a, sign),
    then mixed (z, sign).
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    n_free, n_patch, n_mixed = _category_counts(n, spec.fractions)
    if base is None:
        if n_free > 0 or n_mixed > 0:
            raise ContractError("patch-free/mixed images need base images")
        if not spec.class_offsets:
            raise ContractError("need class_offsets to label patch-only images")
        n_classes = len(spec.class_offsets)
        labels = rng.integers(0, n_classes, n).astype(np.int64)
        images = np.zeros((n, spec.side * spec.side))
    else:
        if base.n < n:
            raise ContractError(f"base has {base.n} images, need {n}")
        if base.dim != spec.side * spec.side:
            raise ShapeError(f"base dim {base.dim} != side^2 = {spec.side * spec.side}")
        n_classes = base.n_classes
        labels = base.labels[:n].copy()
        images = base.inputs[:n].copy()
    offsets = np.asarray(spec.class_offsets, dtype=np.float64)
    if offsets.size != n_classes:
        raise ContractError(f"{offsets.size} class offsets for {n_classes} classes")
    ps = spec.patch_slice()
    imgs = images.reshape(n, spec.side, spec.side)
    if n_patch > 0:
        sel = slice(n_free, n_free + n_patch)
        z = rng.normal(0.0, spec.z_std, n_patch)
        a = rng.random(n_patch)
        s = np.where(rng.random(n_patch) < 0.5, 1.0, -1.0)
        v = z + s * spec.patch_only_scale * a * offsets[labels[sel]]
        imgs[sel] = 0.0
        imgs[sel, ps, ps] = v[:, None, None]
    if n_mixed > 0:
        sel = slice(n_free + n_patch, n)
        z = rng.normal(0.0, spec.z_std, n_mixed)
        s = np.where(rng.random(n_mixed) < 0.5, 1.0, -1.0)
        v = z + s * offsets[labels[sel]]
        imgs[sel, ps, ps] += v[:, None, None]
    tags = np.concatenate(
        [
            np.full(n_free, TAG_PATCH_FREE, dtype=np.int8),
            np.full(n_patch, TAG_PATCH_ONLY, dtype=np.int8),
            np.full(n_mixed, TAG_MIXED, dtype=np.int8),
        ]
    )
    return Dataset(images, labels, n_classes, "patch", tags)


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated, wanted {n} bytes, got {len(buf)}")
    return buf


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_mnist_idx(images_path, labels_path):
    """Read the classic big-endian IDX pair into a Dataset.

    Accepts plain or gzip-compressed files. Pixels are scaled to [0, 1].
    """
    with _open_maybe_gzip(images_path) as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != 0x803:
            raise FormatError(f"{images_path}: bad magic 0x{magic:x}, expected 0x803")
        raw = _read_exact(f, n * rows * cols, images_path)
        if f.read(1):
            raise FormatError(f"{images_path}: trailing bytes after {n} images")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(n, rows * cols) / 255.0
    with _open_maybe_gzip(labels_path) as f:
        magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != 0x801:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:x}, expected 0x801")
        raw = _read_exact(f, n_labels, labels_path)
        if f.read(1):
            raise FormatError(f"{labels_path}: trailing bytes after {n_labels} labels")
    if n_labels != n:
        raise FormatError(f"{n} images but {n_labels} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, 10, "mnist")


def minibatch_iter(ds, batch_size, rng):
    """One epoch of shuffled index batches; the last short batch is kept."""
    n = ds.n if isinstance(ds, Dataset) else int(ds)
    if not 1 <= batch_size <= n:
        raise DomainError(f"batch_size must be in [1, {n}], got {batch_size}")
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


_DATASET_MAGIC = b"MRD1"


def save_dataset(ds, path):
    """Interchange export: magic, (N, d, C) int64 little-endian, inputs, labels."""
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<qqq", ds.n, ds.dim, ds.n_classes))
        f.write(np.ascontiguousarray(ds.inputs).tobytes())
        f.write(ds.labels.astype("<i8").tobytes())


def load_dataset(path, source="synthetic"):
    with open(path, "rb") as f:
        if _read_exact(f, 4, path) != _DATASET_MAGIC:
            raise FormatError(f"{path}: not a dataset file")
        n, d, c = struct.unpack("<qqq", _read_exact(f, 24, path))
        inputs = np.frombuffer(_read_exact(f, n * d * 8, path), dtype="<f8").reshape(n, d)
        labels = np.frombuffer(_read_exact(f, n * 8, path), dtype="<i8").astype(np.int64)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return Dataset(inputs.copy(), labels, int(c), source)
