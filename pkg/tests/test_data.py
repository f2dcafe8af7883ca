"""Generators, the patch recipe, IDX loading, batching, binary round trips."""
import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from multirate.data import (
    Dataset,
    PatchSpec,
    TAG_MIXED,
    TAG_PATCH_FREE,
    TAG_PATCH_ONLY,
    gen_blobs,
    gen_patch_dataset,
    gen_spiral,
    load_dataset,
    load_mnist_idx,
    minibatch_iter,
    random_class_offsets,
    save_dataset,
)
from multirate.errors import ContractError, DomainError, FormatError, ShapeError
from multirate.linalg import RngStream

MNIST_DIR = Path(__file__).resolve().parent.parent / "data" / "mnist"


# ---------------------------------------------------------------- dataset type


def test_dataset_validation():
    Dataset(np.zeros((3, 2)), np.array([0, 1, 0]), 2, "synthetic")
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2, "synthetic")
    with pytest.raises(DomainError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 2]), 2, "synthetic")
    with pytest.raises(DomainError):
        Dataset(np.full((2, 2), np.nan), np.array([0, 0]), 2, "synthetic")
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), np.array([0, 0]), 2, "csv")


def test_dataset_subset_carries_tags():
    ds = Dataset(np.arange(8.0).reshape(4, 2), np.array([0, 1, 0, 1]), 2, "synthetic",
                 tags=np.array([0, 1, 2, 1], dtype=np.int8))
    sub = ds.subset(np.array([2, 0]))
    assert np.array_equal(sub.inputs, [[4.0, 5.0], [0.0, 1.0]])
    assert np.array_equal(sub.tags, [2, 0])
    assert (sub.n_classes, sub.source) == (2, "synthetic")


# ---------------------------------------------------------------- spiral


def test_spiral_point_reflection_at_zero_noise():
    ds = gen_spiral(2.0, 250, 0.0, RngStream(1))
    assert ds.n == 500 and ds.dim == 2 and ds.n_classes == 2
    assert np.array_equal(ds.inputs[250:], -ds.inputs[:250])
    assert ds.labels[:250].max() == 0 and ds.labels[250:].min() == 1


def test_spiral_radius_angle_law():
    turns = 2.0
    ds = gen_spiral(turns, 300, 0.0, RngStream(2))
    pts = ds.inputs[:300]
    r = np.hypot(pts[:, 0], pts[:, 1])
    assert r.max() <= 1.0 + 1e-12 and r.min() > 0.0
    # radius doubles as the curve parameter: angle = 2 pi turns r
    assert np.abs(pts[:, 0] - r * np.cos(2 * np.pi * turns * r)).max() <= 1e-9
    assert np.abs(pts[:, 1] - r * np.sin(2 * np.pi * turns * r)).max() <= 1e-9


def test_spiral_defeats_linear_classifier():
    ds = gen_spiral(2.0, 500, 0.05, RngStream(3))
    design = np.column_stack([ds.inputs, np.ones(ds.n)])
    target = np.where(ds.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(design, target, rcond=None)
    acc = float(np.mean((design @ w > 0) == (target > 0)))
    assert acc <= 0.60


def test_spiral_determinism_and_validation():
    a = gen_spiral(1.5, 40, 0.1, RngStream(4))
    b = gen_spiral(1.5, 40, 0.1, RngStream(4))
    assert np.array_equal(a.inputs, b.inputs)
    with pytest.raises(DomainError):
        gen_spiral(0.0, 10, 0.0, RngStream(0))
    with pytest.raises(DomainError):
        gen_spiral(1.0, 0, 0.0, RngStream(0))
    with pytest.raises(DomainError):
        gen_spiral(1.0, 10, -0.1, RngStream(0))


# ---------------------------------------------------------------- blobs


def test_blobs_shapes_and_balanced_labels():
    ds = gen_blobs(90, 16, RngStream(5), n_classes=3)
    assert ds.inputs.shape == (90, 256)
    counts = np.bincount(ds.labels, minlength=3)
    assert counts.tolist() == [30, 30, 30]
    assert ds.source == "synthetic"
    b = gen_blobs(90, 16, RngStream(5), n_classes=3)
    assert np.array_equal(ds.inputs, b.inputs) and np.array_equal(ds.labels, b.labels)
    with pytest.raises(DomainError):
        gen_blobs(0, 16, RngStream(0))
    with pytest.raises(DomainError):
        gen_blobs(10, 1, RngStream(0))
    with pytest.raises(DomainError):
        gen_blobs(10, 16, RngStream(0), n_classes=1)


# ---------------------------------------------------------------- patch recipe


def offsets10(seed=6):
    return random_class_offsets(10, RngStream(seed))


def test_patch_category_counts_at_50k():
    spec = PatchSpec(side=7, class_offsets=offsets10())
    base = Dataset(np.zeros((50_000, 49)), np.arange(50_000) % 10, 10, "synthetic")
    ds = gen_patch_dataset(spec, base, 50_000, RngStream(7))
    assert ds.n == 50_000
    assert int((ds.tags == TAG_PATCH_FREE).sum()) == 10_000
    assert int((ds.tags == TAG_PATCH_ONLY).sum()) == 8_000
    assert int((ds.tags == TAG_MIXED).sum()) == 32_000
    # categories are laid out in index order
    assert ds.tags[0] == TAG_PATCH_FREE and ds.tags[-1] == TAG_MIXED


def test_patch_only_rows_are_constant_patch_zero_outside():
    spec = PatchSpec(side=9, class_offsets=offsets10())
    rng = RngStream(8)
    base = Dataset(rng.normal(0.0, 1.0, (100, 81)), np.arange(100) % 10, 10, "synthetic")
    ds = gen_patch_dataset(spec, base, 100, RngStream(9))
    ps = spec.patch_slice()
    assert (ps.start, ps.stop) == (1, 8)
    outside = np.ones((9, 9), dtype=bool)
    outside[ps, ps] = False
    for i in np.flatnonzero(ds.tags == TAG_PATCH_ONLY):
        im = ds.inputs[i].reshape(9, 9)
        assert np.all(im[outside] == 0.0)
        patch = im[ps, ps]
        assert np.unique(patch).size == 1


def test_patch_free_and_mixed_rows_keep_the_base():
    spec = PatchSpec(side=9, class_offsets=offsets10())
    base = Dataset(RngStream(10).normal(0.0, 1.0, (100, 81)), np.arange(100) % 10,
                   10, "synthetic")
    ds = gen_patch_dataset(spec, base, 100, RngStream(11))
    ps = spec.patch_slice()
    outside = np.ones((9, 9), dtype=bool)
    outside[ps, ps] = False
    assert np.array_equal(ds.labels, base.labels)
    for i in np.flatnonzero(ds.tags == TAG_PATCH_FREE):
        assert np.array_equal(ds.inputs[i], base.inputs[i])
    for i in np.flatnonzero(ds.tags == TAG_MIXED):
        im = ds.inputs[i].reshape(9, 9)
        ref = base.inputs[i].reshape(9, 9)
        assert np.array_equal(im[outside], ref[outside])
        delta = im[ps, ps] - ref[ps, ps]
        assert np.abs(delta - delta[0, 0]).max() <= 1e-12  # one constant added


def test_patch_only_value_distribution():
    # pure patch-only dataset: base may be omitted, labels drawn uniformly
    spec = PatchSpec(side=9, fractions=(0.0, 1.0, 0.0), class_offsets=offsets10())
    ds = gen_patch_dataset(spec, None, 10_000, RngStream(12))
    assert np.all(ds.tags == TAG_PATCH_ONLY)
    values = ds.inputs.reshape(-1, 9, 9)[:, 4, 4]
    # v = z + s * 1.75 * a * offset; the offset part adds < 0.2% to the std
    assert 1.21 <= values.std() <= 1.29
    assert abs(values.mean()) <= 0.05
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.min() >= 800 and counts.max() <= 1200


def test_patch_contract_errors():
    offs = offsets10()
    spec = PatchSpec(side=9, class_offsets=offs)
    with pytest.raises(ContractError):
        gen_patch_dataset(spec, None, 100, RngStream(0))  # needs base images
    small = Dataset(np.zeros((5, 81)), np.zeros(5, dtype=int), 10, "synthetic")
    with pytest.raises(ContractError):
        gen_patch_dataset(spec, small, 100, RngStream(0))
    bad_dim = Dataset(np.zeros((100, 64)), np.zeros(100, dtype=int), 10, "synthetic")
    with pytest.raises(ShapeError):
        gen_patch_dataset(spec, bad_dim, 100, RngStream(0))
    two_class = Dataset(np.zeros((100, 81)), np.zeros(100, dtype=int), 2, "synthetic")
    with pytest.raises(ContractError):
        gen_patch_dataset(spec, two_class, 100, RngStream(0))  # 10 offsets, 2 classes
    pure = PatchSpec(side=9, fractions=(0.0, 1.0, 0.0))
    with pytest.raises(ContractError):
        gen_patch_dataset(pure, None, 10, RngStream(0))  # no offsets, no labels


def test_patch_spec_validation():
    with pytest.raises(DomainError):
        PatchSpec(side=5)  # default 7x7 patch does not fit
    with pytest.raises(DomainError):
        PatchSpec(side=9, fractions=(0.5, 0.5, 0.5))
    with pytest.raises(DomainError):
        PatchSpec(side=9, class_offsets=(0.3,))
    with pytest.raises(DomainError):
        PatchSpec(side=9, z_std=-1.0)


def test_random_class_offsets_range_and_determinism():
    offs = random_class_offsets(10, RngStream(13))
    assert len(offs) == 10
    assert all(-0.1 <= o < 0.1 for o in offs)
    assert offs == random_class_offsets(10, RngStream(13))


def test_patch_dataset_determinism():
    spec = PatchSpec(side=9, class_offsets=offsets10())
    base = Dataset(RngStream(14).normal(0.0, 1.0, (50, 81)), np.arange(50) % 10,
                   10, "synthetic")
    a = gen_patch_dataset(spec, base, 50, RngStream(15))
    b = gen_patch_dataset(spec, base, 50, RngStream(15))
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.tags, b.tags)


# ---------------------------------------------------------------- mnist idx


@pytest.fixture(scope="module")
def mnist_train():
    return load_mnist_idx(MNIST_DIR / "train-images-idx3-ubyte.gz",
                          MNIST_DIR / "train-labels-idx1-ubyte.gz")


def test_mnist_train_shape_and_range(mnist_train):
    ds = mnist_train
    assert (ds.n, ds.dim, ds.n_classes) == (60_000, 784, 10)
    assert ds.inputs.min() == 0.0 and ds.inputs.max() == 1.0
    assert set(np.unique(ds.labels)) == set(range(10))
    assert ds.source == "mnist"


def test_mnist_test_split():
    ds = load_mnist_idx(MNIST_DIR / "t10k-images-idx3-ubyte.gz",
                        MNIST_DIR / "t10k-labels-idx1-ubyte.gz")
    assert (ds.n, ds.dim) == (10_000, 784)
    assert set(np.unique(ds.labels)) == set(range(10))


def _write_idx_pair(tmp, pixels, labels, image_magic=0x803, label_magic=0x801,
                    gz=False, extra=b""):
    n = len(labels)
    img = tmp / "images.idx"
    lab = tmp / "labels.idx"
    img_bytes = struct.pack(">IIII", image_magic, n, 2, 2) + bytes(pixels) + extra
    lab_bytes = struct.pack(">II", label_magic, n) + bytes(labels)
    if gz:
        img, lab = tmp / "images.idx.gz", tmp / "labels.idx.gz"
        img.write_bytes(gzip.compress(img_bytes))
        lab.write_bytes(gzip.compress(lab_bytes))
    else:
        img.write_bytes(img_bytes)
        lab.write_bytes(lab_bytes)
    return img, lab


def test_idx_loader_tiny_file_plain_and_gzip(tmp_path):
    pixels = [0, 51, 102, 255, 255, 0, 0, 51]
    for gz in (False, True):
        img, lab = _write_idx_pair(tmp_path, pixels, [3, 7], gz=gz)
        ds = load_mnist_idx(img, lab)
        assert ds.inputs.shape == (2, 4)
        assert np.abs(ds.inputs[0] - np.array([0, 51, 102, 255]) / 255.0).max() == 0.0
        assert ds.labels.tolist() == [3, 7]


def test_idx_loader_error_paths(tmp_path):
    pixels = [0] * 8
    img, lab = _write_idx_pair(tmp_path, pixels, [1, 2], image_magic=0x804)
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)
    img, lab = _write_idx_pair(tmp_path, pixels, [1, 2], label_magic=0x777)
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)
    img, lab = _write_idx_pair(tmp_path, pixels[:5], [1, 2])  # short image body
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)
    img, lab = _write_idx_pair(tmp_path, pixels, [1, 2], extra=b"x")
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)
    img, _ = _write_idx_pair(tmp_path, pixels, [1, 2])
    lab3 = tmp_path / "labels3.idx"
    lab3.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab3)  # 2 images, 3 labels


# ---------------------------------------------------------------- batching


def test_minibatch_iter_covers_each_index_once():
    batches = minibatch_iter(10, 3, RngStream(16))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_minibatch_iter_determinism_and_full_batch():
    a = minibatch_iter(50, 7, RngStream(17))
    b = minibatch_iter(50, 7, RngStream(17))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    full = minibatch_iter(8, 8, RngStream(18))
    assert len(full) == 1 and sorted(full[0].tolist()) == list(range(8))


def test_minibatch_iter_five_percent_batches():
    batches = minibatch_iter(4000, 200, RngStream(19))
    assert len(batches) == 20
    assert all(len(b) == 200 for b in batches)


def test_minibatch_iter_accepts_dataset_and_validates():
    ds = Dataset(np.zeros((6, 2)), np.zeros(6, dtype=int), 2, "synthetic")
    batches = minibatch_iter(ds, 4, RngStream(20))
    assert [len(b) for b in batches] == [4, 2]
    with pytest.raises(DomainError):
        minibatch_iter(ds, 0, RngStream(0))
    with pytest.raises(DomainError):
        minibatch_iter(ds, 7, RngStream(0))


# ---------------------------------------------------------------- binary files


def test_dataset_roundtrip(tmp_path):
    ds = Dataset(RngStream(21).normal(0.0, 1.0, (5, 3)), np.array([0, 2, 1, 2, 0]),
                 3, "spiral")
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path, source="spiral")
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels)
    assert (back.n_classes, back.source) == (3, "spiral")
    default = load_dataset(path)
    assert default.source == "synthetic"


def test_load_dataset_error_paths(tmp_path):
    ds = Dataset(np.zeros((2, 2)), np.array([0, 1]), 2, "synthetic")
    good = tmp_path / "good.bin"
    save_dataset(ds, good)
    raw = good.read_bytes()
    bad_magic = tmp_path / "bad_magic.bin"
    bad_magic.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_dataset(bad_magic)
    short = tmp_path / "short.bin"
    short.write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        load_dataset(short)
    trailing = tmp_path / "trailing.bin"
    trailing.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError):
        load_dataset(trailing)
