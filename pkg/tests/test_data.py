import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbanet.data import (AugmentConfig, ClassTooSmallError, CountMismatchError, Dataset,
                         DataFormatError, LabelRangeError, MagicMismatchError, TruncatedFileError,
                         augment, augment_batch, bilinear_resize, five_crops, hflip, load_cifar10,
                         load_mnist, mean_subtract, multi_crop_views, read_idx, split_validation,
                         write_cifar10_batch, write_idx)


def reference_idx(path):
    """Independent decoder: plain struct over the raw bytes."""
    with gzip.open(path) if str(path).endswith(".gz") else open(path, "rb") as fh:
        raw = fh.read()
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    assert zero == 0 and dtype == 0x08
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return dims, raw[4 + 4 * ndim:]


@pytest.fixture(scope="module")
def mnist_full(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    r = np.random.default_rng(0)
    write_idx(d / "train-images-idx3-ubyte.gz", r.integers(0, 256, (60_000, 28, 28), dtype=np.uint8))
    write_idx(d / "train-labels-idx1-ubyte.gz", r.integers(0, 10, 60_000, dtype=np.uint8))
    write_idx(d / "t10k-images-idx3-ubyte", r.integers(0, 256, (10_000, 28, 28), dtype=np.uint8))
    write_idx(d / "t10k-labels-idx1-ubyte", r.integers(0, 10, 10_000, dtype=np.uint8))
    return d


def test_mnist_full_size(mnist_full):
    ds = load_mnist(mnist_full, "train")
    assert len(ds) == 60_000 and ds.image_shape == (1, 28, 28)
    assert ds.labels.min() >= 0 and ds.labels.max() <= 9
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    dims, payload = reference_idx(mnist_full / "train-images-idx3-ubyte.gz")
    assert dims == (60_000, 28, 28)
    # lossless up to the [0, 1] scaling
    np.testing.assert_array_equal(np.round(ds.images[:3, 0] * 255).astype(np.uint8).tobytes(),
                                  payload[:3 * 784])
    assert len(load_mnist(mnist_full, "test")) == 10_000


def test_mnist_subset_shipped():
    ds = load_mnist("data/mnist-subset", "train")
    assert len(ds) == 10_000
    assert ds.class_counts().sum() == 10_000 and (ds.class_counts() > 800).all()


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "x", np.zeros((3, 2, 2), np.uint8))
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x03" + raw[4:])
    with pytest.raises(MagicMismatchError):
        read_idx(tmp_path / "bad", 2051)
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(TruncatedFileError):
        read_idx(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\x00")
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "long")


def test_mnist_count_mismatch_and_magic(tmp_path):
    write_idx(tmp_path / "train-images-idx3-ubyte", np.zeros((3, 28, 28), np.uint8))
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.zeros(4, np.uint8))
    with pytest.raises(CountMismatchError):
        load_mnist(tmp_path)
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.zeros((3, 1), np.uint8))  # wrong magic 2050
    with pytest.raises(MagicMismatchError):
        load_mnist(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path / "nowhere")


def test_cifar_full_counts(cifar_full):
    train = load_cifar10(cifar_full, "train")
    test = load_cifar10(cifar_full, "test")
    assert len(train) == 50_000 and len(test) == 10_000
    assert train.image_shape == (3, 32, 32)


def test_cifar_reference_decoder(cifar_full):
    path = cifar_full / "cifar-10-batches-bin" / "data_batch_2.bin"
    raw = path.read_bytes()
    assert len(raw) == 10_000 * 3073
    ds = load_cifar10(cifar_full, "train")
    for i in (0, 1, 9_999):
        rec = raw[i * 3073:(i + 1) * 3073]
        label, pix = rec[0], rec[1:]
        row = 10_000 + i
        assert ds.labels[row] == label
        # channel-planar: R plane, then G, then B, each row-major 32x32
        for c in range(3):
            for y, x in ((0, 0), (5, 17), (31, 31)):
                assert round(float(ds.images[row, c, y, x]) * 255) == pix[c * 1024 + y * 32 + x]


def test_cifar_errors(tmp_path):
    write_cifar10_batch(tmp_path / "test_batch.bin", [1, 2], np.zeros((2, 3072)))
    with open(tmp_path / "test_batch.bin", "ab") as fh:
        fh.write(b"\x00" * 100)
    with pytest.raises(TruncatedFileError):
        load_cifar10(tmp_path, "test")
    write_cifar10_batch(tmp_path / "test_batch.bin", [1, 10], np.zeros((2, 3072)))
    with pytest.raises(LabelRangeError):
        load_cifar10(tmp_path, "test")


def test_dataset_invariants():
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])
    with pytest.raises(LabelRangeError):
        Dataset(np.zeros((1, 1, 2, 2)), [10])


def test_mean_subtract():
    r = np.random.default_rng(0)
    train = Dataset(r.random((200, 3, 4, 4)).astype(np.float32) + 0.3, r.integers(0, 10, 200))
    test = Dataset(r.random((50, 3, 4, 4)).astype(np.float32) + 5.0, r.integers(0, 10, 50))
    tr, te = mean_subtract(train, test)
    assert np.abs(tr.images.mean(axis=0)).max() <= 1e-10
    mean = train.images.astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(te.images, test.images - mean)
    assert te.mean is tr.mean
    const = mean_subtract(Dataset(np.full((5, 1, 2, 2), 0.7), np.zeros(5, int)))
    assert not const.images.any()
    with pytest.raises(ValueError):
        mean_subtract(train, Dataset(np.zeros((2, 1, 4, 4)), [0, 1]))


def test_split_one_tenth_per_class(cifar_full):
    train = load_cifar10(cifar_full, "train")
    tr, val = split_validation(train, 0.1, seed=0)
    assert len(val) == 5_000
    assert (val.class_counts() == 500).all()
    assert len(np.intersect1d(tr.index, val.index)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([tr.index, val.index])), np.arange(50_000))
    tr2, val2 = split_validation(train, 0.1, seed=0)
    np.testing.assert_array_equal(val.index, val2.index)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(10, 60), min_size=2, max_size=5), st.integers(0, 1000))
def test_split_partition_property(counts, seed):
    labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    ds = Dataset(np.zeros((len(labels), 1, 1, 1)), labels, n_classes=len(counts))
    tr, val = split_validation(ds, 0.1, seed)
    assert list(val.class_counts()) == [c // 10 for c in counts]
    assert sorted(np.concatenate([tr.index, val.index]).tolist()) == list(range(len(labels)))


def test_split_class_too_small():
    ds = Dataset(np.zeros((15, 1, 1, 1)), [0] * 9 + [1] * 6, n_classes=2)
    with pytest.raises(ClassTooSmallError):
        split_validation(ds)


def test_split_per_class_count():
    ds = Dataset(np.zeros((100, 1, 1, 1)), np.arange(100) % 2, n_classes=2)
    _, val = split_validation(ds, per_class=7)
    assert list(val.class_counts()) == [7, 7]


def test_bilinear_matches_opencv(rng):
    cv2 = pytest.importorskip("cv2")
    img = rng.random((3, 32, 32)).astype(np.float32)
    for size in (32, 33, 36, 40, 20):
        ours = bilinear_resize(img, size)
        ref = cv2.resize(img.transpose(1, 2, 0), (size, size), interpolation=cv2.INTER_LINEAR)
        np.testing.assert_allclose(ours, ref.transpose(2, 0, 1), atol=1e-5)


def test_augment_identity_and_flip(rng):
    img = rng.random((3, 32, 32))
    cfg = AugmentConfig()
    np.testing.assert_array_equal(augment(img, cfg, rng, size=32, offset=(0, 0), flip=False), img)
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    once = augment(img, cfg, rng, size=32, offset=(0, 0), flip=True)
    np.testing.assert_array_equal(once, img[..., ::-1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_augment_shape_and_range(seed):
    r = np.random.default_rng(seed)
    img = r.random((3, 32, 32))
    out = augment(img, AugmentConfig(), r)
    assert out.shape == (3, 32, 32)
    assert img.min() - 1e-12 <= out.min() and out.max() <= img.max() + 1e-12


def test_augment_batch_deterministic(rng):
    imgs = rng.random((4, 3, 32, 32))
    a = augment_batch(imgs, AugmentConfig(), 1, 2, np.arange(4))
    b = augment_batch(imgs, AugmentConfig(), 1, 2, np.arange(4))
    assert a.tobytes() == b.tobytes()
    c = augment_batch(imgs[::-1], AugmentConfig(), 1, 2, np.arange(4)[::-1])
    np.testing.assert_array_equal(a, c[::-1])


def test_five_crops(rng):
    img = np.arange(36.0).reshape(1, 6, 6)
    crops = five_crops(img, 4)
    assert crops.shape == (5, 1, 4, 4)
    assert crops[0, 0, 0, 0] == img[0, 1, 1]
    assert crops[1, 0, 0, 0] == 0 and crops[2, 0, 0, -1] == 5
    assert crops[3, 0, -1, 0] == 30 and crops[4, 0, -1, -1] == 35
    views = multi_crop_views(rng.random((2, 3, 32, 32)), AugmentConfig())
    assert views.shape == (5, 2, 3, 32, 32)


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(resize_min=40, resize_max=32)
    with pytest.raises(ValueError):
        AugmentConfig(crop=36)
    assert AugmentConfig().test_resize == 36
