"""Dataset generation, binary readers, augmentation, and epoch iteration."""

import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pairlearn import data
from pairlearn.data import Batch, Dataset, DatasetSpec, FormatError
from pairlearn.nn import ConfigError


def synth_spec(**kw):
    base = dict(source="synthetic", classes=10, seed=7, channels=3, image_size=8,
                train_count=200, eval_count=100)
    base.update(kw)
    return DatasetSpec(**base)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_counts_are_balanced():
    ds = data.load_dataset(synth_spec(train_count=1000), "train")
    assert len(ds) == 1000
    counts = np.bincount(ds.labels, minlength=10)
    assert (counts == 100).all()


def test_synth_zero_noise_is_linearly_separable():
    # With no noise every image equals its class prototype, so a nearest
    # prototype rule (a linear classifier) scores 100 percent on train.
    spec = synth_spec(noise=0.0)
    ds = data.load_dataset(spec, "train")
    protos = np.stack([ds.images[ds.labels == k][0] for k in range(10)])
    flat = ds.images.reshape(len(ds), -1)
    pflat = protos.reshape(10, -1)
    scores = flat @ pflat.T - 0.5 * (pflat * pflat).sum(axis=1)
    pred = scores.argmax(axis=1)
    assert (pred == ds.labels).all()


def test_synth_same_seed_bitwise_identical():
    a = data.load_dataset(synth_spec(), "train")
    b = data.load_dataset(synth_spec(), "train")
    assert a.images.tobytes() == b.images.tobytes()
    assert (a.labels == b.labels).all()


def test_synth_train_and_eval_share_prototypes_not_noise():
    spec = synth_spec(noise=0.0, train_count=100, eval_count=100)
    train = data.load_dataset(spec, "train")
    ev = data.load_dataset(spec, "eval")
    assert np.allclose(train.images[:10], ev.images[:10])
    noisy = synth_spec(noise=0.5, train_count=100, eval_count=100)
    train_n = data.load_dataset(noisy, "train")
    ev_n = data.load_dataset(noisy, "eval")
    assert not np.allclose(train_n.images, ev_n.images)


def test_synth_different_seeds_differ():
    a = data.load_dataset(synth_spec(seed=1), "train")
    b = data.load_dataset(synth_spec(seed=2), "train")
    assert not np.allclose(a.images, b.images)


def test_synth_uneven_count_rejected():
    with pytest.raises(ConfigError):
        data.load_dataset(synth_spec(train_count=101), "train")


# ---------------------------------------------------------------------------
# cifar-10 binary reader


def write_cifar_file(path, labels, images):
    """Hand-build a batch file: N records of 1 label byte + 3072 pixels."""
    records = []
    for lab, img in zip(labels, images):
        records.append(bytes([lab]) + img.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(records))


def make_cifar_fixture(root, n_files=1, seed=0):
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    first = None
    names = [f"data_batch_{i}.bin" for i in range(1, n_files + 1)]
    for name in names:
        labels = rng.integers(0, 10, size=10000).astype(np.uint8)
        images = rng.integers(0, 256, size=(10000, 3, 32, 32)).astype(np.uint8)
        write_cifar_file(os.path.join(root, name), labels, images)
        if first is None:
            first = (labels.copy(), images.copy())
    return first


def test_cifar_fixture_round_trips_first_record(tmp_path):
    root = str(tmp_path)
    labels, images = make_cifar_fixture(root)
    got_images, got_labels = data.read_cifar10_file(os.path.join(root, "data_batch_1.bin"))
    assert got_labels[0] == labels[0]
    assert (got_images[0] == images[0]).all()
    assert got_images.shape == (10000, 3, 32, 32)


def test_cifar_wrong_size_names_byte_counts(tmp_path):
    path = str(tmp_path / "data_batch_1.bin")
    with open(path, "wb") as f:
        f.write(b"\x00" * 5000)
    with pytest.raises(FormatError) as err:
        data.read_cifar10_file(path)
    assert "30730000" in str(err.value)  # expected
    assert "5000" in str(err.value)  # actual


def test_cifar_bad_label_byte_rejected(tmp_path):
    path = str(tmp_path / "data_batch_1.bin")
    labels = np.zeros(10000, dtype=np.uint8)
    labels[42] = 11
    images = np.zeros((10000, 3, 32, 32), dtype=np.uint8)
    write_cifar_file(path, labels, images)
    with pytest.raises(FormatError) as err:
        data.read_cifar10_file(path)
    assert "11" in str(err.value)


def test_cifar_missing_file_reported(tmp_path):
    with pytest.raises(FormatError) as err:
        data.read_cifar10(str(tmp_path), "test")
    assert "test_batch.bin" in str(err.value)


def test_cifar_channel_planar_layout(tmp_path):
    # Record layout is label, then 1024 red, 1024 green, 1024 blue bytes.
    path = str(tmp_path / "data_batch_1.bin")
    img = np.zeros((3, 32, 32), dtype=np.uint8)
    img[0] = 10
    img[1] = 20
    img[2] = 30
    images = np.broadcast_to(img, (10000, 3, 32, 32))
    write_cifar_file(path, np.zeros(10000, dtype=np.uint8), images)
    got_images, _ = data.read_cifar10_file(path)
    assert (got_images[0, 0] == 10).all()
    assert (got_images[0, 1] == 20).all()
    assert (got_images[0, 2] == 30).all()


def test_cifar_load_normalizes_with_spec_constants(tmp_path):
    root = str(tmp_path)
    labels, images = make_cifar_fixture(root)
    for i in range(2, 6):
        write_cifar_file(os.path.join(root, f"data_batch_{i}.bin"),
                         np.zeros(10000, dtype=np.uint8),
                         np.zeros((10000, 3, 32, 32), dtype=np.uint8))
    spec = DatasetSpec(source="cifar10-binary", classes=10, seed=0, root=root,
                       mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    ds = data.load_dataset(spec, "train")
    assert len(ds) == 50000
    want = (images[0].astype(np.float32) / 255.0 - 0.5) / 0.25
    assert np.allclose(ds.images[0], want, atol=1e-6)


# ---------------------------------------------------------------------------
# mnist idx reader


def write_mnist_fixture(root, n=32, seed=0):
    import struct

    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "train-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with open(os.path.join(root, "train-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    return images, labels


def test_mnist_fixture_round_trips(tmp_path):
    root = str(tmp_path)
    images, labels = write_mnist_fixture(root)
    got_images, got_labels = data.read_mnist_idx(
        os.path.join(root, "train-images-idx3-ubyte"),
        os.path.join(root, "train-labels-idx1-ubyte"),
    )
    assert got_images.shape == (32, 1, 28, 28)
    assert (got_images[:, 0] == images).all()
    assert (got_labels == labels).all()


def test_mnist_bad_magic_rejected(tmp_path):
    import struct

    root = str(tmp_path)
    write_mnist_fixture(root)
    bad = os.path.join(root, "train-images-idx3-ubyte")
    blob = open(bad, "rb").read()
    with open(bad, "wb") as f:
        f.write(struct.pack(">I", 0x00000999) + blob[4:])
    with pytest.raises(FormatError) as err:
        data.read_mnist_idx(bad, os.path.join(root, "train-labels-idx1-ubyte"))
    assert "0x00000803" in str(err.value)


def test_mnist_truncated_pixels_rejected(tmp_path):
    root = str(tmp_path)
    write_mnist_fixture(root)
    bad = os.path.join(root, "train-images-idx3-ubyte")
    blob = open(bad, "rb").read()
    with open(bad, "wb") as f:
        f.write(blob[:-100])
    with pytest.raises(FormatError) as err:
        data.read_mnist_idx(bad, os.path.join(root, "train-labels-idx1-ubyte"))
    assert "pixel bytes" in str(err.value)


# ---------------------------------------------------------------------------
# spec validation


def test_spec_rejects_unknown_source():
    with pytest.raises(ConfigError):
        DatasetSpec(source="imagenet", classes=10, seed=0)


def test_spec_class_count_must_match_source():
    with pytest.raises(ConfigError):
        DatasetSpec(source="cifar10-binary", classes=7, seed=0, root="/tmp")


def test_spec_byte_sources_need_root():
    with pytest.raises(ConfigError):
        DatasetSpec(source="cifar10-binary", classes=10, seed=0)


def test_spec_normalization_length_checked():
    spec = synth_spec(mean=(0.5, 0.5), std=(1.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        spec.normalization()


# ---------------------------------------------------------------------------
# augmentation


def test_augment_flags_off_is_identity():
    spec = synth_spec(flip=False, crop_pad=0)
    images = np.random.default_rng(0).standard_normal((6, 3, 8, 8)).astype(np.float32)
    out = data.augment(images, spec, np.random.default_rng(1))
    assert (out == images).all()


def test_flip_twice_is_identity():
    rng = np.random.default_rng(0)
    images = rng.standard_normal((6, 3, 8, 8)).astype(np.float32)
    mask = np.array([True, False, True, True, False, True])
    once = data.flip_images(images, mask)
    twice = data.flip_images(once, mask)
    assert (twice == images).all()
    assert not (once == images).all()


def test_crop_zero_offset_is_shifted_not_identity():
    # Offset (pad, pad) recovers the original; other offsets translate it.
    rng = np.random.default_rng(0)
    images = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    centered = data.crop_images(images, 2, np.full((2, 2), 2))
    assert (centered == images).all()
    shifted = data.crop_images(images, 2, np.zeros((2, 2), dtype=int))
    assert not (shifted == images).all()


def test_augment_deterministic_given_rng_seed():
    spec = synth_spec(flip=True, crop_pad=2)
    images = np.random.default_rng(3).standard_normal((8, 3, 8, 8)).astype(np.float32)
    a = data.augment(images, spec, np.random.default_rng(42))
    b = data.augment(images, spec, np.random.default_rng(42))
    assert a.tobytes() == b.tobytes()


def test_augment_preserves_shape_and_labels_are_untouched():
    spec = synth_spec(flip=True, crop_pad=2)
    ds = data.load_dataset(spec, "train")
    batch = next(iter(data.epoch_batches(ds, spec, 16, epoch=0, train=True)))
    assert batch.images.shape == (16, 3, 8, 8)
    assert batch.labels.shape == (16, 10)
    assert (batch.labels.sum(axis=1) == 1).all()


# ---------------------------------------------------------------------------
# epoch iteration


def test_epoch_covers_every_example_exactly_once():
    spec = synth_spec(flip=True, crop_pad=1, train_count=100)
    ds = data.load_dataset(spec, "train")
    seen = []
    for batch in data.epoch_batches(ds, spec, 13, epoch=3, train=True):
        seen.append(batch.label_ids)
    flat = np.concatenate(seen)
    assert flat.shape[0] == 100
    counts = np.bincount(flat, minlength=10)
    assert (counts == 10).all()


@given(st.integers(0, 50), st.integers(1, 10_000))
def test_epoch_permutation_property(epoch, n):
    perm = data.epoch_permutation(123, epoch, n)
    assert np.array_equal(np.sort(perm), np.arange(n))


def test_epoch_permutations_differ_across_epochs():
    a = data.epoch_permutation(0, 0, 1000)
    b = data.epoch_permutation(0, 1, 1000)
    assert not np.array_equal(a, b)


def test_eval_batches_are_unshuffled_and_unaugmented():
    spec = synth_spec(flip=True, crop_pad=2, eval_count=50)
    ds = data.load_dataset(spec, "eval")
    batches = list(data.epoch_batches(ds, spec, 20, epoch=0, train=False))
    flat = np.concatenate([b.images for b in batches])
    assert (flat == ds.images).all()
    ids = np.concatenate([b.label_ids for b in batches])
    assert (ids == ds.labels).all()


def test_train_batches_bitwise_reproducible():
    spec = synth_spec(flip=True, crop_pad=2)
    ds = data.load_dataset(spec, "train")
    a = [b.images.tobytes() for b in data.epoch_batches(ds, spec, 32, epoch=5, train=True)]
    b = [b.images.tobytes() for b in data.epoch_batches(ds, spec, 32, epoch=5, train=True)]
    assert a == b


def test_balanced_subset_limits_per_class():
    spec = synth_spec(train_count=1000, limit=200)
    ds = data.load_dataset(spec, "train")
    assert len(ds) == 200
    counts = np.bincount(ds.labels, minlength=10)
    assert (counts == 20).all()


def test_partial_final_batch_kept():
    spec = synth_spec(train_count=100)
    ds = data.load_dataset(spec, "train")
    sizes = [b.images.shape[0] for b in data.epoch_batches(ds, spec, 30, epoch=0, train=True)]
    assert sizes == [30, 30, 30, 10]
