import gzip

import numpy as np
import pytest

from spikequant import generate_synthetic, load_digits, load_idx
from spikequant.data import read_idx, write_idx
from spikequant.errors import DatasetError


@pytest.fixture
def idx_pair(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    labels = (np.arange(12) % 10).astype(np.uint8)
    write_idx(tmp_path / "img.idx", imgs)
    write_idx(tmp_path / "lab.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx", imgs, labels


def test_idx_header_layout(idx_pair):
    img_path, _, imgs, _ = idx_pair
    raw = img_path.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert int.from_bytes(raw[4:8], "big") == 12
    assert np.array_equal(read_idx(img_path), imgs)


def test_load_idx_scales_and_shapes(idx_pair):
    img_path, lab_path, imgs, labels = idx_pair
    ds = load_idx(img_path, lab_path)
    assert ds.images.shape == (12, 1, 28, 28)
    assert ds.num_classes == 10
    np.testing.assert_allclose(ds.images[:, 0], imgs / 255.0, rtol=1e-6)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert np.array_equal(ds.labels, labels)


def test_gzipped_idx(idx_pair, tmp_path):
    img_path, _, imgs, _ = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img_path.read_bytes()))
    assert np.array_equal(read_idx(gz), imgs)


def test_corrupt_magic(idx_pair):
    img_path, _, _, _ = idx_pair
    raw = bytearray(img_path.read_bytes())
    raw[0] = 7
    img_path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="magic"):
        load_idx(img_path)


def test_label_file_as_images_is_rejected(idx_pair):
    _, lab_path, _, _ = idx_pair
    with pytest.raises(DatasetError, match="magic"):
        load_idx(lab_path)


def test_truncated_payload(idx_pair):
    img_path, _, _, _ = idx_pair
    img_path.write_bytes(img_path.read_bytes()[:-10])
    with pytest.raises(DatasetError, match="truncated"):
        read_idx(img_path)


def test_count_mismatch(idx_pair, tmp_path):
    img_path, _, _, _ = idx_pair
    write_idx(tmp_path / "few.idx", np.zeros(5, dtype=np.uint8))
    with pytest.raises(DatasetError):
        load_idx(img_path, tmp_path / "few.idx")


def test_synthetic_is_deterministic():
    a = generate_synthetic(seed=1, n=100, classes=4)
    b = generate_synthetic(seed=1, n=100, classes=4)
    c = generate_synthetic(seed=2, n=100, classes=4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert np.bincount(a.labels).tolist() == [25] * 4


def test_split_and_subset_are_seeded():
    ds = generate_synthetic(seed=0, n=50, classes=5, image_size=(16, 16))
    tr, va = ds.split(0.8, seed=3)
    assert (len(tr), len(va)) == (40, 10)
    tr2, _ = ds.split(0.8, seed=3)
    assert np.array_equal(tr.labels, tr2.labels)
    sub = va.subset(4, 0)
    assert len(sub) == 4 and va.subset(None, 0) is va


def test_digits_are_upscaled():
    ds = load_digits((32, 32))
    assert ds.images.shape == (1797, 1, 32, 32)
    assert np.array_equal(ds.images[0, 0, :4, :4], np.full((4, 4), ds.images[0, 0, 0, 0]))
