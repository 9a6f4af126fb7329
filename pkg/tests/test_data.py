import gzip
import logging
import struct
from unittest.mock import Mock, patch

import numpy as np
import pytest
import requests
import skimage.io

from adaptive_sense import data, utils
from adaptive_sense.errors import ConfigError, DataError, FormatError


def _idx_bytes(images, magic=data.IDX_IMAGES):
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(f">I{images.ndim}I", magic, *images.shape) + images.tobytes()


def _write_idx(path, images):
    path.write_bytes(_idx_bytes(images))
    return path


def test_parse_idx_all_zero():
    raw = data.parse_idx(_idx_bytes(np.zeros((3, 28, 28))), data.IDX_IMAGES)
    assert raw.shape == (3, 28, 28)
    assert not raw.any()


def test_parse_idx_values():
    images = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    np.testing.assert_array_equal(data.parse_idx(_idx_bytes(images), data.IDX_IMAGES), images)


@pytest.mark.parametrize(
    "cut,offset",
    [
        pytest.param(2, "byte 2", id="no-header"),
        pytest.param(10, "byte 10", id="short-header"),
        pytest.param(16 + 50, "byte 66", id="short-payload"),
    ],
)
def test_parse_idx_truncated(cut, offset):
    payload = _idx_bytes(np.zeros((2, 8, 8)))[:cut]
    with pytest.raises(FormatError, match=offset):
        data.parse_idx(payload, data.IDX_IMAGES, "images.idx")


def test_parse_idx_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        data.parse_idx(_idx_bytes(np.zeros(5), data.IDX_LABELS), data.IDX_IMAGES)


def test_parse_idx_trailing_bytes(caplog):
    payload = _idx_bytes(np.ones((1, 2, 2))) + b"\0\0"
    with caplog.at_level(logging.WARNING):
        raw = data.parse_idx(payload, data.IDX_IMAGES)
    assert raw.shape == (1, 2, 2)
    assert "2 trailing bytes" in caplog.text


def test_load_idx_normalizes(tmp_path):
    images = np.full((2, 4, 4), 255)
    images[1] = 0
    dataset = data.load_idx(_write_idx(tmp_path / "images.idx", images))
    assert dataset.images.dtype == np.float64
    assert dataset.images[0].min() == 1.0
    assert dataset.images[1].max() == 0.0


def test_load_idx_gzip(tmp_path):
    images = np.arange(16).reshape(1, 4, 4)
    path = tmp_path / "images.idx.gz"
    with gzip.open(path, "wb") as f:
        f.write(_idx_bytes(images))
    np.testing.assert_allclose(data.load_idx(path).images, images / 255.0)


def test_load_idx_label_count_mismatch(tmp_path):
    images = _write_idx(tmp_path / "images.idx", np.zeros((3, 2, 2)))
    labels = tmp_path / "labels.idx"
    labels.write_bytes(_idx_bytes(np.zeros(2), data.IDX_LABELS))
    with pytest.raises(FormatError, match="2 labels for 3 images"):
        data.load_idx(images, labels)


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(DataError):
        data.load_idx(tmp_path / "nothing.idx")


def test_dataset_is_read_only():
    dataset = data.Dataset(np.zeros((2, 3, 3)))
    with pytest.raises(ValueError):
        dataset.images[0, 0, 0] = 1.0


@pytest.mark.parametrize(
    "images",
    [
        pytest.param(np.zeros((3, 3)), id="flat"),
        pytest.param(np.full((1, 2, 2), 1.5), id="range"),
    ],
)
def test_dataset_rejects(images):
    with pytest.raises(DataError):
        data.Dataset(images)


def test_resize_matches_bilinear_sampling():
    gradient = np.tile(np.arange(512, dtype=np.float64) / 511, (512, 1))
    resized = data.resize(gradient[None], 128)[0]
    # Output column j samples source column 4j + 1.5.
    expected = (4 * np.arange(128) + 1.5) / 511
    np.testing.assert_allclose(resized, np.tile(expected, (128, 1)), atol=1e-6)


def test_resize_same_size_is_untouched():
    images = np.random.default_rng(0).uniform(size=(2, 5, 5))
    np.testing.assert_array_equal(data.resize(images, 5), images)


def test_random_crop():
    image = np.arange(100.0).reshape(10, 10)
    crop = data.random_crop(image, np.random.default_rng(0))
    assert crop.shape == (9, 9)


def test_load_image_dir(tmp_path):
    skimage.io.imsave(tmp_path / "a.png", np.full((20, 20), 128, dtype=np.uint8), check_contrast=False)
    skimage.io.imsave(tmp_path / "b.png", np.full((20, 20), 64, dtype=np.uint8), check_contrast=False)
    (tmp_path / "notes.txt").write_text("not an image")
    dataset = data.load_image_dir(tmp_path, 8)
    assert len(dataset) == 2
    assert dataset.shape == (8, 8)
    # Uniform images stay uniform through crop and resize.
    np.testing.assert_allclose(dataset.images[0], 128 / 255)
    np.testing.assert_allclose(dataset.images[1], 64 / 255)


def test_load_image_dir_without_crop_keeps_pixels(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, size=(8, 8)).astype(np.uint8)
    skimage.io.imsave(tmp_path / "a.png", image, check_contrast=False)
    dataset = data.load_image_dir(tmp_path, 8, crop=False)
    np.testing.assert_allclose(dataset.images[0], image / 255)


def test_load_image_dir_skips_undecodable(tmp_path, caplog):
    skimage.io.imsave(tmp_path / "good.png", np.zeros((8, 8), dtype=np.uint8), check_contrast=False)
    (tmp_path / "broken.png").write_bytes(b"definitely not a png")
    with caplog.at_level(logging.WARNING):
        dataset = data.load_image_dir(tmp_path, 4)
    assert len(dataset) == 1
    assert "broken.png" in caplog.text


def test_load_image_dir_empty(tmp_path):
    with pytest.raises(DataError):
        data.load_image_dir(tmp_path, 4)


def test_split_sizes():
    dataset = data.Dataset(np.random.default_rng(0).uniform(size=(10, 2, 2)))
    train, val, test = data.split(dataset, seed=1)
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    assert [part.split for part in (train, val, test)] == list(data.SPLITS)
    merged = np.concatenate([train.images, val.images, test.images])
    assert sorted(map(tuple, merged.reshape(10, -1))) == sorted(map(tuple, dataset.images.reshape(10, -1)))


def test_split_is_seeded():
    dataset = data.Dataset(np.random.default_rng(0).uniform(size=(50, 2, 2)))
    first = data.split(dataset, seed=3)
    again = data.split(dataset, seed=3)
    other = data.split(dataset, seed=4)
    np.testing.assert_array_equal(first[0].images, again[0].images)
    assert not np.array_equal(first[0].images, other[0].images)


def test_split_needs_ten_images():
    with pytest.raises(DataError):
        data.split(data.Dataset(np.zeros((9, 2, 2))), seed=0)


def test_fetch_idx(tmp_path):
    session = Mock()
    session.get.return_value = Mock(content=b"payload")
    (tmp_path / "present.gz").write_bytes(b"old")

    paths = data.fetch_idx(
        tmp_path, url="https://example.com/mnist", files=("present.gz", "new.gz"), session=session
    )

    assert paths == [tmp_path / "present.gz", tmp_path / "new.gz"]
    session.get.assert_called_once_with("https://example.com/mnist/new.gz", timeout=(2, 60))
    assert (tmp_path / "new.gz").read_bytes() == b"payload"
    assert (tmp_path / "present.gz").read_bytes() == b"old"


def test_fetch_idx_failure(tmp_path):
    session = Mock()
    session.get.side_effect = requests.ConnectionError("offline")
    with pytest.raises(DataError, match="offline"):
        data.fetch_idx(tmp_path, files=("a.gz",), session=session)
    assert not (tmp_path / "a.gz").exists()


def test_data_config_resolves_paths():
    config = data.DataConfig.from_dict({"paths": ["mnist/train.idx"]}, "/data")
    assert config.paths == ("/data/mnist/train.idx",)


@pytest.mark.parametrize(
    "raw",
    [
        pytest.param({"source": "idx"}, id="no-paths"),
        pytest.param({"source": "images"}, id="no-directory"),
    ],
)
def test_data_config_errors(raw):
    with pytest.raises(ConfigError):
        data.DataConfig.from_dict(raw)


def test_load_dataset_uses_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(utils, "CACHE_PATH", tmp_path / "cache")
    images = np.random.default_rng(0).integers(0, 256, size=(20, 4, 4))
    path = _write_idx(tmp_path / "images.idx", images)
    config = data.DataConfig.from_dict({"paths": [str(path)]})

    first = data.load_dataset(config, seed=0)
    assert len(list((tmp_path / "cache" / "datasets").iterdir())) == 1
    with patch("adaptive_sense.data._load_uncached", side_effect=AssertionError("not cached")):
        second = data.load_dataset(config, seed=0)

    for name in data.SPLITS:
        np.testing.assert_array_equal(first[name].images, second[name].images)
        assert second[name].split == name


def test_load_dataset_without_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(utils, "CACHE_PATH", tmp_path / "cache")
    path = _write_idx(tmp_path / "images.idx", np.zeros((10, 4, 4)))
    config = data.DataConfig.from_dict({"paths": [str(path)], "cache": False, "downsample": 2})
    parts = data.load_dataset(config, seed=0)
    assert parts["train"].shape == (2, 2)
    assert not (tmp_path / "cache").exists()


def test_load_dataset_missing_files(tmp_path):
    config = data.DataConfig.from_dict({"paths": [str(tmp_path / "gone.idx")]})
    with pytest.raises(DataError, match="gone.idx"):
        data.load_dataset(config, seed=0)


def test_resize_read_only_images():
    images = np.random.default_rng(1).uniform(size=(2, 6, 6))
    images.flags.writeable = False
    assert data.resize(images, 3).shape == (2, 3, 3)
