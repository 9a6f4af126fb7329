"""Image datasets: MNIST idx files and directories of grayscale images.

Every image is a 2-D float64 array with pixels in [0, 1]. Labels are never
used; the task is reconstruction.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
import skimage.io
import skimage.transform
import skimage.util

from . import checkpoint, utils
from .errors import ConfigError, DataError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
MNIST_FILES = ("train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz")
IMAGE_SUFFIXES = (".png", ".pgm", ".pnm")
CROP_FRACTION = 0.9
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    split: str = "all"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        if images.ndim != 3:
            raise DataError(f"Dataset needs a stack of 2-D images, got shape {images.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError("Pixel values must lie in [0, 1]")
        images.flags.writeable = False
        object.__setattr__(self, "images", images)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]


def _read_bytes(path):
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path} does not exist (the fetch command downloads MNIST)")
    except (OSError, EOFError) as exc:
        raise FormatError(f"Can not read {path}: {exc}")


def parse_idx(data, magic, source="<bytes>"):
    """Decode an unsigned-byte idx payload after checking its magic number."""
    if len(data) < 4:
        raise FormatError(f"{source}: truncated at byte {len(data)}, no header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{source}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{source}: truncated at byte {len(data)}, header needs {header}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    needed = header + int(np.prod(dims, dtype=np.int64))
    if len(data) < needed:
        raise FormatError(
            f"{source}: truncated at byte {len(data)}, payload ends at byte {needed}"
        )
    if len(data) > needed:
        logging.warning("%s: ignoring %d trailing bytes", source, len(data) - needed)
    return np.frombuffer(data, dtype=np.uint8, count=needed - header, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None):
    raw = parse_idx(_read_bytes(images_path), IDX_IMAGES, str(images_path))
    if labels_path:
        labels = parse_idx(_read_bytes(labels_path), IDX_LABELS, str(labels_path))
        if len(labels) != len(raw):
            raise FormatError(
                f"{labels_path} has {len(labels)} labels for {len(raw)} images"
            )
    logging.info("Loaded %d images of %dx%d from %s", len(raw), *raw.shape[1:], images_path)
    return Dataset(raw.astype(np.float64) / 255.0)


def resize(images, size):
    """Bilinear resize of a stack of images to size x size."""
    images = np.array(images, dtype=np.float64)
    if images.shape[1:] == (size, size):
        return images
    return np.stack(
        [
            skimage.transform.resize(
                img, (size, size), order=1, mode="edge", anti_aliasing=False,
                preserve_range=True,
            )
            for img in images
        ]
    )


def random_crop(image, rng, fraction=CROP_FRACTION):
    side = int(fraction * min(image.shape))
    top = rng.integers(0, image.shape[0] - side + 1)
    left = rng.integers(0, image.shape[1] - side + 1)
    return image[top:top + side, left:left + side]


def image_files(path):
    return sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_dir(path, target_size, crop=True, seed=0):
    """Load grayscale PNG/PGM files, optionally crop, rescale and normalize.

    Files that can not be decoded are skipped with a warning.
    """
    rng = np.random.default_rng([seed, 1])
    images = []
    skipped = 0
    for file in image_files(path):
        try:
            img = skimage.io.imread(file)
        except (OSError, ValueError, SyntaxError) as exc:
            logging.warning("Skipping %s: %s", file, exc)
            skipped += 1
            continue
        if img.ndim != 2:
            logging.warning("Skipping %s: not a grayscale image (shape %s)", file, img.shape)
            skipped += 1
            continue
        img = skimage.util.img_as_float(img)
        if crop:
            img = random_crop(img, rng)
        images.append(np.clip(resize(img[None], target_size)[0], 0.0, 1.0))
    if not images:
        raise DataError(f"No usable images in {path} ({skipped} skipped)")
    logging.info("Loaded %d images from %s, skipped %d", len(images), path, skipped)
    return Dataset(np.stack(images))


def split(dataset, seed):
    """80/10/10 train/val/test split by a seeded permutation."""
    n = len(dataset)
    if n < 10:
        raise DataError(f"Need at least 10 images to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(Dataset(dataset.images[idx], name) for idx, name in zip(parts, SPLITS))


def fetch_idx(dest_dir, url=MNIST_URL, files=MNIST_FILES, session=None):
    """Download idx files that are not present in ``dest_dir`` yet."""
    session = session or requests.Session()
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in files:
        target = dest_dir / name
        paths.append(target)
        if target.exists():
            logging.info("%s already present", target)
            continue
        logging.info("Downloading %s%s", url, name)
        try:
            resp = session.get(url.rstrip("/") + "/" + name, timeout=(2, 60))
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise DataError(f"Can not download {name}: {exc}")
        tmp = target.with_name(target.name + ".part")
        tmp.write_bytes(resp.content)
        tmp.replace(target)
    return paths


@dataclass(frozen=True)
class DataConfig:
    source: str = "idx"
    paths: tuple = field(default_factory=tuple)
    directory: str = None
    size: int = 128
    crop: bool = True
    downsample: int = None
    limit: int = None
    cache: bool = True

    @classmethod
    def from_dict(cls, data, base_dir="."):
        data = dict(data)
        data["paths"] = tuple(utils.relative_to(base_dir, p) for p in data.get("paths", ()))
        if data.get("directory"):
            data["directory"] = utils.relative_to(base_dir, data["directory"])
        config = cls(**data)
        if config.source == "idx" and not config.paths:
            raise ConfigError("data.paths must list at least one idx file")
        if config.source == "images" and not config.directory:
            raise ConfigError("data.directory is required for image directories")
        return config

    def source_files(self):
        if self.source == "idx":
            return [Path(p) for p in self.paths]
        return image_files(self.directory)


def _load_uncached(config, seed):
    if config.source == "idx":
        stacks = [load_idx(p).images for p in config.paths]
        images = np.concatenate(stacks)
    elif config.source == "images":
        images = load_image_dir(config.directory, config.size, config.crop, seed).images
    else:
        raise ConfigError(f"Unknown data source {config.source!r}")
    if config.limit:
        images = images[:config.limit]
    if config.downsample:
        images = np.clip(resize(images, config.downsample), 0.0, 1.0)
    return split(Dataset(images), seed)


def load_dataset(config, seed):
    """Load and split the configured images, going through the cache.

    Returns a dict mapping split names to Datasets.
    """
    files = config.source_files()
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise DataError(f"Missing data files: {', '.join(missing)}")
    cache_file = None
    if config.cache:
        digest = utils.hash_inputs(
            files, config.source, config.size, config.crop, config.downsample, config.limit, seed
        )
        cache_file = utils.CACHE_PATH / "datasets" / f"{digest}.bin"
        if cache_file.exists():
            logging.info("Using cached dataset %s", cache_file)
            arrays, _ = checkpoint.load(cache_file)
            return {name: Dataset(arrays[name], name) for name in SPLITS}
        logging.info("Dataset is not cached yet, loading from source")
    parts = dict(zip(SPLITS, _load_uncached(config, seed)))
    if cache_file is not None:
        checkpoint.save(
            cache_file,
            {name: ds.images for name, ds in parts.items()},
            {"source": config.source, "seed": seed},
        )
    logging.info(
        "Split %d images: %s",
        sum(len(d) for d in parts.values()),
        ", ".join(f"{name} {len(d)}" for name, d in parts.items()),
    )
    return parts
