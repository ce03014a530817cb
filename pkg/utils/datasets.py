"""Load labelled datasets: synthetic Gaussian blobs or MNIST from local IDX files (no download)."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedisl.config import DatasetConfig
from fedisl.errors import DomainError
from fedisl.seeding import stream

logger = logging.getLogger(__name__)

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4")}


@dataclass
class LabelledSet:
    features: np.ndarray  # (n, F) float64
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


def synthetic_blobs(
    num_samples: int,
    num_features: int,
    num_classes: int,
    class_sep: float,
    noise: float,
    seed: int = 0,
) -> LabelledSet:
    """Class means drawn from N(0, class_sep^2) per feature, samples from N(mean, noise^2)."""
    if num_classes < 2 or num_features < 1:
        raise DomainError("need at least 2 classes and 1 feature")
    rng = stream(seed, "dataset")
    means = rng.normal(0.0, class_sep, size=(num_classes, num_features))
    labels = rng.integers(0, num_classes, size=num_samples)
    features = means[labels] + noise * rng.standard_normal((num_samples, num_features))
    return LabelledSet(features, labels.astype(np.int64))


def read_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file (optionally gzip-compressed) into an array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise DomainError(f"{path} is not an IDX file")
    type_code, ndim = raw[2], raw[3]
    if type_code not in _IDX_DTYPES:
        raise DomainError(f"{path}: unknown IDX element type 0x{type_code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[type_code], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise DomainError(f"{path}: payload holds {data.size} elements, header says {dims}")
    return data.reshape(dims)


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory: str | Path, split: str = "train") -> LabelledSet:
    directory = Path(directory)
    prefix = "train" if split == "train" else "t10k"
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    if len(images) != len(labels):
        raise DomainError(f"{len(images)} images but {len(labels)} labels")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return LabelledSet(features, labels.astype(np.int64))


def load_dataset(cfg: DatasetConfig, seed: int = 0) -> tuple[LabelledSet, LabelledSet]:
    """Training and test sets described by ``cfg``."""
    if cfg.kind == "synthetic":
        full = synthetic_blobs(
            cfg.num_samples + cfg.test_samples, cfg.num_features, cfg.num_classes, cfg.class_sep, cfg.noise, seed
        )
        n = cfg.num_samples
        return (
            LabelledSet(full.features[:n], full.labels[:n]),
            LabelledSet(full.features[n:], full.labels[n:]),
        )

    train = load_mnist(cfg.mnist_dir, "train")
    test = load_mnist(cfg.mnist_dir, "test")
    if train.features.shape[1] != cfg.num_features:
        raise DomainError(f"MNIST has {train.features.shape[1]} features, config says {cfg.num_features}")
    # deterministic subsample so small desk runs stay small
    rng = stream(seed, "dataset")
    pick = np.sort(rng.permutation(len(train))[: cfg.num_samples])
    logger.info("MNIST: using %d of %d training samples", len(pick), len(train))
    return (
        LabelledSet(train.features[pick], train.labels[pick]),
        LabelledSet(test.features[: cfg.test_samples], test.labels[: cfg.test_samples]),
    )
