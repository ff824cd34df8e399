"""Dataset loading and normalization module."""
import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
import pandas as pd
import requests

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FER_IMAGE_SIZE = 48
FER_PIXELS = FER_IMAGE_SIZE * FER_IMAGE_SIZE
FER_HEADER = ["emotion", "pixels", "Usage"]
FER_USAGE_SPLITS = {"Training": "train", "PublicTest": "public_test", "PrivateTest": "private_test"}

EMOTIONS = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"]

# Root layout: <root>/<dataset>/<file>; FER2013 has to be placed by hand.
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
FER_FILE = "fer2013.csv"

MIRRORS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
CHECKSUMS = {
    "mnist": {
        "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
        "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
        "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
        "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
    },
    "fashion_mnist": {
        "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
        "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
        "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
        "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
    },
}


class DataFormatError(ValueError):
    """A data file does not follow its container format."""


@dataclass
class Dataset:
    """Images (N, H, W) and labels (N,) of one split."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    name: str
    num_classes: int
    mean: Optional[float] = None
    std: Optional[float] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{self.name}/{self.split}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"{self.name}/{self.split}: labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.images)):
            raise DataFormatError(f"{self.name}/{self.split}: non-finite pixel values")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, n: int) -> "Dataset":
        """First ``n`` samples (all of them when n <= 0)."""
        if n <= 0 or n >= len(self):
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])

    def select(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices], split=split or self.split)


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise FileNotFoundError(f"Data file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path: Path, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array shaped by its header.

    Raises:
        DataFormatError: wrong magic number or truncated payload
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header ({len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise DataFormatError(f"{path}: truncated header ({len(data)} bytes)")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = int(np.prod(dims))
    payload = len(data) - header_len
    if payload < expected:
        raise DataFormatError(f"{path}: truncated payload, expected {expected} bytes, got {payload}")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_len).reshape(dims)


def write_idx(path: Path, array: np.ndarray) -> Path:
    """Write a uint8 array as an IDX file (magic 0x0000 08 <ndim>)."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())
    return path


def load_idx(images_path: Path, labels_path: Path, name: str = "mnist", split: str = "train",
             num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair with pixels scaled to [0, 1]."""
    logger.info(f"Loading {name}/{split} from {images_path}")
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    dataset = Dataset(
        images=images.astype(np.float32) / 255.0,
        labels=labels.astype(np.int64),
        split=split,
        name=name,
        num_classes=num_classes,
    )
    logger.info(f"Loaded {name}/{split}: {len(dataset)} images of {images.shape[1]}x{images.shape[2]}")
    return dataset


# ---------------------------------------------------------------------------
# FER2013 CSV
# ---------------------------------------------------------------------------

def _reject_rows(path: Path, df: pd.DataFrame, bad: pd.Series, describe: Callable[[pd.Series], str]):
    """Raise for the first flagged row; the frame index holds physical line numbers."""
    if bad.any():
        line = int(bad[bad].index[0])
        raise DataFormatError(f"{path}:{line}: {describe(df.loc[line])}")


def load_fer_csv(path: Path) -> Dict[str, Dataset]:
    """Load FER2013 and route rows to splits by their Usage column.

    Blank lines are skipped; every other error names its line in the file.

    Returns:
        Dictionary with 'train', 'public_test' and 'private_test' Datasets

    Raises:
        DataFormatError: bad header, non-numeric emotion or pixel field, wrong
            pixel count, pixel above 255, unknown Usage value
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"FER2013 file not found: {path}")
    logger.info(f"Loading FER2013 from {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False).fillna("")
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: {e}") from e
    if list(df.columns) != FER_HEADER:
        raise DataFormatError(f"{path}: header {list(df.columns)} != {FER_HEADER}")

    # line 1 is the header; rows map one-to-one onto lines until a quoted field spans several
    df.index = pd.RangeIndex(2, len(df) + 2)
    multiline = df.apply(lambda column: column.str.contains("\n", regex=False)).any(axis=1)
    _reject_rows(path, df, multiline, lambda row: "field spans several lines")
    df = df[(df != "").any(axis=1)]

    _reject_rows(path, df, ~df["emotion"].str.fullmatch(r"\d+"),
                 lambda row: f"emotion {row['emotion']!r} is not a class index")
    _reject_rows(path, df, df["emotion"].astype(int) >= len(EMOTIONS),
                 lambda row: f"emotion {row['emotion']} outside 0..{len(EMOTIONS) - 1}")
    _reject_rows(path, df, ~df["pixels"].str.fullmatch(r"\d+( \d+)*"),
                 lambda row: "pixels must be space-separated integers")
    counts = df["pixels"].str.count(" ") + 1
    _reject_rows(path, df, counts != FER_PIXELS,
                 lambda row: f"expected {FER_PIXELS} pixels, got {counts.loc[row.name]}")
    _reject_rows(path, df, ~df["Usage"].isin(list(FER_USAGE_SPLITS)),
                 lambda row: f"unknown Usage {row['Usage']!r}")

    pixels = np.array(" ".join(df["pixels"]).split(), dtype=np.float32).reshape(len(df), FER_PIXELS)
    _reject_rows(path, df, pd.Series(pixels.max(axis=1) > 255, index=df.index),
                 lambda row: "pixel value above 255")
    images = pixels.reshape(len(df), FER_IMAGE_SIZE, FER_IMAGE_SIZE) / 255.0
    labels = df["emotion"].astype(int).to_numpy().astype(np.int64)

    splits = {}
    for usage, split in FER_USAGE_SPLITS.items():
        mask = (df["Usage"] == usage).to_numpy()
        splits[split] = Dataset(images[mask], labels[mask], split, "fer2013", len(EMOTIONS))
        logger.info(f"Loaded fer2013/{split}: {int(mask.sum())} images")
    return splits


# ---------------------------------------------------------------------------
# Normalization, splitting, batching
# ---------------------------------------------------------------------------

def normalize(dataset: Dataset, stats: Optional[Tuple[float, float]] = None, eps: float = 1e-8) -> Dataset:
    """Mean/std normalization.

    Args:
        dataset: split to normalise
        stats: (mean, std) from the training split; computed from ``dataset``
            when omitted
        eps: guard added to std so constant images stay finite
    """
    if stats is None:
        mean = float(dataset.images.mean(dtype=np.float64))
        std = float(dataset.images.std(dtype=np.float64))
    else:
        mean, std = stats
    images = ((dataset.images - mean) / (std + eps)).astype(np.float32)
    return replace(dataset, images=images, mean=mean, std=std)


def normalize_splits(splits: Dict[str, Dataset], train_key: str = "train") -> Dict[str, Dataset]:
    """Normalise every split with the statistics of ``splits[train_key]``."""
    train = normalize(splits[train_key])
    stats = (train.mean, train.std)
    logger.info(f"Normalization statistics from {train_key}: mean={stats[0]:.4f} std={stats[1]:.4f}")
    return {key: (train if key == train_key else normalize(ds, stats)) for key, ds in splits.items()}


def split_validation(dataset: Dataset, fraction: float = 0.1, seed: int = 1) -> Tuple[Dataset, Dataset]:
    """Seeded permutation; its last ``fraction`` becomes the validation split."""
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * fraction)))
    return dataset.select(order[:-n_val], "train"), dataset.select(order[-n_val:], "val")


def batches(dataset: Dataset, batch_size: int,
            generator: Optional[np.random.Generator]) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (images, labels, indices) batches; the last partial batch is kept.

    With a generator the order is a fresh permutation drawn from it,
    otherwise the natural order.
    """
    n = len(dataset)
    order = generator.permutation(n) if generator is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx], idx


# ---------------------------------------------------------------------------
# Dataset root
# ---------------------------------------------------------------------------

def _md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def download_dataset(name: str, root: Path, timeout: int = 60) -> Path:
    """Fetch the gzipped IDX files of ``name`` into ``root/name`` and verify md5.

    Raises:
        ValueError: for datasets without a public mirror (FER2013)
        DataFormatError: on checksum mismatch
    """
    if name not in MIRRORS:
        raise ValueError(f"No download mirror for {name}; place the files under {Path(root) / name} by hand")
    target = Path(root) / name
    target.mkdir(parents=True, exist_ok=True)
    for filename, checksum in CHECKSUMS[name].items():
        path = target / filename
        if path.exists() and _md5(path) == checksum:
            logger.info(f"{path} already present")
            continue
        url = MIRRORS[name] + filename
        logger.info(f"Downloading {url}")
        response = requests.get(url, timeout=timeout)
        response.raise_for_status()
        path.write_bytes(response.content)
        observed = _md5(path)
        if observed != checksum:
            path.unlink()
            raise DataFormatError(f"{filename}: md5 {observed} does not match {checksum}")
    return target


def load_dataset(name: str, root: Path, seed: int = 1, val_fraction: float = 0.1,
                 download: bool = False) -> Dict[str, Dataset]:
    """Load, split and normalise a dataset.

    MNIST/FashionMNIST: validation is a seeded tail of the training set.
    FER2013: validation is PublicTest, test is PrivateTest.

    Returns:
        Dictionary with 'train', 'val' and 'test' Datasets
    """
    root = Path(root)
    if name == "fer2013":
        fer = load_fer_csv(root / name / FER_FILE)
        splits = {"train": fer["train"], "val": replace(fer["public_test"], split="val"),
                  "test": replace(fer["private_test"], split="test")}
    elif name in MIRRORS:
        if download:
            download_dataset(name, root)
        folder = root / name
        full_train = load_idx(folder / IDX_FILES["train"][0], folder / IDX_FILES["train"][1], name, "train")
        test = load_idx(folder / IDX_FILES["test"][0], folder / IDX_FILES["test"][1], name, "test")
        train, val = split_validation(full_train, val_fraction, seed)
        splits = {"train": train, "val": val, "test": test}
    else:
        raise ValueError(f"Unknown dataset {name!r}")
    return normalize_splits(splits)
