"""Dataset ingestion, pixel normalization and deterministic batching.

Every dataset is held in memory as a float32 tensor of shape ``(N, C, H, W)``
with pixels in ``[0, 1]`` plus an int64 label vector.  Raw files are read from
``<root>/<name>/`` in the layout the upstream distributions use:

* ``mnist`` / ``emnist``: IDX files (optionally gzipped).
* ``cifar10``: the pickled ``data_batch_*`` / ``test_batch`` files.
* ``cinic10``: ``<split>/<class>/*.png`` image folders.

``synthetic`` needs no files; it draws class-conditional Gaussian blobs.
"""

from __future__ import annotations

import gzip
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from ukie.errors import ConfigError, IngestionError

SUPPORTED_DATASETS = ("mnist", "emnist", "cifar10", "cinic10", "synthetic")

DEFAULT_DATA_ROOT = "data"


def data_root() -> Path:
    """Dataset root from ``UKIE_DATA_ROOT``, else ``./data``."""
    return Path(os.environ.get("UKIE_DATA_ROOT", DEFAULT_DATA_ROOT))


_NUM_CLASSES = {"mnist": 10, "emnist": 47, "cifar10": 10, "cinic10": 10}


@dataclass(frozen=True)
class LabeledSample:
    x: torch.Tensor  # (C, H, W) in [0, 1]
    y: int


@dataclass(frozen=True)
class LabeledDataset:
    """An immutable in-memory labelled image set."""

    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    name: str = "unnamed"

    def __post_init__(self):
        if self.x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) images, got shape {tuple(self.x.shape)}")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("label vector length does not match the number of images")
        if len(self.y) and (int(self.y.min()) < 0 or int(self.y.max()) >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    @property
    def dim(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.x[i], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    def subset(self, n: int | None = None, *, indices: Sequence[int] | None = None) -> "LabeledDataset":
        """Return the first ``n`` samples, or the given indices."""
        if indices is None:
            if n is None or n >= len(self):
                return self
            indices = range(n)
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes, self.name)

    def class_counts(self) -> torch.Tensor:
        return torch.bincount(self.y, minlength=self.num_classes)


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 512
    num_classes: int = 10
    shape: tuple[int, int, int] = (1, 8, 8)
    seed: int = 0


@dataclass
class Batch:
    x: torch.Tensor
    y: torch.Tensor
    indices: torch.Tensor = field(repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]


def normalize_pixels(arr) -> torch.Tensor:
    """Map raw pixels to float32 in ``[0, 1]``.

    Integer input is divided by 255; float input is clipped.  Applying the
    function to its own output is a no-op.
    """
    if isinstance(arr, np.ndarray):
        if np.issubdtype(arr.dtype, np.integer):
            return torch.from_numpy(arr.astype(np.float32) / 255.0)
        arr = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    elif not isinstance(arr, torch.Tensor):
        arr = torch.as_tensor(arr)
    if not arr.is_floating_point():
        return arr.to(torch.float32) / 255.0
    return arr.to(torch.float32).clamp(0.0, 1.0)


def make_synthetic(
    n: int, num_classes: int, shape=(1, 8, 8), seed: int = 0, *, sample_seed: int | None = None
) -> LabeledDataset:
    """Class-conditional Gaussian blob images, balanced to within one sample.

    Each class owns a blob centre, width and tint drawn from ``seed``; the
    samples jitter centre and amplitude and add pixel noise from
    ``sample_seed`` (defaults to ``seed``).  Two splits that share ``seed`` but
    differ in ``sample_seed`` therefore share class geometry.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    c, h, w = shape
    g = torch.Generator().manual_seed(seed)
    centres = torch.rand(num_classes, 2, generator=g) * 0.6 + 0.2
    widths = torch.rand(num_classes, generator=g) * 0.12 + 0.08
    tints = torch.rand(num_classes, c, generator=g) * 0.5 + 0.5

    gs = torch.Generator().manual_seed(seed if sample_seed is None else sample_seed)
    labels = (torch.arange(n) % num_classes)[torch.randperm(n, generator=gs)]
    jitter = torch.randn(n, 2, generator=gs) * 0.04
    amp = torch.rand(n, generator=gs) * 0.3 + 0.7

    mu = centres[labels] + jitter
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
    d2 = (ys.view(1, h, 1) - mu[:, 0].view(n, 1, 1)) ** 2 + (xs.view(1, 1, w) - mu[:, 1].view(n, 1, 1)) ** 2
    blob = torch.exp(-d2 / (2 * widths[labels].view(n, 1, 1) ** 2)) * amp.view(n, 1, 1)
    img = blob.unsqueeze(1) * tints[labels].view(n, c, 1, 1)
    img = img + 0.02 * torch.randn(n, c, h, w, generator=gs)
    return LabeledDataset(normalize_pixels(img), labels.to(torch.long), num_classes, "synthetic")


def make_batches(ds: LabeledDataset, batch_size: int, seed: int) -> list[Batch]:
    """Shuffle with ``seed`` and cut into full batches; the short tail is dropped."""
    if batch_size > len(ds):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ds)}")
    if batch_size < 2 * ds.num_classes:
        raise ValueError(
            f"batch_size {batch_size} is below 2*num_classes={2 * ds.num_classes}; "
            "per-class statistics would be mostly empty"
        )
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(ds), generator=g)
    out = []
    for start in range(0, len(ds) - batch_size + 1, batch_size):
        idx = perm[start : start + batch_size]
        out.append(Batch(ds.x[idx], ds.y[idx], idx))
    return out


def iterate_batches(ds: LabeledDataset, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless batch stream; epoch ``e`` is shuffled with ``seed + e``."""
    epoch = 0
    while True:
        yield from make_batches(ds, batch_size, seed + epoch)
        epoch += 1


# --- raw readers -----------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file (the MNIST container format), gzipped or not."""
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"{path}: not an IDX file")
    dtype = _IDX_DTYPES.get(raw[2])
    if dtype is None:
        raise IngestionError(f"{path}: unknown IDX element type 0x{raw[2]:02x}")
    ndim = raw[3]
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise IngestionError(f"{path}: truncated IDX payload")
    return data.reshape(dims)


def _find(folder: Path, stems: Sequence[str]) -> Path:
    for stem in stems:
        for cand in (stem, stem + ".gz"):
            p = folder / cand
            if p.exists():
                return p
    raise IngestionError(f"missing dataset file {folder / stems[0]} (looked for {', '.join(stems)})")


def _load_mnist_like(folder: Path, split: str, prefix: str = "") -> tuple[np.ndarray, np.ndarray]:
    tag = "train" if split == "train" else "t10k"
    if prefix:
        tag = "train" if split == "train" else "test"
    img_stems = [f"{prefix}{tag}-images-idx3-ubyte", f"{prefix}{tag}-images.idx3-ubyte"]
    lbl_stems = [f"{prefix}{tag}-labels-idx1-ubyte", f"{prefix}{tag}-labels.idx1-ubyte"]
    images = read_idx(_find(folder, img_stems))
    labels = read_idx(_find(folder, lbl_stems))
    if len(images) != len(labels):
        raise IngestionError(f"{folder}: image/label count mismatch")
    return images, labels


def _load_cifar10(folder: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    if (folder / "cifar-10-batches-py").is_dir():
        folder = folder / "cifar-10-batches-py"
    names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
    xs, ys = [], []
    for name in names:
        p = folder / name
        if not p.exists():
            raise IngestionError(f"missing dataset file {p}")
        with open(p, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d[b"labels"], dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _load_cinic10(folder: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    from PIL import Image

    split_dir = folder / split
    if not split_dir.is_dir():
        raise IngestionError(f"missing dataset directory {split_dir}")
    classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not classes:
        raise IngestionError(f"{split_dir}: no class folders")
    xs, ys = [], []
    for label, cls in enumerate(classes):
        for img_path in sorted((split_dir / cls).glob("*.png")):
            with Image.open(img_path) as im:
                xs.append(np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1))
            ys.append(label)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def load_dataset(
    name: str,
    split: str = "train",
    root: str | Path | None = None,
    *,
    synthetic: SyntheticConfig | None = None,
    limit: int | None = None,
) -> LabeledDataset:
    """Load ``name``/``split`` from ``root`` as a normalized :class:`LabeledDataset`.

    ``limit`` keeps the first ``limit`` samples of the upstream order.
    """
    if name not in SUPPORTED_DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {', '.join(SUPPORTED_DATASETS)}", "dataset.name")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}", "dataset.split")

    if name == "synthetic":
        cfg = synthetic or SyntheticConfig()
        # the test split redraws samples around the same class geometry
        sample_seed = None if split == "train" else cfg.seed + 1_000_003
        ds = make_synthetic(cfg.n, cfg.num_classes, tuple(cfg.shape), cfg.seed, sample_seed=sample_seed)
        return ds.subset(limit)

    if root is None:
        root = data_root()
    folder = Path(root) / name
    if not folder.is_dir():
        raise IngestionError(f"missing dataset directory {folder}")

    if name == "mnist":
        images, labels = _load_mnist_like(folder, split)
        images = images[:, None]
    elif name == "emnist":
        images, labels = _load_mnist_like(folder, split, prefix="emnist-balanced-")
        # EMNIST ships images transposed relative to MNIST
        images = np.ascontiguousarray(images.transpose(0, 2, 1))[:, None]
    elif name == "cifar10":
        images, labels = _load_cifar10(folder, split)
    else:
        images, labels = _load_cinic10(folder, split)

    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = normalize_pixels(np.ascontiguousarray(images))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    return LabeledDataset(x, y, _NUM_CLASSES[name], name)

