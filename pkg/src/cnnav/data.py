"""Synthetic fine-grained dataset, PPM/PGM raster I/O and batching.

Every image of the synthetic task shares one smooth background template; a
class is identified only by a small motif pasted at a random position. That
mimics the small inter-class differences of fine-grained data while keeping
generation cheap and exactly reproducible.

Randomness comes from numpy's PCG64 generator, with independent child streams
(``SeedSequence.spawn``) for the template, the motifs, motif placement and
pixel noise, so changing e.g. ``noise_std`` leaves the motif positions alone.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

__all__ = [
    "SyntheticSpec",
    "Dataset",
    "generate_synthetic",
    "render_sample",
    "split_indices",
    "batch_indices",
    "batches",
    "load_ppm",
    "save_ppm",
    "load_pgm",
    "save_pgm",
    "save_dataset",
    "load_dataset",
    "RasterFormatError",
    "DatasetFormatError",
    "TRAIN_FRACTION",
]

TRAIN_FRACTION = 0.8
TEMPLATE_LOW, TEMPLATE_HIGH = 0.35, 0.65
PathLike = Union[str, Path]


class DatasetFormatError(ValueError):
    """Malformed ``index.tsv``."""


class RasterFormatError(ValueError):
    """Malformed or unsupported PPM/PGM file."""


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 20
    image_size: int = 64
    motif_size: Optional[int] = None
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1 or self.image_size < 1:
            raise ValueError("num_classes, samples_per_class and image_size must be positive")
        if not 0 < self.motif < self.image_size:
            raise ValueError(f"motif_size must lie in (0, image_size), got {self.motif}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def motif(self) -> int:
        return self.motif_size if self.motif_size is not None else max(1, self.image_size // 8)


@dataclass
class Dataset:
    """Images in [0, 1] as float32 [M,3,H,W] with integer labels and a fixed split."""

    images: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    motif_boxes: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        if name == "all":
            return np.arange(len(self.labels))
        raise ValueError(f"unknown split {name!r}")


def split_indices(labels: np.ndarray, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per class, the first 80% of its samples (in dataset order) train, the rest test."""
    train, test = [], []
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        n_train = int(round(TRAIN_FRACTION * len(members)))
        train.extend(members[:n_train])
        test.extend(members[n_train:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def _template(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth low-frequency background shared by every image, kept in a narrow grey band."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((3, size, size))
    for ch in range(3):
        acc = np.zeros((size, size))
        for _ in range(4):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fy * yy + fx * xx) / size + phase)
        lo, hi = acc.min(), acc.max()
        out[ch] = 0.5 if hi == lo else TEMPLATE_LOW + (TEMPLATE_HIGH - TEMPLATE_LOW) * (acc - lo) / (hi - lo)
    return out


def _hue_rgb(hue: float) -> np.ndarray:
    """Fully saturated colour at ``hue`` in [0, 1)."""
    return np.clip(np.abs((hue * 6.0 + np.array([0.0, 4.0, 2.0])) % 6.0 - 3.0) - 1.0, 0.0, 1.0)


def _motifs(rng: np.random.Generator, num_classes: int, m: int) -> np.ndarray:
    """One checkered colour patch per class.

    Class ``k`` uses a saturated colour with hue near ``k / num_classes``; its
    checker cells alternate between that colour and its complement, so every
    motif averages to mid grey and the class is only visible locally. The cell
    size is drawn per class, so the texture differs as well as the colours.
    """
    out = np.empty((num_classes, 3, m, m))
    yy, xx = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    for k in range(num_classes):
        hue = (k + rng.uniform(-0.2, 0.2)) / num_classes
        cell = int(rng.integers(1, max(2, m // 2) + 1))
        checker = ((yy // cell + xx // cell) % 2).astype(float)
        colour = _hue_rgb(hue % 1.0)
        out[k] = np.where(checker[None] > 0, 1.0 - colour[:, None, None], colour[:, None, None])
    return out


def render_sample(
    template: np.ndarray, motif: np.ndarray, row: int, col: int, noise: Optional[np.ndarray] = None
) -> np.ndarray:
    """Paste ``motif`` onto ``template`` at (row, col), add noise, clip to [0, 1]."""
    img = template.copy()
    m = motif.shape[-1]
    img[:, row : row + m, col : col + m] = motif
    if noise is not None:
        img += noise
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    t_rng, m_rng, p_rng, n_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(4))
    size, m = spec.image_size, spec.motif
    template = _template(t_rng, size)
    motifs = _motifs(m_rng, spec.num_classes, m)

    total = spec.num_classes * spec.samples_per_class
    images = np.empty((total, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class).astype(np.int64)
    boxes = p_rng.integers(0, size - m + 1, size=(total, 2))
    for i in range(total):
        noise = n_rng.normal(0.0, spec.noise_std, size=(3, size, size)) if spec.noise_std > 0 else None
        images[i] = render_sample(template, motifs[labels[i]], boxes[i, 0], boxes[i, 1], noise)
    train, test = split_indices(labels, spec.num_classes)
    return Dataset(images, labels, train, test, spec.num_classes, boxes)


def batch_indices(indices: np.ndarray, batch_size: int, shuffle_seed: Optional[int] = None) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    indices = np.asarray(indices)
    if shuffle_seed is not None:
        indices = np.random.default_rng(shuffle_seed).permutation(indices)
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def batches(
    dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None, split: str = "train"
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) over one split; the last batch may be short."""
    for idx in batch_indices(dataset.split(split), batch_size, shuffle_seed):
        yield dataset.images[idx], dataset.labels[idx]


# --------------------------------------------------------------------------
# raster I/O
# --------------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _read_netpbm(path: PathLike, magic: bytes) -> Tuple[np.ndarray, int, int]:
    buf = Path(path).read_bytes()
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise RasterFormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != magic:
        raise RasterFormatError(f"{path}: expected {magic.decode()} file, got {fields[0][:2]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise RasterFormatError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise RasterFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1 or pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise RasterFormatError(f"{path}: malformed header")
    return np.frombuffer(buf, dtype=np.uint8, offset=pos + 1), width, height


def load_ppm(path: PathLike) -> np.ndarray:
    """Binary P6 -> float32 [3,H,W] in [0, 1]."""
    pix, w, h = _read_netpbm(path, b"P6")
    if pix.size != 3 * w * h:
        raise RasterFormatError(f"{path}: expected {3 * w * h} pixel bytes, found {pix.size}")
    return (pix.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def load_pgm(path: PathLike) -> np.ndarray:
    """Binary P5 -> float32 [H,W] in [0, 1]."""
    pix, w, h = _read_netpbm(path, b"P5")
    if pix.size != w * h:
        raise RasterFormatError(f"{path}: expected {w * h} pixel bytes, found {pix.size}")
    return (pix.reshape(h, w) / np.float32(255)).astype(np.float32)


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(arr: np.ndarray, path: PathLike) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"save_ppm expects [3,H,W], got {arr.shape}")
    _, h, w = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + _quantize(arr).transpose(1, 2, 0).tobytes())


def save_pgm(arr: np.ndarray, path: PathLike) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"save_pgm expects [H,W] or [1,H,W], got {arr.shape}")
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _quantize(arr).tobytes())


def save_dataset(dataset: Dataset, out_dir: PathLike) -> Path:
    """Write ``img_XXXXX.ppm`` files plus ``index.tsv`` (relative path, TAB, label)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
        name = f"img_{i:05d}.ppm"
        save_ppm(img, out / name)
        lines.append(f"{name}\t{int(label)}\n")
    (out / "index.tsv").write_text("".join(lines))
    return out / "index.tsv"


def load_dataset(root: PathLike, num_classes: Optional[int] = None) -> Dataset:
    """Read an ``index.tsv`` directory; the split is recomputed per class in file order."""
    root = Path(root)
    paths, labels = [], []
    for lineno, line in enumerate((root / "index.tsv").read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetFormatError(f"{root / 'index.tsv'} line {lineno}: expected 'path<TAB>label'")
        try:
            labels.append(int(parts[1]))
        except ValueError:
            raise DatasetFormatError(f"{root / 'index.tsv'} line {lineno}: label {parts[1]!r} is not an integer") from None
        paths.append(parts[0])
    labels_arr = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels_arr.max()) + 1 if len(labels_arr) else 0
    images = np.stack([load_ppm(root / p) for p in paths]) if paths else np.zeros((0, 3, 0, 0), np.float32)
    train, test = split_indices(labels_arr, num_classes)
    return Dataset(images, labels_arr, train, test, num_classes)
