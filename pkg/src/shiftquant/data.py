"""Dataset loading: IDX image/label pairs, CSV, and a built-in synthetic
two-class oriented-stripe task small enough to train in seconds.

Images are always delivered as float64 [N, C, H, W] scaled into [0, 1];
labels as int64 [N].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Batch

IDX_IMAGES_MAGIC = 0x803
IDX_LABELS_MAGIC = 0x801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    source: str = "memory"
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError("need exactly one label per image")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("images must be scaled into [0, 1]")
        self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], source=self.source)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield :class:`Batch` objects, shuffled when an rng is given.
        The trailing short batch is kept."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        order = np.arange(len(self))
        if rng is not None:
            rng.shuffle(order)
        for start in range(0, len(self), batch_size):
            sel = order[start : start + batch_size]
            yield Batch(self.images[sel], self.labels[sel])

    def as_batch(self) -> Batch:
        return Batch(self.images, self.labels)


# ---------------------------------------------------------------------------
# IDX (big-endian binary image/label files).
# ---------------------------------------------------------------------------

def _read_idx_images(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: bad IDX image magic 0x{magic:x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX label header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{path}: bad IDX label magic 0x{magic:x}")
    if len(raw) < 8 + n:
        raise ValueError(f"{path}: expected {8 + n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx_dir(root) -> Dataset:
    """Directory holding one ``*idx3-ubyte*`` image file and one
    ``*idx1-ubyte*`` label file (gzip not supported; decompress first)."""
    root = Path(root)
    imgs = sorted(p for p in root.iterdir() if "idx3-ubyte" in p.name)
    lbls = sorted(p for p in root.iterdir() if "idx1-ubyte" in p.name)
    if len(imgs) != 1 or len(lbls) != 1:
        raise FileNotFoundError(
            f"{root}: need exactly one idx3-ubyte and one idx1-ubyte file, "
            f"found {len(imgs)} and {len(lbls)}"
        )
    images = _read_idx_images(imgs[0])
    labels = _read_idx_labels(lbls[0])
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{root}: {images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images, labels, source=str(root))


# ---------------------------------------------------------------------------
# CSV: one row per sample, label first, then H*W pixel columns in 0..255.
# ---------------------------------------------------------------------------

def load_csv(path, image_side: int | None = None) -> Dataset:
    path = Path(path)
    labels: list[int] = []
    rows: list[np.ndarray] = []
    width = None
    with path.open("r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if lineno == 1 and not cells[0].strip().lstrip("-").isdigit():
                continue  # header row
            try:
                values = [float(c) for c in cells]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric cell") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ValueError(
                    f"{path}: line {lineno}: expected {width} columns, found {len(values)}"
                )
            labels.append(int(values[0]))
            rows.append(np.asarray(values[1:], dtype=np.float64))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    pixels = np.stack(rows)
    side = image_side if image_side is not None else int(round(np.sqrt(pixels.shape[1])))
    if side * side != pixels.shape[1]:
        raise ValueError(
            f"{path}: {pixels.shape[1]} pixel columns is not a square image; pass image_side"
        )
    images = pixels.reshape(-1, 1, side, side) / 255.0
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(f"{path}: pixel values must lie in 0..255")
    return Dataset(images, np.asarray(labels, dtype=np.int64), source=str(path))


# ---------------------------------------------------------------------------
# Synthetic stripes. Class 0 is vertical bars, class 1 horizontal bars; the
# per-sample contrast varies and additive noise keeps the task honest. The
# default amplitude band sits just above twice the largest evaluated attack
# budget (8/255), so a sign attack can flip low-contrast samples whenever the
# learned margin is slack: clean accuracy saturates while adversarial
# accuracy still separates robust solutions from brittle ones.
# ---------------------------------------------------------------------------

def make_synthetic(
    n: int,
    seed: int | np.random.Generator = 0,
    side: int = 8,
    amplitude: tuple[float, float] = (0.07, 0.10),
    noise: float = 0.1,
) -> Dataset:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n < 2:
        raise ValueError("need at least two samples")
    cols = np.arange(side)
    vertical = np.where(cols % 2 == 0, 1.0, -1.0)[None, :] * np.ones((side, 1))
    horizontal = vertical.T
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    rng.shuffle(labels)
    amp = rng.uniform(amplitude[0], amplitude[1], size=n)
    base = np.where(labels[:, None, None] == 0, vertical[None], horizontal[None])
    x = 0.5 + amp[:, None, None] * base
    x = x + rng.normal(0.0, noise, size=x.shape)
    images = np.clip(x, 0.0, 1.0)[:, None, :, :]
    return Dataset(images, labels, source="synthetic")


def load_dataset(spec: str, **kwargs) -> Dataset:
    """Dispatch on a source string.

    ``synthetic[:n[:seed]]`` builds the stripe task; anything else is a path,
    read as an IDX directory when it is a directory and as CSV otherwise.
    """
    if spec.startswith("synthetic"):
        parts = spec.split(":")
        n = int(parts[1]) if len(parts) > 1 else 512
        seed = int(parts[2]) if len(parts) > 2 else 0
        return make_synthetic(n, seed=seed, **kwargs)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if path.is_dir():
        return load_idx_dir(path)
    return load_csv(path, **kwargs)
