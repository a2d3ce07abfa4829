"""Toy image datasets, Dirichlet label skew across nodes, and patch triggers."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def gen_synthetic(n_classes: int, height: int, width: int, n_per_class: int,
                  noise_std: float, seed: int) -> Dataset:
    """One fixed 2-D sinusoid per class plus i.i.d. Gaussian pixel noise.

    Class ``c`` uses spatial frequency ``(1 + c % 3, 1 + (c // 3) % 3)`` and a
    phase spread over the circle, so the patterns themselves do not depend on
    ``seed``; only the noise does.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if height < 8 or width < 8:
        raise ValueError("images must be at least 8x8")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    patterns = []
    for c in range(n_classes):
        fx, fy = 1 + c % 3, 1 + (c // 3) % 3
        phase = 2 * math.pi * c / n_classes
        arg = 2 * math.pi * (fx * xx / width + fy * yy / height) + phase
        patterns.append(0.5 + 0.35 * np.sin(arg))
    patterns = np.stack(patterns)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = patterns[labels] + noise_std * rng.standard_normal((len(labels), height, width))
    return Dataset(np.clip(images, 0.0, 1.0)[:, None], labels, n_classes)


def split_stratified(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.n_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return ds.subset(np.sort(train)), ds.subset(np.sort(test))


def _read_idx(path: Path, magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated file")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: bad magic 0x{got:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated file")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise ValueError(f"{path}: truncated file")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header), dims


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Load an MNIST-style IDX image/label file pair; pixels scaled to [0, 1]."""
    pix, idims = _read_idx(Path(images_path), IMAGE_MAGIC)
    lab, ldims = _read_idx(Path(labels_path), LABEL_MAGIC)
    if idims[0] != ldims[0]:
        raise ValueError(f"count mismatch: {idims[0]} images vs {ldims[0]} labels")
    images = pix.reshape(idims[0], 1, idims[1], idims[2]).astype(np.float64) / 255.0
    labels = lab.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, max(k, 2))


def write_idx(images_path, labels_path, ds: Dataset) -> None:
    n, _, h, w = ds.images.shape
    pix = np.round(ds.images[:, 0] * 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n)
                                  + ds.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Partition:
    node_indices: tuple[np.ndarray, ...]
    alpha: float  # math.inf means IID round-robin

    def __len__(self) -> int:
        return len(self.node_indices)


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, n_nodes: int, alpha: float, seed: int) -> Partition:
    """Split sample indices across nodes with per-class Dirichlet proportions."""
    if n_nodes < 2:
        raise ValueError("need at least two nodes")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.n_classes)]
    if math.isinf(alpha):
        buckets = [[] for _ in range(n_nodes)]
        offset = 0
        for idx in by_class:
            for j, s in enumerate(idx):
                buckets[(offset + j) % n_nodes].append(s)
            offset += len(idx)
        return Partition(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets), alpha)
    for _ in range(100):
        buckets = [[] for _ in range(n_nodes)]
        for idx in by_class:
            if not len(idx):
                continue
            counts = _largest_remainder(rng.dirichlet(np.full(n_nodes, alpha)), len(idx))
            for node, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[node].extend(chunk)
        if all(buckets):
            return Partition(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets), alpha)
    raise RuntimeError(f"could not give every node a sample after 100 draws (alpha={alpha})")


def label_tv_distance(ds: Dataset, part: Partition) -> float:
    """Mean total-variation distance of node label histograms from the global one."""
    glob = ds.class_counts() / len(ds)
    dists = []
    for idx in part.node_indices:
        h = np.bincount(ds.labels[idx], minlength=ds.n_classes) / len(idx)
        dists.append(0.5 * np.abs(h - glob).sum())
    return float(np.mean(dists))


# --------------------------------------------------------------------------
# triggers

SHAPES = ("square", "cross", "twin_lines", "single_pixel")
POSITIONS = ("bottom_right", "top_right", "center", "top_center_left")


@dataclass(frozen=True)
class TriggerSpec:
    shape: str = "square"
    size: int = 3
    position: str = "bottom_right"
    value: float = 0.5
    target_label: int = 7
    max_fraction: float = field(default=0.1, repr=False)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown trigger shape {self.shape!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown trigger position {self.position!r}")
        if self.size < 1:
            raise ValueError("trigger size must be positive")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("trigger value must lie in [0, 1]")

    def _box(self) -> tuple[int, int]:
        if self.shape == "twin_lines":
            return 3, self.size
        if self.shape == "single_pixel":
            return 1, 1
        return self.size, self.size

    def footprint(self, height: int, width: int) -> np.ndarray:
        """Boolean (H, W) mask of the pixels the trigger overwrites."""
        bh, bw = self._box()
        if self.position == "bottom_right":
            r0, c0 = height - 1 - bh, width - 1 - bw
        elif self.position == "top_right":
            r0, c0 = 1, width - 1 - bw
        elif self.position == "center":
            r0, c0 = (height - bh) // 2, (width - bw) // 2
        else:  # top_center_left
            r0, c0 = 1, width // 2 - bw
        if r0 < 0 or c0 < 0 or r0 + bh > height or c0 + bw > width:
            raise ValueError("trigger footprint out of image bounds")
        box = np.zeros((bh, bw), dtype=bool)
        if self.shape in ("square", "single_pixel"):
            box[:] = True
        elif self.shape == "cross":
            box[bh // 2, :] = True
            box[:, bw // 2] = True
        else:
            box[0, :] = True
            box[2, :] = True
        mask = np.zeros((height, width), dtype=bool)
        mask[r0:r0 + bh, c0:c0 + bw] = box
        if mask.sum() > self.max_fraction * height * width:
            raise ValueError("trigger footprint exceeds the allowed pixel fraction")
        return mask


def apply_trigger(x: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Overwrite the footprint pixels (all channels) with ``spec.value``.

    Works on a single ``(C, H, W)`` image or a ``(B, C, H, W)`` batch.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    mask = spec.footprint(out.shape[-2], out.shape[-1])
    out[..., mask] = spec.value
    return out


def poison(ds: Dataset, spec: TriggerSpec, fraction: float, seed: int) -> Dataset:
    """Trigger and relabel a seeded random ``floor(fraction * n)`` subset."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("poison fraction must lie in (0, 1]")
    n_poison = int(math.floor(fraction * len(ds)))
    if n_poison == 0:
        return ds
    idx = np.random.default_rng(seed).choice(len(ds), size=n_poison, replace=False)
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[idx] = apply_trigger(images[idx], spec)
    labels[idx] = spec.target_label
    return Dataset(images, labels, ds.n_classes)


def poisoned_mask(ds: Dataset, fraction: float, seed: int) -> np.ndarray:
    """Which indices :func:`poison` would pick for the same arguments."""
    out = np.zeros(len(ds), dtype=bool)
    n_poison = int(math.floor(fraction * len(ds)))
    if n_poison:
        out[np.random.default_rng(seed).choice(len(ds), size=n_poison, replace=False)] = True
    return out
