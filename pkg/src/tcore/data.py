"""Datasets: in-memory representation, CIFAR-10 ingestion, synthetic glyphs, splits.

Images are stored as ``float32`` arrays of shape ``(N, C, H, W)`` in ``[0, 1]``.
Every sample carries a stable integer id; pipelines refer to samples by id,
never by array position.

Ground-truth poison flags are kept in a :class:`GroundTruth` holder that
counts reads, so tests can assert that defense code never looked at them.
Defense stages should be handed :meth:`LabeledDataset.defense_view`.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CorruptLabelError, DegenerateSplitError, FormatError, ParameterError

CIFAR10_CLASSES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]
CIFAR10_RECORD = 3073
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"


class GroundTruth:
    """Evaluation-only poison flags with a read counter."""

    def __init__(self, flags: np.ndarray):
        self._flags = np.asarray(flags, dtype=bool).copy()
        self._flags.setflags(write=False)
        self.reads = 0

    def read(self) -> np.ndarray:
        self.reads += 1
        return self._flags

    def __len__(self):
        return len(self._flags)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class LabeledDataset:
    """Images, labels and ids; immutable after construction."""

    def __init__(
        self,
        images: np.ndarray,
        labels: np.ndarray,
        ids: Optional[np.ndarray] = None,
        num_classes: Optional[int] = None,
        poison_flags: Optional[np.ndarray] = None,
        class_names: Optional[List[str]] = None,
        ground_truth: Optional[GroundTruth] = None,
    ):
        images = np.ascontiguousarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ParameterError(f"images must be N x C x H x W, got shape {images.shape}")
        n = images.shape[0]
        if labels.shape != (n,):
            raise ParameterError("labels must have one entry per image")
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if ids.shape != (n,) or len(np.unique(ids)) != n:
            raise ParameterError("ids must be unique, one per image")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ParameterError("pixel values must lie in [0, 1]")
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if n else 0
        if n and (labels.min() < 0 or labels.max() >= num_classes):
            raise ParameterError("labels out of range")
        if ground_truth is None:
            flags = np.zeros(n, dtype=bool) if poison_flags is None else poison_flags
            ground_truth = GroundTruth(flags)
        if len(ground_truth) != n:
            raise ParameterError("poison flags must have one entry per image")

        self.images = _frozen(images)
        self.labels = _frozen(labels)
        self.ids = _frozen(ids)
        self.num_classes = int(num_classes)
        self.class_names = list(class_names) if class_names else [str(k) for k in range(self.num_classes)]
        self._truth: Optional[GroundTruth] = ground_truth
        self._lookup: Optional[Dict[int, int]] = None
        self._class_index: Optional[Dict[int, np.ndarray]] = None

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        c, h, w = self.image_shape if len(self) else (0, 0, 0)
        return f"LabeledDataset(n={len(self)}, classes={self.num_classes}, shape={c}x{h}x{w})"

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def ground_truth(self) -> Optional[GroundTruth]:
        """Flag holder, or ``None`` on a defense view."""
        return self._truth

    def defense_view(self) -> "LabeledDataset":
        """Same samples with the ground-truth flags removed."""
        view = LabeledDataset.__new__(LabeledDataset)
        view.__dict__.update(self.__dict__)
        view._truth = None
        return view

    @property
    def class_index(self) -> Dict[int, np.ndarray]:
        """Map class -> sorted ids of that class (every class present, possibly empty)."""
        if self._class_index is None:
            self._class_index = {
                k: _frozen(np.sort(self.ids[self.labels == k])) for k in range(self.num_classes)
            }
        return self._class_index

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        """Array positions of ``ids``; unknown ids raise ``KeyError``."""
        if self._lookup is None:
            self._lookup = {int(i): p for p, i in enumerate(self.ids)}
        lookup = self._lookup
        try:
            return np.fromiter((lookup[int(i)] for i in ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown sample id {exc.args[0]}") from None

    def subset(self, ids: Sequence[int]) -> "LabeledDataset":
        pos = self.positions(ids)
        truth = GroundTruth(self._truth._flags[pos]) if self._truth is not None else None
        ds = LabeledDataset(
            self.images[pos], self.labels[pos], self.ids[pos], self.num_classes,
            class_names=self.class_names, ground_truth=truth,
        )
        if truth is None:
            ds._truth = None
        return ds

    def sorted_by_id(self) -> "LabeledDataset":
        return self.subset(np.sort(self.ids))


# --------------------------------------------------------------------------- CIFAR-10


def decode_cifar10_records(raw: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Decode concatenated 3073-byte records into (images, labels)."""
    if len(raw) == 0 or len(raw) % CIFAR10_RECORD:
        raise FormatError(f"CIFAR-10 batch length {len(raw)} is not a positive multiple of {CIFAR10_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise CorruptLabelError(f"label byte {int(labels.max())} >= 10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def encode_cifar10_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`decode_cifar10_records` for images quantized to /255."""
    pix = np.rint(np.asarray(images, dtype=np.float64) * 255.0).astype(np.uint8).reshape(len(labels), -1)
    out = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1)
    return out.tobytes()


def load_cifar10(path, train: bool = True) -> LabeledDataset:
    """Load the binary CIFAR-10 distribution.

    ``path`` may be the extracted ``cifar-10-batches-bin`` directory (the
    five training batches or the test batch are read depending on ``train``)
    or a single batch file.
    """
    path = Path(path)
    if path.is_dir():
        names = CIFAR10_TRAIN_FILES if train else [CIFAR10_TEST_FILE]
        missing = [n for n in names if not (path / n).exists()]
        if missing:
            raise FormatError(f"missing CIFAR-10 batch files: {missing}")
        files = [path / n for n in names]
    else:
        files = [path]
    chunks = [decode_cifar10_records(f.read_bytes()) for f in files]
    images = np.concatenate([c[0] for c in chunks])
    labels = np.concatenate([c[1] for c in chunks])
    return LabeledDataset(images, labels, num_classes=10, class_names=CIFAR10_CLASSES)


# --------------------------------------------------------------------------- glyphs

_SHAPES = ["disk", "square", "triangle", "plus", "ring", "hbar", "vbar", "diamond", "cross", "ell"]


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates relative to the glyph center, in units of the glyph radius
    au, av = np.abs(u), np.abs(v)
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (au <= 0.8) & (av <= 0.8)
    if kind == "triangle":
        return (v <= 0.8) & (v >= -0.9 + 1.9 * au)
    if kind == "plus":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.4)
    if kind == "hbar":
        return (au <= 1.0) & (av <= 0.35)
    if kind == "vbar":
        return (av <= 1.0) & (au <= 0.35)
    if kind == "diamond":
        return au + av <= 1.0
    if kind == "cross":
        return ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4)) & (au <= 0.9) & (av <= 0.9)
    if kind == "ell":
        return ((au <= 0.9) & (v >= 0.45) & (v <= 0.9)) | ((u >= -0.9) & (u <= -0.45) & (av <= 0.9))
    raise ValueError(kind)


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def generate_glyphs(num_classes: int, per_class: int, size: int, rng_seed: int) -> LabeledDataset:
    """Render a synthetic shape-per-class dataset.

    Each class has its own shape and base hue; position, scale, hue, brightness,
    background tint and pixel noise are randomized per image. The corners are
    left as background so small corner triggers never collide with glyphs.
    """
    if num_classes < 2 or per_class < 10 or size < 16:
        raise ParameterError("need num_classes >= 2, per_class >= 10, size >= 16")
    rng = np.random.default_rng(rng_seed)
    n = num_classes * per_class
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    grid = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for i, k in enumerate(labels):
        kind = _SHAPES[k % len(_SHAPES)]
        base_hue = (k * 0.618034 + 0.1 * (k // len(_SHAPES))) % 1.0
        radius = rng.uniform(0.22, 0.32)
        cx, cy = rng.uniform(-0.08, 0.08, size=2)
        mask = _shape_mask(kind, (xx - cx) / radius, (yy - cy) / radius)
        color = _hsv_to_rgb((base_hue + rng.normal(0, 0.03)) % 1.0, rng.uniform(0.5, 1.0), rng.uniform(0.55, 0.95))
        background = rng.uniform(0.0, 0.25, size=3)
        img = np.where(mask[None], color[:, None, None], background[:, None, None])
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    names = [f"{_SHAPES[k % len(_SHAPES)]}{k // len(_SHAPES) or ''}" for k in range(num_classes)]
    return LabeledDataset(images, labels, num_classes=num_classes, class_names=names)


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    pretrain_fraction: float
    downstream_fraction: float
    test_fraction: float
    rng_seed: int = 0

    def __post_init__(self):
        fr = (self.pretrain_fraction, self.downstream_fraction, self.test_fraction)
        if any(f < 0 or f > 1 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must lie in [0, 1] and sum to 1, got {fr}")


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


def split(dataset: LabeledDataset, spec: SplitSpec) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified (pretrain, downstream, test) split; remainders go downstream."""
    rng = np.random.default_rng(spec.rng_seed)
    parts: List[List[np.ndarray]] = [[], [], []]
    for k in range(dataset.num_classes):
        ids = dataset.class_index[k]
        perm = ids[rng.permutation(len(ids))]
        n_pre = _floor(spec.pretrain_fraction * len(ids))
        n_test = _floor(spec.test_fraction * len(ids))
        chunks = (perm[:n_pre], perm[n_pre + n_test:], perm[n_pre:n_pre + n_test])
        for name, chunk, dest in zip(("pretrain", "downstream", "test"), chunks, parts):
            if len(chunk) == 0:
                raise DegenerateSplitError(f"{name} split would contain no samples of class {k}")
            dest.append(chunk)
    return tuple(dataset.subset(np.sort(np.concatenate(p))) for p in parts)


# --------------------------------------------------------------------------- persistence


def save_dataset(dataset: LabeledDataset, directory, **extra) -> Path:
    """Write manifest.json plus raw little-endian tensors."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataset.images.astype("<f4").tofile(d / "images.f32")
    dataset.labels.astype("<i4").tofile(d / "labels.i32")
    dataset.ids.astype("<i8").tofile(d / "ids.i64")
    truth = dataset._truth
    if truth is not None:
        truth._flags.astype(np.uint8).tofile(d / "flags.u8")
    manifest = {
        "num_samples": len(dataset),
        "image_shape": list(dataset.image_shape) if len(dataset) else [0, 0, 0],
        "num_classes": dataset.num_classes,
        "class_names": dataset.class_names,
        "files": {"images": "images.f32", "labels": "labels.i32", "ids": "ids.i64"},
        **extra,
    }
    if truth is not None:
        manifest["files"]["poison_flags"] = "flags.u8"
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def load_dataset(directory) -> LabeledDataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset manifest in {d}: {exc}") from exc
    n = manifest["num_samples"]
    shape = (n, *manifest["image_shape"])
    files = manifest["files"]
    images = np.fromfile(d / files["images"], dtype="<f4")
    if images.size != int(np.prod(shape)):
        raise FormatError("image tensor size does not match manifest")
    labels = np.fromfile(d / files["labels"], dtype="<i4").astype(np.int64)
    ids = np.fromfile(d / files["ids"], dtype="<i8")
    flags = None
    if "poison_flags" in files and os.path.exists(d / files["poison_flags"]):
        flags = np.fromfile(d / files["poison_flags"], dtype=np.uint8).astype(bool)
    return LabeledDataset(
        images.reshape(shape), labels, ids, manifest["num_classes"],
        poison_flags=flags, class_names=manifest.get("class_names"),
    )
