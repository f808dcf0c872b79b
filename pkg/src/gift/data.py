"""Datasets: IDX ingestion, synthetic generators, IPC subsets and DSA-style augmentation."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .labels import LabelMatrix, load_labels, one_hot, save_labels

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class DatasetBundle:
    """Images plus every label artifact attached to them.

    ``derived`` carries label matrices built downstream of the teacher
    (smoothed, refined), keyed by role.
    """

    images: np.ndarray
    hard: LabelMatrix
    num_classes: int
    name: str = "dataset"
    soft: Optional[LabelMatrix] = None
    teacher_logits: Optional[np.ndarray] = None
    derived: Dict[str, LabelMatrix] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float64)
        n = self.images.shape[0]
        if len(self.hard) != n:
            raise DataError(f"{self.name}: {n} images but {len(self.hard)} hard labels")
        if self.hard.num_classes != self.num_classes:
            raise DataError(f"{self.name}: hard labels have {self.hard.num_classes} columns, expected {self.num_classes}")
        if self.soft is not None and self.soft.shape != (n, self.num_classes):
            raise DataError(f"{self.name}: soft labels shape {self.soft.shape} != {(n, self.num_classes)}")
        if self.teacher_logits is not None and self.teacher_logits.shape != (n, self.num_classes):
            raise DataError(f"{self.name}: teacher logits shape {self.teacher_logits.shape} != {(n, self.num_classes)}")
        for role, lm in self.derived.items():
            if lm.shape != (n, self.num_classes):
                raise DataError(f"{self.name}: {role} labels shape {lm.shape} != {(n, self.num_classes)}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def classes(self) -> np.ndarray:
        return self.hard.classes()

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def labels(self, role: str) -> LabelMatrix:
        if role == "hard":
            return self.hard
        if role == "soft":
            if self.soft is None:
                raise DataError(f"{self.name}: no soft labels attached")
            return self.soft
        if role in self.derived:
            return self.derived[role]
        raise DataError(f"{self.name}: no {role!r} labels attached")

    def subset(self, index: np.ndarray, name: Optional[str] = None) -> "DatasetBundle":
        index = np.asarray(index, dtype=np.int64)
        return DatasetBundle(
            images=self.images[index],
            hard=self.hard.subset(index),
            num_classes=self.num_classes,
            name=name or self.name,
            soft=None if self.soft is None else self.soft.subset(index),
            teacher_logits=None if self.teacher_logits is None else self.teacher_logits[index],
            derived={k: v.subset(index) for k, v in self.derived.items()},
        )

    def with_labels(self, **kwargs) -> "DatasetBundle":
        return replace(self, **kwargs)


def bundle_from_classes(images: np.ndarray, classes: np.ndarray, num_classes: int, name: str) -> DatasetBundle:
    return DatasetBundle(images=images, hard=one_hot(classes, num_classes), num_classes=num_classes, name=name)


# -- IDX ---------------------------------------------------------------------


def _read_idx(path: Union[str, Path], magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise DataError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise DataError(f"{path}: truncated file, expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_classes: Optional[int] = None,
    standardize: bool = False,
    name: Optional[str] = None,
) -> DatasetBundle:
    """Load an MNIST-format image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if standardize:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        std = x.std(axis=(0, 2, 3), keepdims=True)
        x = (x - mean) / np.where(std > 0, std, 1.0)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    return bundle_from_classes(x, labels.astype(np.int64), c, name or Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: Union[str, Path], labels_path: Union[str, Path]) -> None:
    """Write uint8 images [N, H, W] and labels [N] in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- synthetic ---------------------------------------------------------------


def simplex_centers(classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm class centers; a regular simplex when ``dim >= classes``."""
    if dim >= classes:
        vertices = np.eye(classes) - 1.0 / classes
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        centers = vertices @ q[:classes]
    else:
        centers = rng.standard_normal((classes, dim))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def make_synthetic(
    kind: str,
    classes: int,
    per_class: int,
    dim_or_size: int = 2,
    noise: float = 0.1,
    seed: int = 0,
    scale: float = 1.0,
) -> DatasetBundle:
    """Deterministic class-major toy data.

    ``blobs``: isotropic Gaussians (std ``noise``) around unit-norm centers
    times ``scale``.  ``spirals``: interleaved 2-D arcs, one per class.
    """
    if per_class < 1:
        raise DataError(f"per_class must be >= 1, got {per_class}")
    if classes < 2:
        raise DataError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), per_class)
    if kind == "blobs":
        centers = scale * simplex_centers(classes, dim_or_size, rng)
        x = centers[y] + noise * rng.standard_normal((y.size, dim_or_size))
    elif kind == "spirals":
        t = np.tile(np.linspace(0.05, 1.0, per_class), classes)
        angle = 3.0 * math.pi * t + 2.0 * math.pi * y / classes
        x = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        x = scale * x + noise * rng.standard_normal(x.shape)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return bundle_from_classes(x, y, classes, f"{kind}-c{classes}")


def split_per_class(data: DatasetBundle, first: int, seed: int) -> Tuple[DatasetBundle, DatasetBundle]:
    """Split each class into ``first`` samples and the rest (random, deterministic)."""
    idx_a, idx_b = [], []
    classes = data.classes
    for c in range(data.num_classes):
        members = np.flatnonzero(classes == c)
        if members.size < first:
            raise DataError(f"class {c} has {members.size} samples, cannot take {first}")
        perm = np.random.default_rng([seed, c]).permutation(members)
        idx_a.append(np.sort(perm[:first]))
        idx_b.append(np.sort(perm[first:]))
    return data.subset(np.concatenate(idx_a)), data.subset(np.concatenate(idx_b))


def select_ipc_subset(data: DatasetBundle, ipc: int, seed: int, classes: Optional[Sequence[int]] = None) -> DatasetBundle:
    """Uniformly pick ``ipc`` samples of each class without replacement.

    Each class draws from its own stream seeded by ``(seed, class)``, so the
    choice for one class never depends on which other classes are present.
    """
    if ipc < 1:
        raise DataError(f"ipc must be positive, got {ipc}")
    labels = data.classes
    chosen = []
    for c in range(data.num_classes) if classes is None else classes:
        members = np.flatnonzero(labels == c)
        if members.size < ipc:
            raise DataError(f"class {c} has only {members.size} samples; ipc={ipc}")
        pick = np.random.default_rng([seed, c]).choice(members, size=ipc, replace=False)
        chosen.append(pick)
    index = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    return data.subset(index, name=f"{data.name}-ipc{ipc}")


# -- augmentation ------------------------------------------------------------

AUGMENT_OPS = ("flip", "crop", "cutout", "rotate", "scale")


@dataclass(frozen=True)
class AugmentConfig:
    ops: Tuple[str, ...] = AUGMENT_OPS
    flip: float = 0.5
    crop_pad: float = 0.125
    cutout: float = 0.5
    rotate: float = 15.0
    scale: float = 1.2
    per_sample: bool = False

    def __post_init__(self) -> None:
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            raise DataError(f"unknown augmentation ops {sorted(unknown)}")


def _flip(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return x[..., ::-1].copy() if rng.random() < cfg.flip else x.copy()


def _crop(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = int(round(cfg.crop_pad * h)), int(round(cfg.crop_pad * w))
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    dy, dx = rng.integers(0, 2 * ph + 1), rng.integers(0, 2 * pw + 1)
    return padded[:, :, dy : dy + h, dx : dx + w].copy()


def _cutout(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = x.shape[-2:]
    sh, sw = int(round(cfg.cutout * h)), int(round(cfg.cutout * w))
    top, left = rng.integers(0, h - sh + 1), rng.integers(0, w - sw + 1)
    out = x.copy()
    out[:, :, top : top + sh, left : left + sw] = 0.0
    return out


def _affine(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear resample with zero padding; ``matrix`` maps output to input coords about the center."""
    n, c, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_y = matrix[0, 0] * yy + matrix[0, 1] * xx + cy
    src_x = matrix[1, 0] * yy + matrix[1, 1] * xx + cx
    y0, x0 = np.floor(src_y).astype(int), np.floor(src_x).astype(int)
    wy, wx = src_y - y0, src_x - x0
    out = np.zeros_like(x)
    for oy, ox, weight in (
        (0, 0, (1 - wy) * (1 - wx)),
        (0, 1, (1 - wy) * wx),
        (1, 0, wy * (1 - wx)),
        (1, 1, wy * wx),
    ):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = x[:, :, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += vals * (weight * valid)
    return out


def _rotate(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    theta = math.radians(rng.uniform(-cfg.rotate, cfg.rotate))
    cos, sin = math.cos(theta), math.sin(theta)
    return _affine(x, np.array([[cos, -sin], [sin, cos]]))


def _scale(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    sy, sx = rng.uniform(1.0 / cfg.scale, cfg.scale, size=2)
    return _affine(x, np.array([[1.0 / sy, 0.0], [0.0, 1.0 / sx]]))


_OPS = {"flip": _flip, "crop": _crop, "cutout": _cutout, "rotate": _rotate, "scale": _scale}


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one uniformly drawn op from ``cfg.ops`` to the batch.

    The same op and parameters hit every image unless ``cfg.per_sample``.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4:
        raise DataError(f"augment_batch expects [N, C, H, W], got {batch.shape}")
    if not cfg.ops:
        logger.info("augmentation requested with no enabled ops; returning batch unchanged")
        return batch.copy()
    lo, hi = min(batch.min(initial=0.0), 0.0), max(batch.max(initial=0.0), 0.0)
    if cfg.per_sample:
        parts = [_OPS[cfg.ops[rng.integers(len(cfg.ops))]](batch[i : i + 1], cfg, rng) for i in range(batch.shape[0])]
        out = np.concatenate(parts, axis=0)
    else:
        op = cfg.ops[rng.integers(len(cfg.ops))]
        out = _OPS[op](batch, cfg, rng)
    return np.clip(out, lo, hi)


# -- cache -------------------------------------------------------------------


def save_bundle(data: DatasetBundle, directory: Union[str, Path]) -> Path:
    """Raw little-endian f64 images, GLBL label files and a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "images.f64").write_bytes(np.ascontiguousarray(data.images, dtype="<f8").tobytes())
    save_labels(data.hard, directory / "hard.glbl")
    meta = {"name": data.name, "num_classes": data.num_classes, "shape": list(data.images.shape), "labels": ["hard"]}
    if data.soft is not None:
        save_labels(data.soft, directory / "soft.glbl")
        meta["labels"].append("soft")
    for role, lm in data.derived.items():
        save_labels(lm, directory / f"{role}.glbl")
        meta["labels"].append(role)
    if data.teacher_logits is not None:
        (directory / "teacher_logits.f64").write_bytes(np.ascontiguousarray(data.teacher_logits, dtype="<f8").tobytes())
        meta["teacher_logits"] = True
    (directory / "bundle.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


def load_bundle(directory: Union[str, Path]) -> DatasetBundle:
    directory = Path(directory)
    meta = json.loads((directory / "bundle.json").read_text())
    shape = tuple(meta["shape"])
    images = np.frombuffer((directory / "images.f64").read_bytes(), dtype="<f8")
    if images.size != int(np.prod(shape)):
        raise DataError(f"{directory}: image payload does not match shape {shape}")
    labels = {role: load_labels(directory / f"{role}.glbl") for role in meta["labels"]}
    logits = None
    if meta.get("teacher_logits"):
        raw = np.frombuffer((directory / "teacher_logits.f64").read_bytes(), dtype="<f8")
        logits = raw.reshape(shape[0], meta["num_classes"]).astype(np.float64)
    hard = labels.pop("hard")
    soft = labels.pop("soft", None)
    return DatasetBundle(
        images=images.reshape(shape).astype(np.float64),
        hard=hard,
        num_classes=int(meta["num_classes"]),
        name=meta["name"],
        soft=soft,
        teacher_logits=logits,
        derived=labels,
    )
