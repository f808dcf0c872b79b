"""Label matrices: one-hot, smoothed, teacher soft labels and refined labels."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Union

import numpy as np

from .autodiff import NORM_FLOOR

if TYPE_CHECKING:
    from .models import TrainedModel

ROLES = ("hard", "smoothed", "soft", "refined")
ROLE_CODES = {role: i for i, role in enumerate(ROLES)}

MAGIC = b"GLBL"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB")


class LabelError(ValueError):
    pass


@dataclass
class LabelMatrix:
    """An N x C label matrix tagged with how it was produced."""

    values: np.ndarray
    role: str
    source: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.role not in ROLES:
            raise LabelError(f"unknown label role {self.role!r}; expected one of {ROLES}")
        if self.values.ndim != 2:
            raise LabelError(f"label matrix must be 2-D, got shape {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, index: np.ndarray) -> "LabelMatrix":
        return LabelMatrix(self.values[index], self.role, self.source)

    def classes(self) -> np.ndarray:
        """Argmax class per row, ties broken toward the lowest index."""
        return np.argmax(self.values, axis=1)

    def validate(self, atol: float = 1e-9) -> "LabelMatrix":
        """Check the row invariants of this matrix's role; returns self."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise LabelError(f"{self.role} labels contain non-finite entries")
        if self.role == "hard":
            ok = np.all((v == 0) | (v == 1)) and np.all(v.sum(axis=1) == 1)
            if not ok:
                raise LabelError("hard labels must be one-hot rows")
        elif self.role in ("smoothed", "soft"):
            if np.any(v < 0):
                raise LabelError(f"{self.role} labels must be non-negative")
            if not np.allclose(v.sum(axis=1), 1.0, atol=atol, rtol=0):
                raise LabelError(f"{self.role} label rows must sum to 1")
        else:
            norms = np.linalg.norm(v, axis=1)
            if np.any(norms <= 0) or np.any(norms > 2 + atol):
                raise LabelError("refined label row norms must lie in (0, 2]")
        return self


def one_hot(classes: np.ndarray, num_classes: int) -> LabelMatrix:
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise LabelError(f"class indices must lie in [0, {num_classes})")
    values = np.zeros((classes.size, num_classes))
    values[np.arange(classes.size), classes] = 1.0
    return LabelMatrix(values, "hard", "one-hot")


def smooth_labels(hard: LabelMatrix, alpha: float) -> LabelMatrix:
    """(1 - alpha) * one_hot + alpha / C."""
    if hard.role != "hard":
        raise LabelError(f"smoothing expects hard labels, got role {hard.role!r}")
    if not 0.0 <= alpha <= 1.0:
        raise LabelError(f"alpha must lie in [0, 1], got {alpha}")
    c = hard.num_classes
    values = (1.0 - alpha) * hard.values + alpha / c
    return LabelMatrix(values, "smoothed", f"alpha={alpha:g}")


def generate_soft_labels(teacher: "TrainedModel", images: np.ndarray) -> LabelMatrix:
    """Teacher softmax probabilities, one row per image."""
    from .models import predict_logits

    logits = predict_logits(teacher, images)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return LabelMatrix(probs, "soft", f"teacher:{teacher.spec.kind}:seed={teacher.spec.seed}")


def _row_normalize(values: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if bad.size:
        raise LabelError(f"{what} row {int(bad[0])} has zero norm")
    return values / norms


def refine_labels(
    smoothed: Union[LabelMatrix, np.ndarray],
    soft: Union[LabelMatrix, np.ndarray],
    gamma: float,
) -> LabelMatrix:
    """gamma * smoothed/||smoothed|| + (1 - gamma) * soft/||soft||, row-wise."""
    if not 0.0 <= gamma <= 1.0:
        raise LabelError(f"gamma must lie in [0, 1], got {gamma}")
    y = smoothed.values if isinstance(smoothed, LabelMatrix) else np.asarray(smoothed, dtype=np.float64)
    s = soft.values if isinstance(soft, LabelMatrix) else np.asarray(soft, dtype=np.float64)
    if y.shape != s.shape:
        raise LabelError(f"shape mismatch: smoothed {y.shape} vs soft {s.shape}")
    refined = gamma * _row_normalize(y, "smoothed") + (1.0 - gamma) * _row_normalize(s, "soft")
    return LabelMatrix(refined, "refined", f"gamma={gamma:g}")


def label_accuracy(labels: Union[LabelMatrix, np.ndarray], hard: Union[LabelMatrix, np.ndarray]) -> float:
    a = labels.values if isinstance(labels, LabelMatrix) else np.asarray(labels)
    b = hard.values if isinstance(hard, LabelMatrix) else np.asarray(hard)
    if a.shape != b.shape:
        raise LabelError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise LabelError("label_accuracy of an empty label set")
    return float(np.mean(np.argmax(a, axis=1) == np.argmax(b, axis=1)))


def as_distribution(labels: LabelMatrix) -> np.ndarray:
    """Rows rescaled to sum to 1 (refined rows are not distributions)."""
    v = labels.values
    if np.any(v < 0):
        raise LabelError(f"{labels.role} labels have negative entries; not a distribution")
    sums = v.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise LabelError(f"{labels.role} labels contain an all-zero row")
    return v / sums


# -- persistence -------------------------------------------------------------


def save_labels(labels: LabelMatrix, path: Union[str, Path]) -> Path:
    path = Path(path)
    n, c = labels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, ROLE_CODES[labels.role]))
        fh.write(np.ascontiguousarray(labels.values, dtype="<f8").tobytes())
    return path


def load_labels(path: Union[str, Path], source: str = "") -> LabelMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise LabelError(f"{path}: truncated header")
    magic, version, n, c, code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LabelError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise LabelError(f"{path}: unsupported version {version}")
    if code >= len(ROLES):
        raise LabelError(f"{path}: unknown role code {code}")
    expected = _HEADER.size + 8 * n * c
    if len(raw) != expected:
        raise LabelError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n, c).astype(np.float64)
    return LabelMatrix(values, ROLES[code], source or str(path))


def export_csv(labels: LabelMatrix, directory: Union[str, Path], stem: str = "labels") -> Path:
    """Write ``<stem>_<role>.csv`` with one row per sample."""
    path = Path(directory) / f"{stem}_{labels.role}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index"] + [f"c{j}" for j in range(labels.num_classes)])
        for i, row in enumerate(labels.values):
            writer.writerow([i] + [repr(float(x)) for x in row])
    return path
