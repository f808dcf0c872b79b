"""InfoNCE with cosine similarity and the two-step upper bound on it.

The Jensen step (log E <= ... ) is a true inequality and is asserted; the
follow-up step that swaps E[sum exp] for K * exp(E[.]) is only an
approximation, so its gap is reported without a sign constraint.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .autodiff import NORM_FLOOR
from .labels import LabelMatrix


class BoundError(ValueError):
    pass


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise BoundError(f"{what} must be a non-empty 2-D array, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] < NORM_FLOOR)
    if bad.size:
        raise BoundError(f"{what} row {int(bad[0])} has zero norm")
    return x / norms


def cosine_matrix(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """S[i, j] = cos(z_i, y_j)."""
    if np.shape(z) != np.shape(y):
        raise BoundError(f"z {np.shape(z)} and y {np.shape(y)} must have the same shape")
    return _unit_rows(z, "z") @ _unit_rows(y, "y").T


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise BoundError(f"temperature must be positive, got {tau}")


def infonce_loss(z: np.ndarray, y: np.ndarray, tau: float) -> float:
    """-(1/K) sum_i log softmax_j(cos(z_i, y_j) / tau)[i]."""
    _check_tau(tau)
    s = cosine_matrix(z, y) / tau
    return float(-np.mean(np.diag(s) - logsumexp(s, axis=1)))


@dataclass(frozen=True)
class BoundReport:
    K: int
    tau: float
    infonce: float
    jensen_bound: float
    approx_bound: float

    @property
    def gap_jensen(self) -> float:
        return self.jensen_bound - self.infonce

    @property
    def gap_approx(self) -> float:
        return self.approx_bound - self.infonce

    def row(self) -> dict:
        out = asdict(self)
        out["gap_jensen"] = self.gap_jensen
        out["gap_approx"] = self.gap_approx
        return out


CSV_COLUMNS = ("K", "tau", "infonce", "jensen_bound", "approx_bound", "gap_jensen", "gap_approx")


def check_bound(z: np.ndarray, y: np.ndarray, tau: float) -> BoundReport:
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = cosine_matrix(z, y) / tau
    k = s.shape[0]
    positive = float(np.mean(np.diag(s)))
    infonce = float(-np.mean(np.diag(s) - logsumexp(s, axis=1)))
    # log of the mean (over anchors) of the per-anchor partition sums
    jensen = -positive + float(logsumexp(logsumexp(s, axis=1)) - math.log(k))
    if k > 1:
        z_norm = np.linalg.norm(z, axis=1)
        mean_y_norm = float(np.mean(np.linalg.norm(y, axis=1)))
        raw = (z @ y.T) / (z_norm[:, None] * mean_y_norm)
        off = ~np.eye(k, dtype=bool)
        cross = float(np.mean(raw[off]))
    else:
        cross = 0.0
    approx = -(positive * tau - cross) / tau + math.log(k)
    return BoundReport(K=k, tau=float(tau), infonce=infonce, jensen_bound=jensen, approx_bound=approx)


def write_bound_csv(reports: Iterable[BoundReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return path


def random_bound_trials(trials: int, k: int = 0, tau: float = 0.0, seed: int = 0):
    """Random (z, y) draws; K and tau are sampled when left at 0."""
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        kk = k or int(rng.integers(2, 65))
        tt = tau or float(rng.choice([0.1, 0.5, 1.0]))
        c = int(rng.integers(2, 33))
        z = rng.standard_normal((kk, c))
        y = rng.standard_normal((kk, c))
        yield check_bound(z, y, tt)


def orthogonality_stats(labels: Union[LabelMatrix, np.ndarray]) -> Tuple[float, float]:
    """(mean, max) of |cos| over all unordered pairs of distinct rows."""
    v = labels.values if isinstance(labels, LabelMatrix) else np.asarray(labels, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise BoundError("orthogonality_stats needs at least two rows")
    u = _unit_rows(v, "label")
    cos = np.abs(u @ u.T)
    iu = np.triu_indices(v.shape[0], k=1)
    pairs = cos[iu]
    return float(pairs.mean()), float(pairs.max())


def gradient_norm(param_grads: Mapping[str, np.ndarray]) -> float:
    """Global L2 norm over every gradient tensor."""
    total = 0.0
    for g in param_grads.values():
        g = np.asarray(g, dtype=np.float64)
        total += float(np.sum(g * g))
    return math.sqrt(total)
