"""Training losses over student logits.

Each loss takes a [N, C] logits :class:`Tensor` and a constant target and
returns a scalar Tensor, so gradients come from the autodiff core.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import NORM_FLOOR, ShapeError, Tensor, constant, dot_rows, ensure_tensor, logaddexp
from .labels import LabelError, LabelMatrix

logger = logging.getLogger(__name__)

Target = Union[LabelMatrix, np.ndarray]

BASE_LOSSES = ("ce", "soft_ce", "kl", "js", "mse", "cosine")
LOSS_IDS = ("ce", "soft_ce", "kl", "js", "mse", "cosine", "kl+ce", "mse+ce", "soft_ce+ce")


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossId:
    """A base loss, or a weighted sum of two base losses when ``second`` is set."""

    name: str
    temperature: float = 1.0
    second: Optional[str] = None
    weight: float = 1.0
    second_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.name not in BASE_LOSSES:
            raise LossConfigError(f"unknown loss {self.name!r}")
        if self.second is not None and self.second not in BASE_LOSSES:
            raise LossConfigError(f"unknown loss {self.second!r}")
        if self.temperature <= 0:
            raise LossConfigError(f"temperature must be positive, got {self.temperature}")
        if self.weight < 0 or self.second_weight < 0:
            raise LossConfigError("combo weights must be non-negative")
        if self.is_combo and self.weight + self.second_weight <= 0:
            raise LossConfigError("combo weights must not both be zero")

    @property
    def is_combo(self) -> bool:
        return self.second is not None

    @property
    def key(self) -> str:
        return self.name if self.second is None else f"{self.name}+{self.second}"

    @property
    def parts(self) -> tuple:
        return (self.name,) if self.second is None else (self.name, self.second)

    @property
    def needs_hard(self) -> bool:
        return "ce" in self.parts

    @property
    def needs_vector(self) -> bool:
        return any(p != "ce" for p in self.parts)


def parse_loss(key: str, temperature: float = 1.0, weights: tuple = (1.0, 1.0)) -> LossId:
    key = key.strip().lower()
    if "+" in key:
        a, b = (p.strip() for p in key.split("+", 1))
        if "+" in b:
            raise LossConfigError(f"combo losses take exactly two operands: {key!r}")
        return LossId(a, temperature, b, float(weights[0]), float(weights[1]))
    return LossId(key, temperature)


# -- helpers -----------------------------------------------------------------


def _values(target: Target) -> np.ndarray:
    return target.values if isinstance(target, LabelMatrix) else np.asarray(target, dtype=np.float64)


def _check_shape(logits: Tensor, target: np.ndarray, name: str) -> None:
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ShapeError(f"{name}: logits {logits.shape} and target {target.shape} must both be [N, C]")


def _safe_log(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    np.log(p, out=out, where=p > 0)
    return out


def _distribution(target: Target, name: str) -> np.ndarray:
    p = _values(target)
    if np.any(p < 0):
        raise LabelError(f"{name}: target has negative entries")
    return p


# -- base losses -------------------------------------------------------------


def loss_ce(logits, hard: Target) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    logits = ensure_tensor(logits)
    if isinstance(hard, LabelMatrix) and hard.role != "hard":
        raise LabelError(f"ce: expected hard labels, got role {hard.role!r}")
    y = _values(hard)
    _check_shape(logits, y, "ce")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelError("ce: targets must be one-hot rows")
    return -(logits.log_softmax(axis=1) * constant(y)).sum() * (1.0 / y.shape[0])


def loss_soft_ce(logits, target: Target) -> Tensor:
    logits = ensure_tensor(logits)
    p = _distribution(target, "soft_ce")
    _check_shape(logits, p, "soft_ce")
    return -(logits.log_softmax(axis=1) * constant(p)).sum() * (1.0 / p.shape[0])


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(log p / T); zero entries stay zero."""
    if temperature == 1.0:
        return p / p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        logp = np.log(p) / temperature
    logp = logp - logp.max(axis=1, keepdims=True)
    e = np.exp(logp)
    return e / e.sum(axis=1, keepdims=True)


def loss_kl(logits, target: Target, temperature: float = 1.0) -> Tensor:
    """T^2 * KL(sharpen(target, T) || softmax(logits / T)), batch mean."""
    if temperature <= 0:
        raise LossConfigError(f"kl: temperature must be positive, got {temperature}")
    logits = ensure_tensor(logits)
    p = _distribution(target, "kl")
    _check_shape(logits, p, "kl")
    pt = sharpen(p, temperature)
    log_q = (logits * (1.0 / temperature)).log_softmax(axis=1)
    per_sample = (constant(pt * _safe_log(pt)) - log_q * constant(pt)).sum()
    return per_sample * (temperature * temperature / p.shape[0])


def loss_js(logits, target: Target) -> Tensor:
    """Jensen-Shannon divergence between target and softmax(logits), batch mean."""
    logits = ensure_tensor(logits)
    p = _distribution(target, "js")
    _check_shape(logits, p, "js")
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    log_q = logits.log_softmax(axis=1)
    q = log_q.exp()
    log_m = logaddexp(log_q, log_p) - math.log(2.0)
    kl_pm = constant(p) * (constant(_safe_log(p)) - log_m)
    kl_qm = q * (log_q - log_m)
    return (kl_pm + kl_qm).sum() * (0.5 / p.shape[0])


def loss_mse(logits, target_logits: Target) -> Tensor:
    logits = ensure_tensor(logits)
    t = _values(target_logits)
    _check_shape(logits, t, "mse")
    diff = logits - constant(t)
    return (diff * diff).mean()


def loss_cosine(logits, target: Target) -> Tensor:
    """Mean of 1 - cos(logits_i, target_i)."""
    logits = ensure_tensor(logits)
    y = _values(target)
    _check_shape(logits, y, "cosine")
    raw = np.linalg.norm(logits.data, axis=1)
    dead = np.flatnonzero(raw < NORM_FLOOR)
    if dead.size:
        raise FloatingPointError(f"cosine: logits row {int(dead[0])} has zero norm")
    y_norm = np.linalg.norm(y, axis=1)
    bad = np.flatnonzero(y_norm < NORM_FLOOR)
    if bad.size:
        raise LabelError(f"cosine: target row {int(bad[0])} has zero norm")
    y_hat = constant(y / y_norm[:, None])
    cos = dot_rows(logits, y_hat) / logits.l2_norm(axis=1, keepdims=False)
    return 1.0 - cos.mean()


def base_loss(name: str, logits, hard: Optional[Target], vector: Optional[Target], temperature: float = 1.0) -> Tensor:
    if name == "ce":
        if hard is None:
            raise LabelError("ce requires hard labels")
        return loss_ce(logits, hard)
    if vector is None:
        raise LabelError(f"{name} requires a vector target")
    if name == "soft_ce":
        return loss_soft_ce(logits, vector)
    if name == "kl":
        return loss_kl(logits, vector, temperature)
    if name == "js":
        return loss_js(logits, vector)
    if name == "mse":
        return loss_mse(logits, vector)
    if name == "cosine":
        return loss_cosine(logits, vector)
    raise LossConfigError(f"unknown loss {name!r}")


def loss_combo(loss: LossId, logits, hard: Optional[Target], vector: Optional[Target]) -> Tensor:
    """weight * first + second_weight * second, each routed to its label kind."""
    if not loss.is_combo:
        raise LossConfigError(f"{loss.key} is not a combo loss")
    a = base_loss(loss.name, logits, hard, vector, loss.temperature)
    b = base_loss(loss.second, logits, hard, vector, loss.temperature)
    return a * loss.weight + b * loss.second_weight


def compute_loss(loss: LossId, logits, hard: Optional[Target], vector: Optional[Target]) -> Tensor:
    if loss.is_combo:
        return loss_combo(loss, logits, hard, vector)
    return base_loss(loss.name, logits, hard, vector, loss.temperature)
