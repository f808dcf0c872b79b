"""SGD, Adam (coupled L2 decay) and AdamW (decoupled decay), plus MultiStep LR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

Params = Dict[str, np.ndarray]

KINDS = ("sgd", "adam", "adamw")
DEFAULT_WEIGHT_DECAY = {"sgd": 0.0, "adam": 0.01, "adamw": 0.01}


class OptimizerError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 0.001
    weight_decay: float = None  # type: ignore[assignment]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise OptimizerError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if self.weight_decay is None:
            object.__setattr__(self, "weight_decay", DEFAULT_WEIGHT_DECAY[kind])
        if not self.lr > 0:
            raise OptimizerError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise OptimizerError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise OptimizerError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if not self.eps > 0:
            raise OptimizerError(f"eps must be positive, got {self.eps}")


@dataclass
class OptimizerState:
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in grads:
            raise OptimizerError(f"no gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise OptimizerError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


def sgd_step(params: Mapping[str, np.ndarray], grads, state: OptimizerState, cfg: OptimizerConfig, lr: float) -> Params:
    """theta - lr * (g + weight_decay * theta)."""
    _check(params, grads)
    state.t += 1
    wd = cfg.weight_decay
    out = {}
    for name, p in params.items():
        g = grads[name] + wd * p if wd else grads[name]
        out[name] = p - lr * g
    return out


def _adam_moments(name: str, g: np.ndarray, state: OptimizerState, cfg: OptimizerConfig):
    m = state.m.get(name)
    v = state.v.get(name)
    if m is None:
        m = np.zeros_like(g)
        v = np.zeros_like(g)
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
    state.m[name] = m
    state.v[name] = v
    m_hat = m / (1.0 - cfg.beta1**state.t)
    v_hat = v / (1.0 - cfg.beta2**state.t)
    return m_hat / (np.sqrt(v_hat) + cfg.eps)


def adam_step(params: Mapping[str, np.ndarray], grads, state: OptimizerState, cfg: OptimizerConfig, lr: float) -> Params:
    """Adam with the decay term folded into the gradient before the moments."""
    _check(params, grads)
    state.t += 1
    wd = cfg.weight_decay
    out = {}
    for name, p in params.items():
        g = grads[name] + wd * p if wd else grads[name]
        out[name] = p - lr * _adam_moments(name, g, state, cfg)
    return out


def adamw_step(params: Mapping[str, np.ndarray], grads, state: OptimizerState, cfg: OptimizerConfig, lr: float) -> Params:
    """Adam on the raw gradient, then ``lr * weight_decay * theta_prev`` subtracted."""
    _check(params, grads)
    state.t += 1
    wd = cfg.weight_decay
    out = {}
    for name, p in params.items():
        step = _adam_moments(name, grads[name], state, cfg)
        updated = p - lr * step
        if wd:
            updated = updated - lr * wd * p
        out[name] = updated
    return out


STEPS = {"sgd": sgd_step, "adam": adam_step, "adamw": adamw_step}


class Optimizer:
    """Binds a config to its state; ``step`` returns the new parameters."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.state = OptimizerState()
        self._step = STEPS[cfg.kind]

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Params:
        return self._step(params, grads, self.state, self.cfg, lr)


def milestones(total_epochs: int) -> tuple:
    return (2 * total_epochs // 3, 5 * total_epochs // 6)


def lr_schedule(epoch: int, total_epochs: int, base_lr: float, gamma: float = 0.2) -> float:
    """MultiStep: base_lr * gamma ** (milestones reached by ``epoch``)."""
    if epoch < 0:
        raise OptimizerError(f"epoch must be non-negative, got {epoch}")
    passed = sum(epoch >= m for m in milestones(total_epochs))
    return base_lr * gamma**passed


def batch_size_for(num_images: int) -> int:
    """Evaluation batch size as a function of dataset size."""
    if num_images <= 0:
        raise ValueError("dataset is empty")
    if num_images <= 10:
        return 10
    if num_images <= 500:
        return 50
    if num_images <= 20000:
        return 100
    return 200
