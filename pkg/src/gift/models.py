"""Student/teacher networks (MLP, ConvNet-D) and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import ShapeError, Tensor, avg_pool2d, conv2d, instance_norm, matmul
from .data import AugmentConfig, DatasetBundle, augment_batch
from .labels import LabelError, as_distribution
from .losses import LossId, compute_loss, parse_loss
from .optim import Optimizer, OptimizerConfig, batch_size_for, lr_schedule

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class TrainingAborted(FloatingPointError):
    def __init__(self, epoch: int, step: int, reason: str):
        super().__init__(f"training aborted at epoch {epoch}, step {step}: {reason}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``kind`` is ``"mlp"`` (dense layers of widths ``hidden``) or
    ``"convnet"`` (``depth`` blocks of 3x3 conv, optional instance norm,
    ReLU and 2x2 average pooling, then one dense head).
    """

    kind: str
    input_shape: Tuple[int, ...]
    num_classes: int
    hidden: Tuple[int, ...] = (128,)
    depth: int = 3
    width: int = 128
    norm: str = "none"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("mlp", "convnet"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ModelError(f"need at least 2 classes, got {self.num_classes}")
        if self.norm not in ("none", "instance"):
            raise ModelError(f"unknown normalization {self.norm!r}")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ModelError(f"convnet expects input shape (C, H, W), got {self.input_shape}")
            if self.depth < 1:
                raise ModelError("convnet depth must be >= 1")
        elif self.norm != "none":
            raise ModelError("instance normalization is only available for convnets")

    @property
    def feature_shape(self) -> Tuple[int, int]:
        """Spatial extent after all pooling stages (convnet only)."""
        _, h, w = self.input_shape
        return h // 2**self.depth, w // 2**self.depth


@dataclass
class TrainLog:
    epoch_loss: List[float] = field(default_factory=list)
    epoch_grad_norm: List[float] = field(default_factory=list)
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    aborted: Optional[Tuple[int, int]] = None


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    log: TrainLog = field(default_factory=TrainLog)

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.spec, {k: v.copy() for k, v in self.params.items()}, TrainLog())


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def build_model(spec: ModelSpec) -> TrainedModel:
    rng = np.random.default_rng(spec.seed)
    params: Dict[str, np.ndarray] = {}
    if spec.kind == "mlp":
        widths = [int(np.prod(spec.input_shape))] + list(spec.hidden)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"fc{i}.w"] = _he(rng, (a, b), a)
            params[f"fc{i}.b"] = np.zeros(b)
        fan_in = widths[-1]
    else:
        fh, fw = spec.feature_shape
        if fh < 1 or fw < 1:
            raise ModelError(
                f"convnet depth {spec.depth} pools {spec.input_shape[1:]} below 1x1"
            )
        cin = spec.input_shape[0]
        for i in range(spec.depth):
            params[f"conv{i}.w"] = _he(rng, (spec.width, cin, 3, 3), cin * 9)
            params[f"conv{i}.b"] = np.zeros(spec.width)
            cin = spec.width
        fan_in = spec.width * fh * fw
    # head feeds the loss, not a ReLU: LeCun scaling
    params["head.w"] = rng.standard_normal((fan_in, spec.num_classes)) * math.sqrt(1.0 / fan_in)
    params["head.b"] = np.zeros(spec.num_classes)
    return TrainedModel(spec, params)


def head_features(model: TrainedModel) -> int:
    return model.params["head.w"].shape[0]


def _network(spec: ModelSpec, p: Dict[str, Tensor], x: Tensor) -> Tensor:
    if spec.kind == "mlp":
        h = x.reshape(x.shape[0], -1)
        for i in range(len(spec.hidden)):
            h = (matmul(h, p[f"fc{i}.w"]) + p[f"fc{i}.b"]).relu()
    else:
        h = x
        for i in range(spec.depth):
            h = conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], padding=1)
            if spec.norm == "instance":
                h = instance_norm(h)
            h = avg_pool2d(h.relu(), 2)
        h = h.reshape(h.shape[0], -1)
    return matmul(h, p["head.w"]) + p["head.b"]


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> None:
    if batch.ndim < 2 or tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match model input {spec.input_shape}")


def forward(model: TrainedModel, batch: Union[np.ndarray, Tensor]) -> Tensor:
    """Logits [N, C] as a graph node (no parameter gradients tracked)."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_batch(model.spec, x.data)
    params = {k: Tensor(v, name=k) for k, v in model.params.items()}
    return _network(model.spec, params, x)


def predict_logits(model: TrainedModel, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    _check_batch(model.spec, images)
    outs = [forward(model, images[i : i + chunk]).data for i in range(0, images.shape[0], chunk)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.spec.num_classes))


def evaluate_accuracy(model: TrainedModel, data: DatasetBundle, allowed_classes: Optional[Sequence[int]] = None) -> float:
    """Top-1 accuracy; ``allowed_classes`` restricts the argmax to those logits."""
    if len(data) == 0:
        raise ModelError("cannot evaluate accuracy on an empty dataset")
    logits = predict_logits(model, data.images)
    if allowed_classes is not None:
        mask = np.full(model.spec.num_classes, -np.inf)
        mask[np.asarray(allowed_classes)] = 0.0
        logits = logits + mask
    return float(np.mean(np.argmax(logits, axis=1) == data.classes))


# -- training ----------------------------------------------------------------


def resolve_targets(data: DatasetBundle, loss: LossId, label_source: str) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """(hard one-hot, vector target) arrays for ``loss`` drawn from ``data``.

    Distribution losses see rows rescaled to sum to one; MSE prefers stored
    teacher logits when the source is the teacher.
    """
    if loss.parts == ("ce",) and label_source != "hard":
        raise LabelError(f"loss 'ce' requires hard labels, got label source {label_source!r}")
    hard = data.hard.values if loss.needs_hard else None
    if not loss.needs_vector:
        return hard, None
    labels = data.labels(label_source)
    kind = next(p for p in loss.parts if p != "ce")
    if kind in ("soft_ce", "kl", "js"):
        vector = as_distribution(labels)
    elif kind == "mse":
        if label_source == "soft" and data.teacher_logits is not None:
            vector = data.teacher_logits
        else:
            logger.warning("mse target falls back to %s label values (no teacher logits)", labels.role)
            vector = labels.values
    else:
        vector = labels.values
    return hard, vector


def _loss_and_grads(spec: ModelSpec, params: Dict[str, np.ndarray], x: np.ndarray, loss: LossId, hard, vector):
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    logits = _network(spec, leaves, Tensor(x))
    value = compute_loss(loss, logits, hard, vector)
    value.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return value.item(), grads, logits.data


def global_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def train_model(
    model: TrainedModel,
    data: DatasetBundle,
    loss_id: Union[str, LossId],
    label_source: str,
    optimizer_cfg: OptimizerConfig,
    epochs: int,
    batch_size: Optional[int] = None,
    augment_cfg: Optional[AugmentConfig] = None,
    seed: int = 0,
    schedule: str = "multistep",
    test: Optional[DatasetBundle] = None,
    eval_classes: Optional[Sequence[int]] = None,
) -> Tuple[TrainedModel, TrainLog]:
    """Train a copy of ``model`` and return it with its log.

    A non-finite loss or gradient stops training; the last finite
    parameters are kept and ``log.aborted`` records (epoch, step).
    """
    loss = parse_loss(loss_id) if isinstance(loss_id, str) else loss_id
    hard, vector = resolve_targets(data, loss, label_source)
    if schedule not in ("multistep", "constant"):
        raise ModelError(f"unknown schedule {schedule!r}")
    if epochs < 0:
        raise ModelError("epochs must be non-negative")
    n = len(data)
    bs = batch_size or batch_size_for(n)
    rng = np.random.default_rng(seed)
    opt = Optimizer(optimizer_cfg)
    params = {k: v.copy() for k, v in model.params.items()}
    log = TrainLog()
    for epoch in range(epochs):
        lr = lr_schedule(epoch, epochs, optimizer_cfg.lr) if schedule == "multistep" else optimizer_cfg.lr
        order = rng.permutation(n)
        losses, norms = [], []
        try:
            for step, start in enumerate(range(0, n, bs)):
                idx = order[start : start + bs]
                x = data.images[idx]
                if augment_cfg is not None and x.ndim == 4:
                    x = augment_batch(x, augment_cfg, rng)
                value, grads, _ = _loss_and_grads(
                    model.spec,
                    params,
                    x,
                    loss,
                    None if hard is None else hard[idx],
                    None if vector is None else vector[idx],
                )
                norm = global_grad_norm(grads)
                if not (math.isfinite(value) and math.isfinite(norm)):
                    raise TrainingAborted(epoch, step, f"loss={value}, grad norm={norm}")
                params = opt.step(params, grads, lr)
                losses.append(value)
                norms.append(norm)
        except (TrainingAborted, FloatingPointError) as exc:
            log.aborted = (epoch, getattr(exc, "step", -1))
            logger.warning("%s", exc)
            pad = epochs - len(log.epoch_loss)
            log.epoch_loss.extend([math.nan] * pad)
            log.epoch_grad_norm.extend([math.nan] * pad)
            break
        log.epoch_loss.append(float(np.mean(losses)))
        log.epoch_grad_norm.append(float(np.mean(norms)))
    trained = TrainedModel(model.spec, params, log)
    log.train_accuracy = evaluate_accuracy(trained, data)
    if test is not None:
        log.test_accuracy = evaluate_accuracy(trained, test, eval_classes)
    return trained, log


def train_teacher(
    data: DatasetBundle,
    spec: ModelSpec,
    optimizer_cfg: OptimizerConfig,
    epochs: int,
    seed: int = 0,
    batch_size: Optional[int] = None,
    test: Optional[DatasetBundle] = None,
) -> TrainedModel:
    """Cross-entropy training on hard labels."""
    teacher, _ = train_model(
        build_model(spec), data, "ce", "hard", optimizer_cfg, epochs, batch_size=batch_size, seed=seed, test=test
    )
    return teacher
