"""Experiment configuration, pipelines, sweeps, GDumb and report writing."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import AugmentConfig, DatasetBundle, load_idx, make_synthetic, select_ipc_subset, split_per_class
from .labels import generate_soft_labels, label_accuracy, refine_labels, smooth_labels
from .losses import LOSS_IDS, parse_loss
from .autodiff import Tensor
from .models import ModelSpec, build_model, evaluate_accuracy, predict_logits, train_model, train_teacher
from .optim import OptimizerConfig

logger = logging.getLogger(__name__)

# Flat dotted keys with their defaults.  ``None`` means "use the component default".
DEFAULTS: Dict[str, Any] = {
    "dataset.source": "blobs",
    "dataset.classes": 100,
    "dataset.dim": 64,
    "dataset.noise": 0.25,
    "dataset.scale": 1.0,
    "dataset.pool_per_class": 100,
    "dataset.test_per_class": 50,
    "dataset.seed": 0,
    "dataset.ipc": 10,
    "dataset.images_path": "",
    "dataset.labels_path": "",
    "dataset.test_images_path": "",
    "dataset.test_labels_path": "",
    "dataset.standardize": False,
    "teacher.kind": "mlp",
    "teacher.hidden": "128",
    "teacher.depth": 3,
    "teacher.width": 128,
    "teacher.epochs": 4,
    "teacher.optimizer": "adamw",
    "teacher.lr": 0.001,
    "teacher.seed": 0,
    "student.kind": "mlp",
    "student.hidden": "128",
    "student.depth": 3,
    "student.width": 128,
    "student.norm": "none",
    "labels.alpha": 0.1,
    "labels.gamma": 0.1,
    "labels.source": "auto",
    "loss.id": "cosine",
    "loss.temperature": 1.0,
    "loss.weight_a": 1.0,
    "loss.weight_b": 1.0,
    "optimizer.kind": "adamw",
    "optimizer.lr": 0.001,
    "optimizer.weight_decay": None,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.999,
    "optimizer.eps": 1e-8,
    "schedule": "multistep",
    "train.epochs": 100,
    "train.batch_size": 0,
    "augment.ops": "none",
    "augment.per_sample": False,
    "repeat": 1,
    "seed": 0,
    "seeds": "",
    "output.path": "results",
}

# Desk corpora.  Both stop the teacher at the first epoch whose test accuracy
# reaches 60%, so its soft labels are informative but imperfect.
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk100": {},
    "desk10": {"dataset.classes": 10, "teacher.epochs": 5},
}
# SGD learning rate for the desk corpora, chosen on the hard-label CE arm only
DESK_SGD_LR = 0.5

FLOAT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, float)} | {"optimizer.weight_decay"}
INT_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, int) and not isinstance(v, bool)}
BOOL_KEYS = {k for k, v in DEFAULTS.items() if isinstance(v, bool)}

AXIS_ALIASES = {
    "loss": "loss.id",
    "gamma": "labels.gamma",
    "alpha": "labels.alpha",
    "source": "labels.source",
    "optimizer": "optimizer.kind",
    "lr": "optimizer.lr",
    "weight_decay": "optimizer.weight_decay",
    "ipc": "dataset.ipc",
    "epochs": "train.epochs",
}

LABEL_SOURCES = ("auto", "hard", "smoothed", "soft", "refined")
RESULT_COLUMNS = (
    "fingerprint", "dataset", "ipc", "loss", "optimizer", "lr", "weight_decay",
    "gamma", "alpha", "seed", "final_accuracy", "mean", "std", "wall_seconds",
)

# fingerprints ignore where results go
_UNHASHED = {"output.path"}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.__cause__ = cause


# -- configuration -------------------------------------------------------------


def _coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none", "default") and key in FLOAT_KEYS):
        return None if key in FLOAT_KEYS or DEFAULTS[key] is None else DEFAULTS[key]
    try:
        if key in BOOL_KEYS:
            if isinstance(value, str):
                if value.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.strip().lower() in ("true", "1", "yes")
            return bool(value)
        if key in INT_KEYS:
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if key in FLOAT_KEYS:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None
    return str(value).strip()


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated flat mapping of dotted keys; unset keys take ``DEFAULTS``."""

    values: Tuple[Tuple[str, Any], ...]

    @classmethod
    def from_dict(cls, overrides: Optional[Mapping[str, Any]] = None) -> "ExperimentConfig":
        merged = dict(DEFAULTS)
        for k, v in (overrides or {}).items():
            merged[k] = _coerce(k, v)
        cfg = cls(tuple(sorted(merged.items())))
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return dict(self.values)[key]

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        d = self.as_dict()
        for k, v in changes.items():
            d[k.replace("__", ".")] = v
        return ExperimentConfig.from_dict(d)

    def updated(self, changes: Mapping[str, Any]) -> "ExperimentConfig":
        d = self.as_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def validate(self, check_files: bool = False) -> None:
        d = self.as_dict()
        if d["repeat"] < 1:
            raise ConfigError("repeat must be >= 1")
        for k in ("labels.gamma", "labels.alpha"):
            if not 0.0 <= d[k] <= 1.0:
                raise ConfigError(f"{k} must lie in [0, 1], got {d[k]}")
        if d["labels.source"] not in LABEL_SOURCES:
            raise ConfigError(f"labels.source must be one of {LABEL_SOURCES}")
        if d["dataset.ipc"] < 1:
            raise ConfigError("dataset.ipc must be positive")
        if d["train.epochs"] < 0 or d["teacher.epochs"] < 0:
            raise ConfigError("epochs must be non-negative")
        if d["dataset.source"] not in ("blobs", "spirals", "idx"):
            raise ConfigError(f"unknown dataset.source {d['dataset.source']!r}")
        try:
            parse_loss(d["loss.id"], d["loss.temperature"], (d["loss.weight_a"], d["loss.weight_b"]))
            self.optimizer()
            if d["augment.ops"] not in ("", "none"):
                self.augment()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if check_files and d["dataset.source"] == "idx":
            for k in ("dataset.images_path", "dataset.labels_path", "dataset.test_images_path", "dataset.test_labels_path"):
                if not d[k] or not Path(d[k]).exists():
                    raise ConfigError(f"{k}: file {d[k]!r} does not exist")

    # -- typed views --

    def fingerprint(self) -> str:
        payload = {k: v for k, v in self.values if k not in _UNHASHED}
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=repr)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def optimizer(self) -> OptimizerConfig:
        d = self.as_dict()
        return OptimizerConfig(
            kind=d["optimizer.kind"],
            lr=d["optimizer.lr"],
            weight_decay=d["optimizer.weight_decay"],
            beta1=d["optimizer.beta1"],
            beta2=d["optimizer.beta2"],
            eps=d["optimizer.eps"],
        )

    def loss(self):
        d = self.as_dict()
        return parse_loss(d["loss.id"], d["loss.temperature"], (d["loss.weight_a"], d["loss.weight_b"]))

    def label_source(self) -> str:
        src = self["labels.source"]
        if src != "auto":
            return src
        parts = self.loss().parts
        if parts == ("ce",):
            return "hard"
        if "cosine" in parts:
            return "refined"
        return "soft"

    def augment(self) -> Optional[AugmentConfig]:
        ops = self["augment.ops"]
        if ops in ("", "none"):
            return None
        names = tuple(o.strip() for o in ops.split(",") if o.strip())
        return AugmentConfig(ops=names, per_sample=self["augment.per_sample"])

    def seeds(self) -> List[int]:
        raw = self["seeds"]
        if raw:
            return [int(s) for s in str(raw).split(",") if s.strip()]
        return [self["seed"] + r for r in range(self["repeat"])]

    def model_spec(self, role: str, input_shape: Tuple[int, ...], num_classes: int, seed: int) -> ModelSpec:
        d = self.as_dict()
        hidden = tuple(int(h) for h in str(d[f"{role}.hidden"]).split(",") if h.strip())
        return ModelSpec(
            kind=d[f"{role}.kind"],
            input_shape=input_shape,
            num_classes=num_classes,
            hidden=hidden,
            depth=d[f"{role}.depth"],
            width=d[f"{role}.width"],
            norm=d.get(f"{role}.norm", "none"),
            seed=seed,
        )


def preset(name: str, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    values.update(overrides or {})
    return ExperimentConfig.from_dict(values)


def parse_config_text(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value.strip("\"'")
    return out


def load_config(path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    values: Dict[str, Any] = parse_config_text(Path(path).read_text())
    values.update(overrides or {})
    cfg = ExperimentConfig.from_dict(values)
    cfg.validate(check_files=True)
    return cfg


def derive_seed(seed: int, stream: str) -> int:
    """Independent 32-bit seed for a named random stream of one run."""
    tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag]).generate_state(1)[0])


# -- data + labels pipeline -------------------------------------------------------

_PIPELINE_KEYS = tuple(k for k in DEFAULTS if k.startswith(("dataset.", "teacher.", "labels.alpha", "labels.gamma")) and k != "dataset.ipc")


@dataclass
class PreparedData:
    pool: DatasetBundle
    test: DatasetBundle
    teacher_test_accuracy: float
    soft_label_accuracy: float
    refined_label_accuracy: float


_PIPELINE_CACHE: Dict[str, PreparedData] = {}


def _pipeline_key(cfg: ExperimentConfig) -> str:
    d = cfg.as_dict()
    return json.dumps({k: d[k] for k in _PIPELINE_KEYS}, sort_keys=True, default=repr)


def _load_source(cfg: ExperimentConfig) -> Tuple[DatasetBundle, DatasetBundle]:
    d = cfg.as_dict()
    if d["dataset.source"] == "idx":
        pool = load_idx(d["dataset.images_path"], d["dataset.labels_path"], standardize=d["dataset.standardize"])
        test = load_idx(
            d["dataset.test_images_path"], d["dataset.test_labels_path"],
            num_classes=pool.num_classes, standardize=d["dataset.standardize"],
        )
        per_class = d["dataset.pool_per_class"]
        if per_class:
            counts = np.bincount(pool.classes, minlength=pool.num_classes)
            if counts.min() > per_class:
                pool, _ = split_per_class(pool, per_class, d["dataset.seed"])
        return pool, test
    full = make_synthetic(
        d["dataset.source"],
        d["dataset.classes"],
        d["dataset.pool_per_class"] + d["dataset.test_per_class"],
        d["dataset.dim"],
        d["dataset.noise"],
        d["dataset.seed"],
        scale=d["dataset.scale"],
    )
    pool, test = split_per_class(full, d["dataset.pool_per_class"], d["dataset.seed"] + 1)
    return pool.with_labels(name=full.name + "-pool"), test.with_labels(name=full.name + "-test")


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    """Load data, train the teacher, attach soft, smoothed and refined labels.

    Results are memoized on the configuration keys that affect them.
    """
    key = _pipeline_key(cfg)
    if key in _PIPELINE_CACHE:
        return _PIPELINE_CACHE[key]
    d = cfg.as_dict()
    try:
        pool, test = _load_source(cfg)
    except Exception as exc:
        raise StageError("load", exc) from exc
    try:
        spec = cfg.model_spec("teacher", pool.input_shape, pool.num_classes, d["teacher.seed"])
        teacher = train_teacher(
            pool, spec, OptimizerConfig(d["teacher.optimizer"], lr=d["teacher.lr"]), d["teacher.epochs"], seed=d["teacher.seed"]
        )
        teacher_acc = evaluate_accuracy(teacher, test)
    except Exception as exc:
        raise StageError("teacher", exc) from exc
    try:
        soft = generate_soft_labels(teacher, pool.images)
        logits = predict_logits(teacher, pool.images)
        smoothed = smooth_labels(pool.hard, d["labels.alpha"])
        refined = refine_labels(smoothed, soft, d["labels.gamma"])
    except Exception as exc:
        raise StageError("labels", exc) from exc
    pool = pool.with_labels(soft=soft, teacher_logits=logits, derived={"smoothed": smoothed, "refined": refined})
    prepared = PreparedData(
        pool=pool,
        test=test,
        teacher_test_accuracy=teacher_acc,
        soft_label_accuracy=label_accuracy(soft, pool.hard),
        refined_label_accuracy=label_accuracy(refined, pool.hard),
    )
    _PIPELINE_CACHE[key] = prepared
    return prepared


def clear_cache() -> None:
    _PIPELINE_CACHE.clear()


# -- runs ------------------------------------------------------------------------


@dataclass
class RunRecord:
    fingerprint: str
    config: Dict[str, Any]
    seeds: List[int]
    accuracies: List[float]
    epoch_loss: List[List[float]]
    epoch_grad_norm: List[List[float]]
    label_source: str
    teacher_test_accuracy: float = math.nan
    soft_label_accuracy: float = math.nan
    refined_label_accuracy: float = math.nan
    aborted: List[Optional[Tuple[int, int]]] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def mean_epoch_loss(self) -> List[float]:
        return list(np.mean(np.asarray(self.epoch_loss), axis=0)) if self.epoch_loss else []

    @property
    def mean_epoch_grad_norm(self) -> List[float]:
        return list(np.mean(np.asarray(self.epoch_grad_norm), axis=0)) if self.epoch_grad_norm else []


def _train_student(cfg: ExperimentConfig, train: DatasetBundle, test: DatasetBundle, seed: int, eval_classes=None):
    spec = cfg.model_spec("student", train.input_shape, train.num_classes, derive_seed(seed, "init"))
    bs = cfg["train.batch_size"] or None
    return train_model(
        build_model(spec),
        train,
        cfg.loss(),
        cfg.label_source(),
        cfg.optimizer(),
        cfg["train.epochs"],
        batch_size=bs,
        augment_cfg=cfg.augment(),
        seed=derive_seed(seed, "train"),
        schedule=cfg["schedule"],
        test=test,
        eval_classes=eval_classes,
    )


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Data -> teacher -> labels -> IPC subset -> student, once per seed."""
    start = time.perf_counter()
    prepared = prepare_data(cfg)
    record = RunRecord(
        fingerprint=cfg.fingerprint(),
        config=cfg.as_dict(),
        seeds=cfg.seeds(),
        accuracies=[],
        epoch_loss=[],
        epoch_grad_norm=[],
        label_source=cfg.label_source(),
        teacher_test_accuracy=prepared.teacher_test_accuracy,
        soft_label_accuracy=prepared.soft_label_accuracy,
        refined_label_accuracy=prepared.refined_label_accuracy,
    )
    for seed in record.seeds:
        try:
            subset = select_ipc_subset(prepared.pool, cfg["dataset.ipc"], derive_seed(seed, "subset"))
        except Exception as exc:
            raise StageError("subset", exc) from exc
        try:
            _, log = _train_student(cfg, subset, prepared.test, seed)
        except Exception as exc:
            raise StageError("student", exc) from exc
        record.accuracies.append(float(log.test_accuracy))
        record.epoch_loss.append(list(log.epoch_loss))
        record.epoch_grad_norm.append(list(log.epoch_grad_norm))
        record.aborted.append(log.aborted)
    record.wall_seconds = time.perf_counter() - start
    return record


def _parse_axis_values(key: str, values: Sequence[Any]) -> List[Dict[str, Any]]:
    """Each axis value becomes a dict of config changes."""
    out = []
    for v in values:
        if key == "optimizer.kind" and isinstance(v, str) and ":" in v:
            kind, lr = v.split(":", 1)
            out.append({"optimizer.kind": kind, "optimizer.lr": float(lr)})
        else:
            out.append({key: v})
    return out


def resolve_axes(base: ExperimentConfig, axes: Mapping[str, Sequence[Any]]) -> Tuple[List[Tuple[str, List[Dict[str, Any]]]], Optional[List[int]]]:
    resolved = []
    seeds = None
    for name, values in axes.items():
        key = AXIS_ALIASES.get(name, name)
        if not values:
            raise ConfigError(f"axis {name!r} has no values")
        if key == "seed":
            seeds = [int(v) for v in values]
            continue
        if key not in DEFAULTS or key in ("seeds", "repeat", "output.path"):
            raise ConfigError(f"invalid axis key {name!r}")
        options = _parse_axis_values(key, values)
        for change in options:
            base.updated(change)
        resolved.append((name, options))
    return resolved, seeds


@dataclass
class SweepResult:
    axes: List[str]
    cells: List[Dict[str, Any]]
    records: List[RunRecord]

    def best(self, axis: str) -> Tuple[Any, float]:
        """Axis value of the cell with the highest mean accuracy (first on ties)."""
        i = int(np.argmax([r.mean for r in self.records]))
        return self.cells[i][axis], self.records[i].mean


def grid_sweep(base: ExperimentConfig, axes: Mapping[str, Sequence[Any]]) -> SweepResult:
    """Run every cell of the Cartesian product of ``axes``.

    A ``seed`` axis does not create cells; it sets the seeds each cell is
    repeated over.
    """
    resolved, seeds = resolve_axes(base, axes)
    if seeds is not None:
        base = base.updated({"seeds": ",".join(str(s) for s in seeds)})
    names = [n for n, _ in resolved]
    cells, records = [], []
    for combo in itertools.product(*[opts for _, opts in resolved]):
        changes: Dict[str, Any] = {}
        for c in combo:
            changes.update(c)
        cfg = base.updated(changes)
        label = {name: next(iter(c.values())) if len(c) == 1 else ":".join(str(v) for v in c.values()) for name, c in zip(names, combo)}
        cells.append(label)
        records.append(run_experiment(cfg))
    return SweepResult(names, cells, records)


# -- continual learning ------------------------------------------------------------


@dataclass
class GDumbResult:
    accuracies: List[float]
    memory_sizes: List[int]
    seen_classes: List[List[int]]


def gdumb_incremental(cfg: ExperimentConfig, steps: int, seed: Optional[int] = None) -> GDumbResult:
    """Class-incremental GDumb: a class-balanced memory and a fresh student per step.

    Classes arrive in ``steps`` contiguous groups; at step k the memory holds
    ``ipc`` samples of every class seen so far and accuracy is measured on
    test samples of those classes, predicting only among them.
    """
    prepared = prepare_data(cfg)
    c = prepared.pool.num_classes
    if steps < 1 or c % steps:
        raise ConfigError(f"{c} classes cannot be split into {steps} equal steps")
    seed = cfg.seeds()[0] if seed is None else seed
    per_step = c // steps
    test_classes = prepared.test.classes
    result = GDumbResult([], [], [])
    for k in range(steps):
        seen = list(range((k + 1) * per_step))
        memory = select_ipc_subset(prepared.pool, cfg["dataset.ipc"], derive_seed(seed, "subset"), classes=seen)
        test = prepared.test.subset(np.flatnonzero(np.isin(test_classes, seen)))
        _, log = _train_student(cfg, memory, test, seed, eval_classes=None if len(seen) == c else seen)
        result.accuracies.append(float(log.test_accuracy))
        result.memory_sizes.append(len(memory))
        result.seen_classes.append(seen)
    return result


# -- reports -----------------------------------------------------------------------


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def result_rows(records: Iterable[RunRecord]) -> List[Dict[str, str]]:
    rows = []
    for r in records:
        c = r.config
        wd = OptimizerConfig(kind=c["optimizer.kind"], lr=c["optimizer.lr"], weight_decay=c["optimizer.weight_decay"]).weight_decay
        common = {
            "fingerprint": r.fingerprint,
            "dataset": f"{c['dataset.source']}-c{c['dataset.classes']}" if c["dataset.source"] != "idx" else Path(c["dataset.images_path"]).stem,
            "ipc": c["dataset.ipc"],
            "loss": c["loss.id"] if c["labels.source"] == "auto" else f"{c['loss.id']}/{r.label_source}",
            "optimizer": c["optimizer.kind"],
            "lr": c["optimizer.lr"],
            "weight_decay": wd,
            "gamma": c["labels.gamma"],
            "alpha": c["labels.alpha"],
        }
        # a single-seed record is fully described by its aggregate row
        for seed, acc in zip(r.seeds, r.accuracies) if len(r.seeds) > 1 else ():
            rows.append({**{k: _fmt(v) for k, v in common.items()}, "seed": str(seed), "final_accuracy": _fmt(acc),
                         "mean": "", "std": "", "wall_seconds": _fmt(r.wall_seconds / max(len(r.seeds), 1))})
        rows.append({**{k: _fmt(v) for k, v in common.items()}, "seed": "aggregate", "final_accuracy": _fmt(r.mean),
                     "mean": _fmt(r.mean), "std": _fmt(r.std), "wall_seconds": _fmt(r.wall_seconds)})
    return rows


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in columns})
    return buf.getvalue()


def _curve_rows(records: Iterable[RunRecord], attr: str) -> List[Dict[str, Any]]:
    rows = []
    for r in records:
        for seed, curve in zip(r.seeds, getattr(r, attr)):
            for epoch, value in enumerate(curve):
                rows.append({
                    "fingerprint": r.fingerprint, "loss": r.config["loss.id"], "label_source": r.label_source,
                    "optimizer": r.config["optimizer.kind"], "seed": seed, "epoch": epoch, "value": float(value),
                })
    return rows


def summary_markdown(records: Sequence[RunRecord], sweep: Optional[SweepResult] = None) -> str:
    lines = ["# Results", ""]
    if sweep is not None and sweep.axes:
        lines += ["| " + " | ".join(sweep.axes) + " | mean | std | seeds |", "|" + "---|" * (len(sweep.axes) + 3)]
        for cell, r in zip(sweep.cells, sweep.records):
            vals = " | ".join(str(cell[a]) for a in sweep.axes)
            lines.append(f"| {vals} | {r.mean:.4f} | {r.std:.4f} | {len(r.seeds)} |")
        lines.append("")
        for a in sweep.axes:
            value, acc = sweep.best(a)
            lines.append(f"best {a}: {value} (mean accuracy {acc:.4f})")
        lines.append("")
    else:
        lines += ["| fingerprint | loss | labels | optimizer | mean | std | seeds |", "|---|---|---|---|---|---|---|"]
        for r in records:
            lines.append(
                f"| {r.fingerprint} | {r.config['loss.id']} | {r.label_source} | {r.config['optimizer.kind']} "
                f"| {r.mean:.4f} | {r.std:.4f} | {len(r.seeds)} |"
            )
        lines.append("")
    if records:
        r = records[0]
        lines += [
            f"teacher test accuracy: {r.teacher_test_accuracy:.4f}",
            f"label accuracy (soft): {r.soft_label_accuracy:.4f}",
            f"label accuracy (refined): {r.refined_label_accuracy:.4f}",
            "",
        ]
    return "\n".join(lines)


def emit_report(records: Sequence[RunRecord], path: Union[str, Path], sweep: Optional[SweepResult] = None) -> Dict[str, Path]:
    """Write results.csv, summary.md, loss_curves.csv and grad_norms.csv under ``path``."""
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {directory}: {exc}") from exc
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"report directory {directory} is not writable")
    curve_cols = ("fingerprint", "loss", "label_source", "optimizer", "seed", "epoch", "value")
    files = {
        "results": (directory / "results.csv", _csv_text(RESULT_COLUMNS, result_rows(records))),
        "summary": (directory / "summary.md", summary_markdown(records, sweep)),
        "loss_curves": (directory / "loss_curves.csv", _csv_text(curve_cols, _curve_rows(records, "epoch_loss"))),
        "grad_norms": (directory / "grad_norms.csv", _csv_text(curve_cols, _curve_rows(records, "epoch_grad_norm"))),
    }
    for p, text in files.values():
        _atomic_write(p, text)
    return {k: p for k, (p, _) in files.items()}


# -- gradient check ----------------------------------------------------------------


def _random_targets(loss, rng: np.random.Generator, batch: int, classes: int):
    hard = None
    vector = None
    if loss.needs_hard:
        hard = np.eye(classes)[rng.integers(classes, size=batch)]
    kind = next((p for p in loss.parts if p != "ce"), None)
    if kind == "mse":
        vector = rng.standard_normal((batch, classes))
    elif kind is not None:
        vector = rng.dirichlet(np.ones(classes), size=batch)
    return hard, vector


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def loss_gradcheck(
    instances: int = 50, batch: int = 8, classes: int = 10, seed: int = 0
) -> Dict[str, float]:
    """Worst relative error between reverse-mode and central-difference gradients per loss."""
    from .autodiff import Graph, evaluate_with_grad, finite_diff_grad
    from .losses import compute_loss

    cases = [(k, 1.0) for k in LOSS_IDS if k != "kl"] + [("kl", t) for t in (1.0, 2.0, 4.0)]
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for key, temp in cases:
        loss = parse_loss(key, temp)
        name = f"{key}(T={temp:g})" if key == "kl" else key
        errs = []
        for _ in range(instances):
            hard, vector = _random_targets(loss, rng, batch, classes)
            logits = rng.standard_normal((batch, classes))
            graph = Graph(lambda z: compute_loss(loss, z, hard, vector))
            _, grads = evaluate_with_grad(graph, {"z": logits})
            fd = finite_diff_grad(lambda x: compute_loss(loss, Tensor(x), hard, vector).item(), logits)
            errs.append(relative_error(grads["z"], fd))
        worst[name] = max(errs)
    return worst
