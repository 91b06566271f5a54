"""SGD training loop, learning-rate schedules and evaluation metrics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .data import STANDARD, AugmentPolicy, Dataset, augment, batches
from .errors import ConfigError, DataError, NumericError, ParameterError
from .losses import DistillConfig, composite_loss
from .models import Model, forward
from .rng import stream

MODES = ("step", "shrunk_step", "explicit_drops", "cosine")


@dataclass(frozen=True)
class ScheduleSpec:
    total_epochs: int
    mode: str = "step"
    initial_lr: float = 0.1
    drop_factor: float = 0.2
    drop_every: int | None = 60
    drop_epochs: tuple[int, ...] = ()
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 5e-4
    batch_size: int = 128
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "drop_epochs", tuple(int(e) for e in self.drop_epochs))

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ParameterError(f"unknown schedule mode {self.mode!r}; expected one of {MODES}")
        if self.total_epochs < 1:
            raise ParameterError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not self.initial_lr > 0 or not 0 < self.drop_factor <= 1:
            raise ParameterError(f"need initial_lr > 0 and drop_factor in (0, 1] (got {self.initial_lr}, {self.drop_factor})")
        if self.mode == "step" and (self.drop_every is None or self.drop_every < 1):
            raise ParameterError(f"step schedule needs drop_every >= 1, got {self.drop_every}")
        if self.mode == "shrunk_step" and self.drop_interval < 1:
            raise ParameterError(f"shrunk_step with {self.total_epochs} epochs gives a zero drop interval")
        if self.mode == "explicit_drops" and list(self.drop_epochs) != sorted(set(self.drop_epochs)):
            raise ParameterError(f"drop_epochs must be strictly increasing, got {self.drop_epochs}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or self.batch_size < 1:
            raise ParameterError("momentum must be in [0,1), weight_decay >= 0, batch_size >= 1")

    @property
    def drop_interval(self) -> int | None:
        if self.mode == "shrunk_step":
            return (self.total_epochs - 5) // 3
        if self.mode == "step":
            return self.drop_every
        return None

    @property
    def first_drop_epoch(self) -> int:
        """Epoch of the first LR drop; cosine schedules use a third of the run."""
        if self.mode in ("step", "shrunk_step"):
            return min(self.drop_interval, self.total_epochs)
        if self.mode == "explicit_drops" and self.drop_epochs:
            return min(self.drop_epochs[0], self.total_epochs)
        return self.total_epochs // 3

    @property
    def label(self) -> str:
        if self.mode in ("step", "shrunk_step"):
            return f"{self.drop_interval}/{self.total_epochs}"
        if self.mode == "explicit_drops":
            return f"({','.join(map(str, self.drop_epochs))})/{self.total_epochs}"
        return f"cosine/{self.total_epochs}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_epochs"] = list(self.drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSpec":
        d = dict(d)
        d["drop_epochs"] = tuple(d.get("drop_epochs", ()))
        return cls(**d)


def cifar_preset(total_epochs: int = 200) -> ScheduleSpec:
    return ScheduleSpec(total_epochs, "step", 0.1, 0.2, 60, (), 0.9, False, 5e-4, 128, True)


def imagenet_preset(total_epochs: int = 90) -> ScheduleSpec:
    return ScheduleSpec(total_epochs, "step", 0.1, 0.1, 30, (), 0.9, True, 1e-4, 128, True)


def imagenet_es_preset(total_epochs: int) -> ScheduleSpec:
    drops = {35: (15, 25, 30), 50: (20, 35, 45)}
    if total_epochs not in drops:
        raise ParameterError(f"early-stopped ImageNet schedules exist for 35 or 50 epochs, not {total_epochs}")
    return ScheduleSpec(total_epochs, "explicit_drops", 0.1, 0.1, None, drops[total_epochs], 0.9, True, 1e-4, 128, True)


def early_stopped_teacher(base: ScheduleSpec, n_short: int) -> ScheduleSpec:
    """Shortened teacher schedule dropping every ``⌊(n_short − 5)/3⌋`` epochs."""
    if n_short >= base.total_epochs:
        raise ParameterError(f"n_short={n_short} must be below the full schedule length {base.total_epochs}")
    if (n_short - 5) // 3 < 1:
        raise ParameterError(f"n_short={n_short} is too small for a shrunk schedule (needs >= 8)")
    return replace(base, total_epochs=n_short, mode="shrunk_step", drop_every=None, drop_epochs=())


def _scaled(gamma: float, factor: float, drops: int) -> float:
    # exact decimal arithmetic so 0.1 * 0.2**2 is 0.004, not 0.004000000000000001
    return float(Fraction(repr(gamma)) * Fraction(repr(factor)) ** drops)


def lr_at(spec: ScheduleSpec, epoch: int) -> float:
    spec.validate()
    if not 0 <= epoch < spec.total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {spec.total_epochs})")
    if spec.mode in ("step", "shrunk_step"):
        return _scaled(spec.initial_lr, spec.drop_factor, epoch // spec.drop_interval)
    if spec.mode == "explicit_drops":
        return _scaled(spec.initial_lr, spec.drop_factor, sum(1 for d in spec.drop_epochs if d <= epoch))
    return spec.initial_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / spec.total_epochs))


# optimizer -----------------------------------------------------------------

@dataclass
class TrainState:
    model: Model
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    log: "MetricLog" = field(default_factory=lambda: MetricLog())

    @classmethod
    def fresh(cls, model: Model, seed: int = 0) -> "TrainState":
        return cls(model, {k: np.zeros_like(v.data) for k, v in model.params.items()}, 0, seed)


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, spec: ScheduleSpec) -> TrainState:
    """One momentum-SGD update, traversing parameters in model order."""
    m = np.float32(spec.momentum)
    wd = np.float32(spec.weight_decay)
    lr32 = np.float32(lr)
    for name, p in state.model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at epoch {state.epoch}")
        step = lr32 * (g + wd * p.data) if wd else lr32 * g
        v = m * state.velocity[name] - step
        state.velocity[name] = v
        p.data = p.data + (m * v - step if spec.nesterov else v)
    return state


# metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    top1: float
    top5: float
    ce: float
    kd: float | None = None
    kd_error: float | None = None
    n: int = 0


def predict_logits(model: Model, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Forward outside any tape, batch by batch; rows are batch-size independent."""
    out = [forward(model, inputs[i : i + batch_size])[0].data for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), np.float32)


def _log_softmax64(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = logits.astype(np.float64) / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -_log_softmax64(logits)[np.arange(len(labels)), labels]


def per_sample_kd(student: np.ndarray, teacher: np.ndarray, tau: float) -> np.ndarray:
    p_t = np.exp(_log_softmax64(teacher, tau))
    return -(tau**2) * (p_t * _log_softmax64(student, tau)).sum(axis=1)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    k = min(k, logits.shape[1])
    # stable sort on the negated scores: ties go to the lowest class index
    ranked = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (ranked == labels[:, None]).any(axis=1)


def evaluate(
    model: Model,
    dataset: Dataset,
    teacher: Model | None = None,
    temperature: float = 4.0,
    batch_size: int = 512,
    teacher_logits: np.ndarray | None = None,
) -> Metrics:
    """Top-1/top-5 error (%) and mean CE; KD loss and KD error (%) if a teacher is given.

    Per-sample values are gathered batch by batch and reduced once at the end,
    so the result does not depend on ``batch_size``.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.inputs, batch_size)
    labels = dataset.labels
    n = len(labels)
    top1 = 100.0 * (n - int(topk_correct(logits, labels, 1).sum())) / n
    top5 = 100.0 * (n - int(topk_correct(logits, labels, 5).sum())) / n
    ce = float(per_sample_ce(logits, labels).sum() / n)
    kd = kd_err = None
    if teacher is not None or teacher_logits is not None:
        t = teacher_logits if teacher_logits is not None else predict_logits(teacher, dataset.inputs, batch_size)
        kd = float(per_sample_kd(logits, t, temperature).sum() / n)
        kd_err = 100.0 * int((logits.argmax(axis=1) != t.argmax(axis=1)).sum()) / n
    return Metrics(top1, top5, ce, kd, kd_err, n)


# metric log ----------------------------------------------------------------

LOG_KEYS = ("epoch", "lr", "train_ce", "train_kd", "test_top1", "test_top5", "test_kd", "kd_error", "wall_ms")


@dataclass
class MetricLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append({k: row.get(k) for k in LOG_KEYS})

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.rows)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "MetricLog":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls(rows)


class Splits(NamedTuple):
    train: Dataset
    test: Dataset


# training loop -------------------------------------------------------------

def _grads(model: Model) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def train(
    model: Model,
    data: Splits,
    teacher: Model | None = None,
    cfg: DistillConfig = DistillConfig(),
    schedule: ScheduleSpec = cifar_preset(),
    seed: int = 0,
    policy: AugmentPolicy | None = None,
    record_wall_time: bool = False,
) -> tuple[Model, MetricLog]:
    """Train ``model`` in place for ``schedule.total_epochs`` epochs.

    The shuffle and augmentation streams are keyed by ``seed``; parameter
    initialisation is whatever ``model`` already holds.  The teacher is run
    outside the tape on every (augmented) batch while distillation is active.
    ``wall_ms`` is only filled when ``record_wall_time`` is set, which keeps
    logs byte-stable across reruns by default.
    """
    schedule.validate()
    cfg.validate(schedule.total_epochs)
    train_set, test_set = data
    if teacher is None and cfg.distills_at(0):
        raise ConfigError(f"alpha={cfg.alpha} with switch_epoch={cfg.switch_epoch} requires a teacher")
    if teacher is not None:
        if teacher.spec.input_shape != model.spec.input_shape or teacher.spec.num_classes != model.spec.num_classes:
            raise ConfigError(
                f"teacher {teacher.spec.label} {teacher.spec.input_shape}->{teacher.spec.num_classes} does not match "
                f"student {model.spec.label} {model.spec.input_shape}->{model.spec.num_classes}"
            )
    if policy is None:
        policy = STANDARD if schedule.augment and train_set.is_image else None
    state = TrainState.fresh(model, seed)
    tau = cfg.temperature
    t_train = predict_logits(teacher, train_set.inputs) if teacher is not None else None
    t_test = predict_logits(teacher, test_set.inputs) if teacher is not None else None

    for epoch in range(schedule.total_epochs):
        state.epoch = epoch
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        distill = teacher is not None and cfg.distills_at(epoch)
        aug_rng = stream(seed, "augment", epoch)
        for batch in batches(train_set, schedule.batch_size, seed, epoch):
            x = augment(batch.inputs, policy, aug_rng) if policy is not None else batch.inputs
            teacher_out = None
            if distill:
                t_logits, t_maps = forward(teacher, x)
                teacher_out = (t_logits.data, [m.data for m in t_maps])
            with ad.Tape():
                student_out = forward(model, x)
                loss = composite_loss(student_out, teacher_out, batch.labels, cfg, epoch)
            ad.backward(loss)
            sgd_step(state, _grads(model), lr, schedule)
        tr = evaluate(model, train_set, temperature=tau, teacher_logits=t_train)
        te = evaluate(model, test_set, temperature=tau, teacher_logits=t_test)
        state.log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_ce": tr.ce,
                "train_kd": tr.kd,
                "test_top1": te.top1,
                "test_top5": te.top5,
                "test_kd": te.kd,
                "kd_error": te.kd_error,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if record_wall_time else None,
            }
        )
    return model, state.log
