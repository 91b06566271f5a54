"""Toy-scale experiment presets shared by the acceptance suite and ``scripts/``.

Each preset is a plain :class:`PipelineSpec`, so it can be dumped to a JSON
config and rerun through the CLI.
"""

from __future__ import annotations

from dataclasses import replace

from .losses import DistillConfig
from .models import ModelSpec
from .orchestrator import PipelineSpec
from .train import ScheduleSpec, cifar_preset

SEEDS = [0, 1, 2, 3, 4]
LADDER_WIDTHS = (1, 2, 3, 4, 6, 8)

# 10-class mixture with two modes per class: a width-1 student underfits it.
CAPACITY_DATA = dict(generator="gaussian_mixture", K=10, dims=16, per_class=200, spread=1.0, seed=0,
                     modes_per_class=2)
CAPACITY_STUDENT_SCHEDULE = ScheduleSpec(38, "step", 0.1, 0.2, 11)
# Teachers get the full 200-epoch CIFAR recipe; flips and crops make no sense for vectors.
CAPACITY_TEACHER_SCHEDULE = replace(cifar_preset(200), augment=False)
ES_TEACHER_EPOCHS = 50

ESKD_DATA = dict(generator="gaussian_mixture", K=20, dims=16, per_class=100, spread=1.0, seed=0, modes_per_class=1)
ESKD_STUDENT_SCHEDULE = ScheduleSpec(38, "step", 0.1, 0.2, 11)
ESKD_TEACHER_SCHEDULE = ScheduleSpec(60, "step", 0.1, 0.2, 18)

SEQUENTIAL_DATA = dict(generator="gaussian_mixture", K=10, dims=16, per_class=100, spread=1.0, seed=0)
SEQUENTIAL_SCHEDULE = ScheduleSpec(20, "step", 0.1, 0.2, 6)


def mlp(width: int, dims: int = 16, classes: int = 10) -> ModelSpec:
    return ModelSpec("mlp", 1, width, (dims,), classes)


def capacity_sweep(seeds=SEEDS) -> PipelineSpec:
    """Width-1 student distilled from every rung of an MLP width ladder."""
    return PipelineSpec(
        kind="sweep",
        data=CAPACITY_DATA,
        student=mlp(1),
        teachers=[mlp(w) for w in LADDER_WIDTHS],
        cfg=DistillConfig(),
        student_schedule=CAPACITY_STUDENT_SCHEDULE,
        teacher_schedule=CAPACITY_TEACHER_SCHEDULE,
        seeds=list(seeds),
    )


def early_stopped_teacher_kd(seeds=SEEDS) -> PipelineSpec:
    """Largest rung of the capacity ladder, fully trained vs stopped on the 15/50 schedule."""
    return PipelineSpec(
        kind="es_teacher_kd",
        data=CAPACITY_DATA,
        student=mlp(1),
        teachers=[mlp(LADDER_WIDTHS[-1])],
        cfg=DistillConfig(),
        student_schedule=CAPACITY_STUDENT_SCHEDULE,
        teacher_schedule=CAPACITY_TEACHER_SCHEDULE,
        n_short=ES_TEACHER_EPOCHS,
        seeds=list(seeds),
    )


def eskd(seeds=SEEDS) -> PipelineSpec:
    """Full KD vs KD stopped at the first LR drop, on an underfit 20-class task."""
    return PipelineSpec(
        kind="eskd",
        data=ESKD_DATA,
        student=mlp(1, classes=20),
        teachers=[mlp(8, classes=20)],
        cfg=DistillConfig(),
        student_schedule=ESKD_STUDENT_SCHEDULE,
        teacher_schedule=ESKD_TEACHER_SCHEDULE,
        seeds=list(seeds),
    )


def born_again(seeds=SEEDS, generations: int = 5) -> PipelineSpec:
    return PipelineSpec(
        kind="sequential_kd",
        data=SEQUENTIAL_DATA,
        student=mlp(2),
        cfg=DistillConfig(),
        student_schedule=SEQUENTIAL_SCHEDULE,
        seeds=list(seeds),
        generations=generations,
    )


PRESETS = {
    "capacity_sweep": capacity_sweep,
    "es_teacher": early_stopped_teacher_kd,
    "eskd": eskd,
    "born_again": born_again,
}
