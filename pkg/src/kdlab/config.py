"""Run configuration: strict JSON in, validated :class:`RunConfig` out.

Example::

    {
      "pipeline": "eskd",
      "data": {"generator": "gaussian_mixture", "K": 20, "dims": 16, "per_class": 100, "spread": 1.0},
      "student": {"family": "mlp", "depth_factor": 1, "width_factor": 1},
      "teachers": [{"family": "mlp", "depth_factor": 1, "width_factor": 8}],
      "distill": {"alpha": 0.9, "temperature": 4.0},
      "schedule": {"total_epochs": 38, "drop_every": 11},
      "seeds": [0, 1, 2, 3, 4],
      "output": "runs/eskd"
    }

Model blocks may omit ``input_shape`` and ``num_classes``; they are filled in
from the data block.  Schedule blocks may start from ``"preset": "cifar"`` or
``"imagenet"`` and override individual fields.  Every error names the key path
it concerns, and everything is checked before any training starts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from jsonschema import Draft202012Validator

from .errors import ConfigError, KDLabError
from .losses import DistillConfig
from .models import ModelSpec
from .orchestrator import KINDS, PipelineSpec
from .train import ScheduleSpec, cifar_preset, early_stopped_teacher, imagenet_preset

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}

_MODEL = {
    "type": "object",
    "additionalProperties": False,
    "required": ["family", "depth_factor", "width_factor"],
    "properties": {
        "family": {"enum": ["mlp", "convnet"]},
        "depth_factor": _POS_INT,
        "width_factor": _POS_INT,
        "input_shape": {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 3},
        "num_classes": {"type": "integer", "minimum": 2},
        "init_seed": _INT,
    },
}

_SCHEDULE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": ["cifar", "imagenet"]},
        "total_epochs": _POS_INT,
        "mode": {"enum": ["step", "shrunk_step", "explicit_drops", "cosine"]},
        "initial_lr": _NUM,
        "drop_factor": _NUM,
        "drop_every": {"type": ["integer", "null"]},
        "drop_epochs": {"type": "array", "items": _POS_INT},
        "momentum": _NUM,
        "nesterov": {"type": "boolean"},
        "weight_decay": _NUM,
        "batch_size": _POS_INT,
        "augment": {"type": "boolean"},
    },
}

_DATA = {
    "gaussian_mixture": {
        "required": ["generator", "K", "dims", "per_class", "spread"],
        "properties": {"generator": {}, "K": _POS_INT, "dims": _POS_INT, "per_class": _POS_INT, "spread": _NUM,
                       "seed": _INT, "modes_per_class": _POS_INT, "test_per_class": _POS_INT},
    },
    "patterned_images": {
        "required": ["generator", "K", "H", "W", "per_class", "noise"],
        "properties": {"generator": {}, "K": _POS_INT, "H": _POS_INT, "W": _POS_INT, "per_class": _POS_INT,
                       "noise": _NUM, "seed": _INT, "channels": _POS_INT, "test_per_class": _POS_INT},
    },
    "cifar_binary": {
        "required": ["source", "train", "test"],
        "properties": {
            "source": {},
            "train": {"type": ["string", "array"], "items": {"type": "string"}},
            "test": {"type": ["string", "array"], "items": {"type": "string"}},
        },
    },
}

_ROOT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["pipeline", "data", "student", "schedule"],
    "properties": {
        "pipeline": {"enum": list(KINDS)},
        "data": {"type": "object"},
        "student": _MODEL,
        "teachers": {"type": "array", "items": {"anyOf": [{"type": "string"}, _MODEL]}},
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha": _NUM, "temperature": _NUM, "at_beta": _NUM, "switch_epoch": {"type": ["integer", "null"]}},
        },
        "schedule": _SCHEDULE,
        "teacher_schedule": {"anyOf": [{"type": "null"}, _SCHEDULE]},
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
        "output": {"type": ["string", "null"]},
        "generations": _POS_INT,
        "n_short": {"type": ["integer", "null"]},
        "alphas": {"type": "array", "items": _NUM, "minItems": 1},
        "taus": {"type": "array", "items": _NUM, "minItems": 1},
        "seed_policy": {"enum": ["fresh", "same_order"]},
        "include_scratch": {"type": "boolean"},
        "check_ladder": {"type": "boolean"},
    },
}


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _schema_check(obj, schema: dict, prefix: tuple = ()) -> None:
    errors = sorted(Draft202012Validator(schema).iter_errors(obj), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    e = errors[0]
    where = _path(prefix + tuple(e.absolute_path))
    if e.validator == "additionalProperties":
        extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
        raise ConfigError(f"{_path(prefix + tuple(e.absolute_path) + (extra[0],))}: unknown key")
    if e.validator == "required":
        missing = e.message.split("'")[1]
        raise ConfigError(f"{_path(prefix + tuple(e.absolute_path) + (missing,))}: required key missing")
    raise ConfigError(f"{where}: {e.message}")


def _data_kind(data: dict) -> str:
    if "generator" in data:
        if data["generator"] not in ("gaussian_mixture", "patterned_images"):
            raise ConfigError(f"data.generator: unknown generator {data['generator']!r}")
        return data["generator"]
    if "source" in data:
        if data["source"] != "cifar_binary":
            raise ConfigError(f"data.source: unknown source {data['source']!r}")
        return "cifar_binary"
    raise ConfigError("data.generator: required key missing (or give data.source)")


def data_signature(data: dict) -> tuple[tuple[int, ...], int]:
    """Input shape and class count implied by a data block."""
    kind = _data_kind(data)
    if kind == "gaussian_mixture":
        return (data["dims"],), data["K"]
    if kind == "patterned_images":
        return (data.get("channels", 1), data["H"], data["W"]), data["K"]
    return (3, 32, 32), 10


def _model(block: dict, data: dict) -> ModelSpec:
    shape, classes = data_signature(data)
    return ModelSpec(
        family=block["family"],
        depth_factor=block["depth_factor"],
        width_factor=block["width_factor"],
        input_shape=tuple(block.get("input_shape", shape)),
        num_classes=block.get("num_classes", classes),
        init_seed=block.get("init_seed", 0),
    )


def _schedule(block: dict) -> ScheduleSpec:
    block = dict(block)
    preset = block.pop("preset", None)
    if preset is None:
        if "total_epochs" not in block:
            raise ConfigError("total_epochs: required key missing (or give a preset)")
        base = ScheduleSpec(block["total_epochs"])
    else:
        base = (cifar_preset if preset == "cifar" else imagenet_preset)(block.get("total_epochs", 200 if preset == "cifar" else 90))
    if "drop_epochs" in block:
        block["drop_epochs"] = tuple(block["drop_epochs"])
    return replace(base, **block)


@dataclass
class RunConfig:
    pipeline: str
    data: dict
    student: ModelSpec
    schedule: ScheduleSpec
    teachers: tuple = ()
    distill: DistillConfig = DistillConfig()
    teacher_schedule: ScheduleSpec | None = None
    seeds: tuple[int, ...] = (0,)
    output: str | None = None
    generations: int = 5
    n_short: int | None = None
    alphas: tuple[float, ...] = (0.9,)
    taus: tuple[float, ...] = (3.0, 4.0, 5.0, 20.0)
    seed_policy: str = "fresh"
    include_scratch: bool = True
    check_ladder: bool = True

    # parsing ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        _schema_check(raw, _ROOT)
        data = raw["data"]
        kind = _data_kind(data)
        spec = _DATA[kind]
        _schema_check(data, {"type": "object", "additionalProperties": False, **spec}, ("data",))
        if kind == "cifar_binary":
            data = {k: ([_resolve(p, base_dir) for p in v] if isinstance(v, list) else _resolve(v, base_dir))
                    if k in ("train", "test") else v for k, v in data.items()}
        student = _model(raw["student"], data)
        teachers = tuple(
            _model(t, data) if isinstance(t, dict) else _resolve(t, base_dir) for t in raw.get("teachers", [])
        )
        for i, blk in enumerate((raw["schedule"], raw.get("teacher_schedule"))):
            if blk is not None and "preset" not in blk and "total_epochs" not in blk:
                raise ConfigError(f"{('schedule', 'teacher_schedule')[i]}.total_epochs: required key missing")
        ts = raw.get("teacher_schedule")
        cfg = cls(
            pipeline=raw["pipeline"],
            data=dict(data),
            student=student,
            schedule=_schedule(raw["schedule"]),
            teachers=teachers,
            distill=DistillConfig.from_dict(raw.get("distill", {})),
            teacher_schedule=None if ts is None else _schedule(ts),
            seeds=tuple(raw.get("seeds", [0])),
            output=raw.get("output"),
            generations=raw.get("generations", 5),
            n_short=raw.get("n_short"),
            alphas=tuple(float(a) for a in raw.get("alphas", [0.9])),
            taus=tuple(float(t) for t in raw.get("taus", [3.0, 4.0, 5.0, 20.0])),
            seed_policy=raw.get("seed_policy", "fresh"),
            include_scratch=raw.get("include_scratch", True),
            check_ladder=raw.get("check_ladder", True),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str, base_dir: Path | None = None) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base_dir)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text, path.parent)

    # checks ------------------------------------------------------------------

    def validate(self) -> None:
        def at(key: str, fn) -> None:
            try:
                fn()
            except KDLabError as exc:
                raise ConfigError(f"{key}: {exc}") from exc

        at("student", self.student.validate)
        at("schedule", self.schedule.validate)
        if self.teacher_schedule is not None:
            at("teacher_schedule", self.teacher_schedule.validate)
        at("distill", lambda: self.distill.validate(self.schedule.total_epochs))
        shape, classes = data_signature(self.data)
        for key, spec in [("student", self.student)] + [
            (f"teachers[{i}]", t) for i, t in enumerate(self.teachers) if isinstance(t, ModelSpec)
        ]:
            at(key, spec.validate)
            if spec.input_shape != shape or spec.num_classes != classes:
                raise ConfigError(f"{key}: shape {spec.input_shape}/{spec.num_classes} classes does not match "
                                  f"the data ({shape}/{classes})")
        for i, t in enumerate(self.teachers):
            if not isinstance(t, ModelSpec) and not Path(t).exists():
                raise ConfigError(f"teachers[{i}]: checkpoint {t!r} does not exist")
        if self.data.get("source") == "cifar_binary":
            for key in ("train", "test"):
                paths = self.data[key] if isinstance(self.data[key], list) else [self.data[key]]
                for j, p in enumerate(paths):
                    if not Path(p).exists():
                        raise ConfigError(f"data.{key}[{j}]: file {p!r} does not exist")
        if self.n_short is not None:
            at("n_short", lambda: early_stopped_teacher(self.teacher_schedule or self.schedule, self.n_short))
        needs = {"full_kd": 1, "eskd": 1, "es_teacher_kd": 1, "stepwise_kd": 2, "sweep": 3 if self.check_ladder else 1,
                 "ablation": 1}
        if len(self.teachers) < needs.get(self.pipeline, 0):
            raise ConfigError(f"teachers: pipeline {self.pipeline!r} needs {needs[self.pipeline]} teacher(s), "
                              f"got {len(self.teachers)}")
        if self.pipeline == "es_teacher_kd" and self.n_short is None:
            raise ConfigError("n_short: required for pipeline 'es_teacher_kd'")
        if self.pipeline == "sequential_kd" and self.teachers and len(self.teachers) + 1 != self.generations:
            raise ConfigError(f"teachers: a sequential chain of {self.generations} generations needs "
                              f"{self.generations - 1} earlier specs, got {len(self.teachers)}")
        at("<pipeline>", self.to_pipeline().validate)

    # conversion --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "data": self.data,
            "student": self.student.to_dict(),
            "teachers": [t.to_dict() if isinstance(t, ModelSpec) else str(t) for t in self.teachers],
            "distill": self.distill.to_dict(),
            "schedule": self.schedule.to_dict(),
            "teacher_schedule": None if self.teacher_schedule is None else self.teacher_schedule.to_dict(),
            "seeds": list(self.seeds),
            "output": self.output,
            "generations": self.generations,
            "n_short": self.n_short,
            "alphas": list(self.alphas),
            "taus": list(self.taus),
            "seed_policy": self.seed_policy,
            "include_scratch": self.include_scratch,
            "check_ladder": self.check_ladder,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_pipeline(self, seed_offset: int = 0) -> PipelineSpec:
        return PipelineSpec(
            kind=self.pipeline,
            data=dict(self.data),
            student=self.student,
            teachers=list(self.teachers),
            cfg=self.distill,
            student_schedule=self.schedule,
            teacher_schedule=self.teacher_schedule,
            seeds=[s + seed_offset for s in self.seeds],
            generations=self.generations,
            n_short=self.n_short,
            alphas=list(self.alphas),
            taus=list(self.taus),
            seed_policy=self.seed_policy,
            include_scratch=self.include_scratch,
            check_ladder=self.check_ladder,
        )

    @classmethod
    def from_pipeline(cls, ps: PipelineSpec, output: str | None = None) -> "RunConfig":
        return cls.from_dict({**_pipeline_dict(ps), "output": output})


def _pipeline_dict(ps: PipelineSpec) -> dict:
    d = ps.to_dict()
    return {
        "pipeline": d["kind"],
        "data": d["data"],
        "student": d["student"],
        "teachers": d["teachers"],
        "distill": d["cfg"],
        "schedule": d["student_schedule"],
        "teacher_schedule": d["teacher_schedule"],
        "seeds": d["seeds"],
        "generations": d["generations"],
        "n_short": d["n_short"],
        "alphas": d["alphas"],
        "taus": d["taus"],
        "seed_policy": d["seed_policy"],
        "include_scratch": d["include_scratch"],
        "check_ladder": d["check_ladder"],
    }


def _resolve(p: str, base_dir: Path | None) -> str:
    path = Path(p)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    return str(path)
