"""Multi-run distillation pipelines and their on-disk records.

Every pipeline is a pure function of its :class:`PipelineSpec`: per seed index
``s`` the student is initialised and shuffled with ``s`` (generation/stage
``g`` of a chain uses ``s + 1000*g``), teachers use ``10000 + s`` and
intermediate ("medium") models ``20000 + s``.  Paired legs therefore differ
only in what taught them.

Record layout::

    <out>/<leg>/<seed>/stage-<i>/{metrics.jsonl, model.ckpt}
    <out>/summary.csv
    <out>/record.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, gen_gaussian_mixture, gen_patterned_images, load_cifar_binary
from .errors import ConfigError, DataError, ParameterError, ReportError
from .losses import DistillConfig
from .models import Model, ModelSpec, build, checkpoint_digest, load_checkpoint, parameter_count, save_checkpoint
from .train import MetricLog, ScheduleSpec, Splits, early_stopped_teacher, evaluate, predict_logits, train

TEACHER_SEED = 10_000
MEDIUM_SEED = 20_000
GENERATION_STRIDE = 1_000

KINDS = (
    "scratch",
    "full_kd",
    "eskd",
    "es_teacher_kd",
    "sequential_kd",
    "stepwise_kd",
    "ensemble_eval",
    "sweep",
    "ablation",
)

SUMMARY_COLUMNS = (
    "pipeline",
    "stage",
    "teacher_id",
    "seed",
    "final_top1",
    "final_top5",
    "train_ce",
    "train_kd",
    "test_kd",
    "kd_error",
)


# data ----------------------------------------------------------------------

def make_splits(data: dict) -> Splits:
    """Build train/test splits from a serialisable data block."""
    d = dict(data)
    gen = d.pop("generator", None)
    if gen == "gaussian_mixture":
        args = dict(K=d["K"], dims=d["dims"], spread=d["spread"], seed=d.get("seed", 0),
                    modes_per_class=d.get("modes_per_class", 1))
        return Splits(
            gen_gaussian_mixture(per_class=d["per_class"], split="train", **args),
            gen_gaussian_mixture(per_class=d.get("test_per_class", d["per_class"]), split="test", **args),
        )
    if gen == "patterned_images":
        args = dict(K=d["K"], H=d["H"], W=d["W"], noise=d["noise"], seed=d.get("seed", 0),
                    channels=d.get("channels", 1))
        return Splits(
            gen_patterned_images(per_class=d["per_class"], split="train", **args),
            gen_patterned_images(per_class=d.get("test_per_class", d["per_class"]), split="test", **args),
        )
    if d.get("source") == "cifar_binary":
        tr = load_cifar_binary(d["train"], split="train")
        norm = tr.provenance["normalization"]
        te = load_cifar_binary(d["test"], stats=(norm["mean"], norm["std"]), split="test")
        return Splits(tr, te)
    raise ConfigError(f"data block needs generator 'gaussian_mixture'/'patterned_images' or source 'cifar_binary': {data}")


# pipeline spec -------------------------------------------------------------

@dataclass
class PipelineSpec:
    kind: str
    data: dict
    student: ModelSpec
    teachers: list = field(default_factory=list)  # ModelSpec or checkpoint path
    cfg: DistillConfig = DistillConfig()
    student_schedule: ScheduleSpec = ScheduleSpec(30, drop_every=10)
    teacher_schedule: ScheduleSpec | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    generations: int = 5
    n_short: int | None = None
    alphas: list[float] = field(default_factory=lambda: [0.9])
    taus: list[float] = field(default_factory=lambda: [3.0, 4.0, 5.0, 20.0])
    seed_policy: str = "fresh"
    include_scratch: bool = True
    check_ladder: bool = True

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown pipeline kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if self.seed_policy not in ("fresh", "same_order"):
            raise ConfigError(f"seed_policy must be 'fresh' or 'same_order', got {self.seed_policy!r}")
        self.student.validate()
        self.student_schedule.validate()
        if self.teacher_schedule is not None:
            self.teacher_schedule.validate()
        self.cfg.validate(self.student_schedule.total_epochs)
        for t in self.teachers:
            if isinstance(t, ModelSpec):
                t.validate()

    @property
    def t_schedule(self) -> ScheduleSpec:
        return self.teacher_schedule or self.student_schedule

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "data": self.data,
            "student": self.student.to_dict(),
            "teachers": [t.to_dict() if isinstance(t, ModelSpec) else str(t) for t in self.teachers],
            "cfg": self.cfg.to_dict(),
            "student_schedule": self.student_schedule.to_dict(),
            "teacher_schedule": None if self.teacher_schedule is None else self.teacher_schedule.to_dict(),
            "seeds": list(self.seeds),
            "generations": self.generations,
            "n_short": self.n_short,
            "alphas": list(self.alphas),
            "taus": list(self.taus),
            "seed_policy": self.seed_policy,
            "include_scratch": self.include_scratch,
            "check_ladder": self.check_ladder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineSpec":
        ts = d.get("teacher_schedule")
        return cls(
            kind=d["kind"],
            data=d["data"],
            student=ModelSpec.from_dict(d["student"]),
            teachers=[ModelSpec.from_dict(t) if isinstance(t, dict) else t for t in d.get("teachers", [])],
            cfg=DistillConfig.from_dict(d.get("cfg", {})),
            student_schedule=ScheduleSpec.from_dict(d["student_schedule"]),
            teacher_schedule=None if ts is None else ScheduleSpec.from_dict(ts),
            seeds=[int(s) for s in d.get("seeds", [0])],
            generations=int(d.get("generations", 5)),
            n_short=d.get("n_short"),
            alphas=[float(a) for a in d.get("alphas", [0.9])],
            taus=[float(t) for t in d.get("taus", [3.0, 4.0, 5.0, 20.0])],
            seed_policy=d.get("seed_policy", "fresh"),
            include_scratch=bool(d.get("include_scratch", True)),
            check_ladder=bool(d.get("check_ladder", True)),
        )


# results -------------------------------------------------------------------

@dataclass
class StageResult:
    leg: str
    stage: int
    seed: int
    spec: ModelSpec
    teacher_id: str
    log: MetricLog
    model: Model | None = None
    train_kd_error: float | None = None
    digest: str = ""

    @property
    def final(self) -> dict:
        return self.log.final

    @property
    def error(self) -> float:
        return self.log.final["test_top1"]

    def row(self) -> dict:
        f = self.final
        return {
            "pipeline": self.leg,
            "stage": self.stage,
            "teacher_id": self.teacher_id,
            "seed": self.seed,
            "final_top1": f["test_top1"],
            "final_top5": f["test_top5"],
            "train_ce": f["train_ce"],
            "train_kd": f["train_kd"],
            "test_kd": f["test_kd"],
            "kd_error": f["kd_error"],
        }


def stats(values: Sequence[float]) -> dict:
    """Median, mean and population standard deviation (zero for a single value)."""
    vals = [float(v) for v in values]
    if not vals:
        return {"median": None, "mean": None, "std": None, "n": 0}
    return {
        "median": statistics.median(vals),
        "mean": statistics.fmean(vals),
        "std": statistics.pstdev(vals),
        "n": len(vals),
    }


@dataclass
class ExperimentRecord:
    spec: PipelineSpec
    stages: list[StageResult] = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.spec.kind

    def legs(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.stages:
            seen.setdefault(s.leg, None)
        return list(seen)

    def leg(self, name: str, seed: int | None = None) -> list[StageResult]:
        return [s for s in self.stages if s.leg == name and (seed is None or s.seed == seed)]

    def final_stage(self, name: str, seed: int) -> StageResult:
        return max(self.leg(name, seed), key=lambda s: s.stage)

    def final_errors(self, name: str) -> list[float]:
        return [self.final_stage(name, s).error for s in self.spec.seeds]

    def summary(self) -> dict:
        return {leg: stats(self.final_errors(leg)) for leg in self.legs()}


# building blocks -----------------------------------------------------------

def _id(model: Model) -> str:
    return f"{model.spec.label}@{checkpoint_digest(model)[:12]}"


def _cache_key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=lambda o: o.to_dict() if hasattr(o, "to_dict") else str(o))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Lab:
    """Runs individual trainings over fixed splits, memoising teachers.

    Teachers are keyed by a hash of everything that determines them (spec,
    init seed, schedule, distillation setup, data provenance, and the key of
    their own teacher), so a sweep trains each (spec, seed) once.
    """

    def __init__(self, data: Splits, cache_dir=None, record_wall_time: bool = False):
        self.data = data
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.record_wall_time = record_wall_time
        self._memo: dict[str, tuple[Model, MetricLog]] = {}
        self.trainings = 0

    def _provenance(self):
        return [self.data.train.provenance, self.data.test.provenance]

    def fit(
        self,
        spec: ModelSpec,
        schedule: ScheduleSpec,
        seed: int,
        teacher: Model | None = None,
        cfg: DistillConfig | None = None,
        cache: bool = False,
    ) -> tuple[Model, MetricLog]:
        cfg = cfg if cfg is not None else DistillConfig(alpha=1.0)
        key = None
        if cache:
            key = _cache_key(spec, schedule, seed, cfg, None if teacher is None else checkpoint_digest(teacher),
                             self._provenance())
            if key in self._memo:
                return self._memo[key]
            if self.cache_dir is not None and (self.cache_dir / f"{key}.ckpt").exists():
                hit = (load_checkpoint(self.cache_dir / f"{key}.ckpt"), MetricLog.read(self.cache_dir / f"{key}.jsonl"))
                self._memo[key] = hit
                return hit
        model = build(spec)
        self.trainings += 1
        model, log = train(model, self.data, teacher, cfg, schedule, seed, record_wall_time=self.record_wall_time)
        if key is not None:
            self._memo[key] = (model, log)
            if self.cache_dir is not None:
                save_checkpoint(model, self.cache_dir / f"{key}.ckpt")
                log.write(self.cache_dir / f"{key}.jsonl")
        return model, log

    def scratch(self, spec: ModelSpec, schedule: ScheduleSpec, seed: int, cache: bool = False):
        return self.fit(spec.with_seed(seed), schedule, seed, cache=cache)

    def distill(self, spec: ModelSpec, teacher: Model, cfg: DistillConfig, schedule: ScheduleSpec, seed: int,
                data_seed: int | None = None, cache: bool = False):
        return self.fit(spec.with_seed(seed), schedule, seed if data_seed is None else data_seed, teacher, cfg, cache)


def _stage(leg, stage, seed, model, log, teacher=None, lab: Lab | None = None) -> StageResult:
    kd_tr = None
    if teacher is not None and lab is not None:
        kd_tr = kd_error(model, teacher, lab.data.train)
    return StageResult(leg, stage, seed, model.spec, "-" if teacher is None else _id(teacher), log, model, kd_tr,
                       checkpoint_digest(model))


def _teacher_stage(leg, seed, model, log) -> StageResult:
    return StageResult(leg, 0, seed, model.spec, "-", log, model, None, checkpoint_digest(model))


def _resolve_teacher(lab: Lab, ref, schedule: ScheduleSpec, seed: int) -> tuple[Model, MetricLog | None]:
    """A teacher reference is a ModelSpec (trained from scratch) or a checkpoint path (eval only)."""
    if isinstance(ref, ModelSpec):
        return lab.scratch(ref, schedule, TEACHER_SEED + seed, cache=True)
    path = Path(ref)
    if not path.exists():
        raise ConfigError(f"teacher checkpoint {ref!r} does not exist")
    return load_checkpoint(path), None


# metrics -------------------------------------------------------------------

def ensemble_predict(models: Sequence[Model], batch) -> np.ndarray:
    """Mean of the members' softmax probabilities (float64, N×K).

    Member probabilities are sorted before summation so the result is exactly
    invariant to the order of ``models``.
    """
    if not models:
        raise ParameterError("ensemble_predict needs at least one model")
    shape = models[0].spec.input_shape, models[0].spec.num_classes
    for m in models[1:]:
        if (m.spec.input_shape, m.spec.num_classes) != shape:
            raise ConfigError(f"ensemble member {m.spec.label} does not share input shape / classes")
    inputs = batch.inputs if isinstance(batch, Dataset) else np.asarray(batch)
    probs = []
    for m in models:
        z = predict_logits(m, inputs).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs.append(z / z.sum(axis=1, keepdims=True))
    stacked = np.sort(np.stack(probs), axis=0)
    return stacked.sum(axis=0) / len(models)


def ensemble_error(models: Sequence[Model], dataset: Dataset) -> float:
    pred = ensemble_predict(models, dataset.inputs).argmax(axis=1)
    return 100.0 * float((pred != dataset.labels).sum()) / len(dataset)


def kd_error(student: Model, teacher: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples where student and teacher top-1 predictions differ."""
    if len(dataset) == 0:
        raise DataError("kd_error needs a non-empty dataset")
    if student.spec.input_shape != teacher.spec.input_shape:
        raise ConfigError("kd_error: student and teacher input shapes differ")
    differ = 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.inputs[i : i + batch_size]
        differ += int((predict_logits(student, x).argmax(axis=1) != predict_logits(teacher, x).argmax(axis=1)).sum())
    return differ / len(dataset)


# pipelines -----------------------------------------------------------------

def _pspec(kind, data, student, **kw) -> PipelineSpec:
    return PipelineSpec(kind=kind, data=data or {}, student=student, **kw)


def run_scratch(spec: ModelSpec, schedule: ScheduleSpec, seeds: Sequence[int], data: Splits,
                lab: Lab | None = None, data_block: dict | None = None) -> ExperimentRecord:
    lab = lab or Lab(data)
    rec = ExperimentRecord(_pspec("scratch", data_block, spec, student_schedule=schedule, seeds=list(seeds),
                                  cfg=DistillConfig(alpha=1.0)))
    for s in seeds:
        model, log = lab.scratch(spec, schedule, s)
        rec.stages.append(_stage("scratch", 0, s, model, log))
    derive_tables(rec)
    return rec


def run_full_kd(student: ModelSpec, teacher_ref, cfg: DistillConfig, schedule: ScheduleSpec,
                seeds: Sequence[int], data: Splits, teacher_schedule: ScheduleSpec | None = None,
                lab: Lab | None = None, data_block: dict | None = None) -> ExperimentRecord:
    lab = lab or Lab(data)
    tsched = teacher_schedule or schedule
    rec = ExperimentRecord(_pspec("full_kd", data_block, student, teachers=[teacher_ref], cfg=cfg,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds)))
    for s in seeds:
        teacher, tlog = _resolve_teacher(lab, teacher_ref, tsched, s)
        offset = 0
        if tlog is not None:
            rec.stages.append(_teacher_stage("full_kd", s, teacher, tlog))
            offset = 1
        model, log = lab.distill(student, teacher, cfg, schedule, s)
        rec.stages.append(_stage("full_kd", offset, s, model, log, teacher, lab))
    return rec


def run_teacher_sweep(student: ModelSpec, ladder: Sequence[ModelSpec], cfg: DistillConfig,
                      schedule: ScheduleSpec, seeds: Sequence[int], data: Splits,
                      teacher_schedule: ScheduleSpec | None = None, include_scratch: bool = True,
                      check_ladder: bool = True, lab: Lab | None = None,
                      data_block: dict | None = None) -> ExperimentRecord:
    """Distil one student from each rung of a teacher ladder (the capacity sweep)."""
    if len(ladder) < 3 and check_ladder:
        raise ConfigError(f"a teacher sweep needs at least 3 rungs, got {len(ladder)}")
    counts = [parameter_count(t) for t in ladder]
    if check_ladder and any(b <= a for a, b in zip(counts, counts[1:])):
        raise ConfigError(f"teacher ladder must strictly increase in parameter count, got {counts}")
    lab = lab or Lab(data)
    tsched = teacher_schedule or schedule
    rec = ExperimentRecord(_pspec("sweep", data_block, student, teachers=list(ladder), cfg=cfg,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds),
                                  include_scratch=include_scratch, check_ladder=check_ladder))
    if include_scratch:
        for s in seeds:
            model, log = lab.scratch(student, schedule, s)
            rec.stages.append(_stage("scratch", 0, s, model, log))
    for rung, tspec in enumerate(ladder):
        leg = _rung_leg(rung, tspec)
        for s in seeds:
            teacher, tlog = lab.scratch(tspec, tsched, TEACHER_SEED + s, cache=True)
            rec.stages.append(_teacher_stage(leg, s, teacher, tlog))
            model, log = lab.distill(student, teacher, cfg, schedule, s)
            rec.stages.append(_stage(leg, 1, s, model, log, teacher, lab))
    derive_tables(rec)
    return rec


def run_eskd_comparison(student: ModelSpec, teacher_ref, cfg: DistillConfig, schedule: ScheduleSpec,
                        seeds: Sequence[int], data: Splits, teacher_schedule: ScheduleSpec | None = None,
                        switch_epoch: int | None = None, lab: Lab | None = None,
                        data_block: dict | None = None) -> ExperimentRecord:
    """Full KD vs early-stopped KD with identical seeds; reports paired deltas (ESKD − full)."""
    lab = lab or Lab(data)
    tsched = teacher_schedule or schedule
    sw = switch_epoch if switch_epoch is not None else (
        cfg.switch_epoch if cfg.switch_epoch is not None else schedule.first_drop_epoch)
    full_cfg = replace(cfg, switch_epoch=None)
    es_cfg = replace(cfg, switch_epoch=sw)
    rec = ExperimentRecord(_pspec("eskd", data_block, student, teachers=[teacher_ref], cfg=es_cfg,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds)))
    for s in seeds:
        teacher, tlog = _resolve_teacher(lab, teacher_ref, tsched, s)
        for leg, c in (("full_kd", full_cfg), ("eskd", es_cfg)):
            off = 0
            if tlog is not None:
                rec.stages.append(_teacher_stage(leg, s, teacher, tlog))
                off = 1
            model, log = lab.distill(student, teacher, c, schedule, s)
            rec.stages.append(_stage(leg, off, s, model, log, teacher, lab))
    derive_tables(rec)
    return rec


def _label(ref) -> str:
    return ref.label if isinstance(ref, ModelSpec) else Path(str(ref)).stem


def _table4_rows(rec: ExperimentRecord, teacher_ref) -> list[dict]:
    rows = []
    for leg, suffix in (("full_kd", ""), ("eskd", " (ES KD)")):
        finals = [rec.final_stage(leg, s).final for s in rec.spec.seeds]
        rows.append({
            "Teacher": _label(teacher_ref) + suffix,
            "Top-1 Error": statistics.median(f["test_top1"] for f in finals),
            "CE (Train)": statistics.median(f["train_ce"] for f in finals),
            "KD (Train)": statistics.median(f["train_kd"] for f in finals),
            "KD (Test)": statistics.median(f["test_kd"] for f in finals),
        })
    return rows


def run_es_teacher(student: ModelSpec, teacher: ModelSpec, cfg: DistillConfig, schedule: ScheduleSpec,
                   teacher_schedule: ScheduleSpec, n_short: int, seeds: Sequence[int], data: Splits,
                   lab: Lab | None = None, data_block: dict | None = None) -> ExperimentRecord:
    """Distil from the fully-trained teacher and from its early-stopped twin (same init)."""
    lab = lab or Lab(data)
    es_sched = early_stopped_teacher(teacher_schedule, n_short)
    rec = ExperimentRecord(_pspec("es_teacher_kd", data_block, student, teachers=[teacher], cfg=cfg,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds),
                                  n_short=n_short))
    for leg, tsched in (("full_teacher", teacher_schedule), ("es_teacher", es_sched)):
        for s in seeds:
            t, tlog = lab.scratch(teacher, tsched, TEACHER_SEED + s, cache=True)
            rec.stages.append(_teacher_stage(leg, s, t, tlog))
            model, log = lab.distill(student, t, cfg, schedule, s)
            rec.stages.append(_stage(leg, 1, s, model, log, t, lab))
    derive_tables(rec)
    return rec


def _gen_seed(seed: int, g: int) -> int:
    return seed + GENERATION_STRIDE * g


def run_sequential(chain, cfg: DistillConfig, schedule: ScheduleSpec, seeds: Sequence[int], generations: int,
                   data: Splits, seed_policy: str = "fresh", lab: Lab | None = None,
                   data_block: dict | None = None) -> ExperimentRecord:
    """Generation 1 from scratch, generation g from generation g−1; plus an equal-size scratch ensemble.

    ``chain`` is one ModelSpec (born-again: same spec every generation) or a
    list with one spec per generation.
    """
    specs = [chain] * generations if isinstance(chain, ModelSpec) else list(chain)
    if generations < 1 or len(specs) != generations:
        raise ConfigError(f"need one spec per generation ({generations}), got {len(specs)}")
    lab = lab or Lab(data)
    rec = ExperimentRecord(_pspec("sequential_kd", data_block, specs[-1], teachers=specs[:-1], cfg=cfg,
                                  student_schedule=schedule, seeds=list(seeds), generations=generations,
                                  seed_policy=seed_policy))
    test = data.test
    cols = []
    for s in seeds:
        gens: list[Model] = []
        for g, spec in enumerate(specs):
            init = _gen_seed(s, g)
            shuffle = init if seed_policy == "fresh" else s
            if g == 0:
                model, log = lab.fit(spec.with_seed(init), schedule, shuffle)
                rec.stages.append(_stage("sequential", 0, s, model, log))
            else:
                model, log = lab.distill(spec, gens[-1], cfg, schedule, init, data_seed=shuffle)
                rec.stages.append(_stage("sequential", g, s, model, log, gens[-1], lab))
            gens.append(model)
        scratch = [gens[0]]
        for g in range(1, generations):
            init = _gen_seed(s, g)
            model, log = lab.fit(specs[-1].with_seed(init), schedule, init if seed_policy == "fresh" else s)
            rec.stages.append(_stage(f"scratch_g{g}", 0, s, model, log))
            scratch.append(model)
        cols.append({
            "seed": s,
            "Last Gen.": evaluate(gens[-1], test).top1,
            "All-Gen. Ensemble": ensemble_error(gens, test),
            "Scratch": evaluate(gens[0], test).top1,
            "Scratch Ensemble": ensemble_error(scratch, test),
        })
    rec.tables["sequential"] = cols
    derive_tables(rec)
    return rec


def run_stepwise(large: ModelSpec, medium: ModelSpec, small: ModelSpec, cfg: DistillConfig,
                 schedule: ScheduleSpec, seeds: Sequence[int], data: Splits,
                 teacher_schedule: ScheduleSpec | None = None, lab: Lab | None = None,
                 data_block: dict | None = None) -> ExperimentRecord:
    """Large→Medium→Small vs Medium→Small vs Large→Small, sharing the small model's seed."""
    counts = [parameter_count(x) for x in (large, medium, small)]
    if not counts[0] > counts[1] > counts[2]:
        raise ConfigError(f"stepwise distillation needs large > medium > small parameter counts, got {counts}")
    lab = lab or Lab(data)
    tsched = teacher_schedule or schedule
    rec = ExperimentRecord(_pspec("stepwise_kd", data_block, small, teachers=[large, medium], cfg=cfg,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds)))
    for s in seeds:
        big, big_log = lab.scratch(large, tsched, TEACHER_SEED + s, cache=True)
        med, med_log = lab.scratch(medium, tsched, MEDIUM_SEED + s, cache=True)
        med_kd, med_kd_log = lab.distill(medium, big, cfg, tsched, MEDIUM_SEED + s, cache=True)

        rec.stages.append(_teacher_stage("large_med_small", s, big, big_log))
        rec.stages.append(_stage("large_med_small", 1, s, med_kd, med_kd_log, big, lab))
        m1, l1 = lab.distill(small, med_kd, cfg, schedule, s)
        rec.stages.append(_stage("large_med_small", 2, s, m1, l1, med_kd, lab))

        rec.stages.append(_teacher_stage("med_small", s, med, med_log))
        m2, l2 = lab.distill(small, med, cfg, schedule, s)
        rec.stages.append(_stage("med_small", 1, s, m2, l2, med, lab))

        rec.stages.append(_teacher_stage("large_small", s, big, big_log))
        m3, l3 = lab.distill(small, big, cfg, schedule, s)
        rec.stages.append(_stage("large_small", 1, s, m3, l3, big, lab))

    derive_tables(rec)
    return rec


def run_ensemble_eval(spec: ModelSpec, schedule: ScheduleSpec, seeds: Sequence[int], members: int,
                      data: Splits, refs: Sequence = (), lab: Lab | None = None,
                      data_block: dict | None = None) -> ExperimentRecord:
    """Ensemble error of checkpoint refs, or of ``members`` scratch models per seed."""
    lab = lab or Lab(data)
    rec = ExperimentRecord(_pspec("ensemble_eval", data_block, spec, teachers=list(refs), student_schedule=schedule,
                                  seeds=list(seeds), generations=members))
    rows = []
    for s in seeds:
        if refs:
            models = [load_checkpoint(r) for r in refs]
        else:
            models = []
            for g in range(members):
                m, log = lab.scratch(spec, schedule, _gen_seed(s, g))
                rec.stages.append(_stage("ensemble", g, s, m, log))
                models.append(m)
        rows.append({"seed": s, "members": len(models), "ensemble_error": ensemble_error(models, data.test),
                     "member_errors": [evaluate(m, data.test).top1 for m in models]})
    rec.tables["ensemble"] = rows
    return rec


def run_ablation(student: ModelSpec, teacher_ref, alphas: Sequence[float], taus: Sequence[float],
                 schedule: ScheduleSpec, seeds: Sequence[int], data: Splits,
                 teacher_schedule: ScheduleSpec | None = None, base: DistillConfig = DistillConfig(),
                 with_eskd: bool = False, lab: Lab | None = None, data_block: dict | None = None) -> ExperimentRecord:
    """One full-KD (and optionally ESKD) run per (α, τ) grid cell and seed."""
    if not alphas or not taus:
        raise ParameterError("ablation grid must be non-empty")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ParameterError(f"alpha {a} outside [0, 1]")
    for t in taus:
        if not t > 0:
            raise ParameterError(f"temperature {t} must be > 0")
    lab = lab or Lab(data)
    tsched = teacher_schedule or schedule
    rec = ExperimentRecord(_pspec("ablation", data_block, student, teachers=[teacher_ref], cfg=base,
                                  student_schedule=schedule, teacher_schedule=teacher_schedule, seeds=list(seeds),
                                  alphas=list(alphas), taus=list(taus)))
    modes = [("full_kd", None)] + ([("eskd", schedule.first_drop_epoch)] if with_eskd else [])
    for a in alphas:
        for t in taus:
            for mode, sw in modes:
                cfg = replace(base, alpha=float(a), temperature=float(t), switch_epoch=sw)
                leg = _cell_leg(mode, a, t)
                for s in seeds:
                    teacher, tlog = _resolve_teacher(lab, teacher_ref, tsched, s)
                    model, log = lab.distill(student, teacher, cfg, schedule, s)
                    rec.stages.append(_stage(leg, 0, s, model, log, teacher, lab))
    derive_tables(rec)
    return rec


# dispatch ------------------------------------------------------------------

def run_pipeline(ps: PipelineSpec, data: Splits | None = None, lab: Lab | None = None, jobs: int = 1,
                 record_wall_time: bool = False) -> ExperimentRecord:
    """Execute any pipeline kind from its spec.  ``jobs > 1`` farms seeds out to worker processes."""
    ps.validate()
    if jobs > 1 and len(ps.seeds) > 1:
        return _run_parallel(ps, jobs, record_wall_time)
    data = data if data is not None else make_splits(ps.data)
    lab = lab or Lab(data, record_wall_time=record_wall_time)
    kw = dict(lab=lab, data_block=ps.data)
    k = ps.kind
    if k == "scratch":
        rec = run_scratch(ps.student, ps.student_schedule, ps.seeds, data, **kw)
    elif k == "full_kd":
        _need_teachers(ps, 1)
        rec = run_full_kd(ps.student, ps.teachers[0], ps.cfg, ps.student_schedule, ps.seeds, data,
                          ps.teacher_schedule, **kw)
    elif k == "eskd":
        _need_teachers(ps, 1)
        rec = run_eskd_comparison(ps.student, ps.teachers[0], ps.cfg, ps.student_schedule, ps.seeds, data,
                                  ps.teacher_schedule, ps.cfg.switch_epoch, **kw)
    elif k == "es_teacher_kd":
        _need_teachers(ps, 1)
        if ps.n_short is None:
            raise ConfigError("es_teacher_kd needs n_short")
        rec = run_es_teacher(ps.student, ps.teachers[0], ps.cfg, ps.student_schedule, ps.t_schedule, ps.n_short,
                             ps.seeds, data, **kw)
    elif k == "sequential_kd":
        chain = list(ps.teachers) + [ps.student] if ps.teachers else ps.student
        rec = run_sequential(chain, ps.cfg, ps.student_schedule, ps.seeds, ps.generations, data, ps.seed_policy, **kw)
    elif k == "stepwise_kd":
        _need_teachers(ps, 2)
        rec = run_stepwise(ps.teachers[0], ps.teachers[1], ps.student, ps.cfg, ps.student_schedule, ps.seeds, data,
                           ps.teacher_schedule, **kw)
    elif k == "ensemble_eval":
        rec = run_ensemble_eval(ps.student, ps.student_schedule, ps.seeds, ps.generations, data, ps.teachers, **kw)
    elif k == "sweep":
        rec = run_teacher_sweep(ps.student, ps.teachers, ps.cfg, ps.student_schedule, ps.seeds, data,
                                ps.teacher_schedule, ps.include_scratch, ps.check_ladder, **kw)
    else:
        _need_teachers(ps, 1)
        rec = run_ablation(ps.student, ps.teachers[0], ps.alphas, ps.taus, ps.student_schedule, ps.seeds, data,
                           ps.teacher_schedule, ps.cfg, **kw)
    rec.spec = ps
    return rec


def _need_teachers(ps: PipelineSpec, n: int) -> None:
    if len(ps.teachers) < n:
        raise ConfigError(f"pipeline {ps.kind!r} needs {n} teacher reference(s), got {len(ps.teachers)}")


def _run_one_seed(args) -> dict:
    spec_dict, seed, wall = args
    ps = PipelineSpec.from_dict({**spec_dict, "seeds": [seed]})
    rec = run_pipeline(ps, record_wall_time=wall)
    return record_to_payload(rec)


def _run_parallel(ps: PipelineSpec, jobs: int, wall: bool) -> ExperimentRecord:
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_run_one_seed, [(ps.to_dict(), s, wall) for s in ps.seeds]))
    merged = ExperimentRecord(ps)
    for p in parts:
        part = record_from_payload(p)
        merged.stages.extend(part.stages)
        for key in PER_SEED_TABLES:
            if key in part.tables:
                merged.tables.setdefault(key, []).extend(part.tables[key])
    derive_tables(merged)
    return merged


# persistence ---------------------------------------------------------------

def _stage_dir(out: Path, st: StageResult) -> Path:
    return out / st.leg / str(st.seed) / f"stage-{st.stage}"


def record_to_payload(rec: ExperimentRecord) -> dict:
    return {
        "kind": rec.kind,
        "spec": rec.spec.to_dict(),
        "stages": [
            {
                "leg": s.leg,
                "stage": s.stage,
                "seed": s.seed,
                "spec": s.spec.to_dict(),
                "teacher_id": s.teacher_id,
                "digest": s.digest,
                "train_kd_error": s.train_kd_error,
                "metrics": s.log.rows,
            }
            for s in rec.stages
        ],
        "tables": rec.tables,
        "summary": rec.summary(),
        "extra": rec.extra,
    }


def record_from_payload(p: dict) -> ExperimentRecord:
    rec = ExperimentRecord(PipelineSpec.from_dict(p["spec"]), tables=p.get("tables", {}), extra=p.get("extra", {}))
    for s in p["stages"]:
        rec.stages.append(StageResult(s["leg"], s["stage"], s["seed"], ModelSpec.from_dict(s["spec"]),
                                      s["teacher_id"], MetricLog(s["metrics"]), None, s.get("train_kd_error"),
                                      s.get("digest", "")))
    return rec


PER_SEED_TABLES = ("sequential", "ensemble")
_DELTA_KEYS = (("top1", "test_top1"), ("train_ce", "train_ce"), ("train_kd", "train_kd"), ("test_kd", "test_kd"))


def _rung_leg(rung: int, spec: ModelSpec) -> str:
    return f"kd_r{rung}_{spec.label}"


def _cell_leg(mode: str, alpha: float, tau: float) -> str:
    return f"{mode}_a{alpha:g}_t{tau:g}"


def _stage_errors(rec: ExperimentRecord, leg: str, stage: int, key: str = "test_top1") -> list:
    out = []
    for s in rec.spec.seeds:
        hits = [st for st in rec.leg(leg, s) if st.stage == stage]
        if hits:
            out.append(hits[0].final[key])
    return out


def derive_tables(rec: ExperimentRecord) -> None:
    """(Re)compute every summary table that is a function of the stored stage logs."""
    ps, k = rec.spec, rec.kind
    legs = set(rec.legs())
    if "scratch" in legs:
        rec.tables["scratch"] = stats(rec.final_errors("scratch"))
    if k == "sweep":
        rows = []
        for rung, tspec in enumerate(ps.teachers):
            leg = _rung_leg(rung, tspec)
            if leg not in legs:
                continue
            students = [rec.final_stage(leg, s) for s in ps.seeds]
            rows.append({
                "rung": rung,
                "teacher": tspec.label,
                "params": parameter_count(tspec),
                "teacher_error": stats(_stage_errors(rec, leg, 0)),
                "student_error": stats([st.error for st in students]),
                "train_kd_error": stats([100.0 * st.train_kd_error for st in students]),
                "test_kd": stats([st.final["test_kd"] for st in students]),
                "leg": leg,
            })
        rec.tables["sweep"] = rows
    elif k == "eskd":
        rec.tables["deltas"] = [
            {"seed": s, **{key: rec.final_stage("eskd", s).final[f] - rec.final_stage("full_kd", s).final[f]
                           for key, f in _DELTA_KEYS}}
            for s in ps.seeds
        ]
        sw = ps.cfg.switch_epoch
        rec.tables["switch_epoch"] = ps.student_schedule.first_drop_epoch if sw is None else sw
        rec.tables["eskd_table"] = _table4_rows(rec, ps.teachers[0])
    elif k == "es_teacher_kd":
        modes = {"full_teacher": ps.t_schedule.label,
                 "es_teacher": early_stopped_teacher(ps.t_schedule, ps.n_short).label}
        rec.tables["es_teacher"] = [
            {"leg": leg, "teacher": _label(ps.teachers[0]), "mode": modes[leg],
             "teacher_error": stats(_stage_errors(rec, leg, 0)), "student_error": stats(rec.final_errors(leg))}
            for leg in ("full_teacher", "es_teacher")
        ]
    elif k == "sequential_kd" and "sequential" in rec.tables:
        cols = sorted(rec.tables["sequential"], key=lambda c: ps.seeds.index(c["seed"]))
        rec.tables["sequential"] = cols
        rec.tables["sequential_summary"] = {
            key: stats([c[key] for c in cols]) for key in ("Last Gen.", "All-Gen. Ensemble", "Scratch", "Scratch Ensemble")
        }
    elif k == "stepwise_kd":
        procs = (
            ("Large→Med.→Small", "large_med_small", 0, 1, 2),
            ("Med.→Small", "med_small", None, 0, 1),
            ("Large→Small", "large_small", 0, None, 1),
        )
        table = []
        for name, leg, large_st, med_st, small_st in procs:
            table.append({
                "Training Procedure": name,
                "Large Error": None if large_st is None else stats(_stage_errors(rec, leg, large_st))["median"],
                "Medium Error": None if med_st is None else stats(_stage_errors(rec, leg, med_st))["median"],
                "Small Error": stats(_stage_errors(rec, leg, small_st)),
            })
        rec.tables["stepwise"] = table
    elif k == "ablation":
        cells = []
        for a in ps.alphas:
            for t in ps.taus:
                for mode in ("full_kd", "eskd"):
                    leg = _cell_leg(mode, a, t)
                    if leg in legs:
                        cells.append({"mode": mode, "alpha": float(a), "tau": float(t), "leg": leg,
                                      "error": stats(rec.final_errors(leg))})
        rec.tables["ablation"] = cells
    elif k == "ensemble_eval" and "ensemble" in rec.tables:
        rec.tables["ensemble"] = sorted(rec.tables["ensemble"], key=lambda c: ps.seeds.index(c["seed"]))


def summary_rows(rec: ExperimentRecord) -> list[dict]:
    return [s.row() for s in rec.stages]


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def summary_csv(rec: ExperimentRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in summary_rows(rec):
        w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def write_record(rec: ExperimentRecord, out) -> Path:
    """Write the record layout; files are overwritten, so reruns are idempotent."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for st in rec.stages:
        d = _stage_dir(out, st)
        d.mkdir(parents=True, exist_ok=True)
        st.log.write(d / "metrics.jsonl")
        if st.model is not None:
            save_checkpoint(st.model, d / "model.ckpt")
    (out / "summary.csv").write_text(summary_csv(rec), encoding="utf-8")
    payload = record_to_payload(rec)
    for s in payload["stages"]:
        s.pop("metrics")
    (out / "record.json").write_text(json.dumps(payload, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                     encoding="utf-8")
    return out


def missing_stages(out) -> list[str]:
    out = Path(out)
    payload = json.loads((out / "record.json").read_text(encoding="utf-8"))
    missing = []
    for s in payload["stages"]:
        p = out / s["leg"] / str(s["seed"]) / f"stage-{s['stage']}" / "metrics.jsonl"
        if not p.exists():
            missing.append(str(p.relative_to(out)))
    return missing


def load_record(out) -> ExperimentRecord:
    """Re-read a record directory; metrics come from the per-stage JSONL files."""
    out = Path(out)
    rp = out / "record.json"
    if not rp.exists():
        raise ReportError(f"{out}: no record.json")
    missing = missing_stages(out)
    if missing:
        raise ReportError(f"{out}: incomplete record, missing stages: {', '.join(missing)}")
    payload = json.loads(rp.read_text(encoding="utf-8"))
    for s in payload["stages"]:
        s["metrics"] = MetricLog.read(out / s["leg"] / str(s["seed"]) / f"stage-{s['stage']}" / "metrics.jsonl").rows
    return record_from_payload(payload)
