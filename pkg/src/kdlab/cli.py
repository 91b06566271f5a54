"""``kdlab`` command line: train-teacher, distill, report, verify.

Exit status: 0 success, 2 configuration error, 3 runtime error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, KDLabError
from .orchestrator import TEACHER_SEED, run_pipeline, write_record
from .report import KINDS as REPORT_KINDS
from .report import write_report
from .train import early_stopped_teacher

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4


def _output(cfg: RunConfig, args) -> Path:
    out = args.out or cfg.output
    if out is None:
        raise ConfigError("output: no output directory (set it in the config or pass --out)")
    return Path(out)


def teacher_config(cfg: RunConfig) -> RunConfig:
    """The scratch run that produces the configured teacher.

    Seeds are shifted by the teacher seed offset so the checkpoints are the
    same ones the distillation pipelines would train for themselves.
    """
    if not cfg.teachers or not hasattr(cfg.teachers[0], "family"):
        raise ConfigError("teachers[0]: train-teacher needs a model block, not a checkpoint path")
    schedule = cfg.teacher_schedule or cfg.schedule
    if cfg.n_short is not None:
        schedule = early_stopped_teacher(schedule, cfg.n_short)
    return replace(cfg, pipeline="scratch", student=cfg.teachers[0], teachers=(), schedule=schedule,
                   teacher_schedule=None, n_short=None, seeds=tuple(TEACHER_SEED + s for s in cfg.seeds))


def cmd_train_teacher(args) -> int:
    cfg = RunConfig.load(args.config)
    tcfg = teacher_config(cfg)
    tcfg.validate()
    out = _output(cfg, args)
    rec = run_pipeline(tcfg.to_pipeline(args.seed_offset), jobs=args.jobs)
    rec.extra.update(jobs=args.jobs, seed_offset=args.seed_offset, config=cfg.to_dict())
    write_record(rec, out)
    for st in rec.stages:
        print(f"{out / st.leg / str(st.seed) / f'stage-{st.stage}' / 'model.ckpt'}  "
              f"schedule={tcfg.schedule.label}  test_error={st.error:.2f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = RunConfig.load(args.config)
    out = _output(cfg, args)
    rec = run_pipeline(cfg.to_pipeline(args.seed_offset), jobs=args.jobs)
    rec.extra.update(jobs=args.jobs, seed_offset=args.seed_offset, config=cfg.to_dict())
    write_record(rec, out)
    for leg, s in rec.summary().items():
        print(f"{leg:<28} median={s['median']:.2f}  std={s['std']:.2f}  n={s['n']}")
    print(f"record written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    for path in write_report(args.record, args.kind, args.out):
        print(path)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import main_verify

    ok, text = main_verify()
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdlab", description="Knowledge-distillation experiments on toy tasks.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes, one seed each")
        sp.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")

    run_flags(sub.add_parser("train-teacher", help="train the configured teacher(s) and save checkpoints"))
    run_flags(sub.add_parser("distill", help="run the configured pipeline and write its record"))
    rp = sub.add_parser("report", help="CSV + SVG reports from a record directory")
    rp.add_argument("record", help="record directory written by distill")
    rp.add_argument("--kind", choices=REPORT_KINDS + ("all",), default="all")
    rp.add_argument("--out", help="report directory (default: <record>/report)")
    sub.add_parser("verify", help="run gradient checks, loss identities and metric oracles")
    return p


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "report": cmd_report,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KDLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
