import csv
import io
import xml.etree.ElementTree as ET

import pytest

from kdlab.errors import ReportError
from kdlab.models import ModelSpec
from kdlab.orchestrator import PipelineSpec, load_record, run_pipeline, write_record
from kdlab.report import (
    ESKD_COLUMNS,
    SEQUENTIAL_COLUMNS,
    applicable,
    nice_ticks,
    render,
    sweep_rows,
    to_csv,
    train_curve_rows,
    write_report,
)
from kdlab.train import ScheduleSpec

DATA = dict(generator="gaussian_mixture", K=4, dims=6, per_class=15, spread=1.0, seed=2)
SCHED = ScheduleSpec(4, "step", 0.1, 0.2, 2, batch_size=16)
STUDENT = ModelSpec("mlp", 1, 1, (6,), 4)


def run(kind, **kw):
    return run_pipeline(PipelineSpec(kind=kind, data=DATA, student=STUDENT, student_schedule=SCHED, seeds=[0, 1],
                                     **kw))


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    root = tmp_path_factory.mktemp("records")
    ladder = [ModelSpec("mlp", 1, w, (6,), 4) for w in (1, 2, 3)]
    out = {}
    for name, rec in (
        ("sweep", run("sweep", teachers=ladder)),
        ("eskd", run("eskd", teachers=[ladder[-1]])),
        ("sequential", run("sequential_kd", generations=2)),
    ):
        out[name] = write_record(rec, root / name)
    return out


def test_eskd_table_columns(records):
    write_report(records["eskd"], "eskd_table")
    rows = list(csv.reader(io.StringIO((records["eskd"] / "report" / "eskd_table.csv").read_text())))
    assert tuple(rows[0]) == ESKD_COLUMNS
    assert [r[0] for r in rows[1:]] == ["mlp-1-3", "mlp-1-3 (ES KD)"]


def test_sequential_table_has_median_row(records):
    csv_text, _ = render(load_record(records["sequential"]), "sequential_table")
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    assert tuple(rows[0]) == SEQUENTIAL_COLUMNS
    assert [r["Seed"] for r in rows] == ["0", "1", "median"]


def test_svg_is_deterministic_and_well_formed(records, tmp_path):
    a = write_report(records["sweep"], "all", tmp_path / "a")
    b = write_report(records["sweep"], "all", tmp_path / "b")
    assert [p.name for p in a] == ["sweep_curve.csv", "sweep_curve.svg", "train_curve.csv", "train_curve.svg"]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    root = ET.fromstring((tmp_path / "a" / "sweep_curve.svg").read_text())
    assert root.get("width") == "800" and root.get("height") == "500"


def test_train_curve_epochs_start_at_one(records):
    rec = load_record(records["eskd"])
    rows = train_curve_rows(rec)
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert set(rows[0]) == {"epoch", "full_kd", "eskd"}
    _, svg = render(rec, "train_curve")
    assert "switch @ 2" in svg


def test_single_seed_sweep_has_zero_whiskers(tmp_path):
    ladder = [ModelSpec("mlp", 1, w, (6,), 4) for w in (1, 2, 3)]
    rec = run_pipeline(PipelineSpec(kind="sweep", data=DATA, student=STUDENT, student_schedule=SCHED, seeds=[0],
                                    teachers=ladder))
    assert all(r["student_error_std"] == 0.0 for r in sweep_rows(rec))
    render(rec, "sweep_curve")


def test_wrong_kind_rejected(records):
    rec = load_record(records["eskd"])
    assert applicable(rec) == ("eskd_table", "train_curve")
    with pytest.raises(ReportError, match="sweep"):
        render(rec, "sweep_curve")
    with pytest.raises(ReportError):
        render(rec, "pie")


def test_missing_record(tmp_path):
    with pytest.raises(ReportError):
        write_report(tmp_path)


def test_csv_formatting():
    assert to_csv([{"a": 1.0 / 3, "b": None, "c": 2}]) == "a,b,c\n0.333333,,2\n"


@pytest.mark.parametrize("lo, hi", [(0.0, 1.0), (3.2, 47.9), (5.0, 5.0), (-2.0, 0.3)])
def test_ticks_cover_range(lo, hi):
    t = nice_ticks(lo, hi)
    assert t[0] <= lo and t[-1] >= hi and t == sorted(t)
