import json

import pytest

from kdlab.cli import main, teacher_config
from kdlab.config import RunConfig
from kdlab.models import load_checkpoint

CONFIG = {
    "pipeline": "eskd",
    "data": {"generator": "gaussian_mixture", "K": 4, "dims": 6, "per_class": 10, "spread": 1.0},
    "student": {"family": "mlp", "depth_factor": 1, "width_factor": 1},
    "teachers": [{"family": "mlp", "depth_factor": 1, "width_factor": 2}],
    "schedule": {"total_epochs": 3, "drop_every": 1, "batch_size": 16},
    "teacher_schedule": {"preset": "cifar", "augment": False, "batch_size": 16},
    "n_short": 35,
    "seeds": [0, 1],
}


def write(tmp_path, **over):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({**CONFIG, **over}))
    return p


def test_teacher_config_uses_shrunk_schedule(tmp_path):
    t = teacher_config(RunConfig.load(write(tmp_path)))
    assert t.schedule.label == "10/35" and t.seeds == (10000, 10001) and t.pipeline == "scratch"


def test_train_teacher_writes_checkpoints(tmp_path, capsys):
    assert main(["train-teacher", "--config", str(write(tmp_path)), "--out", str(tmp_path / "t")]) == 0
    out = capsys.readouterr().out
    assert "schedule=10/35" in out
    m = load_checkpoint(tmp_path / "t" / "scratch" / "10000" / "stage-0" / "model.ckpt")
    assert m.spec.width_factor == 2


def test_distill_and_report(tmp_path, capsys):
    cfg = write(tmp_path, n_short=None, teacher_schedule=None)
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "r"), "--jobs", "2"]) == 0
    assert main(["report", str(tmp_path / "r")]) == 0
    names = sorted(p.name for p in (tmp_path / "r" / "report").iterdir())
    assert names == ["eskd_table.csv", "eskd_table.svg", "train_curve.csv", "train_curve.svg"]
    record = json.loads((tmp_path / "r" / "record.json").read_text())
    assert record["extra"]["jobs"] == 2


def test_seed_offset(tmp_path):
    cfg = write(tmp_path, pipeline="scratch", teachers=[], n_short=None, teacher_schedule=None)
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed-offset", "5"]) == 0
    assert sorted(p.name for p in (tmp_path / "r" / "scratch").iterdir()) == ["5", "6"]


@pytest.mark.parametrize("argv, code", [
    (["distill", "--config", "{cfg}", "--jobs", "0"], 2),
    (["distill", "--config", "{missing}"], 2),
    (["distill", "--config", "{bad}"], 2),
    (["distill", "--config", "{nout}"], 2),
    (["report", "{tmp}"], 3),
])
def test_exit_codes(tmp_path, argv, code):
    paths = {
        "cfg": write(tmp_path),
        "missing": tmp_path / "nope.json",
        "bad": tmp_path / "bad.json",
        "nout": tmp_path / "nout.json",
        "tmp": tmp_path,
    }
    paths["bad"].write_text(json.dumps({**CONFIG, "student": {"family": "mlp", "depth_factor": 1, "wdth": 1}}))
    paths["nout"].write_text(json.dumps(CONFIG))
    assert main([a.format(**{k: str(v) for k, v in paths.items()}) for a in argv]) == code


def test_config_error_message(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**CONFIG, "student": {"family": "mlp", "depth_factor": 1, "wdth": 1}}))
    main(["distill", "--config", str(p), "--out", str(tmp_path)])
    assert "student.wdth: unknown key" in capsys.readouterr().err


def test_train_teacher_needs_model_block(tmp_path):
    assert main(["train-teacher", "--config", str(write(tmp_path, teachers=[])), "--out", str(tmp_path)]) == 2
