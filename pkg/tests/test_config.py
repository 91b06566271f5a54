import json

import pytest

from kdlab.config import RunConfig, data_signature
from kdlab.errors import ConfigError
from kdlab.models import ModelSpec, build, save_checkpoint
from kdlab.orchestrator import PipelineSpec
from kdlab.train import cifar_preset

BASE = {
    "pipeline": "eskd",
    "data": {"generator": "gaussian_mixture", "K": 4, "dims": 6, "per_class": 10, "spread": 1.0},
    "student": {"family": "mlp", "depth_factor": 1, "width_factor": 1},
    "teachers": [{"family": "mlp", "depth_factor": 1, "width_factor": 3}],
    "schedule": {"total_epochs": 4, "drop_every": 2, "batch_size": 16},
    "seeds": [0, 1],
}


def cfg(**over):
    return {**json.loads(json.dumps(BASE)), **over}


def test_minimal_config_infers_shapes():
    c = RunConfig.from_dict(cfg())
    assert c.student == ModelSpec("mlp", 1, 1, (6,), 4)
    assert c.schedule.drop_every == 2 and c.distill.temperature == 4.0


@pytest.mark.parametrize("raw, message", [
    (dict(student={"family": "mlp", "depth_factor": 1, "wdth_factor": 1}), "student.wdth_factor: unknown key"),
    (dict(student={"family": "mlp", "depth_factor": 1}), "student.width_factor: required key missing"),
    (dict(colour="red"), "colour: unknown key"),
    (dict(teachers=[{"family": "rnn", "depth_factor": 1, "width_factor": 1}]), "teachers[0]"),
    (dict(data={"generator": "gaussian_mixture", "dims": 6, "per_class": 10, "spread": 1.0}), "data.K: required key missing"),
    (dict(data={"generator": "spiral"}), "data.generator"),
    (dict(schedule={"total_epochs": 0}), "schedule.total_epochs"),
    (dict(schedule={"drop_every": 2}), "schedule.total_epochs: required key missing"),
    (dict(distill={"alpha": 2.0}), "distill:"),
    (dict(distill={"switch_epoch": 9}), "distill:"),
    (dict(teachers=[]), "teachers: pipeline 'eskd' needs 1"),
    (dict(pipeline="es_teacher_kd"), "n_short: required"),
    (dict(n_short=3), "n_short:"),
    (dict(student={"family": "mlp", "depth_factor": 1, "width_factor": 1, "input_shape": [5]}), "student: shape"),
    (dict(teachers=["missing.ckpt"]), "teachers[0]: checkpoint"),
    (dict(seeds=[]), "seeds"),
])
def test_errors_name_the_key(raw, message):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(cfg(**raw))
    assert message in str(err.value)


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.from_json("{")
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "none.json")


def test_presets_and_overrides():
    c = RunConfig.from_dict(cfg(schedule={"preset": "cifar", "augment": False}, n_short=50))
    assert c.schedule.drop_every == 60 and c.schedule.total_epochs == 200 and not c.schedule.augment
    c = RunConfig.from_dict(cfg(schedule={"preset": "imagenet"}))
    assert c.schedule.nesterov and c.schedule.total_epochs == 90


def test_relative_checkpoint_paths(tmp_path):
    save_checkpoint(build(ModelSpec("mlp", 1, 3, (6,), 4)), tmp_path / "t.ckpt")
    (tmp_path / "run.json").write_text(json.dumps(cfg(teachers=["t.ckpt"])))
    c = RunConfig.load(tmp_path / "run.json")
    assert c.teachers == (str(tmp_path / "t.ckpt"),)


def test_round_trips():
    c = RunConfig.from_dict(cfg(distill={"alpha": 0.5, "temperature": 20}, teacher_schedule={"preset": "cifar"}))
    assert RunConfig.from_json(c.to_json()) == c
    ps = c.to_pipeline(seed_offset=7)
    assert ps.seeds == [7, 8]
    assert PipelineSpec.from_dict(ps.to_dict()) == ps
    assert RunConfig.from_pipeline(c.to_pipeline()) == c


def test_image_signature():
    assert data_signature({"generator": "patterned_images", "K": 3, "H": 8, "W": 9, "per_class": 1, "noise": 0.1}) \
        == ((1, 8, 9), 3)
    assert data_signature({"source": "cifar_binary", "train": "a", "test": "b"}) == ((3, 32, 32), 10)


def test_sequential_chain_length():
    chain = [{"family": "mlp", "depth_factor": 1, "width_factor": 2}]
    assert RunConfig.from_dict(cfg(pipeline="sequential_kd", teachers=chain, generations=2)).generations == 2
    with pytest.raises(ConfigError, match="sequential chain"):
        RunConfig.from_dict(cfg(pipeline="sequential_kd", teachers=chain, generations=3))


def test_cifar_files_must_exist():
    with pytest.raises(ConfigError, match=r"data.train\[0\]"):
        RunConfig.from_dict(cfg(pipeline="scratch", data={"source": "cifar_binary", "train": "x.bin", "test": "y.bin"},
                                student={"family": "convnet", "depth_factor": 1, "width_factor": 1}, teachers=[]))


def test_default_schedule_matches_preset():
    assert RunConfig.from_dict(cfg(schedule={"preset": "cifar"})).schedule == cifar_preset()
