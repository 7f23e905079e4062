import json
import os
from pathlib import Path

import numpy as np
import pytest

from php_av.errors import CheckpointError
from php_av.engine.checkpoints import load_checkpoint, save_checkpoint, restore_model, restore_optimizer
from php_av.engine.incremental_engine import IncrementalEngine
from php_av.tasks.synthetic_av_tasks import make_task
from php_av import utils
from php_av.utils import replace_dir_atomically

from conftest import small_config, small_tasks

ORDER = ["AVQA", "AVE"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    checkpoint_dir = tmp_path_factory.mktemp("checkpoints")
    datasets = {spec.task_id: make_task(spec) for spec in small_tasks()}
    engine = IncrementalEngine(small_config(orders=[ORDER]), datasets, checkpoint_dir)
    return engine, engine.run_sequence(ORDER)


def all_files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_one_checkpoint_per_stage(trained):
    _, result = trained
    assert [p.split("/")[-1] for p in result.checkpoints] == ["stage1_AVQA", "stage2_AVE"]
    state = load_checkpoint(result.checkpoints[-1])
    assert state.stage == 2 and state.order == ORDER
    assert state.registered_tasks == ORDER
    assert state.acc == result.acc
    assert not any(name.startswith("encoders.") for name in state.parameters)


def test_save_load_save_is_byte_identical(trained, tmp_path):
    _, result = trained
    src = result.checkpoints[-1]
    save_checkpoint(load_checkpoint(src), tmp_path / "copy")
    assert all_files(tmp_path / "copy") == all_files(Path(src))


def test_restored_model_reproduces_accuracy(trained):
    engine, result = trained
    model = restore_model(load_checkpoint(result.checkpoints[-1]))
    assert [engine.evaluate(model, task_id) for task_id in ORDER] == result.acc[-1]


def test_restored_optimizer_carries_moments(trained):
    _, result = trained
    state = load_checkpoint(result.checkpoints[-1])
    model = restore_model(state)
    optimizer = restore_optimizer(state, model)
    named = dict(model.named_parameters())
    assert all(a is b for a, b in zip((named[n] for n in state.optimizer_params), optimizer.param_groups[0]["params"]))
    assert optimizer.param_groups[0]["lr"] == state.optimizer_groups[0]["lr"]
    first = optimizer.param_groups[0]["params"][0]
    np.testing.assert_array_equal(optimizer.state[first]["exp_avg"].numpy(), state.optimizer_state[0]["exp_avg"])


def test_tampered_array_is_rejected(trained, tmp_path):
    _, result = trained
    save_checkpoint(load_checkpoint(result.checkpoints[0]), tmp_path / "ckpt")
    target = sorted((tmp_path / "ckpt" / "params").glob("*.npy"))[0]
    np.save(target, np.zeros((1, 1, 1), dtype="<f4"))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_missing_array_is_rejected(trained, tmp_path):
    _, result = trained
    save_checkpoint(load_checkpoint(result.checkpoints[0]), tmp_path / "ckpt")
    sorted((tmp_path / "ckpt" / "optimizer").glob("*.npy"))[0].unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_corrupt_manifest_is_rejected(trained, tmp_path):
    _, result = trained
    save_checkpoint(load_checkpoint(result.checkpoints[0]), tmp_path / "ckpt")
    (tmp_path / "ckpt" / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_unsupported_schema_is_rejected(trained, tmp_path):
    _, result = trained
    save_checkpoint(load_checkpoint(result.checkpoints[0]), tmp_path / "ckpt")
    manifest_path = tmp_path / "ckpt" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["schema_version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere")


def test_backbone_mismatch_is_rejected(trained):
    _, result = trained
    state = load_checkpoint(result.checkpoints[0])
    state.fingerprints["backbone"] = "0" * 64
    with pytest.raises(CheckpointError):
        restore_model(state)


def test_parameter_shape_mismatch_is_rejected(trained):
    _, result = trained
    state = load_checkpoint(result.checkpoints[0])
    name = sorted(state.parameters)[0]
    state.parameters[name] = np.zeros((7, 7), dtype="<f4")
    with pytest.raises(CheckpointError):
        restore_model(state)


def test_no_temp_directory_left_behind(trained):
    _, result = trained
    root = Path(result.checkpoints[0]).parent
    assert not [p for p in root.iterdir() if p.name.startswith(".")]


def test_overwrite_replaces_the_old_checkpoint(trained, tmp_path):
    _, result = trained
    target = tmp_path / "stage"
    save_checkpoint(load_checkpoint(result.checkpoints[0]), target)
    save_checkpoint(load_checkpoint(result.checkpoints[-1]), target)
    assert load_checkpoint(target).stage == load_checkpoint(result.checkpoints[-1]).stage
    assert [p.name for p in tmp_path.iterdir()] == ["stage"]


def test_failed_swap_keeps_the_old_directory(tmp_path, monkeypatch):
    final, tmp = tmp_path / "ckpt", tmp_path / "incoming"
    final.mkdir()
    (final / "manifest.json").write_text("old")
    tmp.mkdir()
    (tmp / "manifest.json").write_text("new")
    real_replace = os.replace

    def replace(src, dst):
        if Path(src) == tmp:
            raise OSError("disk full")
        return real_replace(src, dst)

    monkeypatch.setattr(utils.os, "replace", replace)
    with pytest.raises(OSError):
        replace_dir_atomically(tmp, final)
    assert (final / "manifest.json").read_text() == "old"
    assert not (tmp_path / "ckpt.old").exists()

    monkeypatch.setattr(utils.os, "replace", real_replace)
    replace_dir_atomically(tmp, final)
    assert (final / "manifest.json").read_text() == "new"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt"]
