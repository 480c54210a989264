import json
import os

import pytest

import main
from core.file_manager import read_checkpoint


def run_cli(*argv) -> int:
    return main.main([str(arg) for arg in argv])


def synth(directory, seed=2):
    return run_cli("synth", "--height", 12, "--width", 12, "--bands", 16, "--classes", 3, "--seed", seed,
                   "--out", directory)


def error_line(capsys) -> str:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("sdhsi-error")]
    assert len(lines) == 1
    return lines[0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic scene plus a one-epoch training run shared by the read-only CLI tests"""
    root = tmp_path_factory.mktemp("cli")
    scene = str(root / "scene")
    out = str(root / "run")
    assert synth(scene) == 0
    assert run_cli("train", "--scene", scene, "--out", out, "--patch", 5, "--pca", 16, "--epochs", 1,
                   "--batch", 16, "--no-progress") == 0
    return {"root": root, "scene": scene, "out": out, "checkpoint": os.path.join(out, "checkpoint")}


# THREAD CAPS
def test_thread_limit_defaults_to_single_lane():
    environ = {}
    assert main.apply_thread_limit(environ) == 0
    assert all(environ[name] == "1" for name in main.THREAD_VARIABLES)


def test_thread_limit_applies_requested_count():
    environ = {"SDHSI_THREADS": "4"}
    assert main.apply_thread_limit(environ) == 4
    assert environ["OPENBLAS_NUM_THREADS"] == "4"
    assert main.apply_thread_limit({"SDHSI_THREADS": "many"}) == 0


# SYNTH
def test_synth_is_deterministic(tmp_path):
    assert synth(tmp_path / "a") == 0
    assert synth(tmp_path / "b") == 0
    for name in ("header.json", "cube.raw", "labels.raw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert synth(tmp_path / "c", seed=3) == 0
    assert (tmp_path / "c" / "cube.raw").read_bytes() != (tmp_path / "a" / "cube.raw").read_bytes()


# TRAIN
def test_train_writes_checkpoint_and_log(workspace, capsys):
    bundle = read_checkpoint(workspace["checkpoint"])
    assert bundle.model.cfg.patch_size == 5
    assert bundle.pca.output_bands == 16
    assert bundle.run["split"]["train_frac"] == pytest.approx(0.3)
    assert bundle.optimizer_state.step == 3
    lines = open(os.path.join(workspace["out"], "train_log.jsonl"), encoding="utf-8").read().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["batches"] == 3


def test_identical_train_invocations_write_identical_bytes(workspace, tmp_path, capsys):
    arguments = ("--scene", workspace["scene"], "--patch", 5, "--pca", 16, "--epochs", 2, "--batch", 16,
                 "--seed", 4, "--no-progress")
    for name in ("first", "second"):
        assert run_cli("train", "--out", tmp_path / name, *arguments) == 0
    for relative in ("checkpoint/manifest.json", "checkpoint/weights.bin", "train_log.jsonl"):
        first = (tmp_path / "first" / relative).read_bytes()
        assert first, relative
        assert first == (tmp_path / "second" / relative).read_bytes(), relative


def test_zero_epoch_training_still_writes_a_checkpoint(workspace, tmp_path, capsys):
    out = tmp_path / "untrained"
    code = run_cli("train", "--scene", workspace["scene"], "--out", out, "--patch", 5, "--pca", 16, "--epochs", 0,
                   "--no-progress", "--strip-students")
    assert code == 0
    model = read_checkpoint(str(out / "checkpoint")).model
    assert not model.has_head("s1")
    assert (out / "train_log.jsonl").read_text(encoding="utf-8") == ""
    captured = capsys.readouterr()
    assert "Teacher" in captured.out
    assert captured.out.rstrip().endswith("checkpoint at " + str(out / "checkpoint"))


def test_invalid_split_is_a_config_error(workspace, tmp_path, capsys):
    code = run_cli("train", "--scene", workspace["scene"], "--out", tmp_path, "--split", "50,50,50")
    assert code == 1
    assert error_line(capsys).startswith("sdhsi-error: CONFIG: ")


# EVAL
def test_eval_prints_per_head_tables(workspace, capsys):
    code = run_cli("eval", "--checkpoint", workspace["checkpoint"], "--scene", workspace["scene"],
                   "--timing", "--repetitions", 1)
    assert code == 0
    out = capsys.readouterr().out
    for text in ("S1", "S2", "Teacher", "OA (%)", "Kappa", "#P (M)", "Time (us)", "recall"):
        assert text in out


def test_eval_single_head_on_training_subset(workspace, capsys):
    assert run_cli("eval", "--checkpoint", workspace["checkpoint"], "--scene", workspace["scene"],
                   "--head", "s2", "--subset", "train") == 0
    out = capsys.readouterr().out
    assert "S2 recall" in out and "Teacher" not in out


def test_missing_checkpoint_prints_one_error_line(workspace, tmp_path, capsys):
    code = run_cli("eval", "--checkpoint", tmp_path / "nothing", "--scene", workspace["scene"])
    assert code == 1
    assert error_line(capsys).startswith("sdhsi-error: CHECKPOINT: manifest not found")


def test_missing_scene_is_a_format_error(workspace, tmp_path, capsys):
    code = run_cli("eval", "--checkpoint", workspace["checkpoint"], "--scene", tmp_path / "nowhere")
    assert code == 1
    assert error_line(capsys).startswith("sdhsi-error: FORMAT: ")


def test_usage_errors_exit_with_two():
    with pytest.raises(SystemExit) as raised:
        main.main([])
    assert raised.value.code == 2


# MAP
def test_map_writes_every_head_and_the_panel(workspace, capsys):
    out = workspace["root"] / "maps"
    assert run_cli("map", "--checkpoint", workspace["checkpoint"], "--scene", workspace["scene"], "--out", out) == 0
    for name in ("gt", "s1", "s2", "teacher", "panel"):
        assert (out / f"{name}.ppm").read_bytes().startswith(b"P6")


def test_map_of_a_stripped_head_is_a_contract_error(workspace, tmp_path, capsys):
    out = tmp_path / "deploy"
    assert run_cli("train", "--scene", workspace["scene"], "--out", out, "--patch", 5, "--pca", 16, "--epochs", 0,
                   "--no-progress", "--strip-students") == 0
    capsys.readouterr()
    code = run_cli("map", "--checkpoint", out / "checkpoint", "--scene", workspace["scene"], "--out", tmp_path,
                   "--head", "s2")
    assert code == 1
    assert error_line(capsys).startswith("sdhsi-error: CONTRACT: ")


# ABLATE
def test_ablate_prints_and_dumps_the_table(workspace, tmp_path, capsys):
    dump = tmp_path / "ablation.tsv"
    code = run_cli("ablate", "--scene", workspace["scene"], "--out", tmp_path, "--which", "sd", "--patch", 5,
                   "--pca", 16, "--epochs", 1, "--batch", 16, "--no-progress", "--dump", dump)
    assert code == 0
    out = capsys.readouterr().out
    assert "no_sd" in out and "dT OA" in out
    rows = dump.read_text(encoding="utf-8").splitlines()
    assert rows[0].split("\t")[0] == "Arm"
    assert [row.split("\t")[0] for row in rows[1:]] == ["full", "no_sd"]
