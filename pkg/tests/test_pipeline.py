import json
import time
from dataclasses import replace

import numpy as np
import pytest

from core.errors import ConfigError, ContractError
from core.file_manager import read_checkpoint, save_checkpoint
from core.layers import DropBlockConfig
from core.model import Head, build
from core.optim import AblationFlags
from core.pipeline import (
    PATCH_GRID,
    SPLIT_CONFIGURATIONS,
    RunConfig,
    ablation_arms,
    class_maps,
    evaluate_heads,
    model_config,
    prepare_data,
    prepare_from_checkpoint,
    run_ablation,
    run_section,
    train_run,
)
from core.preprocess import SplitConfig, SynthConfig, synth_scene

RUN_BUDGET_SECONDS = 300
TRIPLET_AA_TOLERANCE = 0.005

TINY_ARCHITECTURE = dict(
    conv3d_channels=(2, 3),
    conv3d_spectral_kernels=(3, 2),
    conv2d_channels=(4, 4),
    fc_widths=(8, 6),
    fc_pool_grid=2,
    student_hidden=6,
    dropblock=DropBlockConfig(3, 0.15),
)


def tiny_run(**overrides) -> RunConfig:
    settings = dict(patch_size=5, pca_bands=6, epochs=2, batch_size=16, seed=1,
                    architecture=dict(TINY_ARCHITECTURE), progress=False)
    settings.update(overrides)
    return RunConfig(**settings)


def replace_flags(cfg: RunConfig, **flags) -> RunConfig:
    return replace(cfg, flags=AblationFlags(**flags))


# CONFIGURATION
def test_paired_ablation_arms_differ_in_one_flag():
    cfg = tiny_run()
    arms = ablation_arms("sd", cfg)
    assert list(arms) == ["full", "no_sd"]
    assert not arms["full"].flags.no_sd and arms["no_sd"].flags.no_sd
    assert arms["full"].flags.no_triplet == arms["no_sd"].flags.no_triplet
    triplet = ablation_arms("triplet", replace_flags(cfg, no_triplet=True))
    assert not triplet["full"].flags.no_triplet and triplet["no_triplet"].flags.no_triplet


def test_grid_ablation_arms():
    cfg = tiny_run(split=SplitConfig(seed=5))
    splits = ablation_arms("splits", cfg)
    assert list(splits) == list(SPLIT_CONFIGURATIONS)
    assert splits["C3"].split.train_frac == pytest.approx(0.10)
    assert all(arm.split.seed == 5 for arm in splits.values())
    patches = ablation_arms("patch", cfg)
    assert [arm.patch_size for arm in patches.values()] == list(PATCH_GRID)
    with pytest.raises(ConfigError):
        ablation_arms("dropout", cfg)


def test_run_config_validation():
    with pytest.raises(ConfigError):
        tiny_run(patch_size=6).validate()
    with pytest.raises(ConfigError):
        tiny_run(batch_size=1).validate()
    with pytest.raises(ConfigError):
        tiny_run(split=SplitConfig(0.5, 0.5, 0.5)).validate()


def test_model_config_applies_architecture_overrides(small_scene):
    data = prepare_data(*small_scene, tiny_run())
    cfg = model_config(tiny_run(), data)
    assert (cfg.patch_size, cfg.bands, cfg.num_classes) == (5, 6, 3)
    assert cfg.conv2d_channels == (4, 4)
    with pytest.raises(ConfigError):
        model_config(tiny_run(architecture={"bands": 3}), data)
    with pytest.raises(ConfigError):
        model_config(tiny_run(architecture={"depth": 3}), data)


# PREPROCESSING
def test_prepare_data_partitions_labeled_pixels(small_scene):
    cube, labels = small_scene
    data = prepare_data(cube, labels, tiny_run())
    assert data.reduced.bands == 6
    assert len(data.train) + len(data.val) + len(data.test) == len(data.patches) == 256
    assert data.subset("all") is data.patches
    with pytest.raises(ConfigError):
        data.subset("holdout")


def test_pca_bands_are_clamped_to_the_scene(small_scene):
    data = prepare_data(*small_scene, tiny_run(pca_bands=30))
    assert data.pca.output_bands == 8


# TRAINING AND EVALUATION
def test_train_run_reports_every_head(small_scene, tmp_path):
    cfg = tiny_run()
    data = prepare_data(*small_scene, cfg)
    log_path = tmp_path / "train_log.jsonl"
    result = train_run(cfg, data, log_path=str(log_path))
    assert list(result.test) == ["s1", "s2", "teacher"]
    for evaluation in result.test.values():
        assert 0.0 <= evaluation.oa <= 1.0
        assert len(evaluation.recall) == 3
    assert len(result.log) == 2
    assert [json.loads(line)["epoch"] for line in log_path.read_text(encoding="utf-8").splitlines()] == [0, 1]


def test_evaluate_heads_rejects_empty_sets(small_scene, tiny_cfg):
    data = prepare_data(*small_scene, tiny_run())
    with pytest.raises(ContractError):
        evaluate_heads(build(tiny_cfg, 0), data.test.subset([]))


def test_checkpoint_restores_the_training_split(small_scene, tmp_path):
    cfg = tiny_run(epochs=0, split=SplitConfig(0.2, 0.1, 0.7, seed=8))
    data = prepare_data(*small_scene, cfg)
    result = train_run(cfg, data)
    path = str(tmp_path / "ckpt")
    save_checkpoint(result.model, path, result.trainer.state, data.pca, run_section(cfg, data))

    restored = prepare_from_checkpoint(*small_scene, read_checkpoint(path))
    assert np.array_equal(restored.test.coords, data.test.coords)
    assert np.array_equal(restored.reduced.data, data.reduced.data)
    assert restored.split == data.split


def test_checkpoint_preprocessing_contract_errors(small_scene, tmp_path):
    cfg = tiny_run(epochs=0)
    data = prepare_data(*small_scene, cfg)
    model = train_run(cfg, data).model
    path = str(tmp_path / "no_pca")
    save_checkpoint(model, path)
    with pytest.raises(ContractError, match="PCA"):
        prepare_from_checkpoint(*small_scene, read_checkpoint(path))

    other_scene = synth_scene(SynthConfig(height=16, width=16, bands=8, num_classes=4, seed=3))
    with_pca = str(tmp_path / "with_pca")
    save_checkpoint(model, with_pca, pca=data.pca)
    with pytest.raises(ContractError, match="classes"):
        prepare_from_checkpoint(*other_scene, read_checkpoint(with_pca))


def test_class_maps_cover_labeled_or_all_pixels():
    cube, labels = synth_scene(SynthConfig(height=10, width=10, bands=8, num_classes=3, seed=4))
    labels.labels[0, :] = 0
    cfg = tiny_run(epochs=0)
    data = prepare_data(cube, labels, cfg)
    model = train_run(cfg, data).model

    maps = class_maps(model, data, [Head.TEACHER, Head.S1])
    assert set(maps) == {"gt", "teacher", "s1"}
    assert np.array_equal(maps["gt"], labels.labels)
    assert np.array_equal(maps["teacher"] > 0, labels.labels > 0)
    assert maps["s1"].max() <= 3

    full = class_maps(model, data, [Head.TEACHER], full_scene=True)
    assert np.all(full["teacher"] > 0)


# ABLATIONS
def test_patch_ablation_runs_every_grid_size(small_scene):
    report = run_ablation("patch", tiny_run(epochs=1), *small_scene)
    assert list(report.arms) == ["patch11", "patch15", "patch17"]
    assert set(report.arms["patch11"]) == {"s1", "s2", "teacher"}
    assert report.seeds == [1]


def test_parallel_ablation_matches_sequential(small_scene):
    cfg = tiny_run(epochs=1)
    sequential = run_ablation("sd", cfg, *small_scene, seeds=2)
    parallel = run_ablation("sd", cfg, *small_scene, seeds=2, parallel=True)
    assert sequential.seeds == parallel.seeds == [1, 2]
    assert len(parallel.logs["no_sd"]) == 2
    for arm, heads in sequential.arms.items():
        for head, metrics in heads.items():
            assert parallel.arms[arm][head] == pytest.approx(metrics), (arm, head)


def test_ablation_needs_a_seed(small_scene):
    with pytest.raises(ConfigError):
        run_ablation("sd", tiny_run(), *small_scene, seeds=0)


# END TO END
@pytest.mark.slow
def test_synthetic_scene_end_to_end_with_and_without_distillation():
    cube, labels = synth_scene(SynthConfig())
    cfg = RunConfig(epochs=30, progress=False)
    data = prepare_data(cube, labels, cfg)

    full = train_run(cfg, data).test
    assert full["teacher"].oa >= 0.95
    for head in ("s1", "s2"):
        assert full[head].oa >= full["teacher"].oa - 0.05

    teacher_only = train_run(replace_flags(RunConfig(epochs=30, progress=False), no_sd=True), data).test
    assert teacher_only["teacher"].oa >= 0.95
    assert teacher_only["s1"].oa <= 0.40 and teacher_only["s2"].oa <= 0.40


@pytest.mark.slow
def test_default_synthetic_run_fits_the_time_budget():
    cube, labels = synth_scene(SynthConfig())
    cfg = RunConfig(epochs=30, progress=False)
    started = time.perf_counter()
    result = train_run(cfg, prepare_data(cube, labels, cfg))
    elapsed = time.perf_counter() - started
    assert elapsed < RUN_BUDGET_SECONDS
    assert result.test["teacher"].oa >= 0.95


@pytest.mark.slow
def test_triplet_ablation_keeps_teacher_accuracy_and_shrinks_the_triplet_term():
    report = run_ablation("triplet", RunConfig(epochs=30, progress=False), *synth_scene(SynthConfig()), seeds=5)
    assert report.seeds == [0, 1, 2, 3, 4]
    with_triplet = report.arms["full"]["teacher"]["aa"]
    assert with_triplet >= report.arms["no_triplet"]["teacher"]["aa"] - TRIPLET_AA_TOLERANCE
    assert len(report.logs["full"]) == 5
    for log in report.logs["full"]:
        triplet = [record.losses["triplet"] for record in log.records]
        assert triplet[0] > 0
        assert triplet[-1] < triplet[0]