"""
Pipeline Module for SDHSI-Net runs
Orchestrates PCA -> patch extraction -> split -> training -> per-head evaluation, rebuilds the
same preprocessing from a checkpoint, produces scene-sized prediction maps, and runs ablation arms.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core import model as sdhsi
from core.errors import ConfigError, ContractError
from core.file_manager import CheckpointBundle
from core.losses import LossWeights
from core.metrics import confusion, scores
from core.model import Head, SdhsiConfig, SdhsiModel
from core.optim import (AblationFlags, AdamWConfig, JsonlLogWriter, ScheduleConfig, Trainer, TrainLog,
                        log_epoch_summary)
from core.preprocess import (HsiCube, LabelMap, PatchSet, PcaModel, SplitConfig, extract_patches, pca_fit,
                             pca_transform, split_indices)

logger = logging.getLogger(__name__)

SPLIT_CONFIGURATIONS = {"C1": (0.30, 0.10, 0.60), "C2": (0.20, 0.10, 0.70), "C3": (0.10, 0.10, 0.80)}
PATCH_GRID = (11, 15, 17)
ABLATIONS = ("sd", "triplet", "splits", "patch")


# COMMAND RESULTS CLASS
class CommandResult(Enum):
    SUCCESS = "success"
    ERROR = "error"
    CANCELLED = "cancelled"


@dataclass
class CommandResponse:
    result: CommandResult
    message: str
    data: Optional[Any] = None


# RUN CONFIGURATION
@dataclass
class RunConfig:
    scene: Optional[str] = None
    out: str = "runs/sdhsi"
    patch_size: int = 17
    pca_bands: int = 30
    split: SplitConfig = field(default_factory=SplitConfig)
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr_max: float = 5e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)
    select_best: bool = False
    log_timing: bool = False
    progress: bool = True
    # SdhsiConfig field overrides (channel plans, widths); patch size, bands and classes come from the data
    architecture: Dict[str, Any] = field(default_factory=dict)

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_max, self.lr_min, self.epochs, self.batch_size)

    def validate(self):
        if self.pca_bands < 1:
            raise ConfigError(f"pca bands must be positive, got {self.pca_bands}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be odd and positive, got {self.patch_size}")
        self.split.validate()
        self.weights.validate()
        self.schedule().validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedData:
    pca: PcaModel
    reduced: HsiCube
    labels: LabelMap
    patches: PatchSet
    train: PatchSet
    val: PatchSet
    test: PatchSet
    split: SplitConfig

    def subset(self, name: str) -> PatchSet:
        if name == "all":
            return self.patches
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown subset {name!r}, expected train, val, test or all") from None


@dataclass
class HeadEvaluation:
    oa: float
    aa: float
    kappa: float
    recall: List[float]

    def metrics(self) -> Dict[str, float]:
        return {"oa": self.oa, "aa": self.aa, "kappa": self.kappa}


@dataclass
class RunResult:
    model: SdhsiModel
    log: TrainLog
    trainer: Trainer
    data: PreparedData
    test: Dict[str, HeadEvaluation]


# PREPROCESSING
def clamp_pca_bands(requested: int, cube: HsiCube) -> int:
    if requested > cube.bands:
        logger.warning(f"pca B={requested} exceeds the scene's {cube.bands} bands; using B={cube.bands}")
        return cube.bands
    return requested


def split_patches(patches: PatchSet, split_cfg: SplitConfig) -> Tuple[PatchSet, PatchSet, PatchSet]:
    parts = split_indices(patches.labels, split_cfg)
    for name, indices in zip(("train", "val", "test"), parts):
        counts = np.bincount(patches.labels[indices], minlength=patches.num_classes)
        logger.info(f"{name}: {len(indices)} samples, per class {counts.tolist()}")
    return tuple(patches.subset(indices) for indices in parts)


def prepare_with_pca(cube: HsiCube, labels: LabelMap, pca: PcaModel, patch_size: int,
                     split_cfg: SplitConfig) -> PreparedData:
    reduced = pca_transform(pca, cube)
    patches = extract_patches(reduced, labels, patch_size)
    train, val, test = split_patches(patches, split_cfg)
    return PreparedData(pca, reduced, labels, patches, train, val, test, split_cfg)


def prepare_data(cube: HsiCube, labels: LabelMap, cfg: RunConfig, pca: Optional[PcaModel] = None) -> PreparedData:
    """Fit PCA (unless given), extract labeled patches and split them with the run's split seed"""
    if pca is None:
        pca = pca_fit(cube, clamp_pca_bands(cfg.pca_bands, cube))
    return prepare_with_pca(cube, labels, pca, cfg.patch_size, cfg.split)


def prepare_from_checkpoint(cube: HsiCube, labels: LabelMap, bundle: CheckpointBundle) -> PreparedData:
    """Rebuild the training run's preprocessing from the PCA and run section stored with the weights"""
    cfg = bundle.model.cfg
    if bundle.pca is None:
        raise ContractError("checkpoint carries no PCA model; it cannot preprocess a raw scene")
    if bundle.pca.input_bands != cube.bands:
        raise ContractError(f"checkpoint PCA expects {bundle.pca.input_bands} bands, scene has {cube.bands}")
    if labels.num_classes != cfg.num_classes:
        raise ContractError(f"checkpoint has {cfg.num_classes} classes, scene declares {labels.num_classes}")
    run = bundle.run or {}
    split_section = run.get("split", {})
    split_cfg = SplitConfig(**split_section) if split_section else SplitConfig()
    return prepare_with_pca(cube, labels, bundle.pca, cfg.patch_size, split_cfg)


def run_section(cfg: RunConfig, data: PreparedData) -> dict:
    return {
        "patch_size": cfg.patch_size,
        "pca_bands": data.pca.output_bands,
        "seed": cfg.seed,
        "split": asdict(data.split),
        "epochs": cfg.epochs,
        "flags": asdict(cfg.flags),
    }


# TRAINING AND EVALUATION
def model_config(cfg: RunConfig, data: PreparedData) -> SdhsiConfig:
    base = SdhsiConfig(patch_size=cfg.patch_size, bands=data.pca.output_bands, num_classes=data.labels.num_classes)
    fixed = {"patch_size", "bands", "num_classes"} & set(cfg.architecture)
    if fixed:
        raise ConfigError(f"architecture overrides cannot set {sorted(fixed)}; they follow the run and the scene")
    try:
        return replace(base, **cfg.architecture)
    except TypeError as error:
        raise ConfigError(f"invalid architecture override: {error}") from None


def evaluate_heads(model: SdhsiModel, patchset: PatchSet, heads: Optional[List[Head]] = None,
                   batch_size: int = 64) -> Dict[str, HeadEvaluation]:
    if heads is None:
        heads = [head for head in sdhsi.HEAD_ORDER if model.has_head(head)]
    if len(patchset) == 0:
        raise ContractError("cannot evaluate an empty sample set")
    predictions = sdhsi.predict(model, patchset, heads, batch_size)
    results = {}
    for head, predicted in predictions.items():
        cm = confusion(predicted, patchset.labels, model.cfg.num_classes)
        summary = scores(cm)
        results[head.value] = HeadEvaluation(summary.oa, summary.aa, summary.kappa, cm.per_class_recall().tolist())
    return results


def train_run(cfg: RunConfig, data: PreparedData, log_path: Optional[str] = None) -> RunResult:
    cfg.validate()
    model = sdhsi.build(model_config(cfg, data), np.random.default_rng(cfg.seed))
    trainer = Trainer(model, cfg.weights, cfg.schedule(), cfg.seed, cfg.flags,
                      AdamWConfig(weight_decay=cfg.weight_decay), cfg.select_best, cfg.progress)
    trainer.add_observer(log_epoch_summary)
    if log_path:
        trainer.add_observer(JsonlLogWriter(log_path, cfg.log_timing))
    log = trainer.fit(data.train, data.val)
    test = evaluate_heads(model, data.test) if len(data.test) else {}
    return RunResult(model, log, trainer, data, test)


def class_maps(model: SdhsiModel, data: PreparedData, heads: List[Head], full_scene: bool = False,
               batch_size: int = 64) -> Dict[str, np.ndarray]:
    """Scene-sized maps holding class index + 1 per pixel; 0 where nothing is predicted"""
    labels = data.labels
    patches = extract_patches(data.reduced, labels, model.cfg.patch_size, labeled_only=not full_scene)
    predictions = sdhsi.predict(model, patches, heads, batch_size)
    maps = {"gt": labels.labels.astype(np.int64)}
    for head, predicted in predictions.items():
        grid = np.zeros((labels.height, labels.width), dtype=np.int64)
        grid[patches.coords[:, 0], patches.coords[:, 1]] = predicted + 1
        maps[head.value] = grid
    return maps


# ABLATIONS
def ablation_arms(which: str, cfg: RunConfig) -> Dict[str, RunConfig]:
    """Arm configurations that differ from cfg only in the ablated factor"""
    if which == "sd":
        return {"full": replace(cfg, flags=replace(cfg.flags, no_sd=False)),
                "no_sd": replace(cfg, flags=replace(cfg.flags, no_sd=True))}
    if which == "triplet":
        return {"full": replace(cfg, flags=replace(cfg.flags, no_triplet=False)),
                "no_triplet": replace(cfg, flags=replace(cfg.flags, no_triplet=True))}
    if which == "splits":
        return {name: replace(cfg, split=SplitConfig(*fractions, seed=cfg.split.seed))
                for name, fractions in SPLIT_CONFIGURATIONS.items()}
    if which == "patch":
        return {f"patch{size}": replace(cfg, patch_size=size) for size in PATCH_GRID}
    raise ConfigError(f"unknown ablation {which!r}, expected one of {', '.join(ABLATIONS)}")


@dataclass
class AblationReport:
    which: str
    seeds: List[int]
    arms: Dict[str, Dict[str, Dict[str, float]]]
    logs: Dict[str, List[TrainLog]]


def _arm_data(which: str, arm_cfg: RunConfig, cube: HsiCube, labels: LabelMap, shared: PreparedData) -> PreparedData:
    if which == "splits":
        return prepare_with_pca(cube, labels, shared.pca, arm_cfg.patch_size, arm_cfg.split)
    if which == "patch":
        # same labeled pixels in the same order, so the shared split carries over
        patches = extract_patches(shared.reduced, labels, arm_cfg.patch_size)
        return replace(shared, patches=patches,
                       train=patches.subset(_positions(shared, shared.train)),
                       val=patches.subset(_positions(shared, shared.val)),
                       test=patches.subset(_positions(shared, shared.test)))
    return shared


def _positions(shared: PreparedData, part: PatchSet) -> np.ndarray:
    width = shared.labels.width
    flat_all = shared.patches.coords[:, 0] * width + shared.patches.coords[:, 1]
    flat_part = part.coords[:, 0] * width + part.coords[:, 1]
    return np.searchsorted(flat_all, flat_part)


def _mean_metrics(runs: List[Dict[str, HeadEvaluation]]) -> Dict[str, Dict[str, float]]:
    heads = runs[0].keys()
    return {head: {key: float(np.mean([run[head].metrics()[key] for run in runs])) for key in ("oa", "aa", "kappa")}
            for head in heads}


def run_ablation(which: str, cfg: RunConfig, cube: HsiCube, labels: LabelMap, seeds: int = 1,
                 parallel: bool = False) -> AblationReport:
    """Train every arm for each seed on one shared preprocessing pass and average the test metrics"""
    if seeds < 1:
        raise ConfigError(f"seeds must be at least 1, got {seeds}")
    arms = ablation_arms(which, cfg)
    shared = prepare_data(cube, labels, cfg)
    seed_list = [cfg.seed + offset for offset in range(seeds)]
    jobs = []
    for name, arm_cfg in arms.items():
        data = _arm_data(which, arm_cfg, cube, labels, shared)
        for seed in seed_list:
            jobs.append((name, replace(arm_cfg, seed=seed, progress=arm_cfg.progress and not parallel), data))

    def run(job):
        name, arm_cfg, data = job
        logger.info(f"ablation {which}: arm {name}, seed {arm_cfg.seed}")
        return name, train_run(arm_cfg, data)

    if parallel:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            finished = list(pool.map(run, jobs))
    else:
        finished = [run(job) for job in jobs]

    results: Dict[str, List[Dict[str, HeadEvaluation]]] = {name: [] for name in arms}
    logs: Dict[str, List[TrainLog]] = {name: [] for name in arms}
    for name, result in finished:
        results[name].append(result.test)
        logs[name].append(result.log)
    return AblationReport(which, seed_list, {name: _mean_metrics(runs) for name, runs in results.items()}, logs)
