"""
Optimization Module for SDHSI-Net
AdamW with decoupled weight decay, per-epoch cosine annealing, the training loop
with epoch observers, the line-delimited TrainLog, and inference latency measurement.
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np
from tqdm import tqdm

from core import model as sdhsi
from core import ndtensor as nd
from core.errors import ConfigError, ContractError, DivergenceError, EmptyDatasetError
from core.layers import Mode
from core.losses import LossReport, LossWeights, total_loss
from core.metrics import confusion, oa
from core.model import Head, HeadLike, SdhsiModel, as_head
from core.preprocess import PatchSet

logger = logging.getLogger(__name__)


# OPTIMIZER STATE
@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5

    def validate(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"AdamW betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError(f"AdamW needs eps > 0 and weight_decay >= 0, got {self.eps}, {self.weight_decay}")


@dataclass
class AdamWState:
    """First/second moments per trainable parameter plus the shared step counter"""
    first: Dict[str, np.ndarray]
    second: Dict[str, np.ndarray]
    config: AdamWConfig = field(default_factory=AdamWConfig)
    step: int = 0

    @classmethod
    def create(cls, model: SdhsiModel, config: Optional[AdamWConfig] = None,
               names: Optional[Iterable[str]] = None) -> "AdamWState":
        config = config or AdamWConfig()
        config.validate()
        names = list(model.params) if names is None else list(names)
        first = {name: np.zeros_like(model.params[name].values) for name in names}
        second = {name: np.zeros_like(model.params[name].values) for name in names}
        return cls(first, second, config)

    @property
    def names(self) -> List[str]:
        return list(self.first)

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat name -> array view used by checkpoints"""
        flat = {f"adamw.m.{name}": array for name, array in self.first.items()}
        flat.update({f"adamw.v.{name}": array for name, array in self.second.items()})
        return flat

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], step: int, config: AdamWConfig) -> "AdamWState":
        first = {name[len("adamw.m."):]: np.array(a) for name, a in arrays.items() if name.startswith("adamw.m.")}
        second = {name[len("adamw.v."):]: np.array(a) for name, a in arrays.items() if name.startswith("adamw.v.")}
        if set(first) != set(second):
            raise ContractError("AdamW first and second moments cover different parameters")
        return cls(first, second, config, step)


@dataclass
class ScheduleConfig:
    lr_max: float = 5e-4
    lr_min: float = 1e-6
    total_epochs: int = 100
    batch_size: int = 64

    def validate(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min} and {self.lr_max}")
        if self.total_epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.total_epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be at least 2 for batch normalization, got {self.batch_size}")


@dataclass
class AblationFlags:
    no_sd: bool = False
    no_triplet: bool = False


def cosine_lr(epoch: int, cfg: ScheduleConfig) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.total_epochs - 1}")
    if cfg.total_epochs == 1:
        return cfg.lr_max
    progress = epoch / (cfg.total_epochs - 1)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(model: SdhsiModel, grads: Optional[Mapping[str, np.ndarray]], state: AdamWState, lr: float):
    """One in-place AdamW update of every parameter tracked by state.

    grads defaults to each parameter's accumulated .grad. Weight decay is applied to the
    parameter directly before the bias-corrected adaptive step.
    """
    cfg = state.config
    updates = {}
    for name in state.first:
        gradient = grads.get(name) if grads is not None else model.params[name].grad
        if gradient is None:
            raise ContractError(f"no gradient for parameter {name}")
        updates[name] = gradient

    state.step += 1
    first_correction = 1.0 - cfg.beta1 ** state.step
    second_correction = 1.0 - cfg.beta2 ** state.step
    for name, gradient in updates.items():
        param = model.params[name].values
        gradient = np.asarray(gradient, dtype=param.dtype)
        m, v = state.first[name], state.second[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * gradient
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * gradient * gradient
        if cfg.weight_decay:
            param -= (lr * cfg.weight_decay) * param
        param -= (lr * (m / first_correction) / (np.sqrt(v / second_correction) + cfg.eps)).astype(param.dtype)


# TRAINING LOG
@dataclass
class EpochRecord:
    epoch: int
    lr: float
    batches: int
    losses: Dict[str, float]
    val_oa: Dict[str, float]
    seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        data = asdict(self)
        if not include_timing:
            data.pop("seconds")
        return data


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def to_jsonl(self, include_timing: bool = False) -> str:
        return "".join(json.dumps(r.to_dict(include_timing), sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def read(cls, path: str) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    log.append(EpochRecord(**json.loads(line)))
        return log


class JsonlLogWriter:
    """Epoch observer that appends one JSON object per epoch to a file"""

    def __init__(self, path: str, include_timing: bool = False):
        self.path = path
        self.include_timing = include_timing
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        open(path, "w", encoding="utf-8").close()

    def __call__(self, record: EpochRecord):
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record.to_dict(self.include_timing), sort_keys=True) + "\n")


def log_epoch_summary(record: EpochRecord):
    losses = record.losses
    heads = " ".join(f"{head}={value:.4f}" for head, value in record.val_oa.items())
    logger.info(
        f"epoch {record.epoch + 1}: total={losses['total']:.4f} ce_t={losses['ce_teacher']:.4f} "
        f"triplet={losses['triplet']:.4f} lr={record.lr:.2e} val_oa[{heads or 'n/a'}]"
    )


# TRAINING LOOP
def batch_order(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Consecutive batches; a trailing batch of one joins the previous batch (batch norm needs two)"""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


class Trainer:
    """Runs the seeded training protocol and notifies observers after every epoch"""

    def __init__(self, model: SdhsiModel, weights: Optional[LossWeights] = None,
                 schedule: Optional[ScheduleConfig] = None, seed: int = 0,
                 flags: Optional[AblationFlags] = None, adamw: Optional[AdamWConfig] = None,
                 select_best: bool = False, progress: bool = True):
        self.model = model
        self.weights = weights or LossWeights()
        self.schedule = schedule or ScheduleConfig()
        self.seed = seed
        self.flags = flags or AblationFlags()
        self.select_best = select_best
        self.progress = progress
        if self.flags.no_triplet:
            self.weights = LossWeights(**{**asdict(self.weights), "lambda_trip": 0.0})
        self.weights.validate()
        self.schedule.validate()
        self.state = AdamWState.create(model, adamw, self.trainable_names())
        self._epoch_observers: List[Callable] = []

    @property
    def trains_students(self) -> bool:
        return self.model.cfg.include_students and not self.flags.no_sd

    def trainable_names(self) -> List[str]:
        names = self.model.parameter_names()
        if self.trains_students:
            return names
        return [name for name in names if not name.startswith("student")]

    def add_observer(self, callback: Callable):
        """Register callback receiving each completed EpochRecord"""
        self._epoch_observers.append(callback)

    def remove_observer(self, callback: Callable):
        if callback in self._epoch_observers:
            self._epoch_observers.remove(callback)

    def _notify_epoch_observers(self, record: EpochRecord):
        for callback in self._epoch_observers:
            try:
                callback(record)
            except Exception as error:
                logger.error(f"epoch observer failed: {error}")

    def _validation_heads(self) -> List[Head]:
        return [head for head in sdhsi.HEAD_ORDER if self.model.has_head(head)]

    def validate(self, val_set: Optional[PatchSet]) -> Dict[str, float]:
        if val_set is None or len(val_set) == 0:
            return {}
        predictions = sdhsi.predict(self.model, val_set, self._validation_heads(), self.schedule.batch_size)
        return {
            head.value: oa(confusion(predicted, val_set.labels, self.model.cfg.num_classes))
            for head, predicted in predictions.items()
        }

    def _train_batch(self, train_set: PatchSet, indices: np.ndarray, layer_rng: np.random.Generator,
                     lr: float) -> LossReport:
        heads = None if self.trains_students else (Head.TEACHER,)
        self.model.zero_grad()
        bundle = sdhsi.forward(self.model, train_set.batch(indices), Mode.TRAIN, rng=layer_rng, heads=heads)
        loss, report = total_loss(bundle, train_set.labels[indices], self.weights, no_sd=not self.trains_students)
        if not np.isfinite(report.total):
            raise DivergenceError(f"non-finite loss {report.total}")
        nd.backward(loss)
        adamw_step(self.model, None, self.state, lr)
        return report

    def fit(self, train_set: PatchSet, val_set: Optional[PatchSet] = None) -> TrainLog:
        # zero epochs touch no batch, so any training set is acceptable
        if self.schedule.total_epochs > 0 and len(train_set) == 0:
            raise EmptyDatasetError("training set is empty")
        if self.schedule.total_epochs > 0 and len(train_set) < 2:
            raise ContractError("training needs at least 2 samples for batch normalization")

        shuffle_seq, layer_seq = np.random.SeedSequence(self.seed).spawn(2)
        shuffle_rng = np.random.default_rng(shuffle_seq)
        layer_rng = np.random.default_rng(layer_seq)
        log = TrainLog()
        best_oa, best_state = -1.0, None

        for epoch in range(self.schedule.total_epochs):
            started = time.perf_counter()
            lr = cosine_lr(epoch, self.schedule)
            batches = batch_order(shuffle_rng.permutation(len(train_set)), self.schedule.batch_size)
            totals = LossReport()
            progress = tqdm(batches, desc=f"epoch {epoch + 1}/{self.schedule.total_epochs}", unit="batch",
                            leave=False, disable=None if self.progress else True)
            for batch_index, indices in enumerate(progress):
                try:
                    report = self._train_batch(train_set, indices, layer_rng, lr)
                except DivergenceError as error:
                    raise DivergenceError(f"epoch {epoch + 1}, batch {batch_index + 1}: {error}") from None
                logger.debug(f"epoch {epoch + 1} batch {batch_index + 1}: total={report.total:.6f}")
                for key, value in report.to_dict().items():
                    setattr(totals, key, getattr(totals, key) + value * len(indices))

            means = {key: value / len(train_set) for key, value in totals.to_dict().items()}
            val_oa = self.validate(val_set)
            record = EpochRecord(epoch, lr, len(batches), means, val_oa, time.perf_counter() - started)
            log.append(record)
            self._notify_epoch_observers(record)

            if self.select_best and val_oa.get(Head.TEACHER.value, -1.0) > best_oa:
                best_oa, best_state = val_oa[Head.TEACHER.value], self.model.state_dict()

        if best_state is not None:
            logger.info(f"restoring best epoch weights (teacher val OA {best_oa:.4f})")
            self.model.load_state_dict(best_state)
        return log


def train(model: SdhsiModel, train_set: PatchSet, val_set: Optional[PatchSet] = None,
          weights: Optional[LossWeights] = None, cfg: Optional[ScheduleConfig] = None, seed: int = 0,
          ablation_flags: Optional[AblationFlags] = None, log_path: Optional[str] = None,
          include_timing: bool = False) -> TrainLog:
    trainer = Trainer(model, weights, cfg, seed, ablation_flags)
    trainer.add_observer(log_epoch_summary)
    if log_path:
        trainer.add_observer(JsonlLogWriter(log_path, include_timing))
    return trainer.fit(train_set, val_set)


# INFERENCE TIMING
@dataclass
class LatencyStats:
    head: str
    batch_size: int
    repetitions: int
    median_us: float
    mean_us: float
    samples_us: List[float]


def measure_inference(model: SdhsiModel, head: HeadLike, batch, repetitions: int = 10,
                      warmup: int = 1) -> LatencyStats:
    """Per-sample eval-mode latency of one head in microseconds, warm-up runs excluded"""
    head = as_head(head)
    if repetitions < 1:
        raise ContractError(f"repetitions must be at least 1, got {repetitions}")
    inputs = batch if isinstance(batch, nd.Tensor) else nd.Tensor(batch)
    batch_size = inputs.shape[0]
    samples = []
    with nd.no_grad():
        for run in range(warmup + repetitions):
            started = time.perf_counter()
            sdhsi.forward(model, inputs, Mode.EVAL, heads=head)
            elapsed = time.perf_counter() - started
            if run >= warmup:
                samples.append(elapsed * 1e6 / batch_size)
    return LatencyStats(head.value, batch_size, repetitions, float(np.median(samples)), float(np.mean(samples)), samples)
