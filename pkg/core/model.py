"""
SDHSI-Net Model Module
Teacher backbone (four 3D convs -> depth/channel merge -> two 2D convs -> FC head) with
Student 1 after the last 3D conv and Student 2 after the last 2D conv.
Parameters live in a flat name -> Tensor registry so checkpoints can address them by name.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from core import layers
from core import ndtensor as nd
from core.errors import ConfigError, ContractError, ShapeError
from core.layers import DropBlockConfig, LayerParams, Mode, ModeLike, as_mode
from core.ndtensor import Tensor

logger = logging.getLogger(__name__)

SHARED_3D_PREFIXES = ("teacher.conv3d.", "teacher.bn3d.")
SHARED_2D_PREFIXES = ("teacher.conv2d.", "teacher.bn2d.")


class Head(Enum):
    S1 = "s1"
    S2 = "s2"
    TEACHER = "teacher"


HeadLike = Union[Head, str]
# table order: S1, S2, Teacher
HEAD_ORDER = (Head.S1, Head.S2, Head.TEACHER)


def as_head(head: HeadLike) -> Head:
    try:
        return head if isinstance(head, Head) else Head(head)
    except ValueError:
        raise ContractError(f"unknown head {head!r}, expected one of teacher, s1, s2") from None


# CONFIGURATION
@dataclass
class SdhsiConfig:
    patch_size: int = 17
    bands: int = 30
    num_classes: int = 16
    conv3d_channels: Tuple[int, ...] = (8, 16, 32, 64)
    conv3d_spectral_kernels: Tuple[int, ...] = (7, 5, 3, 3)
    conv3d_spatial_kernel: int = 3
    conv2d_channels: Tuple[int, ...] = (128, 64)
    conv2d_kernel: int = 3
    fc_widths: Tuple[int, int] = (256, 128)
    fc_pool_grid: int = 3
    student_hidden: int = 128
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    dropout: float = 0.4
    include_students: bool = True

    def spectral_depths(self) -> List[int]:
        """Spectral depth before and after each 3D conv (no spectral padding)"""
        depths = [self.bands]
        for kernel in self.conv3d_spectral_kernels:
            depths.append(depths[-1] - kernel + 1)
        return depths

    @property
    def embedding_dim(self) -> int:
        return self.fc_widths[-1]

    def validate(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be odd and positive, got {self.patch_size}")
        if self.num_classes < 1 or self.bands < 1:
            raise ConfigError(f"bands and classes must be positive, got B={self.bands}, K={self.num_classes}")
        if len(self.conv3d_channels) != len(self.conv3d_spectral_kernels) or not self.conv3d_channels:
            raise ConfigError("conv3d channel plan and spectral kernel plan must be non-empty and equally long")
        if not self.conv2d_channels:
            raise ConfigError("conv2d channel plan must be non-empty")
        depths = self.spectral_depths()
        if min(depths) < 1:
            raise ConfigError(f"spectral kernels {self.conv3d_spectral_kernels} drive depth below 1 for B={self.bands}: {depths}")
        if self.conv3d_spatial_kernel % 2 == 0 or self.conv2d_kernel % 2 == 0:
            raise ConfigError("spatial kernels must be odd for 'same' padding")
        if len(self.fc_widths) != 2:
            raise ConfigError(f"teacher head needs two FC widths, got {self.fc_widths}")
        if not 1 <= self.fc_pool_grid <= self.patch_size:
            raise ConfigError(f"fc_pool_grid {self.fc_pool_grid} must lie in 1..{self.patch_size}")
        if self.include_students and self.student_hidden != self.embedding_dim:
            raise ConfigError(
                f"student hidden width {self.student_hidden} must equal the teacher embedding {self.embedding_dim} for the hint loss"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        self.dropblock.validate(self.patch_size, self.patch_size)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SdhsiConfig":
        data = dict(data)
        data["dropblock"] = DropBlockConfig(**data.get("dropblock", {}))
        for key in ("conv3d_channels", "conv3d_spectral_kernels", "conv2d_channels", "fc_widths"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as error:
            raise ConfigError(f"invalid model config: {error}") from None


# FORWARD RESULTS
@dataclass
class ForwardBundle:
    mode: Mode
    teacher_logits: Optional[Tensor] = None
    student1_logits: Optional[Tensor] = None
    student2_logits: Optional[Tensor] = None
    teacher_embedding: Optional[Tensor] = None
    student1_hidden: Optional[Tensor] = None
    student2_hidden: Optional[Tensor] = None

    @property
    def has_students(self) -> bool:
        return self.student1_logits is not None and self.student2_logits is not None

    def logits(self, head: HeadLike) -> Optional[Tensor]:
        return {
            Head.TEACHER: self.teacher_logits,
            Head.S1: self.student1_logits,
            Head.S2: self.student2_logits,
        }[as_head(head)]


# MODEL CONTAINER
class SdhsiModel:
    """Named parameter and buffer registry for the teacher backbone and the student heads"""

    def __init__(self, cfg: SdhsiConfig, params: Optional[Dict[str, Tensor]] = None,
                 buffers: Optional[Dict[str, np.ndarray]] = None):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = dict(params or {})
        self.buffers: Dict[str, np.ndarray] = dict(buffers or {})

    def named_parameters(self) -> List[LayerParams]:
        return [LayerParams(name, tensor) for name, tensor in self.params.items()]

    def parameter_names(self, head: Optional[HeadLike] = None) -> List[str]:
        if head is None:
            return list(self.params)
        return [name for name in self.params if _on_head_path(name, as_head(head))]

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def has_head(self, head: HeadLike) -> bool:
        head = as_head(head)
        if head is Head.TEACHER:
            return "teacher.classifier.weight" in self.params
        prefix = "student1." if head is Head.S1 else "student2."
        return any(name.startswith(prefix) for name in self.params)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: tensor.values.copy() for name, tensor in self.params.items()}
        state.update({name: array.copy() for name, array in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        expected = {name: t.shape for name, t in self.params.items()}
        expected.update({name: a.shape for name, a in self.buffers.items()})
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ContractError(f"state is missing {missing[:3]}{'...' if len(missing) > 3 else ''}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise ShapeError(f"{name}: expected shape {shape}, got {state[name].shape}")
        for name, tensor in self.params.items():
            tensor.values = np.array(state[name], dtype=tensor.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=self.buffers[name].dtype)

    def strip_students(self) -> "SdhsiModel":
        """Deployment copy without the student heads"""
        cfg = replace(self.cfg, include_students=False)
        params = {name: t for name, t in self.params.items() if not name.startswith("student")}
        return SdhsiModel(cfg, params, self.buffers)


def _on_head_path(name: str, head: Head) -> bool:
    if name.startswith(SHARED_3D_PREFIXES):
        return True
    if head is Head.S1:
        return name.startswith("student1.")
    if name.startswith(SHARED_2D_PREFIXES):
        return True
    if head is Head.S2:
        return name.startswith("student2.")
    return name.startswith("teacher.")


# CONSTRUCTION
def expected_shapes(cfg: SdhsiConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter and buffer shapes implied by a config, in registration order"""
    shapes: Dict[str, Tuple[int, ...]] = {}
    spatial = cfg.conv3d_spatial_kernel
    in_channels = 1
    for i, (out_channels, spectral) in enumerate(zip(cfg.conv3d_channels, cfg.conv3d_spectral_kernels)):
        shapes[f"teacher.conv3d.{i}.weight"] = (out_channels, in_channels, spectral, spatial, spatial)
        shapes[f"teacher.conv3d.{i}.bias"] = (out_channels,)
        shapes[f"teacher.bn3d.{i}.gamma"] = (out_channels,)
        shapes[f"teacher.bn3d.{i}.beta"] = (out_channels,)
        in_channels = out_channels
    volume_channels = in_channels

    in_channels = volume_channels * cfg.spectral_depths()[-1]
    for i, out_channels in enumerate(cfg.conv2d_channels):
        shapes[f"teacher.conv2d.{i}.weight"] = (out_channels, in_channels, cfg.conv2d_kernel, cfg.conv2d_kernel)
        shapes[f"teacher.conv2d.{i}.bias"] = (out_channels,)
        shapes[f"teacher.bn2d.{i}.gamma"] = (out_channels,)
        shapes[f"teacher.bn2d.{i}.beta"] = (out_channels,)
        in_channels = out_channels
    map_channels = in_channels

    hidden, embedding = cfg.fc_widths
    shapes["teacher.fc.0.weight"] = (map_channels * cfg.fc_pool_grid ** 2, hidden)
    shapes["teacher.fc.0.bias"] = (hidden,)
    shapes["teacher.fc.1.weight"] = (hidden, embedding)
    shapes["teacher.fc.1.bias"] = (embedding,)
    shapes["teacher.classifier.weight"] = (embedding, cfg.num_classes)
    shapes["teacher.classifier.bias"] = (cfg.num_classes,)

    if cfg.include_students:
        for prefix, channels in (("student1", volume_channels), ("student2", map_channels)):
            for projection in ("wq", "wk", "wv"):
                shapes[f"{prefix}.attn.{projection}"] = (channels, channels)
            shapes[f"{prefix}.fc.weight"] = (channels, cfg.student_hidden)
            shapes[f"{prefix}.fc.bias"] = (cfg.student_hidden,)
            shapes[f"{prefix}.classifier.weight"] = (cfg.student_hidden, cfg.num_classes)
            shapes[f"{prefix}.classifier.bias"] = (cfg.num_classes,)
    return shapes


def buffer_shapes(cfg: SdhsiConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for kind, plan in (("bn3d", cfg.conv3d_channels), ("bn2d", cfg.conv2d_channels)):
        for i, channels in enumerate(plan):
            shapes[f"teacher.{kind}.{i}.running_mean"] = (channels,)
            shapes[f"teacher.{kind}.{i}.running_var"] = (channels,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if ".conv" in name:
        return int(np.prod(shape[1:]))
    return shape[0]


def build(cfg: SdhsiConfig, rng: Union[np.random.Generator, int, None] = None) -> SdhsiModel:
    """Instantiate every parameter with He-uniform weights, zero biases and identity batch norm"""
    cfg.validate()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params = {}
    for name, shape in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            values = np.zeros(shape, dtype=np.float32)
        elif leaf == "gamma":
            values = np.ones(shape, dtype=np.float32)
        else:
            values = layers.he_uniform(rng, shape, _fan_in(name, shape))
        params[name] = Tensor(values, requires_grad=True, name=name)
    buffers = {
        name: (np.zeros(shape, dtype=np.float32) if name.endswith("mean") else np.ones(shape, dtype=np.float32))
        for name, shape in buffer_shapes(cfg).items()
    }
    model = SdhsiModel(cfg, params, buffers)
    logger.debug(f"built SDHSI-Net with {count_params(model, Head.TEACHER):,} teacher-path parameters")
    return model


# FORWARD PASS
def _requested_heads(mode: Mode, heads, include_students: bool) -> Tuple[Head, ...]:
    if heads is None:
        if mode is Mode.TRAIN and include_students:
            return (Head.TEACHER, Head.S1, Head.S2)
        return (Head.TEACHER,)
    if isinstance(heads, (Head, str)):
        heads = (heads,)
    return tuple(as_head(h) for h in heads)


def _student_head(model: SdhsiModel, prefix: str, features: Tensor) -> Tuple[Tensor, Tensor]:
    p = model.params
    attended = layers.self_attention(features, p[f"{prefix}.attn.wq"], p[f"{prefix}.attn.wk"], p[f"{prefix}.attn.wv"])
    pooled = layers.global_avg_pool(attended)
    hidden = nd.relu(layers.dense(pooled, p[f"{prefix}.fc.weight"], p[f"{prefix}.fc.bias"]))
    logits = layers.dense(hidden, p[f"{prefix}.classifier.weight"], p[f"{prefix}.classifier.bias"])
    return logits, hidden


def _conv_block(model: SdhsiModel, kind: str, index: int, x: Tensor, mode: Mode) -> Tensor:
    p = model.params
    weight = p[f"teacher.conv{kind}.{index}.weight"]
    bias = p[f"teacher.conv{kind}.{index}.bias"]
    half = weight.shape[-1] // 2
    if kind == "3d":
        x = nd.conv3d(x, weight, bias, pad=(0, half, half))
    else:
        x = nd.conv2d(x, weight, bias, pad=half)
    x = layers.batchnorm(
        x, p[f"teacher.bn{kind}.{index}.gamma"], p[f"teacher.bn{kind}.{index}.beta"],
        model.buffers[f"teacher.bn{kind}.{index}.running_mean"],
        model.buffers[f"teacher.bn{kind}.{index}.running_var"], mode,
    )
    return nd.relu(x)


def forward(model: SdhsiModel, batch, mode: ModeLike, rng: Optional[np.random.Generator] = None,
            heads: Union[HeadLike, Iterable[HeadLike], None] = None, detach_students: bool = False) -> ForwardBundle:
    """Run the backbone and the requested heads on an N x 1 x B x S x S batch.

    By default train mode computes the teacher and both students and eval mode the teacher only.
    `heads` overrides the selection (early-exit evaluation, or a teacher-only training pass);
    an s1-only request stops after the 3D stack.
    """
    mode = as_mode(mode)
    cfg = model.cfg
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (1, cfg.bands, cfg.patch_size, cfg.patch_size)
    if x.ndim != 5 or x.shape[1:] != expected:
        raise ShapeError(f"batch must be N x {' x '.join(map(str, expected))}, got {x.shape}")
    if mode is Mode.TRAIN and rng is None:
        raise ContractError("train-mode forward needs an rng for DropBlock and dropout")

    wanted = _requested_heads(mode, heads, cfg.include_students)
    for head in wanted:
        if not model.has_head(head):
            raise ContractError(f"model has no {head.value} head (students stripped from this checkpoint?)")
    bundle = ForwardBundle(mode=mode)
    p = model.params

    for i in range(len(cfg.conv3d_channels)):
        x = _conv_block(model, "3d", i, x, mode)

    if Head.S1 in wanted:
        volume = x.detach() if detach_students else x
        bundle.student1_logits, bundle.student1_hidden = _student_head(model, "student1", nd.mean(volume, axis=2))
    if Head.S2 not in wanted and Head.TEACHER not in wanted:
        return bundle

    batch_size, channels, depth, height, width = x.shape
    # channel index c * D + d
    x = nd.reshape(x, (batch_size, channels * depth, height, width))
    for i in range(len(cfg.conv2d_channels)):
        x = _conv_block(model, "2d", i, x, mode)
    x = layers.dropblock(x, cfg.dropblock, mode, rng)

    if Head.S2 in wanted:
        spatial = x.detach() if detach_students else x
        bundle.student2_logits, bundle.student2_hidden = _student_head(model, "student2", spatial)
    if Head.TEACHER in wanted:
        x = layers.flatten(layers.adaptive_avg_pool2d(x, cfg.fc_pool_grid))
        x = nd.relu(layers.dense(x, p["teacher.fc.0.weight"], p["teacher.fc.0.bias"]))
        x = layers.dropout(x, cfg.dropout, mode, rng)
        bundle.teacher_embedding = layers.dense(x, p["teacher.fc.1.weight"], p["teacher.fc.1.bias"])
        bundle.teacher_logits = layers.dense(
            bundle.teacher_embedding, p["teacher.classifier.weight"], p["teacher.classifier.bias"]
        )
    return bundle


def count_params(model: SdhsiModel, head: HeadLike = Head.TEACHER) -> int:
    """Learnable parameters on the compute path that produces the given head's logits"""
    head = as_head(head)
    return int(sum(model.params[name].size for name in model.parameter_names(head)))


def predict(model: SdhsiModel, patchset, heads: Iterable[HeadLike] = (Head.TEACHER,),
            batch_size: int = 64) -> Dict[Head, np.ndarray]:
    """Eval-mode argmax predictions per head over a PatchSet"""
    heads = tuple(as_head(h) for h in heads)
    predictions = {head: np.zeros(len(patchset), dtype=np.int64) for head in heads}
    with nd.no_grad():
        for start in range(0, len(patchset), batch_size):
            indices = np.arange(start, min(start + batch_size, len(patchset)))
            bundle = forward(model, patchset.batch(indices), Mode.EVAL, heads=heads)
            for head in heads:
                predictions[head][indices] = np.argmax(bundle.logits(head).values, axis=1)
    return predictions
