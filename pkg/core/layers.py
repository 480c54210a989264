"""
Layer Module for SDHSI-Net
Learnable building blocks composed from ndtensor ops: batch normalization, DropBlock,
dropout, single-head self-attention, pooling and dense layers.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from core import ndtensor as nd
from core.errors import ConfigError, ContractError, DimensionError
from core.ndtensor import Tensor

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


# LAYER RECORDS
class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


ModeLike = Union[Mode, str]


def as_mode(mode: ModeLike) -> Mode:
    try:
        return mode if isinstance(mode, Mode) else Mode(mode)
    except ValueError:
        raise ContractError(f"unknown mode {mode!r}, expected 'train' or 'eval'") from None


@dataclass
class LayerParams:
    name: str
    tensor: Tensor


@dataclass
class DropBlockConfig:
    block_size: int = 3
    drop_prob: float = 0.15

    def validate(self, height: int = None, width: int = None):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"DropBlock block_size must be an odd positive int, got {self.block_size}")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError(f"DropBlock drop_prob must lie in [0, 1), got {self.drop_prob}")
        if height is not None and self.block_size > min(height, width):
            raise ConfigError(f"DropBlock block_size {self.block_size} exceeds feature map {height}x{width}")


# INITIALIZATION
def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# NORMALIZATION
def batchnorm(input: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              mode: ModeLike, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> Tensor:
    """Per-channel batch normalization over every axis except the channel axis.

    Train mode normalizes with batch statistics and updates running_mean / running_var in place
    (unbiased variance for the running estimate). Eval mode uses the running statistics.
    """
    mode = as_mode(mode)
    channels = input.shape[1]
    axes = (0,) + tuple(range(2, input.ndim))
    stat_view = (1, channels) + (1,) * (input.ndim - 2)

    if mode is Mode.TRAIN:
        if input.shape[0] < 2:
            raise ContractError(f"batchnorm in train mode needs a batch of at least 2, got {input.shape[0]}")
        batch_mean = nd.mean(input, axes, keepdims=True)
        centered = input - nd.broadcast_to(batch_mean, input.shape)
        batch_var = nd.mean(nd.square(centered), axes, keepdims=True)
        count = input.size // channels
        running_mean *= 1.0 - momentum
        running_mean += momentum * batch_mean.values.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * batch_var.values.reshape(-1) * count / (count - 1)
        normalized = centered / nd.broadcast_to(nd.sqrt(batch_var + eps), input.shape)
    else:
        shift = np.broadcast_to(running_mean.reshape(stat_view).astype(input.dtype), input.shape)
        scale = np.broadcast_to(np.sqrt(running_var + eps).reshape(stat_view).astype(input.dtype), input.shape)
        normalized = (input - Tensor(shift)) / Tensor(scale)

    scaled = normalized * nd.broadcast_to(nd.reshape(gamma, stat_view), input.shape)
    return nd.bias_add(scaled, beta, axis=1)


# REGULARIZATION
def dropblock_seed_rate(cfg: DropBlockConfig, height: int, width: int) -> float:
    block = cfg.block_size
    return cfg.drop_prob * height * width / (block ** 2 * (height - block + 1) * (width - block + 1))


def dropblock(input: Tensor, cfg: DropBlockConfig, mode: ModeLike, rng: np.random.Generator) -> Tensor:
    """Zero contiguous block_size x block_size regions around Bernoulli seed cells"""
    mode = as_mode(mode)
    if input.ndim != 4:
        raise DimensionError(f"dropblock expects N x C x H x W, got {input.shape}")
    _, _, height, width = input.shape
    cfg.validate(height, width)
    if mode is Mode.EVAL or cfg.drop_prob == 0.0:
        return input

    block = cfg.block_size
    half = block // 2
    gamma = dropblock_seed_rate(cfg, height, width)
    seeds = rng.random(input.shape[:2] + (height - block + 1, width - block + 1)) < gamma
    seed_map = np.zeros(input.shape, dtype=bool)
    seed_map[:, :, half:half + seeds.shape[2], half:half + seeds.shape[3]] = seeds
    padded = np.pad(seed_map, [(0, 0), (0, 0), (half, half), (half, half)])
    dropped = np.lib.stride_tricks.sliding_window_view(padded, (block, block), axis=(2, 3)).any(axis=(-2, -1))
    keep = (~dropped).astype(input.dtype)
    kept = keep.sum()
    scale = keep.size / kept if kept > 0 else 0.0
    return input * Tensor((keep * scale).astype(input.dtype))


def dropout(input: Tensor, p: float, mode: ModeLike, rng: np.random.Generator) -> Tensor:
    mode = as_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode is Mode.EVAL or p == 0.0:
        return input
    keep = rng.random(input.shape) >= p
    return input * Tensor((keep / (1.0 - p)).astype(input.dtype))


# ATTENTION
def _tokens(input: Tensor) -> Tensor:
    """N x C x H x W -> N x L x C with L = H * W"""
    batch, channels = input.shape[:2]
    flat = nd.reshape(input, (batch, channels, int(np.prod(input.shape[2:]))))
    return nd.transpose(flat, (0, 2, 1))


def _project(tokens: Tensor, weight: Tensor) -> Tensor:
    batch, length, channels = tokens.shape
    projected = nd.matmul(nd.reshape(tokens, (batch * length, channels)), weight)
    return nd.reshape(projected, (batch, length, weight.shape[1]))


def attention_weights(input: Tensor, wq: Tensor, wk: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(C)) over the flattened spatial grid, N x L x L"""
    tokens = _tokens(input)
    channels = input.shape[1]
    queries = _project(tokens, wq)
    keys = _project(tokens, wk)
    scores = nd.bmm(queries, nd.transpose(keys, (0, 2, 1))) * (1.0 / math.sqrt(channels))
    return nd.softmax(scores, axis=-1)


def self_attention(input: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product attention with a residual connection"""
    if input.ndim != 4:
        raise DimensionError(f"self_attention expects N x C x H x W, got {input.shape}")
    channels = input.shape[1]
    for label, weight in (("Wq", wq), ("Wk", wk), ("Wv", wv)):
        if weight.shape != (channels, channels):
            raise DimensionError(f"{label} must be {channels}x{channels}, got {weight.shape}")
    weights = attention_weights(input, wq, wk)
    values = _project(_tokens(input), wv)
    attended = nd.transpose(nd.bmm(weights, values), (0, 2, 1))
    return input + nd.reshape(attended, input.shape)


# POOLING AND DENSE
def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over every spatial axis, N x C x ... -> N x C"""
    if input.ndim < 3:
        return input
    return nd.mean(input, tuple(range(2, input.ndim)))


def pool_matrix(extent: int, bins: int) -> np.ndarray:
    """bins x extent averaging matrix with the adaptive-pooling bin edges"""
    matrix = np.zeros((bins, extent))
    for i in range(bins):
        start = (i * extent) // bins
        stop = -((-(i + 1) * extent) // bins)
        matrix[i, start:stop] = 1.0 / (stop - start)
    return matrix


def adaptive_avg_pool2d(input: Tensor, grid: int) -> Tensor:
    """Average N x C x H x W onto a fixed grid x grid map"""
    batch, channels, height, width = input.shape
    if grid > min(height, width):
        raise ConfigError(f"pool grid {grid} exceeds feature map {height}x{width}")
    rows = Tensor(pool_matrix(height, grid).T.astype(input.dtype))
    cols = Tensor(pool_matrix(width, grid).T.astype(input.dtype))
    out = nd.matmul(nd.reshape(input, (batch * channels * height, width)), cols)
    out = nd.transpose(nd.reshape(out, (batch, channels, height, grid)), (0, 1, 3, 2))
    out = nd.matmul(nd.reshape(out, (batch * channels * grid, height)), rows)
    return nd.transpose(nd.reshape(out, (batch, channels, grid, grid)), (0, 1, 3, 2))


def flatten(input: Tensor) -> Tensor:
    return nd.reshape(input, (input.shape[0], int(np.prod(input.shape[1:]))))


def dense(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if input.ndim != 2:
        raise DimensionError(f"dense expects N x din, got {input.shape}")
    return nd.bias_add(nd.matmul(input, weight), bias, axis=1)
