"""
Preprocessing Module for hyperspectral scenes
PCA spectral compression, reflect-padded patch extraction, stratified splitting,
and the synthetic scene generator used for desk-scale verification.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ConfigError, ContractError, EmptyDatasetError, ShapeError, SplitError

logger = logging.getLogger(__name__)


# SCENE TYPES
@dataclass
class HsiCube:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"hyperspectral cube must be H x W x C, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("hyperspectral cube contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"label map must be H x W, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ContractError(f"labels must lie in 0..{self.num_classes}, found {self.labels.min()}..{self.labels.max()}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def input_bands(self) -> int:
        return self.components.shape[0]

    @property
    def output_bands(self) -> int:
        return self.components.shape[1]


@dataclass
class PatchSet:
    """Patches centered on scene pixels, read lazily from a shared reflect-padded cube.

    labels hold 0-based class indices; -1 marks an unlabeled pixel (full-scene extraction only).
    """
    source: np.ndarray
    coords: np.ndarray
    labels: np.ndarray
    patch_size: int
    num_classes: int

    def __len__(self):
        return len(self.labels)

    def _windows(self) -> np.ndarray:
        # (H, W, B, S, S) view; window (r, c) is centered on scene pixel (r, c)
        return sliding_window_view(self.source, (self.patch_size, self.patch_size), axis=(0, 1))

    def patch(self, index: int) -> np.ndarray:
        row, col = self.coords[index]
        return self._windows()[row, col].transpose(1, 2, 0)

    @property
    def patches(self) -> np.ndarray:
        """All patches as N x S x S x B"""
        return self._windows()[self.coords[:, 0], self.coords[:, 1]].transpose(0, 2, 3, 1)

    def batch(self, indices=None, dtype=np.float32) -> np.ndarray:
        """Model input N x 1 x B x S x S"""
        coords = self.coords if indices is None else self.coords[np.asarray(indices, dtype=np.int64)]
        stacked = self._windows()[coords[:, 0], coords[:, 1]]
        return stacked[:, np.newaxis].astype(dtype)

    def subset(self, indices) -> "PatchSet":
        indices = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.source, self.coords[indices], self.labels[indices], self.patch_size, self.num_classes)

    def class_counts(self) -> np.ndarray:
        labeled = self.labels[self.labels >= 0]
        return np.bincount(labeled, minlength=self.num_classes)


@dataclass
class SplitConfig:
    train_frac: float = 0.30
    val_frac: float = 0.10
    test_frac: float = 0.60
    seed: int = 0

    def validate(self):
        fractions = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 for f in fractions):
            raise ConfigError(f"split fractions must be non-negative, got {fractions}")
        if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {fractions}")

    @classmethod
    def from_percentages(cls, text: str, seed: int = 0) -> "SplitConfig":
        """Parse 'a,b,c' given in percent (30,10,60) or as fractions (0.3,0.1,0.6)"""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError:
            raise ConfigError(f"split must be three comma-separated numbers, got {text!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"split must have three parts, got {text!r}")
        if sum(parts) > 1.5:
            parts = [p / 100.0 for p in parts]
        config = cls(*parts, seed=seed)
        config.validate()
        return config


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    bands: int = 16
    num_classes: int = 4
    noise_sigma: float = 0.05
    seed: int = 0


# PCA
def pca_fit(cube: HsiCube, components: int) -> PcaModel:
    """Fit PCA on every pixel spectrum (labeled or not) by eigendecomposing the spectral covariance"""
    bands = cube.bands
    if not 1 <= components <= bands:
        raise ConfigError(f"PCA components B={components} must lie in 1..{bands} (cube bands)")
    pixels = cube.data.reshape(-1, bands).astype(np.float64)
    if pixels.shape[0] < components + 1:
        raise ContractError(f"PCA with B={components} needs at least {components + 1} pixels, got {pixels.shape[0]}")

    mean = pixels.mean(axis=0)
    centered = pixels - mean
    covariance = centered.T @ centered / (pixels.shape[0] - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(-eigenvalues, kind="stable")[:components]
    variance = np.clip(eigenvalues[order], 0.0, None)
    basis = eigenvectors[:, order]

    # largest-magnitude coordinate of each component is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(components)])
    basis = basis * np.where(signs == 0, 1.0, signs)

    tolerance = max(eigenvalues.max(), 0.0) * bands * np.finfo(np.float64).eps
    rank = int(np.sum(eigenvalues > tolerance))
    if components > rank:
        message = f"spectral covariance has rank {rank}; {components - rank} PCA components carry zero variance"
        warnings.warn(message, RuntimeWarning)
        logger.warning(message)

    total = eigenvalues.clip(0.0).sum()
    retained = variance.sum() / total if total > 0 else 1.0
    logger.info(f"PCA kept {components}/{bands} components ({retained:.2%} of spectral variance)")
    return PcaModel(mean=mean, components=basis, explained_variance=variance)


def pca_transform(model: PcaModel, cube: HsiCube) -> HsiCube:
    if cube.bands != model.input_bands:
        raise ShapeError(f"cube has {cube.bands} bands but the PCA model was fit on {model.input_bands}")
    pixels = cube.data.reshape(-1, cube.bands).astype(np.float64)
    projected = (pixels - model.mean) @ model.components
    return HsiCube(projected.reshape(cube.height, cube.width, model.output_bands))


def pca_inverse(model: PcaModel, cube: HsiCube) -> HsiCube:
    """Map component scores back to the spectral space"""
    scores = cube.data.reshape(-1, model.output_bands)
    restored = scores @ model.components.T + model.mean
    return HsiCube(restored.reshape(cube.height, cube.width, model.input_bands))


# PATCHES
def extract_patches(cube: HsiCube, labels: LabelMap, patch_size: int, labeled_only: bool = True) -> PatchSet:
    """One S x S x B patch per labeled pixel (or per pixel), reflect-padded at the borders"""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"patch size S must be an odd positive int, got {patch_size}")
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ShapeError(f"cube is {cube.height}x{cube.width} but labels are {labels.height}x{labels.width}")
    half = patch_size // 2
    if half > min(cube.height, cube.width) - 1:
        raise ConfigError(f"patch size {patch_size} too large to reflect-pad a {cube.height}x{cube.width} scene")

    if labeled_only:
        coords = np.argwhere(labels.labels > 0)
        if len(coords) == 0:
            raise EmptyDatasetError("label map has no labeled pixels")
    else:
        coords = np.argwhere(np.ones_like(labels.labels, dtype=bool))
    class_index = labels.labels[coords[:, 0], coords[:, 1]].astype(np.int64) - 1

    source = np.pad(cube.data, [(half, half), (half, half), (0, 0)], mode="reflect")
    return PatchSet(source, coords.astype(np.int64), class_index, patch_size, labels.num_classes)


# SPLITTING
def split_indices(labels: np.ndarray, cfg: SplitConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified per-class allocation of sample indices; floor remainders go to test"""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    parts = ([], [], [])
    for class_index in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == class_index)
        count = len(members)
        if count < 3:
            raise SplitError(f"class {class_index + 1} (index {class_index}) has {count} samples; at least 3 are needed")
        shuffled = rng.permutation(members)
        n_train = math.floor(cfg.train_frac * count + 1e-9)
        n_val = math.floor(cfg.val_frac * count + 1e-9)
        if cfg.train_frac > 0 and n_train == 0:
            n_train = 1
            n_val = min(n_val, count - 1)
        parts[0].append(shuffled[:n_train])
        parts[1].append(shuffled[n_train:n_train + n_val])
        parts[2].append(shuffled[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts)


def split(patchset: PatchSet, cfg: SplitConfig) -> Tuple[PatchSet, PatchSet, PatchSet]:
    train, val, test = split_indices(patchset.labels, cfg)
    logger.info(f"split {len(patchset)} samples into train={len(train)} val={len(val)} test={len(test)}")
    return patchset.subset(train), patchset.subset(val), patchset.subset(test)


# SYNTHETIC SCENES
def class_signatures(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """K x C smooth spectra, each a two-Gaussian mixture over band index"""
    bands = np.arange(cfg.bands, dtype=np.float64)
    spacing = cfg.bands / cfg.num_classes
    primary = (np.arange(cfg.num_classes) + 0.5) * spacing + rng.uniform(-0.25, 0.25, cfg.num_classes) * spacing
    secondary = (primary + cfg.bands / 2.0) % cfg.bands
    width = max(spacing / 2.0, 1.0)

    def bump(centers):
        return np.exp(-0.5 * ((bands[np.newaxis, :] - centers[:, np.newaxis]) / width) ** 2)

    signatures = 0.6 * bump(primary) + 0.4 * bump(secondary)
    if cfg.num_classes > 1 and cfg.noise_sigma > 0:
        gaps = np.linalg.norm(signatures[:, np.newaxis] - signatures[np.newaxis, :], axis=-1)
        closest = gaps[~np.eye(cfg.num_classes, dtype=bool)].min()
        required = 10.0 * cfg.noise_sigma
        if 0 < closest < required:
            signatures *= required / closest
    return signatures


def synth_scene(cfg: Optional[SynthConfig] = None) -> Tuple[HsiCube, LabelMap]:
    """K contiguous row-major regions, each filled with its class signature plus Gaussian noise"""
    cfg = cfg or SynthConfig()
    if cfg.num_classes < 1 or cfg.num_classes > cfg.height * cfg.width:
        raise ConfigError(f"K={cfg.num_classes} must lie in 1..H*W={cfg.height * cfg.width}")
    if cfg.noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be non-negative, got {cfg.noise_sigma}")
    rng = np.random.default_rng(cfg.seed)
    pixels = cfg.height * cfg.width
    regions = (np.arange(pixels) * cfg.num_classes // pixels).reshape(cfg.height, cfg.width)
    signatures = class_signatures(cfg, rng)
    noise = rng.normal(0.0, cfg.noise_sigma, size=(cfg.height, cfg.width, cfg.bands))
    cube = (signatures[regions] + noise).astype(np.float32)
    return HsiCube(cube), LabelMap((regions + 1).astype(np.int64), cfg.num_classes)
