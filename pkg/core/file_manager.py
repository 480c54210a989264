"""
File Management Module for SDHSI-Net artifacts
Scene containers (header.json + cube.raw + labels.raw), checkpoints (manifest.json + weights.bin)
and P6 PPM classification maps. Writes go through temporary files and are renamed into place.
"""

import colorsys
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from core.errors import CheckpointError, ConfigError, ContractError, FormatError
from core.model import SdhsiConfig, SdhsiModel, buffer_shapes, expected_shapes
from core.ndtensor import Tensor
from core.optim import AdamWConfig, AdamWState
from core.preprocess import HsiCube, LabelMap, PcaModel
from ui.ui_constants import Sizes, Theme

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
HEADER_NAME = "header.json"
CUBE_NAME = "cube.raw"
LABELS_NAME = "labels.raw"

BLOB_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


# PATH HELPERS
def validate_output_path(output_path: str) -> Tuple[bool, str]:
    """Check that an output directory exists (creating it) and is writable"""
    try:
        os.makedirs(output_path, exist_ok=True)
        if not os.access(output_path, os.W_OK):
            return False, f"No write permission: {output_path}"
        return True, "Path is valid"
    except OSError as error:
        return False, f"Validation error: {error}"


def format_file_size(file_path: str) -> str:
    """Format file or directory size in human-readable units"""
    try:
        if os.path.isdir(file_path):
            size_bytes = float(sum(os.path.getsize(os.path.join(file_path, name)) for name in os.listdir(file_path)))
        else:
            size_bytes = float(os.path.getsize(file_path))
        for unit in ['B', 'KB', 'MB', 'GB']:
            if size_bytes < 1024:
                return f"{size_bytes:.1f} {unit}"
            size_bytes /= 1024
        return f"{size_bytes:.1f} TB"
    except OSError:
        return "Unknown size"


def _ensure_directory(directory: str):
    valid, message = validate_output_path(directory)
    if not valid:
        raise ConfigError(message)


def _write_atomic(path: str, payload: bytes):
    temporary = f"{path}.tmp"
    with open(temporary, "wb") as handle:
        handle.write(payload)
    os.replace(temporary, path)


def _json_bytes(data: dict) -> bytes:
    return (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8")


# SCENE CONTAINER
def write_scene(cube: HsiCube, labels: LabelMap, directory: str, class_names: Optional[List[str]] = None):
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ContractError(f"cube is {cube.height}x{cube.width} but labels are {labels.height}x{labels.width}")
    if class_names is not None and len(class_names) != labels.num_classes:
        raise ContractError(f"{len(class_names)} class names for {labels.num_classes} classes")
    _ensure_directory(directory)
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "num_classes": labels.num_classes,
        "cube_dtype": "f32le",
        "label_dtype": "u16le",
    }
    if class_names is not None:
        header["class_names"] = list(class_names)
    _write_atomic(os.path.join(directory, CUBE_NAME), cube.data.astype("<f4").tobytes())
    _write_atomic(os.path.join(directory, LABELS_NAME), labels.labels.astype("<u2").tobytes())
    _write_atomic(os.path.join(directory, HEADER_NAME), _json_bytes(header))


def read_scene_header(directory: str) -> dict:
    path = os.path.join(directory, HEADER_NAME)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            header = json.load(handle)
    except FileNotFoundError:
        raise FormatError(f"scene header not found: {path}") from None
    except json.JSONDecodeError as error:
        raise FormatError(f"scene header is not valid JSON: {error}") from None

    for key in ("height", "width", "bands", "num_classes"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise FormatError(f"scene header field {key!r} must be a positive integer, got {header.get(key)!r}")
    if header.get("cube_dtype") != "f32le":
        raise FormatError(f"scene header cube_dtype must be 'f32le', got {header.get('cube_dtype')!r}")
    if header.get("label_dtype") != "u16le":
        raise FormatError(f"scene header label_dtype must be 'u16le', got {header.get('label_dtype')!r}")
    names = header.get("class_names")
    if names is not None and len(names) != header["num_classes"]:
        raise FormatError(f"scene header lists {len(names)} class_names for {header['num_classes']} classes")
    return header


def _read_raw(path: str, expected_bytes: int, dtype: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"{os.path.basename(path)} not found in scene directory")
    actual = os.path.getsize(path)
    if actual != expected_bytes:
        raise FormatError(f"{os.path.basename(path)}: expected {expected_bytes} bytes, found {actual}")
    return np.fromfile(path, dtype=dtype)


def read_scene(directory: str) -> Tuple[HsiCube, LabelMap]:
    header = read_scene_header(directory)
    height, width, bands = header["height"], header["width"], header["bands"]
    cube = _read_raw(os.path.join(directory, CUBE_NAME), height * width * bands * 4, "<f4")
    labels = _read_raw(os.path.join(directory, LABELS_NAME), height * width * 2, "<u2")
    if labels.size and labels.max() > header["num_classes"]:
        raise FormatError(f"labels.raw holds class {labels.max()} but the header declares {header['num_classes']} classes")
    if not np.all(np.isfinite(cube)):
        raise FormatError("cube.raw contains non-finite values")
    logger.info(f"read scene {directory}: {height}x{width}x{bands}, {header['num_classes']} classes")
    return (HsiCube(cube.astype(np.float32).reshape(height, width, bands)),
            LabelMap(labels.astype(np.int64).reshape(height, width), header["num_classes"]))


# CHECKPOINTS
@dataclass
class CheckpointBundle:
    model: SdhsiModel
    optimizer_state: Optional[AdamWState] = None
    pca: Optional[PcaModel] = None
    run: Dict = field(default_factory=dict)


def _blob_entries(arrays: Dict[str, Tuple[np.ndarray, str]]) -> Tuple[List[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, (array, dtype) in arrays.items():
        raw = np.ascontiguousarray(array, dtype=BLOB_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(array.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(model: SdhsiModel, path: str, optimizer_state: Optional[AdamWState] = None,
                    pca: Optional[PcaModel] = None, run: Optional[dict] = None, strip_students: bool = False):
    """Write manifest.json + weights.bin; byte-identical for identical inputs"""
    if strip_students:
        model = model.strip_students()
        if optimizer_state is not None:
            optimizer_state = None
            logger.warning("dropping optimizer state from a student-stripped checkpoint")
    _ensure_directory(path)

    arrays: Dict[str, Tuple[np.ndarray, str]] = {}
    for name, tensor in model.params.items():
        arrays[name] = (tensor.values, "f32le")
    for name, buffer in model.buffers.items():
        arrays[name] = (buffer, "f32le")
    if optimizer_state is not None:
        for name, array in optimizer_state.arrays().items():
            arrays[name] = (array, "f32le")
    if pca is not None:
        arrays["pca.mean"] = (pca.mean, "f64le")
        arrays["pca.components"] = (pca.components, "f64le")
        arrays["pca.explained_variance"] = (pca.explained_variance, "f64le")

    entries, blob = _blob_entries(arrays)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": entries,
        "blob_bytes": len(blob),
        "optimizer": None if optimizer_state is None else {
            "step": optimizer_state.step,
            "config": asdict(optimizer_state.config),
        },
        "run": run or {},
    }
    _write_atomic(os.path.join(path, BLOB_NAME), blob)
    _write_atomic(os.path.join(path, MANIFEST_NAME), _json_bytes(manifest))
    logger.info(f"saved checkpoint {path} ({format_file_size(path)})")


def _read_manifest(path: str) -> dict:
    manifest_path = os.path.join(path, MANIFEST_NAME)
    try:
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
    except FileNotFoundError:
        raise CheckpointError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as error:
        raise CheckpointError(f"manifest is not valid JSON: {error}") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"format_version {version!r} unsupported, expected {CHECKPOINT_FORMAT_VERSION}")
    for key in ("config", "tensors", "blob_bytes"):
        if key not in manifest:
            raise CheckpointError(f"manifest field {key!r} missing")
    return manifest


def _read_blob_arrays(manifest: dict, blob: bytes) -> Dict[str, np.ndarray]:
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob_bytes: manifest declares {manifest['blob_bytes']}, weights.bin holds {len(blob)}")
    arrays, spans = {}, []
    for entry in manifest["tensors"]:
        name = entry.get("name", "?")
        dtype = BLOB_DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise CheckpointError(f"{name}: dtype {entry.get('dtype')!r} unsupported")
        try:
            shape = tuple(entry["shape"])
            offset, nbytes = entry["offset"], entry["nbytes"]
        except KeyError as error:
            raise CheckpointError(f"{name}: field {error} missing") from None
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{name}: nbytes {nbytes} does not match shape {shape}")
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"{name}: offset {offset} + {nbytes} bytes exceeds blob of {len(blob)} bytes")
        if name in arrays:
            raise CheckpointError(f"{name}: duplicated in manifest")
        spans.append((offset, offset + nbytes, name))
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    spans.sort()
    for (_, end, first), (start, _, second) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"offset: {second} overlaps {first}")
    return arrays


def _read_optimizer(section, arrays: Dict[str, np.ndarray], params: Dict[str, Tensor]) -> AdamWState:
    if not isinstance(section, dict):
        raise CheckpointError(f"optimizer: expected an object, got {type(section).__name__}")
    try:
        step = section["step"]
        config = AdamWConfig(**section["config"])
        config.validate()
        moments = {name: a.astype(np.float32) for name, a in arrays.items() if name.startswith("adamw.")}
        state = AdamWState.from_arrays(moments, step, config)
    except KeyError as error:
        raise CheckpointError(f"optimizer: field {error} missing") from None
    except (TypeError, ConfigError, ContractError) as error:
        raise CheckpointError(f"optimizer: {error}") from None
    if not isinstance(step, int) or step < 0:
        raise CheckpointError(f"optimizer: step must be a non-negative integer, got {step!r}")
    for name in state.names:
        if name not in params:
            raise CheckpointError(f"adamw.m.{name}: no such parameter")
        if state.first[name].shape != params[name].shape or state.second[name].shape != params[name].shape:
            raise CheckpointError(f"adamw.m.{name}: shape does not match the parameter")
    return state


def read_checkpoint(path: str) -> CheckpointBundle:
    """Validate every manifest entry against the config-derived shapes before building the model"""
    manifest = _read_manifest(path)
    try:
        cfg = SdhsiConfig.from_dict(manifest["config"])
        cfg.validate()
    except ConfigError as error:
        raise CheckpointError(f"config: {error}") from None
    blob_path = os.path.join(path, BLOB_NAME)
    if not os.path.exists(blob_path):
        raise CheckpointError(f"weights blob not found: {blob_path}")
    with open(blob_path, "rb") as handle:
        arrays = _read_blob_arrays(manifest, handle.read())

    required = dict(expected_shapes(cfg))
    required.update(buffer_shapes(cfg))
    for name, shape in required.items():
        if name not in arrays:
            raise CheckpointError(f"{name}: missing from manifest")
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(f"{name}: shape {arrays[name].shape} does not match config shape {tuple(shape)}")

    params = {name: Tensor(arrays[name].astype(np.float32), requires_grad=True, name=name)
              for name in expected_shapes(cfg)}
    buffers = {name: arrays[name].astype(np.float32) for name in buffer_shapes(cfg)}
    model = SdhsiModel(cfg, params, buffers)

    optimizer_state = None
    if manifest.get("optimizer"):
        optimizer_state = _read_optimizer(manifest["optimizer"], arrays, params)

    pca = None
    if "pca.components" in arrays:
        pca = PcaModel(arrays["pca.mean"].copy(), arrays["pca.components"].copy(),
                       arrays["pca.explained_variance"].copy())
        if pca.output_bands != cfg.bands:
            raise CheckpointError(f"pca.components: {pca.output_bands} components but config expects B={cfg.bands}")
    return CheckpointBundle(model, optimizer_state, pca, manifest.get("run", {}))


def load_checkpoint(path: str) -> Tuple[SdhsiModel, Optional[AdamWState]]:
    bundle = read_checkpoint(path)
    return bundle.model, bundle.optimizer_state


# CLASSIFICATION MAPS
Palette = Sequence[Tuple[int, int, int]]


def class_palette(num_classes: int) -> Tuple[Tuple[int, int, int], ...]:
    """Black background plus one color per class; evenly spaced hues once the fixed table runs out"""
    if num_classes < 0:
        raise ContractError(f"class count must be non-negative, got {num_classes}")
    if num_classes < len(Theme.MAP_PALETTE):
        return Theme.MAP_PALETTE[:num_classes + 1]
    colors = [(0, 0, 0)]
    for k in range(num_classes):
        # alternate brightness so neighbouring hues stay apart
        value = 1.0 if k % 2 == 0 else 0.7
        red, green, blue = colorsys.hsv_to_rgb(k / num_classes, 0.9, value)
        colors.append((round(red * 255), round(green * 255), round(blue * 255)))
    return tuple(colors)


def _resolve_palette(maps: Sequence[np.ndarray], palette: Optional[Palette], num_classes: Optional[int]) -> Palette:
    if palette is not None:
        return palette
    if num_classes is None:
        num_classes = max((int(np.max(m)) for m in maps if np.size(m)), default=0)
    return class_palette(max(num_classes, 0))


def colorize(predictions: np.ndarray, palette: Optional[Palette] = None, num_classes: Optional[int] = None) -> np.ndarray:
    predictions = np.asarray(predictions)
    if predictions.ndim != 2:
        raise ContractError(f"class map must be H x W, got {predictions.shape}")
    palette = _resolve_palette([predictions], palette, num_classes)
    highest = len(palette) - 1
    if predictions.size and (predictions.min() < 0 or predictions.max() > highest):
        raise ContractError(f"class map values {predictions.min()}..{predictions.max()} exceed palette range 0..{highest}")
    return np.asarray(palette, dtype=np.uint8)[predictions]


def render_map(predictions: np.ndarray, path: str, palette: Optional[Palette] = None,
               num_classes: Optional[int] = None):
    """Write an H x W class map as a binary P6 PPM, one pixel per cell"""
    rgb = colorize(predictions, palette, num_classes)
    directory = os.path.dirname(path)
    if directory:
        _ensure_directory(directory)
    Image.fromarray(rgb, mode="RGB").save(path, format="PPM")


def render_panel(maps: Sequence[np.ndarray], path: str, palette: Optional[Palette] = None,
                 gutter: int = Sizes.PANEL_GUTTER, num_classes: Optional[int] = None):
    """Side-by-side PPM of equally sized class maps separated by white gutters"""
    if not maps:
        raise ContractError("panel needs at least one map")
    height, width = np.asarray(maps[0]).shape
    if any(np.asarray(m).shape != (height, width) for m in maps):
        raise ContractError("panel maps must share one shape")
    palette = _resolve_palette(maps, palette, num_classes)
    panel = Image.new("RGB", (len(maps) * width + (len(maps) - 1) * gutter, height), Theme.GUTTER_COLOR)
    for position, class_map in enumerate(maps):
        panel.paste(Image.fromarray(colorize(class_map, palette), mode="RGB"), (position * (width + gutter), 0))
    directory = os.path.dirname(path)
    if directory:
        _ensure_directory(directory)
    panel.save(path, format="PPM")
