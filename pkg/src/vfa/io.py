"""Checkpoint and frame-tensor file formats.

Checkpoint: a JSON object
    {"format": "vfa-checkpoint", "version": 1, "config": {...model config...},
     "meta": {...}, "params": [{"name", "shape", "data"}, ...]}
where ``data`` is the row-major flattening of the array. Floats are written
with ``repr`` precision so a save/load round trip is exact.

Frames directory: ``manifest.json`` with {"T", "H", "W", "channels", "dtype"}
next to ``frames.raw`` holding the (T, H, W, channels) array in row-major
order, native little-endian. A bare ``.npy`` file is also accepted wherever
a video is read.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import FluNetParams, ModelConfig, init_params

CHECKPOINT_FORMAT = "vfa-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
RAW_FILE = "frames.raw"
FRAME_DTYPES = ("float32", "float64", "uint8")


class FormatError(ValueError):
    """A file does not match the expected layout."""


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def load_json(path) -> dict:
    def reject(token):
        raise FormatError(f"{path}: non-standard JSON constant {token}")
    try:
        return json.loads(Path(path).read_text(), parse_constant=reject)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: FluNetParams, config: ModelConfig, meta: dict | None = None) -> None:
    entries = [{"name": n, "shape": list(t.shape), "data": t.data.ravel().tolist()}
               for n, t in params.named_parameters()]
    dump_json({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "config": config.to_dict(), "meta": meta or {}, "params": entries}, path)


def load_checkpoint(path, config: ModelConfig | None = None) -> tuple[FluNetParams, ModelConfig, dict]:
    doc = load_json(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    stored = ModelConfig.from_dict(doc["config"])
    if config is not None and config != stored:
        raise FormatError(f"{path}: checkpoint was saved for a different model config")
    params = init_params(stored, 0)
    state = {}
    for e in doc["params"]:
        arr = np.asarray(e["data"], dtype=np.float64)
        shape = tuple(e["shape"])
        if arr.size != int(np.prod(shape)):
            raise FormatError(f"{path}: {e['name']} has {arr.size} values for shape {shape}")
        state[e["name"]] = arr.reshape(shape)
    for name, t in params.named_parameters():
        if name in state and state[name].shape != t.shape:
            raise FormatError(f"{path}: {name} shape {state[name].shape}, expected {t.shape}")
    try:
        params.load_state(state)
    except KeyError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return params, stored, doc.get("meta", {})


def load_model_config(path) -> ModelConfig:
    doc = load_json(path)
    return ModelConfig.from_dict(doc.get("model", doc))


# ---------------------------------------------------------------- frames


def write_frames(path, video: np.ndarray, dtype: str = "float64") -> None:
    video = np.asarray(video)
    if video.ndim != 4:
        raise FormatError(f"video must be (T, H, W, channels), got shape {video.shape}")
    if dtype not in FRAME_DTYPES:
        raise FormatError(f"unsupported dtype {dtype}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, h, w, ch = video.shape
    dump_json({"T": t, "H": h, "W": w, "channels": ch, "dtype": dtype}, path / MANIFEST)
    np.ascontiguousarray(video, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path / RAW_FILE)


def read_frames(path) -> np.ndarray:
    """Video as float64 (T, H, W, channels); uint8 data is scaled to [0, 1]."""
    path = Path(path)
    if path.is_file() and path.suffix == ".npy":
        video = np.load(path, allow_pickle=False)
        if video.ndim != 4:
            raise FormatError(f"{path}: expected a 4-D array, got shape {video.shape}")
        return _to_float(video)
    if not path.is_dir():
        raise FileNotFoundError(f"{path}: not a frames directory or .npy file")
    m = load_json(path / MANIFEST)
    try:
        shape = (int(m["T"]), int(m["H"]), int(m["W"]), int(m["channels"]))
        dtype = str(m["dtype"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad manifest: {exc}") from exc
    if dtype not in FRAME_DTYPES:
        raise FormatError(f"{path}: unsupported dtype {dtype}")
    raw = np.fromfile(path / RAW_FILE, dtype=np.dtype(dtype).newbyteorder("<"))
    if raw.size != int(np.prod(shape)):
        raise FormatError(f"{path}: {raw.size} values, manifest says {shape}")
    return _to_float(raw.reshape(shape))


def _to_float(video: np.ndarray) -> np.ndarray:
    if video.dtype == np.uint8:
        return video.astype(np.float64) / 255.0
    return video.astype(np.float64)
