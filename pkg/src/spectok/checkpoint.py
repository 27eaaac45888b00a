"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..8    magic b"SPTKCKPT"
    bytes 8..12   uint32 format version (currently 1)
    bytes 12..20  uint64 byte length of the JSON header
    header        UTF-8 JSON: {"format_version", "meta", "tensors"}
    data          raw little-endian tensor bytes, concatenated in header order

Each entry in header["tensors"] holds name, dtype (numpy little-endian code
such as "<f4"), shape, offset (relative to the start of the data section) and
nbytes. header["meta"] carries whatever JSON the caller passed, which for
trained models includes the encoder/tokenizer/spectrogram configs needed to
rebuild the module. Round-trips are bitwise for the tensor payload.

See docs/formats.md for the written-down spec of this layout.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .audio import SpectrogramConfig
from .model import EncoderConfig, SpectroTemporalClassifier, build_model
from .tokenizer import ClipConfig, PatchConfig

MAGIC = b"SPTKCKPT"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _to_le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Write named arrays plus a JSON-serializable meta dict."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = _to_le(np.asarray(arr))
        code = arr.dtype.str
        if code not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {code} for tensor {name!r}")
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": entries}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read back (tensors, meta). Rejects bad magic or unknown versions."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for entry in header["tensors"]:
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def model_meta(model: SpectroTemporalClassifier, extra: dict[str, Any] | None = None) -> dict:
    """Meta dict describing how to rebuild the model."""
    tok = model.tokenizer
    meta: dict[str, Any] = {
        "encoder": dataclasses.asdict(model.encoder_config),
        "n_mels": tok.n_mels,
        "n_frames": tok.n_frames,
    }
    if hasattr(tok, "clip"):
        meta["tokenizer"] = {"family": "clip", **dataclasses.asdict(tok.clip)}
    else:
        meta["tokenizer"] = {"family": "patch", "p": tok.patch.p}
    if extra:
        meta.update(extra)
    return meta


def save_model(
    path: str | Path, model: nn.Module, extra_meta: dict[str, Any] | None = None
) -> None:
    tensors = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    save_tensors(path, tensors, model_meta(model, extra_meta))


def load_model(path: str | Path) -> tuple[SpectroTemporalClassifier, dict[str, Any]]:
    """Rebuild the model from its meta and load its weights."""
    tensors, meta = load_tensors(path)
    enc = EncoderConfig(**meta["encoder"])
    tok = dict(meta["tokenizer"])
    family = tok.pop("family")
    if family == "clip":
        model = build_model(enc, meta["n_mels"], meta["n_frames"], clip=ClipConfig(**tok))
    elif family == "patch":
        model = build_model(enc, meta["n_mels"], meta["n_frames"], patch=PatchConfig(**tok))
    else:
        raise CheckpointError(f"unknown tokenizer family {family!r}")
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"checkpoint/model tensor name mismatch: {sorted(missing)}")
    model.load_state_dict(state)
    return model, meta


def spectrogram_config_from_meta(meta: dict[str, Any]) -> SpectrogramConfig | None:
    cfg = meta.get("spectrogram")
    if cfg is None:
        return None
    return SpectrogramConfig(**cfg)
