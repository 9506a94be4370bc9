"""On-disk formats: PNG images, a versioned array container, JSONL logs.

The container is a single file: 4-byte magic, uint32 version, uint64 header
length, a UTF-8 JSON header, then the raw little-endian array buffers in
header order. Everything is explicit so a rerun of the same command writes
byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from . import nn
from .imagecore import from_uint8, to_uint8
from .mae import MAEConfig, MAEModel, init_model

MAGIC = b"CMAE"
VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_png(path, img: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit PNG without metadata chunks."""
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr)


# ---------------------------------------------------------------------------
# Array container
# ---------------------------------------------------------------------------

def save_arrays(path, header: dict, arrays: dict) -> None:
    """Write named float64/int64 arrays with a JSON header."""
    names = sorted(arrays)
    index = []
    buffers = []
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.kind == "f":
            a = a.astype("<f8")
        elif a.dtype.kind in "iub":
            a = a.astype("<i8")
        else:
            raise ValueError(f"array {name!r} has unsupported dtype {a.dtype}")
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        buffers.append(a.tobytes())
    full = dict(header)
    full["arrays"] = index
    blob = json.dumps(full, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_arrays(path):
    """Read a container back as (header, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an array container (magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version > VERSION:
            raise ValueError(
                f"{path}: container version {version} is newer than supported {VERSION}"
            )
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header.pop("arrays"):
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header, arrays


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path, model: MAEModel, epoch: int, optimizer: nn.AdamW | None = None, extra: dict | None = None
) -> None:
    header = {
        "kind": "model-checkpoint",
        "config": model.config.to_dict(),
        "epoch": epoch,
        "opt_t": optimizer.t if optimizer is not None else None,
    }
    if extra:
        header["extra"] = extra
    arrays = dict(model.params)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    save_arrays(path, header, arrays)


def load_checkpoint(path, learning_rate: float | None = None, weight_decay: float = 0.0):
    """Rebuild (model, epoch, optimizer-or-None) from a checkpoint file.

    Positional tables are reconstructed from the stored config. An optimizer
    is returned only when the checkpoint holds optimizer state and a
    learning rate is supplied.
    """
    header, arrays = load_arrays(path)
    if header.get("kind") != "model-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    config = MAEConfig.from_dict(header["config"])
    model = init_model(config)
    for name in model.params:
        if name not in arrays:
            raise ValueError(f"{path}: checkpoint is missing parameter {name!r}")
        if arrays[name].shape != model.params[name].shape:
            raise ValueError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, "
                f"expected {model.params[name].shape}"
            )
        model.params[name] = arrays[name].astype(np.float64)
    optimizer = None
    if header.get("opt_t") is not None and learning_rate is not None:
        optimizer = nn.AdamW(learning_rate, weight_decay)
        opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
        optimizer.load_state_arrays(opt_arrays, int(header["opt_t"]))
    return model, int(header["epoch"]), optimizer


# ---------------------------------------------------------------------------
# JSONL logs
# ---------------------------------------------------------------------------

def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True))
        fh.write("\n")


def read_jsonl(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
