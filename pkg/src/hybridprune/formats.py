"""On-disk formats: checkpoint container and calibration token files.

Checkpoint layout::

    u64 LE header length | UTF-8 JSON header | tensor payloads (f64 LE)

The header holds ``config``, ``tensors`` (name -> dtype, shape, offset,
nbytes; offsets relative to the end of the header, in directory order) and
an optional ``manifest``.

Calibration layout::

    b"HPTK" | u8 version | u64 LE sequence count |
    per sequence: u64 LE length, then length x u32 LE token ids
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model import HybridModel, ModelConfig

CALIB_MAGIC = b"HPTK"
CALIB_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: HybridModel, manifest: dict | None = None) -> bytes:
    directory = {}
    payloads = []
    offset = 0
    # payloads follow the (sorted) order in which the directory is serialized
    for name, value in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        arr = np.ascontiguousarray(np.asarray(getattr(value, "data", value)), dtype="<f8")
        raw = arr.tobytes()
        directory[name] = {"dtype": "f64", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    header = {"config": model.config.to_dict(), "tensors": directory}
    if manifest is not None:
        header["manifest"] = manifest
    head = _canonical_json(header)
    return struct.pack("<Q", len(head)) + head + b"".join(payloads)


def save_checkpoint(path: str | Path, model: HybridModel, manifest: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, manifest))


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise FormatError(f"{path}: truncated header length")
        (n,) = struct.unpack("<Q", raw)
        head = fh.read(n)
    if len(head) != n:
        raise FormatError(f"{path}: truncated header")
    return json.loads(head.decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[HybridModel, dict | None]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short")
    (n,) = struct.unpack_from("<Q", blob, 0)
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header") from exc
    base = 8 + n
    state = {}
    if "tensors" not in header or "config" not in header:
        raise FormatError(f"{path}: header lacks config or tensors")
    for name, entry in header["tensors"].items():
        if entry["dtype"] != "f64":
            raise FormatError(f"{name}: unsupported dtype {entry['dtype']}")
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(blob):
            raise FormatError(f"{name}: payload runs past end of file")
        state[name] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    return HybridModel.from_state_dict(config, state), header.get("manifest")


def write_calibration(path: str | Path, sequences: Sequence[Sequence[int]]) -> None:
    parts = [CALIB_MAGIC, struct.pack("<BQ", CALIB_VERSION, len(sequences))]
    for seq in sequences:
        arr = np.asarray(seq)
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise FormatError("token ids must fit in u32")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_calibration(path: str | Path) -> list[np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CALIB_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<BQ", blob, 4)
    if version != CALIB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 13
    out = []
    for _ in range(count):
        if pos + 8 > len(blob):
            raise FormatError(f"{path}: truncated sequence header")
        (length,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        end = pos + 4 * length
        if end > len(blob):
            raise FormatError(f"{path}: truncated sequence payload")
        out.append(np.frombuffer(blob[pos:end], dtype="<u4").astype(np.int64))
        pos = end
    return out
