"""Flat tensor archive: ``tensors.bin`` + ``tensors.json``.

``tensors.bin`` is the concatenation of each tensor's raw little-endian bytes
in C order. ``tensors.json`` maps name -> {dtype, shape, offset, nbytes} and
carries a sha256 of the binary blob, so a truncated or altered file is
rejected before any tensor is handed out.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

ARCHIVE_VERSION = 1
_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "|u1"),
}
_BY_TORCH = {v[0]: k for k, v in _DTYPES.items()}


class ArchiveError(RuntimeError):
    pass


def tensor_bytes(t: torch.Tensor) -> bytes:
    name = _BY_TORCH.get(t.dtype)
    if name is None:
        raise ArchiveError(f"unsupported dtype {t.dtype}")
    return t.detach().cpu().contiguous().numpy().astype(_DTYPES[name][1], copy=False).tobytes()


def checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(tensor_bytes(t)).hexdigest()


def save_tensors(directory, tensors: dict[str, torch.Tensor]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        t = tensors[name]
        raw = tensor_bytes(t)
        index[name] = {"dtype": _BY_TORCH[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    (d / "tensors.bin").write_bytes(blob)
    meta = {"version": ARCHIVE_VERSION, "sha256": hashlib.sha256(blob).hexdigest(), "tensors": index}
    (d / "tensors.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_tensors(directory) -> dict[str, torch.Tensor]:
    d = Path(directory)
    try:
        meta = json.loads((d / "tensors.json").read_text())
        blob = (d / "tensors.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"cannot read tensor archive in {d}: {exc}") from exc
    if meta.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"archive version {meta.get('version')} != {ARCHIVE_VERSION}")
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ArchiveError(f"tensor archive in {d} is truncated or corrupt (checksum mismatch)")
    out = {}
    for name, e in meta["tensors"].items():
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise ArchiveError(f"tensor {name} runs past end of archive")
        tdtype, npdtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob[e["offset"]:end], dtype=npdtype).reshape(e["shape"])
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).to(tdtype)
    return out
