"""Single-file checkpoint format.

Layout::

    b"HBCKPT01"                      8-byte magic
    uint64 little-endian             length of the JSON header in bytes
    JSON header (UTF-8)              {"architecture": ..., "extra": ...,
                                      "tensors": [{"name", "shape", "offset", "nbytes"}]}
    raw tensor data                  little-endian float32, C order, concatenated

Offsets are relative to the start of the data section. A SHA-256 of the data
section is stored in the header and verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"HBCKPT01"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, tensors: Dict[str, np.ndarray], architecture: dict, extra: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "architecture": architecture,
        "extra": extra or {},
        "tensors": entries,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict, dict]:
    """Returns ``(tensors, architecture, extra)``; raises :class:`CheckpointError` on any corruption."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    data = raw[16 + hlen:]
    if hashlib.sha256(data).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: data checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        buf = data[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).copy()
    return tensors, header["architecture"], header["extra"]


def module_tensors(module, prefix: str = "") -> Dict[str, np.ndarray]:
    """Float parameters and buffers of a torch module (integer step counters are skipped)."""
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[prefix + name] = t.detach().cpu().numpy()
    return out


def load_module_tensors(module, tensors: Dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    state = module.state_dict()
    missing = []
    for name, t in state.items():
        if not t.is_floating_point():
            continue
        key = prefix + name
        if key not in tensors:
            missing.append(key)
            continue
        arr = tensors[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {tuple(t.shape)}")
        state[name] = torch.from_numpy(arr.copy()).to(t.dtype)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:5]}")
    module.load_state_dict(state)
