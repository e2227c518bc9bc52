"""Single-file checkpoints: JSON header followed by raw little-endian float32 arrays.

Layout::

    b"WPCKPT01"                 8-byte magic
    uint64 (little-endian)      header length in bytes
    header                      UTF-8 JSON, sorted keys, no whitespace
    payload                     arrays back to back, C order, <f4

The header's ``tensors`` list gives name, shape and byte offset (relative to
the payload start) of each array.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"WPCKPT01"
_F32 = np.dtype("<f4")


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def encode_checkpoint(header: dict, arrays) -> bytes:
    header = dict(_to_jsonable(header))
    tensors, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype=_F32)).tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header["tensors"] = tensors
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if data[:8] != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    if len(data) < 16:
        raise DataError("checkpoint truncated inside the header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise DataError(f"checkpoint truncated: header needs {hlen} bytes")
    header = json.loads(data[16:16 + hlen].decode())
    payload = memoryview(data)[16 + hlen:]
    arrays = OrderedDict()
    for t in header.pop("tensors"):
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + count * _F32.itemsize
        if end > len(payload):
            raise DataError(f"checkpoint truncated inside tensor {t['name']!r}")
        arrays[t["name"]] = np.frombuffer(payload[t["offset"]:end], dtype=_F32).reshape(t["shape"]).copy()
    return header, arrays


def save_checkpoint(path, header: dict, arrays) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(header, arrays))
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    return decode_checkpoint(path.read_bytes())


def rng_state_to_json(rng: np.random.Generator) -> dict:
    return _to_jsonable(rng.bit_generator.state)


def rng_from_json(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    bitgen = getattr(np.random, name)()
    st = dict(state)
    inner = {k: (np.array(v, dtype=np.uint64) if isinstance(v, list) else v) for k, v in st["state"].items()}
    st["state"] = inner
    if isinstance(st.get("buffer"), list):
        st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    bitgen.state = st
    return np.random.Generator(bitgen)
