"""Single-file binary checkpoints.

Layout: 8-byte magic (carries the format version), uint32 header length, a
JSON header naming the kind, free-form metadata and the tensor shapes, then
every tensor as little-endian float32 in declaration order.
"""

import json
import struct
from pathlib import Path

import numpy as np

from echotrap.errors import DataError

MAGIC = b"ETCKPT01"


def save_checkpoint(path, kind: str, meta: dict, arrays) -> None:
    arrays = list(arrays)
    header = json.dumps(
        {
            "kind": kind,
            "meta": meta,
            "tensors": [{"name": name, "shape": list(np.shape(a))} for name, a in arrays],
        },
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (kind, meta, ordered {name: float64 array})."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise DataError(f"not an echotrap checkpoint: {path}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}") from exc
    offset = 12 + header_len
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"checkpoint {path} is truncated at tensor {entry['name']!r}")
        values = np.frombuffer(chunk, dtype="<f4").astype(np.float64)
        tensors[entry["name"]] = values.reshape(entry["shape"])
        offset += nbytes
    return header["kind"], header["meta"], tensors
