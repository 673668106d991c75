"""Self-describing binary checkpoints.

Layout: 8-byte magic, u32 format version, u32 header length, JSON header
(config hash, metadata, and a table of name/dtype/shape/offset entries
sorted by name), then raw little-endian tensor payloads. Serialization is
canonical, so save -> load -> save reproduces identical bytes. Writes go
to a temp file renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PDIFCKPT"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "|u1"}


class CheckpointError(ValueError):
    pass


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, np_dtype in _DTYPES.items():
        if arr.dtype == np.dtype(np_dtype):
            return tag
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


@dataclass
class Checkpoint:
    config_hash: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def save(self, path) -> None:
        names = sorted(self.tensors)
        table = []
        offset = 0
        payloads = []
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            tag = _dtype_tag(arr)
            raw = arr.tobytes()
            table.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            payloads.append(raw)
            offset += len(raw)
        header = json.dumps(
            {"config_hash": self.config_hash, "meta": self.meta, "tensors": table},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        path = os.fspath(path)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                                   prefix=os.path.basename(path), suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(MAGIC)
                f.write(struct.pack("<II", self.version, len(header)))
                f.write(header)
                for raw in payloads:
                    f.write(raw)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != MAGIC:
                raise CheckpointError(f"bad checkpoint magic {magic!r}")
            version, header_len = struct.unpack("<II", f.read(8))
            if version != VERSION:
                raise CheckpointError(
                    f"checkpoint format version {version} != supported {VERSION}"
                )
            header = json.loads(f.read(header_len).decode("utf-8"))
            payload = f.read()
        tensors = {}
        for entry in header["tensors"]:
            start, n = entry["offset"], entry["nbytes"]
            if start + n > len(payload):
                raise CheckpointError(f"truncated payload for tensor {entry['name']}")
            arr = np.frombuffer(payload[start:start + n],
                                dtype=np.dtype(_DTYPES[entry["dtype"]]))
            tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        return cls(config_hash=header["config_hash"], tensors=tensors,
                   meta=header["meta"], version=version)
