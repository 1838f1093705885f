"""Binary checkpoint format shared by the trainers and the CLI.

Layout: magic ``CXRC``, version u16 LE, u32 LE config-blob length plus a
UTF-8 JSON blob, then one record per parameter: u32 name length, name
bytes, u32 rank, rank u32 dims, float32 LE payload. Records are written in
model parameter order and read back in order until EOF.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CXRC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or corrupt checkpoint."""


def save_checkpoint(path: str, config: dict,
                    params: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"corrupt checkpoint {self.path}: truncated {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.blob)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    version = r.u16("version")
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint {path}: unsupported version {version}")
    cfg_len = r.u32("config length")
    try:
        config = json.loads(r.take(cfg_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(
            f"corrupt checkpoint {path}: bad config blob ({e})") from e
    params: dict[str, np.ndarray] = {}
    while not r.exhausted:
        name_len = r.u32("record name length")
        try:
            name = r.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(
                f"corrupt checkpoint {path}: bad record name") from e
        rank = r.u32(f"record {name}: rank")
        if rank > 8:
            raise CheckpointError(
                f"corrupt checkpoint {path}: record {name}: rank {rank}")
        dims = tuple(r.u32(f"record {name}: dim") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(4 * count, f"record {name}: payload")
        if name in params:
            raise CheckpointError(
                f"corrupt checkpoint {path}: duplicate record {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return config, params
