"""Binary checkpoint bundles: named tensors plus a JSON trailer.

Layout (little-endian):
    magic "TNSRBNDL" | u32 version | u32 tensor count
    per tensor: u32 name length | name utf-8 | u8 dtype code | u8 rank |
                u32 dims[rank] | raw bytes
    JSON trailer to end of file: config snapshot, per-tensor flags
    (frozen / lr group), rng states, step counter.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MAGIC = b"TNSRBNDL"
VERSION = 1

_DTYPES = {0: np.float32, 1: np.int64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}

LR_GROUPS = ("base", "backbone_0.1x")


@dataclass
class CheckpointBundle:
    tensors: dict
    flags: dict = field(default_factory=dict)  # name -> {frozen, lr_group}
    config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    step: int = 0
    version: int = VERSION

    def namespace(self, prefix):
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, bundle: CheckpointBundle):
    names = list(bundle.tensors)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(bundle.tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                arr = arr.astype(np.float32)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        trailer = {
            "config": bundle.config,
            "flags": bundle.flags,
            "rng": bundle.rng,
            "step": bundle.step,
        }
        f.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"checkpoint {path}: bad magic")
    offset = len(MAGIC)
    version, count = struct.unpack_from("<II", blob, offset)
    if version != VERSION:
        raise ConfigError(f"checkpoint {path}: unsupported version {version}")
    offset += 8
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype_code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        dtype = _DTYPES.get(dtype_code)
        if dtype is None:
            raise ConfigError(f"checkpoint {path}: unknown dtype code {dtype_code}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(dtype).itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)),
                            offset=offset).reshape(dims).copy()
        offset += nbytes
        tensors[name] = arr
    trailer = json.loads(blob[offset:].decode("utf-8")) if offset < len(blob) else {}
    return CheckpointBundle(
        tensors=tensors,
        flags=trailer.get("flags", {}),
        config=trailer.get("config", {}),
        rng=trailer.get("rng", {}),
        step=int(trailer.get("step", 0)),
        version=version,
    )
