"""Binary checkpoint format.

Little-endian layout: magic `TRDR`, version u32, tensor count u32, then per
tensor: name length u32, UTF-8 name, rank u32, dims u32 each, float32
payload. Tensors are written in sorted-name order so files are
byte-reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRDR"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a TRDR checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * size)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors


def pack_text(text: str) -> np.ndarray:
    """Text as a float32 codepoint vector (fits the tensor-only format)."""
    return np.array([float(ord(c)) for c in text], dtype=np.float32)


def unpack_text(arr: np.ndarray) -> str:
    return "".join(chr(int(round(float(x)))) for x in np.asarray(arr).reshape(-1))
