"""On-disk formats shared by every pipeline stage.

Binary tensor files carry a 4-byte magic ``MRT1``, one u8 dimension count,
that many little-endian u32 dims, then float32 values in row-major order.
Config files are plain ``key = value`` text; unknown keys are rejected so a
stale or misspelled config fails loudly instead of being silently ignored.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"MRT1"
MAX_NDIM = 4


class FormatError(ValueError):
    """Raised for malformed tensor or config files."""


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise FormatError(f"tensor rank must be 1..{MAX_NDIM}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("refusing to write non-finite tensor values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing tensor file: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    ndim = data[4]
    if ndim < 1 or ndim > MAX_NDIM:
        raise FormatError(f"{path}: bad rank {ndim}")
    header_end = 5 + 4 * ndim
    dims = struct.unpack(f"<{ndim}I", data[5:header_end])
    count = int(np.prod(dims))
    values = np.frombuffer(data, dtype="<f4", offset=header_end)
    if values.size != count:
        raise FormatError(f"{path}: expected {count} values, found {values.size}")
    return values.reshape(dims).astype(np.float32)


def write_config(path: str | Path, values: Mapping[str, object]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {values[key]}" for key in values]
    path.write_text("\n".join(lines) + "\n")


def read_config(path: str | Path, allowed_keys: Iterable[str]) -> dict[str, str]:
    """Parse ``key = value`` lines; keys outside `allowed_keys` are errors."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file: {path}")
    allowed = set(allowed_keys)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in allowed:
            raise FormatError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate config key {key!r}")
        out[key] = value.strip()
    return out


def hash_bytes(*chunks: bytes) -> str:
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(chunk)
    return digest.hexdigest()


def hash_arrays(arrays: Iterable[np.ndarray]) -> str:
    digest = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def hash_config(values: Mapping[str, object]) -> str:
    text = "\n".join(f"{k}={values[k]}" for k in sorted(values))
    return hash_bytes(text.encode())


def worker_count(requested: int | None = None) -> int:
    """Worker cap for parallel stages; MTDTL_THREADS bounds any request."""
    cap_raw = os.environ.get("MTDTL_THREADS", "")
    cap = None
    if cap_raw:
        try:
            cap = max(1, int(cap_raw))
        except ValueError as exc:
            raise FormatError(f"MTDTL_THREADS must be an integer, got {cap_raw!r}") from exc
    if requested is None:
        requested = cap if cap is not None else 1
    if cap is not None:
        requested = min(requested, cap)
    return max(1, requested)


def require_file(path: str | Path, role: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {role}: {path}")
    return path
