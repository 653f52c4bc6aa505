"""Binary checkpoint files.

Layout (little endian)::

    b"FMAP" | u32 version | u32 n | n bytes of UTF-8 JSON config
    u32 record count, then per record:
        u32 name length | name | u8 section (0 live, 1 ema) | u32 ndim | ndim x u32 dims | float32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FMAP"
VERSION = 1
LIVE, EMA = 0, 1


def save_checkpoint(
    path: str | Path, config: dict, live: dict[str, np.ndarray], ema: dict[str, np.ndarray] | None = None
) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    records = [(LIVE, k, v) for k, v in live.items()] + [(EMA, k, v) for k, v in (ema or {}).items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(records)))
        for section, name, arr in records:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<BI", section, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (config, live weights, ema weights) with float32 arrays."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a FlowMaps checkpoint (bad magic {data[:4]!r})")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
        pos = 12
        config = json.loads(data[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        sections: tuple[dict, dict] = ({}, {})
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + ln].decode("utf-8")
            pos += ln
            section, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            if section not in (LIVE, EMA):
                raise FormatError(f"{path}: bad section {section} for {name!r}")
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            sections[section][name] = arr
        if pos != len(data):
            raise FormatError(f"{path}: {len(data) - pos} unexpected trailing bytes")
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return config, sections[LIVE], sections[EMA]
