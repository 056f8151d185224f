"""OW4D parameter checkpoints.

Layout (little-endian): magic ``OW4D``, version u32, then one record per tensor
sorted by name: name length u32, UTF-8 name, rank u32, rank x u32 dims, f32
payload. Records run to end of file.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from exceptions import MissingArtifactError, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"OW4D"
VERSION = 1


def encode_checkpoint(state: Dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<4sI", MAGIC, VERSION)]
    for name in sorted(state):
        values = np.asarray(state[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{values.ndim}I", values.ndim, *values.shape))
        parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    if len(data) < 8:
        raise ParseError("checkpoint header truncated", len(data))
    magic, version = struct.unpack_from("<4sI", data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    offset = 8
    state: Dict[str, np.ndarray] = {}

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(data):
            raise ParseError(f"checkpoint truncated, needed {size} bytes", offset)
        chunk = data[offset : offset + size]
        offset += size
        return chunk

    while offset < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return state


def save_checkpoint(state: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(state))
    logger.info("wrote checkpoint with %d tensors to %s", len(state), path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    return decode_checkpoint(path.read_bytes())
