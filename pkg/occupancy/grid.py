"""Semantic occupancy grids and the OGRD file format.

OGRD layout (little-endian): magic ``OGRD``, version u32, H W D u32, voxel
size 3 x f32, origin 3 x f32, class count u16, then per class a u8 name
length, the UTF-8 name and a u8 dynamic flag, then H*W*D u8 class ids in
row-major (h, w, d) order.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from exceptions import ConfigurationError, DataError, MissingArtifactError, ParseError

logger = logging.getLogger(__name__)

MAGIC = b"OGRD"
VERSION = 1
FREE = 0


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names with their dynamic flags; id 0 is free space."""

    names: Tuple[str, ...]
    dynamic: Tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) != len(self.dynamic):
            raise ConfigurationError("class names and dynamic flags differ in length")
        if not self.names:
            raise ConfigurationError("class table needs at least the free class")
        if self.dynamic[FREE]:
            raise ConfigurationError("class id 0 is free space and cannot be dynamic")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"duplicate class names in {self.names}")
        if len(self.names) > 255:
            raise ConfigurationError("at most 255 classes fit in u8 voxel ids")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, bool]]) -> "ClassTable":
        pairs = list(pairs)
        return cls(tuple(n for n, _ in pairs), tuple(bool(d) for _, d in pairs))

    def __len__(self) -> int:
        return len(self.names)

    def dynamic_ids(self) -> np.ndarray:
        return np.flatnonzero(self.dynamic)

    def static_ids(self) -> np.ndarray:
        return np.array([i for i, d in enumerate(self.dynamic) if not d and i != FREE], dtype=np.int64)

    def dynamic_lookup(self) -> np.ndarray:
        return np.asarray(self.dynamic, dtype=bool)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown class {name!r}, expected one of {list(self.names)}")


DEFAULT_CLASSES = ClassTable.from_pairs(
    [
        ("free", False),
        ("road", False),
        ("building", False),
        ("vegetation", False),
        ("car", True),
        ("pedestrian", True),
    ]
)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    classes: np.ndarray
    voxel_size: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    class_table: ClassTable

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 3:
            raise DataError(f"occupancy grid must be 3-D, got shape {arr.shape}")
        if arr.size and int(arr.max()) >= len(self.class_table):
            bad = np.unravel_index(int(np.argmax(arr >= len(self.class_table))), arr.shape)
            raise DataError(
                f"class id {int(arr[bad])} at voxel {tuple(int(i) for i in bad)} exceeds "
                f"class table of {len(self.class_table)}"
            )
        object.__setattr__(self, "classes", np.ascontiguousarray(arr, dtype=np.uint8))
        object.__setattr__(self, "voxel_size", tuple(float(np.float32(v)) for v in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(np.float32(v)) for v in self.origin))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.classes.shape)

    def with_classes(self, classes: np.ndarray) -> "OccupancyGrid":
        return dataclasses.replace(self, classes=classes)

    def occupied(self) -> np.ndarray:
        return self.classes != FREE

    def dynamic_voxels(self) -> np.ndarray:
        return self.class_table.dynamic_lookup()[self.classes]

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.voxel_size == other.voxel_size
            and self.origin == other.origin
            and self.class_table == other.class_table
            and np.array_equal(self.classes, other.classes)
        )


def empty_grid(
    dims: Sequence[int],
    voxel_size: Sequence[float],
    origin: Sequence[float],
    class_table: ClassTable = DEFAULT_CLASSES,
) -> OccupancyGrid:
    return OccupancyGrid(np.zeros(tuple(dims), dtype=np.uint8), tuple(voxel_size), tuple(origin), class_table)


def encode_grid(grid: OccupancyGrid) -> bytes:
    parts: List[bytes] = [
        struct.pack("<4sI", MAGIC, VERSION),
        struct.pack("<3I", *grid.dims),
        struct.pack("<3f", *grid.voxel_size),
        struct.pack("<3f", *grid.origin),
        struct.pack("<H", len(grid.class_table)),
    ]
    for name, dyn in zip(grid.class_table.names, grid.class_table.dynamic):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", int(dyn)))
    parts.append(grid.classes.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise ParseError(f"grid file truncated while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_grid(data: bytes) -> OccupancyGrid:
    reader = _Reader(data)
    magic, version = reader.unpack("<4sI", "header")
    if magic != MAGIC:
        raise ParseError(f"bad grid magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported grid version {version}", 4)
    dims = reader.unpack("<3I", "dims")
    voxel_size = reader.unpack("<3f", "voxel size")
    origin = reader.unpack("<3f", "origin")
    (count,) = reader.unpack("<H", "class count")
    pairs = []
    for _ in range(count):
        (length,) = reader.unpack("<B", "class name length")
        name = reader.take(length, "class name").decode("utf-8")
        (flag,) = reader.unpack("<B", "dynamic flag")
        pairs.append((name, bool(flag)))
    payload_at = reader.offset
    n_voxels = int(np.prod(dims))
    ids = np.frombuffer(reader.take(n_voxels, "class ids"), dtype=np.uint8)
    if ids.size and int(ids.max()) >= count:
        index = int(np.argmax(ids >= count))
        raise ParseError(f"class id {int(ids[index])} >= class count {count}", payload_at + index)
    try:
        table = ClassTable.from_pairs(pairs)
    except ConfigurationError as exc:
        raise ParseError(f"invalid class table: {exc.detail}", payload_at)
    return OccupancyGrid(ids.reshape(dims).copy(), voxel_size, origin, table)


def grid_write(grid: OccupancyGrid, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_grid(grid))
    return path


def grid_read(path: Union[str, Path]) -> OccupancyGrid:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    grid = decode_grid(path.read_bytes())
    logger.debug("read grid %s from %s", grid.dims, path)
    return grid
