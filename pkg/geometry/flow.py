"""BEV flow fields, their frame transform and the OFLW file format.

Flow maps are indexed on the destination (future) BEV grid and hold metric
displacements. A field starts in the current ego frame and is moved into the
future frame exactly once by ``transform_flow``.

OFLW layout (little-endian): magic ``OFLW``, version u32, N_f H W u32, frame
tag u8 (0 current, 1 future), then f32 payload in (n, h, w, 2) order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from exceptions import DataError, DimensionError, MissingArtifactError, ParseError, StateError
from geometry.pose import EgoPose
from tensor.core import Tensor, as_tensor, stack
from tensor.ops import matmul

logger = logging.getLogger(__name__)

MAGIC = b"OFLW"
VERSION = 1
CURRENT = "current"
FUTURE = "future"
_TAGS = {CURRENT: 0, FUTURE: 1}


@dataclass(frozen=True)
class FlowField:
    flow: Tensor
    frame: str = CURRENT

    def __post_init__(self):
        flow = as_tensor(self.flow)
        if flow.ndim != 4 or flow.shape[-1] != 2:
            raise DimensionError(f"flow must be [N_f, H, W, 2], got {flow.shape}")
        if self.frame not in _TAGS:
            raise StateError(f"unknown flow frame tag {self.frame!r}")
        object.__setattr__(self, "flow", flow)

    @property
    def num_frames(self) -> int:
        return self.flow.shape[0]

    def values(self) -> np.ndarray:
        return self.flow.values


def current_to_future(current: EgoPose, future: EgoPose) -> EgoPose:
    """The transform taking current-frame coordinates into the future frame."""
    return future.between(current)


def transform_flow(flow: FlowField, current: EgoPose, future: Union[EgoPose, Sequence[EgoPose]]) -> FlowField:
    """Rotate and offset each frame's flow by its current-to-future transform.

    ``future`` is one pose shared by every frame or one pose per frame.
    """
    if flow.frame != CURRENT:
        raise StateError("flow is already expressed in the future frame")
    futures = [future] * flow.num_frames if isinstance(future, EgoPose) else list(future)
    if len(futures) != flow.num_frames:
        raise DimensionError(f"{len(futures)} future poses for {flow.num_frames} flow frames")
    if not np.all(np.isfinite(flow.values())):
        raise DataError("flow contains non-finite values")
    frames = []
    for k, pose in enumerate(futures):
        motion = current_to_future(current, pose)
        rotated = matmul(flow.flow[k], motion.rotation().T)
        frames.append(rotated + motion.translation())
    return FlowField(stack(frames, axis=0), FUTURE)


def encode_flow(flow: FlowField) -> bytes:
    n, h, w, _ = flow.flow.shape
    header = struct.pack("<4sI3IB", MAGIC, VERSION, n, h, w, _TAGS[flow.frame])
    return header + np.ascontiguousarray(flow.values(), dtype="<f4").tobytes()


def decode_flow(data: bytes) -> FlowField:
    size = struct.calcsize("<4sI3IB")
    if len(data) < size:
        raise ParseError("flow header truncated", len(data))
    magic, version, n, h, w, tag = struct.unpack_from("<4sI3IB", data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad flow magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported flow version {version}", 4)
    names = {v: k for k, v in _TAGS.items()}
    if tag not in names:
        raise ParseError(f"unknown flow frame tag {tag}", size - 1)
    count = n * h * w * 2
    if len(data) < size + 4 * count:
        raise ParseError("flow payload truncated", len(data))
    values = np.frombuffer(data, dtype="<f4", count=count, offset=size).reshape(n, h, w, 2)
    return FlowField(Tensor(values.copy()), names[tag])


def flow_write(flow: FlowField, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_flow(flow))
    return path


def flow_read(path: Union[str, Path]) -> FlowField:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path)
    return decode_flow(path.read_bytes())
