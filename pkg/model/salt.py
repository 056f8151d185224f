"""Spatial-aware local-temporal attention blocks.

Tokens are ``[T, H, W, C]`` maps. Query/key/value come from 3x3 convolutions
of each frame, attention runs along T at every spatial location, and the
feed-forward part is a pair of 3-D convolutions over (T, H, W).

A block may receive several token segments (occupancy frames, image frames,
decoder queries). Normalization, projections and the feed-forward path run
per segment; only attention looks across segments, under an optional mask.
Segments listed as frame-local run the feed-forward path one frame at a time,
so decoder queries never mix along T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from exceptions import ConfigurationError, DimensionError
from tensor.core import Tensor, concat, getitem, reshape, transpose
from tensor.nn import Conv, GroupNorm, Module, parameter
from tensor.ops import multi_head_attention, silu

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean ``[L, L]`` matrix over the concatenated frame sequence; True means attendable."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=bool)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"attention mask must be square, got {m.shape}")
        if not m.any(axis=1).all():
            raise ConfigurationError("every attention mask row needs at least one attendable key")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def occupancy_blind_to_images(
        cls, n_occupancy: int, n_image: int, image_attends_occupancy: bool = True
    ) -> "AttentionMask":
        total = n_occupancy + n_image
        m = np.ones((total, total), dtype=bool)
        m[:n_occupancy, n_occupancy:] = False
        if not image_attends_occupancy:
            m[n_occupancy:, :n_occupancy] = False
        return cls(m)

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        return cls(np.tril(np.ones((length, length), dtype=bool)))

    @classmethod
    def queries_over_context(cls, n_context: int, n_queries: int) -> "AttentionMask":
        """Context rows see the context only; each query row sees the context and itself."""
        total = n_context + n_queries
        m = np.zeros((total, total), dtype=bool)
        m[:, :n_context] = True
        m[n_context:, n_context:] = np.eye(n_queries, dtype=bool)
        return cls(m)


class TemporalEmbedding(Module):
    """One learnable row per history and future frame."""

    def __init__(self, frames: int, dim: int, rng: np.random.Generator):
        self.table = parameter(rng.uniform(-1.0, 1.0, size=(frames, dim)) / np.sqrt(dim))

    @property
    def frames(self) -> int:
        return self.table.shape[0]

    def rows(self, start: int, stop: int) -> Tensor:
        if not 0 <= start < stop <= self.frames:
            raise ConfigurationError(f"temporal rows {start}:{stop} outside table of {self.frames}")
        return getitem(self.table, slice(start, stop))

    def as_maps(self, start: int, stop: int) -> Tensor:
        """Rows ``start:stop`` shaped ``[n, 1, 1, C]`` for broadcasting over token maps."""
        return reshape(self.rows(start, stop), (stop - start, 1, 1, self.table.shape[1]))


Segments = Union[Tensor, Sequence[Tensor]]


class SaltBlock(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        groups: int,
        ffn_expansion: int,
        rng: np.random.Generator,
        zero_init_attention: bool = False,
    ):
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.norm_attn = GroupNorm(dim, groups)
        self.qkv = Conv(2, dim, 3 * dim, 3, rng)
        self.proj = Conv(2, dim, dim, 1, rng, zero_init=zero_init_attention)
        self.norm_ffn = GroupNorm(dim, groups)
        self.ffn_in = Conv(3, dim, dim * ffn_expansion, 3, rng)
        self.ffn_out = Conv(3, dim * ffn_expansion, dim, 3, rng)
        self.last_attention: Optional[np.ndarray] = None

    def feed_forward(self, x: Tensor, frame_local: bool = False) -> Tensor:
        h = self.norm_ffn(x)
        t, hh, ww, c = h.shape
        # frame-local: every frame is its own batch entry with a time length of one
        h = reshape(h, (t, 1, hh, ww, c) if frame_local else (1, t, hh, ww, c))
        h = self.ffn_out(silu(self.ffn_in(h)))
        return reshape(h, (t, hh, ww, c))

    def forward(
        self,
        tokens: Segments,
        mask: Optional[AttentionMask] = None,
        frame_local: Sequence[int] = (),
    ):
        single = isinstance(tokens, Tensor)
        segments: List[Tensor] = [tokens] if single else list(tokens)
        shape = segments[0].shape[1:]
        for seg in segments:
            if seg.ndim != 4 or seg.shape[1:] != shape or seg.shape[-1] != self.dim:
                raise DimensionError(f"SALT segments must share [*, H, W, {self.dim}], got {seg.shape}")
        lengths = [seg.shape[0] for seg in segments]
        total = sum(lengths)
        if mask is not None and mask.matrix.shape != (total, total):
            raise DimensionError(f"attention mask {mask.matrix.shape} does not match {total} frames")

        qkv = [self.qkv(self.norm_attn(seg)) for seg in segments]
        joined = qkv[0] if len(qkv) == 1 else concat(qkv, axis=0)
        h, w, dim = shape[0], shape[1], self.dim
        per_location = reshape(transpose(joined, (1, 2, 0, 3)), (h * w, total, 3 * dim))
        q = getitem(per_location, (slice(None), slice(None), slice(0, dim)))
        k = getitem(per_location, (slice(None), slice(None), slice(dim, 2 * dim)))
        v = getitem(per_location, (slice(None), slice(None), slice(2 * dim, 3 * dim)))
        attended, weights = multi_head_attention(
            q, k, v, self.heads, None if mask is None else mask.matrix, return_weights=True
        )
        self.last_attention = weights
        attended = transpose(reshape(attended, (h, w, total, dim)), (2, 0, 1, 3))

        outputs, start = [], 0
        for index, (seg, length) in enumerate(zip(segments, lengths)):
            part = getitem(attended, slice(start, start + length))
            start += length
            x = seg + self.proj(part)
            outputs.append(x + self.feed_forward(x, frame_local=index in frame_local))
        return outputs[0] if single else outputs
