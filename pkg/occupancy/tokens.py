"""Class embedding, BEV folding and patch tokenization of occupancy grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from exceptions import ConfigurationError, DataError, DimensionError
from occupancy.grid import ClassTable, OccupancyGrid
from tensor.core import Tensor, as_tensor, reshape, transpose
from tensor.nn import Embedding, Module

logger = logging.getLogger(__name__)


class ClassEmbedding(Module):
    """Learnable ``[num_classes, C0]`` table, one row per class id."""

    def __init__(self, class_table: ClassTable, dim: int, rng: np.random.Generator):
        self.class_table = class_table
        self.embedding = Embedding(len(class_table), dim, rng)

    @property
    def table(self) -> Tensor:
        return self.embedding.table

    @property
    def dim(self) -> int:
        return self.embedding.dim

    def forward(self, ids: np.ndarray) -> Tensor:
        return self.embedding(ids)


def embed_classes(grid: Union[OccupancyGrid, np.ndarray], emb: ClassEmbedding) -> Tensor:
    ids = grid.classes if isinstance(grid, OccupancyGrid) else np.asarray(grid)
    rows = emb.table.shape[0]
    if ids.size and int(ids.max()) >= rows:
        bad = np.unravel_index(int(np.argmax(ids >= rows)), ids.shape)
        raise DataError(
            f"class id {int(ids[bad])} at voxel {tuple(int(i) for i in bad)} outside embedding table of {rows} rows"
        )
    return emb(ids.astype(np.int64))


def collapse_to_bev(emb) -> Tensor:
    """Fold ``[..., H0, W0, D0, C0]`` into ``[..., H0, W0, D0*C0]``; channel ``d*C0 + c``."""
    emb = as_tensor(emb)
    if emb.ndim < 4:
        raise DimensionError(f"collapse_to_bev expects [..., H0, W0, D0, C0], got {emb.shape}")
    *lead, h, w, d, c = emb.shape
    return reshape(emb, (*lead, h, w, d * c))


def expand_from_bev(bev, depth: int) -> Tensor:
    bev = as_tensor(bev)
    *lead, h, w, channels = bev.shape
    if channels % depth:
        raise DimensionError(f"{channels} BEV channels do not split into {depth} height slices")
    return reshape(bev, (*lead, h, w, depth, channels // depth))


@dataclass
class PatchTokens:
    tokens: Tensor
    patch_size: int
    source_shape: Tuple[int, ...]

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return tuple(self.tokens.shape[-3:-1])


def patchify(bev, patch_size: int) -> PatchTokens:
    """Cut ``[..., H0, W0, C]`` into non-overlapping ``P x P`` patches of ``P*P*C`` channels."""
    bev = as_tensor(bev)
    *lead, h0, w0, c = bev.shape
    p = patch_size
    if p <= 0 or h0 % p or w0 % p:
        raise ConfigurationError(f"grid {h0}x{w0} is not divisible by patch size {p}")
    n = len(lead)
    x = reshape(bev, (*lead, h0 // p, p, w0 // p, p, c))
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = transpose(x, order)
    tokens = reshape(x, (*lead, h0 // p, w0 // p, p * p * c))
    return PatchTokens(tokens=tokens, patch_size=p, source_shape=tuple(bev.shape))


def unpatchify(tokens: Union[PatchTokens, Tensor], patch_size: Optional[int] = None) -> Tensor:
    if isinstance(tokens, PatchTokens):
        patch_size = tokens.patch_size
        tokens = tokens.tokens
    if patch_size is None:
        raise ConfigurationError("unpatchify needs a patch size")
    tokens = as_tensor(tokens)
    *lead, h, w, cp = tokens.shape
    p = patch_size
    if cp % (p * p):
        raise ConfigurationError(f"{cp} token channels are not a multiple of {p}x{p}")
    c = cp // (p * p)
    n = len(lead)
    x = reshape(tokens, (*lead, h, w, p, p, c))
    order = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    x = transpose(x, order)
    return reshape(x, (*lead, h * p, w * p, c))
