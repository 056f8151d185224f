"""Tokenizers for occupancy, camera images and ego motion, and the cross-modal encoder."""

from __future__ import annotations

import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError
from geometry.pose import EgoPose, relative_displacements
from model.salt import AttentionMask, SaltBlock, TemporalEmbedding
from occupancy.grid import OccupancyGrid
from occupancy.tokens import ClassEmbedding, collapse_to_bev, embed_classes, patchify
from schemas.config import WorldModelConfig
from tensor.core import Tensor, reshape
from tensor.nn import Conv, GroupNorm, Linear, Module
from tensor.ops import relu, silu

logger = logging.getLogger(__name__)


class PatchEncoder(Module):
    """Conv1x1-GroupNorm-SiLU followed by Conv3x3-GroupNorm-SiLU on patch tokens."""

    def __init__(self, in_channels: int, dim: int, groups: int, rng: np.random.Generator):
        self.embed = Conv(2, in_channels, dim, 1, rng)
        self.norm1 = GroupNorm(dim, groups)
        self.mix = Conv(2, dim, dim, 3, rng)
        self.norm2 = GroupNorm(dim, groups)

    def forward(self, tokens: Tensor) -> Tensor:
        x = silu(self.norm1(self.embed(tokens)))
        return silu(self.norm2(self.mix(x)))


class OccupancyEncoder(Module):
    def __init__(self, cfg: WorldModelConfig, embedding: ClassEmbedding, rng: np.random.Generator):
        self.embedding = embedding
        self.patch_size = cfg.patch_size
        depth = cfg.grid_dims[2]
        self.patches = PatchEncoder(cfg.patch_size**2 * depth * cfg.embed_dim, cfg.model_dim, cfg.norm_groups, rng)

    def bev(self, grids: Sequence[OccupancyGrid]) -> Tensor:
        """``[N, H0, W0, D0*C0]`` BEV embeddings of the grids."""
        ids = np.stack([g.classes for g in grids])
        return collapse_to_bev(embed_classes(ids, self.embedding))

    def forward(self, grids: Sequence[OccupancyGrid]) -> Tensor:
        return self.patches(patchify(self.bev(grids), self.patch_size).tokens)


class ImageEncoder(Module):
    """Patch encoder for images already resized to the BEV grid resolution."""

    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.size = tuple(cfg.grid_dims[:2])
        self.patches = PatchEncoder(cfg.patch_size**2 * 3, cfg.model_dim, cfg.norm_groups, rng)

    def forward(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 4 or tuple(images.shape[1:3]) != self.size or images.shape[3] != 3:
            raise DimensionError(f"images must be [N, {self.size[0]}, {self.size[1]}, 3], got {images.shape}")
        return self.patches(patchify(images, self.patch_size).tokens)


class EgoEncoder(Module):
    """Linear-ReLU-Linear-ReLU over per-frame displacements; frame 0 sees a zero step."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(3, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def displacements(self, trajectory: Sequence[EgoPose]) -> np.ndarray:
        steps = np.zeros((len(trajectory), 3))
        if len(trajectory) > 1:
            steps[1:] = relative_displacements(trajectory).values
        return steps

    def forward(self, trajectory: Sequence[EgoPose]) -> Tensor:
        x = Tensor(self.displacements(trajectory))
        return relu(self.fc2(relu(self.fc1(x))))


def encode_ego(encoder: EgoEncoder, trajectory: Sequence[EgoPose]) -> Tensor:
    return encoder(trajectory)


class CrossModalEncoder(Module):
    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.masked = cfg.masked_attention
        self.image_attends_occupancy = cfg.image_attends_occupancy
        self.blocks = [
            SaltBlock(cfg.model_dim, cfg.heads, cfg.norm_groups, cfg.ffn_expansion, rng)
            for _ in range(cfg.encoder_layers)
        ]

    def forward(
        self,
        occ_tokens: Tensor,
        img_tokens: Optional[Tensor],
        ego_tokens: Tensor,
        temb: TemporalEmbedding,
    ) -> Tuple[Tensor, Optional[Tensor]]:
        n_hist = occ_tokens.shape[0]
        if ego_tokens.shape[0] != n_hist:
            raise ConfigurationError(f"{ego_tokens.shape[0]} ego tokens for {n_hist} occupancy frames")
        if img_tokens is not None and img_tokens.shape[0] != n_hist:
            raise ConfigurationError(f"{img_tokens.shape[0]} image frames for {n_hist} occupancy frames")
        shift = reshape(ego_tokens, (n_hist, 1, 1, ego_tokens.shape[1])) + temb.as_maps(0, n_hist)
        occ = occ_tokens + shift
        if img_tokens is None:
            for block in self.blocks:
                occ = block(occ)
            return occ, None

        img = img_tokens + shift
        mask = None
        if self.masked:
            mask = AttentionMask.occupancy_blind_to_images(n_hist, n_hist, self.image_attends_occupancy)
        for block in self.blocks:
            occ, img = block([occ, img], mask)
        return occ, img


def encode_cross_modal(
    encoder: CrossModalEncoder,
    occ_tokens: Tensor,
    img_tokens: Optional[Tensor],
    ego_tokens: Tensor,
    temb: TemporalEmbedding,
):
    return encoder(occ_tokens, img_tokens, ego_tokens, temb)
