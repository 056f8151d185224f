"""Flow, occupancy, image and pose decoders."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from geometry.flow import CURRENT, FlowField
from model.salt import AttentionMask, SaltBlock, TemporalEmbedding
from occupancy.tokens import ClassEmbedding, expand_from_bev, unpatchify
from schemas.config import WorldModelConfig
from tensor.core import Tensor, getitem, reshape
from tensor.nn import Conv, Linear, Module, parameter
from tensor.ops import cumsum, matmul, multi_head_attention, relu, sigmoid, silu

logger = logging.getLogger(__name__)


class FlowDecoder(Module):
    """SALT blocks over the encoded history, then one latent map and one flow map per future frame.

    Future frame k is read from the last encoded frame shifted by temporal
    embedding row ``N_h + k``, so frame k never depends on later frames.
    """

    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.history = cfg.history
        self.patch_size = cfg.patch_size
        self.blocks = [
            SaltBlock(cfg.model_dim, cfg.heads, cfg.norm_groups, cfg.ffn_expansion, rng)
            for _ in range(cfg.decoder_layers)
        ]
        self.latent = Conv(2, cfg.model_dim, cfg.model_dim, 3, rng)
        self.head = Conv(2, cfg.model_dim, cfg.patch_size**2 * 2, 1, rng, zero_init=True)

    def latent_futures(self, encoded: Tensor, temb: TemporalEmbedding, n_future: int) -> Tensor:
        z = encoded
        for block in self.blocks:
            z = block(z)
        last = getitem(z, slice(z.shape[0] - 1, z.shape[0]))
        queries = last + temb.as_maps(self.history, self.history + n_future)
        return silu(self.latent(queries))

    def forward(self, latent: Tensor) -> FlowField:
        return FlowField(unpatchify(self.head(latent), self.patch_size), CURRENT)


class Refiner(Module):
    """Residual Conv3x3-SiLU-Conv3x3 on warped feature maps; zero residual at init."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.conv1 = Conv(2, channels, hidden, 3, rng)
        self.conv2 = Conv(2, hidden, channels, 3, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(silu(self.conv1(x)))


class OccupancyHead(Module):
    """Per-voxel class logits from refined BEV features.

    The embedding part of the features plus a learned correction is compared
    against every class embedding: ``logit_j = s * (2 x.E_j - |E_j|^2)``, which at
    initialization decodes each voxel to its nearest class embedding.
    """

    def __init__(self, cfg: WorldModelConfig, feature_channels: int, rng: np.random.Generator):
        self.depth = cfg.grid_dims[2]
        self.embed_channels = cfg.grid_dims[2] * cfg.embed_dim
        self.delta = Conv(2, feature_channels, self.embed_channels, 1, rng, zero_init=True)
        self.scale = parameter(np.ones(1))

    def voxel_features(self, refined: Tensor) -> Tensor:
        """``[N, H0, W0, D0, C0]`` embedding-space features of the refined maps."""
        base = getitem(refined, (Ellipsis, slice(0, self.embed_channels)))
        return expand_from_bev(base + self.delta(refined), self.depth)

    def forward(self, refined: Tensor, emb: ClassEmbedding) -> Tensor:
        return self.logits(self.voxel_features(refined), emb)

    def logits(self, x: Tensor, emb: ClassEmbedding) -> Tensor:
        table = emb.table
        sq_norm = (table * table).sum(axis=1)
        logits = matmul(x, table.transpose(1, 0)) * 2.0 - sq_norm
        return logits * self.scale


def decode_occupancy(head: OccupancyHead, refined: Tensor, emb: ClassEmbedding) -> Tensor:
    return head(refined, emb)


class ImageDecoder(Module):
    """Future temporal-embedding queries attend the encoded tokens through SALT blocks.

    A query sees the encoded history and itself, never another query, and its
    feed-forward path is frame-local; image k is therefore the same whatever
    the number of forecast frames.
    """

    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        self.history = cfg.history
        self.patch_size = cfg.patch_size
        self.token_grid = cfg.token_grid
        self.blocks = [
            SaltBlock(cfg.model_dim, cfg.heads, cfg.norm_groups, cfg.ffn_expansion, rng)
            for _ in range(cfg.decoder_layers)
        ]
        self.head = Conv(2, cfg.model_dim, cfg.patch_size**2 * 3, 1, rng)

    def forward(self, encoded: Sequence[Tensor], temb: TemporalEmbedding, n_future: int) -> Tensor:
        h, w = self.token_grid
        rows = temb.as_maps(self.history, self.history + n_future)
        queries = rows + Tensor(np.zeros((n_future, h, w, rows.shape[-1])))
        segments = list(encoded) + [queries]
        n_context = sum(seg.shape[0] for seg in encoded)
        mask = AttentionMask.queries_over_context(n_context, n_future)
        for block in self.blocks:
            segments = block(segments, mask, frame_local=(len(segments) - 1,))
        return sigmoid(unpatchify(self.head(segments[-1]), self.patch_size))


class PoseDecoder(Module):
    """Ego queries with causal self-attention and cross-attention to each frame's latent map.

    Emits per-step ``(dx, dy)`` in the current ego frame; waypoints are their
    running sum. The last layer starts at zero, so an untrained decoder predicts
    a stationary ego.
    """

    def __init__(self, cfg: WorldModelConfig, rng: np.random.Generator):
        dim = cfg.model_dim
        self.history = cfg.history
        self.heads = cfg.heads
        self.query = parameter(rng.uniform(-1.0, 1.0, size=dim) / np.sqrt(dim))
        self.self_qkv = Linear(dim, 3 * dim, rng)
        self.self_out = Linear(dim, dim, rng)
        self.cross_q = Linear(dim, dim, rng)
        self.cross_kv = Linear(dim, 2 * dim, rng)
        self.cross_out = Linear(dim, dim, rng)
        self.mlp = Linear(dim, dim, rng)
        self.step = Linear(dim, 2, rng, zero_init=True)

    def forward(self, latent: Tensor, ego_token: Tensor, temb: TemporalEmbedding) -> Tensor:
        n_future, h, w, dim = latent.shape
        q = temb.rows(self.history, self.history + n_future) + self.query + ego_token
        qkv = self.self_qkv(q)
        attended = multi_head_attention(
            reshape(getitem(qkv, (slice(None), slice(0, dim))), (1, n_future, dim)),
            reshape(getitem(qkv, (slice(None), slice(dim, 2 * dim))), (1, n_future, dim)),
            reshape(getitem(qkv, (slice(None), slice(2 * dim, 3 * dim))), (1, n_future, dim)),
            self.heads,
            AttentionMask.causal(n_future).matrix,
        )
        q = q + self.self_out(reshape(attended, (n_future, dim)))

        keys = self.cross_kv(reshape(latent, (n_future, h * w, dim)))
        cross = multi_head_attention(
            reshape(self.cross_q(q), (n_future, 1, dim)),
            getitem(keys, (slice(None), slice(None), slice(0, dim))),
            getitem(keys, (slice(None), slice(None), slice(dim, 2 * dim))),
            self.heads,
        )
        q = q + self.cross_out(reshape(cross, (n_future, dim)))
        steps = self.step(relu(self.mlp(q)))
        return cumsum(steps, axis=0)
