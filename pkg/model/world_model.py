"""End-to-end non-autoregressive occupancy world model.

One call to :meth:`WorldModel.forecast` encodes the history once and emits
every future frame together: flow maps, warped and refined BEV features,
per-voxel logits, the ego trajectory and (optionally) future images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError, StateError
from geometry.flow import FlowField, transform_flow
from geometry.pose import EgoPose, Trajectory, ego_motions, poses_from_waypoints
from geometry.warp import BevFrame, dynamic_mask, warp_features
from model.decoders import FlowDecoder, ImageDecoder, OccupancyHead, PoseDecoder, Refiner
from model.encoders import CrossModalEncoder, EgoEncoder, ImageEncoder, OccupancyEncoder
from model.salt import TemporalEmbedding
from occupancy.grid import OccupancyGrid
from occupancy.tokens import ClassEmbedding, unpatchify
from render.imageio import resize_images
from render.volume import DensityHead
from schemas.config import WorldModelConfig
from tensor.core import Tensor, concat, getitem, reshape
from tensor.nn import Conv, Linear, Module

logger = logging.getLogger(__name__)


@dataclass
class ForecastInput:
    """History window for one forecast.

    ``images`` are RGB in [0, 1], shape ``[N_h, h, w, 3]``; they are resized to
    the BEV grid resolution when needed. ``future_poses`` are optional global
    ego poses of the future frames, used for warping when the config allows it.
    """

    grids: Sequence[OccupancyGrid]
    poses: Sequence[EgoPose]
    images: Optional[np.ndarray] = None
    future_poses: Optional[Sequence[EgoPose]] = None


@dataclass
class ForecastOutput:
    logits: Tensor
    voxel_features: Tensor
    waypoints: Tensor
    trajectory: Trajectory
    warp_poses: Trajectory
    template: OccupancyGrid
    flow: Optional[FlowField] = None
    flow_future: Optional[FlowField] = None
    images: Optional[Tensor] = None
    latent: Optional[Tensor] = None

    @property
    def num_frames(self) -> int:
        return self.logits.shape[0]

    def grids(self) -> List[OccupancyGrid]:
        """Argmax class per voxel, with the metadata of the last history grid."""
        ids = np.argmax(self.logits.values, axis=-1).astype(np.uint8)
        return [self.template.with_classes(ids[k]) for k in range(ids.shape[0])]


class WorldModel(Module):
    def __init__(self, cfg: WorldModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.config = cfg
        self.class_table = cfg.class_table()
        depth = cfg.grid_dims[2]
        self.feature_channels = depth * cfg.embed_dim + cfg.lift_dim

        self.class_embedding = ClassEmbedding(self.class_table, cfg.embed_dim, rng)
        self.temporal = TemporalEmbedding(cfg.history + cfg.future, cfg.model_dim, rng)
        self.occ_encoder = OccupancyEncoder(cfg, self.class_embedding, rng)
        self.img_encoder = ImageEncoder(cfg, rng) if cfg.use_images else None
        self.ego_encoder = EgoEncoder(cfg.model_dim, rng)
        self.encoder = CrossModalEncoder(cfg, rng)

        self.flow_decoder = FlowDecoder(cfg, rng)
        self.lift = Conv(2, cfg.model_dim, cfg.patch_size**2 * cfg.lift_dim, 1, rng)
        n_refiners = 1 if cfg.share_refinement else cfg.future
        self.refiners = [Refiner(self.feature_channels, cfg.refine_hidden, rng) for _ in range(n_refiners)]
        self.occ_head = OccupancyHead(cfg, self.feature_channels, rng)
        self.pose_decoder = PoseDecoder(cfg, rng)
        self.image_decoder = ImageDecoder(cfg, rng) if cfg.use_images else None
        self.temporal_proj = Linear(cfg.model_dim, self.feature_channels, rng) if cfg.flow_mode == "none" else None
        self.density_head = DensityHead(cfg.embed_dim, cfg.density_hidden, rng)
        self._encoder_passes = 0

    # -- encoding ----------------------------------------------------------

    def _image_tokens(self, images: np.ndarray) -> Tensor:
        h0, w0 = self.config.grid_dims[:2]
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise DimensionError(f"history images must be [N_h, h, w, 3], got {images.shape}")
        if images.shape[1:3] != (h0, w0):
            images = resize_images(images, (h0, w0))
        return self.img_encoder(Tensor(images))

    def encode(self, inputs: ForecastInput, with_images: bool) -> Tuple[Tensor, Optional[Tensor], Tensor]:
        self._encoder_passes += 1
        occ_tokens = self.occ_encoder(inputs.grids)
        img_tokens = self._image_tokens(inputs.images) if with_images else None
        ego_tokens = self.ego_encoder(inputs.poses)
        occ, img = self.encoder(occ_tokens, img_tokens, ego_tokens, self.temporal)
        return occ, img, ego_tokens

    # -- decoding ----------------------------------------------------------

    def decode_image(self, occ_encoded: Tensor, img_encoded: Optional[Tensor]) -> Tensor:
        if self.image_decoder is None:
            raise ConfigurationError("image decoding requested but the model was built with use_images=false")
        segments = [occ_encoded] if img_encoded is None else [occ_encoded, img_encoded]
        return self.image_decoder(segments, self.temporal, self.config.future)

    def refine(self, coarse: Tensor) -> Tensor:
        if len(self.refiners) == 1:
            return self.refiners[0](coarse)
        return concat([ref(getitem(coarse, slice(k, k + 1))) for k, ref in enumerate(self.refiners)], axis=0)

    def _fill_feature(self) -> Tensor:
        """Feature of an all-free column: the free embedding per height level, zero latent."""
        free = getitem(self.class_embedding.table, 0)
        return concat([free] * self.config.grid_dims[2] + [Tensor(np.zeros(self.config.lift_dim))], axis=0)

    def _current_features(self, last_grid: OccupancyGrid, occ_encoded: Tensor) -> Tensor:
        n_hist = occ_encoded.shape[0]
        bev = getitem(self.occ_encoder.bev([last_grid]), 0)
        lifted = unpatchify(self.lift(getitem(occ_encoded, slice(n_hist - 1, n_hist))), self.config.patch_size)
        return concat([bev, getitem(lifted, 0)], axis=-1)

    def forecast(self, inputs: ForecastInput, use_images: Optional[bool] = None) -> ForecastOutput:
        cfg = self.config
        if len(inputs.grids) != cfg.history or len(inputs.poses) != cfg.history:
            raise ConfigurationError(
                f"forecast needs exactly {cfg.history} history frames, "
                f"got {len(inputs.grids)} grids and {len(inputs.poses)} poses"
            )
        if inputs.future_poses is not None and len(inputs.future_poses) != cfg.future:
            raise ConfigurationError(f"expected {cfg.future} future poses, got {len(inputs.future_poses)}")
        with_images = inputs.images is not None and self.img_encoder is not None
        if use_images is not None:
            if use_images and self.img_encoder is None:
                raise ConfigurationError("model was built with use_images=false")
            if use_images and inputs.images is None:
                raise ConfigurationError("use_images requested but no history images were given")
            with_images = use_images

        self._encoder_passes = 0
        occ_encoded, img_encoded, ego_tokens = self.encode(inputs, with_images)

        latent = self.flow_decoder.latent_futures(occ_encoded, self.temporal, cfg.future)
        ego_token = getitem(ego_tokens, cfg.history - 1)
        waypoints = self.pose_decoder(latent, ego_token, self.temporal)
        current = inputs.poses[-1]
        trajectory = poses_from_waypoints(current, waypoints.values)
        if cfg.warp_with_given_poses and inputs.future_poses is not None:
            warp_poses = list(inputs.future_poses)
        else:
            warp_poses = trajectory

        last_grid = inputs.grids[-1]
        features = self._current_features(last_grid, occ_encoded)
        flow = flow_future = None
        if cfg.flow_mode == "none":
            offsets = self.temporal_proj(self.temporal.rows(cfg.history, cfg.history + cfg.future))
            coarse = features + reshape(offsets, (cfg.future, 1, 1, self.feature_channels))
        else:
            flow = self.flow_decoder(latent)
            flow_future = transform_flow(flow, current, warp_poses)
            coarse = warp_features(
                features,
                flow_future,
                dynamic_mask(last_grid),
                BevFrame.of(last_grid),
                ego_motions(current, warp_poses),
                fill=self._fill_feature(),
                mode=cfg.flow_mode,
            )

        voxel_features = self.occ_head.voxel_features(self.refine(coarse))
        logits = self.occ_head.logits(voxel_features, self.class_embedding)
        images = self.decode_image(occ_encoded, img_encoded) if with_images else None

        if self._encoder_passes != 1:
            raise StateError(f"forecast ran the encoder {self._encoder_passes} times; predictions must not re-enter it")
        logger.debug("forecast %d frames (images=%s, flow=%s)", cfg.future, with_images, cfg.flow_mode)
        return ForecastOutput(
            logits=logits,
            voxel_features=voxel_features,
            waypoints=waypoints,
            trajectory=trajectory,
            warp_poses=warp_poses,
            template=last_grid,
            flow=flow,
            flow_future=flow_future,
            images=images,
            latent=latent,
        )


def build_model(cfg: WorldModelConfig) -> WorldModel:
    model = WorldModel(cfg)
    model.cast()
    logger.info("built world model with %d parameters", model.num_parameters())
    return model
