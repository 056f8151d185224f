"""Ray sampling through a voxel feature volume and differentiable depth rendering."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from exceptions import ConfigurationError, DimensionError
from occupancy.grid import OccupancyGrid
from render.camera import CameraRig, generate_rays
from tensor.core import Tensor, as_tensor, exp, getitem, reshape
from tensor.nn import Linear, Module
from tensor.ops import cumsum, gather_trilinear, relu, softplus

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VolumeBounds:
    """Axis-aligned metric box of a voxel grid in its ego frame."""

    origin: Tuple[float, float, float]
    voxel_size: Tuple[float, float, float]
    dims: Tuple[int, int, int]

    @classmethod
    def of(cls, grid: OccupancyGrid) -> "VolumeBounds":
        return cls(tuple(grid.origin), tuple(grid.voxel_size), tuple(grid.dims))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims) * np.asarray(self.voxel_size)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous voxel indices; voxel centers sit on integers."""
        return (points - self.lower) / np.asarray(self.voxel_size) - 0.5


def ray_box_interval(origins: np.ndarray, dirs: np.ndarray, lower: np.ndarray, upper: np.ndarray):
    """Slab test. Returns entry and exit distances and a hit flag per ray."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (lower - origins) * inv
        t_b = (upper - origins) * inv
    t_a = np.where(np.isnan(t_a), -np.inf, t_a)
    t_b = np.where(np.isnan(t_b), np.inf, t_b)
    t_in = np.minimum(t_a, t_b).max(axis=-1)
    t_out = np.maximum(t_a, t_b).min(axis=-1)
    return t_in, t_out, t_out > np.maximum(t_in, 0.0)


@dataclass
class RaySamples:
    """``R`` rays with ``N`` ordered samples each; invalid rays miss the volume."""

    points: np.ndarray
    distances: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.distances.shape[-1]


def sample_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    bounds: VolumeBounds,
    near: float,
    far: Optional[float],
    num_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> RaySamples:
    """Stratified samples on ``[near, far]`` clipped to the volume.

    With ``rng`` each sample is jittered uniformly inside its stratum; without it
    samples sit at stratum midpoints. The last spacing runs to the interval end.
    """
    far = bounds.diagonal if far is None else far
    if not near < far:
        raise ConfigurationError(f"ray sampling needs near < far, got {near} and {far}")
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    t_in, t_out, hit = ray_box_interval(origins, dirs, bounds.lower, bounds.upper)
    t0 = np.maximum(t_in, near)
    t1 = np.minimum(t_out, far)
    valid = hit & (t1 > t0)
    t0 = np.where(valid, t0, near)
    t1 = np.where(valid, t1, far)

    n_rays = origins.shape[0]
    jitter = np.full((n_rays, num_samples), 0.5) if rng is None else rng.uniform(0.0, 1.0, (n_rays, num_samples))
    span = (t1 - t0)[:, None]
    distances = t0[:, None] + (np.arange(num_samples) + jitter) / num_samples * span
    deltas = np.empty_like(distances)
    deltas[:, :-1] = np.diff(distances, axis=1)
    deltas[:, -1] = t1 - distances[:, -1]
    points = origins[:, None, :] + distances[..., None] * dirs[:, None, :]
    return RaySamples(points, distances, deltas, valid)


class DensityHead(Module):
    """Two-layer network mapping a gathered voxel feature to a non-negative density."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def forward(self, features: Tensor) -> Tensor:
        sigma = softplus(self.fc2(relu(self.fc1(features))))
        return reshape(sigma, sigma.shape[:-1])


def gather_features(volume, samples: RaySamples, bounds: VolumeBounds) -> Tensor:
    """``[R, N, C]`` trilinear features; samples outside the volume read zero."""
    volume = as_tensor(volume)
    if volume.ndim != 4 or tuple(volume.shape[:3]) != tuple(bounds.dims):
        raise DimensionError(f"feature volume {volume.shape} does not match grid {bounds.dims}")
    return gather_trilinear(volume, bounds.to_index(samples.points))


def sample_and_gather(
    volume,
    head: DensityHead,
    rays: Tuple[np.ndarray, np.ndarray],
    bounds: VolumeBounds,
    near: float,
    far: Optional[float],
    num_samples: int,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[RaySamples, Tensor]:
    samples = sample_rays(rays[0], rays[1], bounds, near, far, num_samples, rng)
    sigma = head(gather_features(volume, samples, bounds))
    return samples, sigma


@dataclass
class RenderedDepth:
    depth: Tensor
    weights: Tensor
    transmittance: np.ndarray
    opacity: np.ndarray
    valid: np.ndarray


def render_depth(sigma, samples: RaySamples) -> RenderedDepth:
    """Expected ray distance under the volume-rendering weights.

    ``T_i = exp(-sum_{j<i} sigma_j delta_j)``, ``w_i = T_i (1 - exp(-sigma_i delta_i))``
    and ``depth = sum_i w_i d_i``. Rays that miss the volume get zero weights.
    """
    sigma = as_tensor(sigma)
    if sigma.shape != samples.distances.shape:
        raise DimensionError(f"densities {sigma.shape} do not match samples {samples.distances.shape}")
    dtype = sigma.values.dtype
    mask = samples.valid[:, None].astype(dtype)
    tau = sigma * samples.deltas.astype(dtype)
    transmittance = exp(-cumsum(tau, axis=-1, exclusive=True))
    weights = transmittance * (1.0 - exp(-tau)) * mask
    depth = (weights * samples.distances.astype(dtype)).sum(axis=-1)
    opacity = weights.values.sum(axis=-1)
    return RenderedDepth(depth, weights, transmittance.values, opacity, samples.valid)


@dataclass
class DepthMap:
    """Rendered ray distances for an image.

    ``valid`` marks pixels usable downstream (in the volume and opaque enough);
    ``in_volume`` marks every ray that crosses the volume, opaque or not.
    """

    depths: Tensor
    valid: np.ndarray
    low_opacity: np.ndarray
    in_volume: np.ndarray

    def numpy(self) -> np.ndarray:
        return np.where(self.valid, self.depths.values, 0.0)


def render_depth_map(
    volume,
    head: DensityHead,
    rig: CameraRig,
    bounds: VolumeBounds,
    near: float = 0.5,
    far: Optional[float] = None,
    num_samples: int = 48,
    min_opacity: float = 0.05,
    rng: Optional[np.random.Generator] = None,
) -> DepthMap:
    """Render one ``[H, W]`` depth map from a ``[H0, W0, D0, C0]`` feature volume."""
    h, w = rig.image_size
    samples, sigma = sample_and_gather(volume, head, generate_rays(rig), bounds, near, far, num_samples, rng)
    rendered = render_depth(sigma, samples)
    low = rendered.opacity < min_opacity
    valid = rendered.valid & ~low
    if not valid.any():
        logger.warning("every ray of the rendered depth map is invalid or below opacity %.3f", min_opacity)
    return DepthMap(
        reshape(rendered.depth, (h, w)), valid.reshape(h, w), low.reshape(h, w), rendered.valid.reshape(h, w)
    )


def render_future_depths(
    volumes: Tensor,
    head: DensityHead,
    rig: CameraRig,
    bounds: VolumeBounds,
    near: float,
    far: Optional[float],
    num_samples: int,
    min_opacity: float,
    rng: Optional[np.random.Generator] = None,
) -> Sequence[DepthMap]:
    return [
        render_depth_map(getitem(volumes, k), head, rig, bounds, near, far, num_samples, min_opacity, rng)
        for k in range(volumes.shape[0])
    ]


def depth_oracle(sigma: np.ndarray, distances: np.ndarray, deltas: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Sequential float64 accumulation of one ray, returning depth, weights and transmittance."""
    remaining = 1.0
    weights = np.zeros(len(sigma))
    trans = np.zeros(len(sigma))
    for i, (s, d) in enumerate(zip(sigma, deltas)):
        trans[i] = remaining
        absorbed = 1.0 - np.exp(-s * d)
        weights[i] = remaining * absorbed
        remaining *= np.exp(-s * d)
    return float(np.dot(weights, distances)), weights, trans
