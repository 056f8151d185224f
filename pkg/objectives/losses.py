"""Training losses and their weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ConfigurationError, DimensionError
from occupancy.grid import OccupancyGrid
from schemas.config import LossWeights
from tensor.core import Tensor, as_tensor, getitem, reshape, tabs
from tensor.ops import log_softmax_lastdim, softmax_lastdim

logger = logging.getLogger(__name__)


def _labels(targets: Union[np.ndarray, Sequence[OccupancyGrid]]) -> np.ndarray:
    if isinstance(targets, np.ndarray):
        return targets.astype(np.int64)
    return np.stack([g.classes for g in targets]).astype(np.int64)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss for sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, labels: np.ndarray) -> Tensor:
    """Lovasz-softmax averaged over the classes present in ``labels``.

    ``probs`` is ``[V, K]`` and ``labels`` holds ``V`` class ids.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels).reshape(-1)
    losses = []
    for c in np.unique(labels):
        fg = (labels == c).astype(np.float64)
        errors = tabs(getitem(probs, (slice(None), int(c))) - fg)
        perm = np.argsort(-errors.values, kind="stable")
        weights = lovasz_grad(fg[perm]).astype(errors.values.dtype)
        losses.append((getitem(errors, perm) * weights).sum())
    if not losses:
        return Tensor(0.0)
    total = losses[0]
    for part in losses[1:]:
        total = total + part
    return total * (1.0 / len(losses))


def occ_loss(logits, targets) -> Tuple[Tensor, Tensor]:
    """Mean per-voxel cross entropy and Lovasz-softmax for ``[..., K]`` logits."""
    logits = as_tensor(logits)
    labels = _labels(targets)
    if tuple(logits.shape[:-1]) != labels.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {labels.shape}")
    num_classes = logits.shape[-1]
    if labels.size and labels.max() >= num_classes:
        raise DimensionError(f"target id {labels.max()} outside {num_classes} logit classes")
    flat = reshape(logits, (-1, num_classes))
    labels = labels.reshape(-1)
    one_hot = np.eye(num_classes)[labels]
    ce = -(log_softmax_lastdim(flat) * one_hot).sum(axis=-1).mean()
    lovasz = lovasz_softmax(softmax_lastdim(flat), labels)
    return ce, lovasz


def img_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(target, dtype=np.float64)
    return (diff * diff).mean()


def pose_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    return tabs(pred - np.asarray(target, dtype=np.float64)).mean()


@dataclass
class LossParts:
    occ_ce: Tensor
    occ_lovasz: Tensor
    img_l2: Optional[Tensor] = None
    pose_l1: Optional[Tensor] = None
    rpc: Optional[Tensor] = None


@dataclass
class LossBreakdown:
    occ_ce: float
    occ_lovasz: float
    img_l2: float
    pose_l1: float
    rpc: float
    weights: Tuple[float, float, float, float]
    total: float
    objective: Tensor

    def as_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "occ_ce": self.occ_ce,
            "occ_lovasz": self.occ_lovasz,
            "img_l2": self.img_l2,
            "pose_l1": self.pose_l1,
            "rpc": self.rpc,
        }


def _weights(weights) -> Tuple[float, float, float, float]:
    if isinstance(weights, LossWeights):
        values = (weights.occ, weights.img, weights.pose, weights.rpc)
    else:
        values = tuple(float(w) for w in weights)
    if len(values) != 4:
        raise ConfigurationError(f"expected four loss weights, got {len(values)}")
    if any(w < 0 for w in values):
        raise ConfigurationError(f"loss weights must be non-negative, got {values}")
    return values


def total_loss(parts: LossParts, weights) -> LossBreakdown:
    """``occ (ce + lovasz) + img * img_l2 + pose * pose_l1 + rpc * rpc``."""
    w_occ, w_img, w_pose, w_rpc = _weights(weights)
    objective = (parts.occ_ce + parts.occ_lovasz) * w_occ
    scalars = {}
    for name, part, weight in (("img_l2", parts.img_l2, w_img), ("pose_l1", parts.pose_l1, w_pose), ("rpc", parts.rpc, w_rpc)):
        scalars[name] = 0.0 if part is None else part.item()
        if part is not None and weight:
            objective = objective + part * weight
    return LossBreakdown(
        occ_ce=parts.occ_ce.item(),
        occ_lovasz=parts.occ_lovasz.item(),
        img_l2=scalars["img_l2"],
        pose_l1=scalars["pose_l1"],
        rpc=scalars["rpc"],
        weights=(w_occ, w_img, w_pose, w_rpc),
        total=objective.item(),
        objective=objective,
    )
