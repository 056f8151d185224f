"""Copy-last-frame forecaster used as the comparison floor."""

import logging
from typing import List, Optional, Sequence

from exceptions import ConfigurationError
from geometry.pose import EgoPose
from geometry.transport import transport_grid
from occupancy.grid import OccupancyGrid

logger = logging.getLogger(__name__)


def copy_last_baseline(
    grids: Sequence[OccupancyGrid],
    poses: Sequence[EgoPose],
    horizon: int,
    future_poses: Optional[Sequence[EgoPose]] = None,
) -> List[OccupancyGrid]:
    """Repeat the last observed grid for every future frame.

    With ``future_poses`` the grid is first moved into each future ego frame,
    keeping every class where it was in the world.
    """
    if not grids or len(grids) != len(poses):
        raise ConfigurationError(f"baseline needs matching history grids and poses, got {len(grids)} and {len(poses)}")
    last, current = grids[-1], poses[-1]
    if future_poses is None:
        return [last] * horizon
    if len(future_poses) != horizon:
        raise ConfigurationError(f"expected {horizon} future poses, got {len(future_poses)}")
    return [transport_grid(last, current, future, keep_dynamic=True) for future in future_poses]
