"""Per-horizon metric report and its CSV form."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

from objectives.metrics import ChamferScores, OccupancyScores, PlanningScores

logger = logging.getLogger(__name__)

COLUMNS = [
    "horizon_s",
    "mIoU",
    "IoU",
    "dyn_mIoU",
    "L2_m",
    "collision_pct",
    "chamfer_m2",
    "baseline_mIoU",
    "baseline_IoU",
    "baseline_dyn_mIoU",
    "baseline_chamfer_m2",
]


@dataclass
class MetricReport:
    horizons_s: List[float]
    values: Dict[str, List[float]] = field(default_factory=dict)

    @classmethod
    def from_scores(
        cls,
        horizons_s: List[float],
        occupancy: OccupancyScores,
        planning: PlanningScores,
        chamfer: ChamferScores,
        baseline: OccupancyScores,
        baseline_chamfer: ChamferScores,
    ) -> "MetricReport":
        ks = range(len(horizons_s))
        return cls(
            list(horizons_s),
            {
                "mIoU": [occupancy.miou(k) for k in ks],
                "IoU": [occupancy.iou(k) for k in ks],
                "dyn_mIoU": [occupancy.dynamic_miou(k) for k in ks],
                "L2_m": [planning.l2(k) for k in ks],
                "collision_pct": [planning.collision_pct(k) for k in ks],
                "chamfer_m2": [chamfer.mean(k) for k in ks],
                "baseline_mIoU": [baseline.miou(k) for k in ks],
                "baseline_IoU": [baseline.iou(k) for k in ks],
                "baseline_dyn_mIoU": [baseline.dynamic_miou(k) for k in ks],
                "baseline_chamfer_m2": [baseline_chamfer.mean(k) for k in ks],
            },
        )

    def average(self, column: str) -> float:
        values = self.values[column]
        return float(sum(values) / len(values))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"horizon_s": [f"{h:g}" for h in self.horizons_s], **self.values})
        avg = {"horizon_s": "avg", **{name: self.average(name) for name in self.values}}
        frame = pd.concat([frame, pd.DataFrame([avg])], ignore_index=True)
        return frame[[c for c in COLUMNS if c in frame.columns]]


def write_report(report: MetricReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_frame().to_csv(path, index=False, float_format="%.6f")
    logger.info("wrote metric report %s", path)
    return path


def read_report(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"horizon_s": str})


def write_table(rows: List[Dict[str, object]], path: Union[str, Path], columns: Optional[List[str]] = None) -> Path:
    """Write a list of flat records (loss curves, ablation rows) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.6f")
    return path
