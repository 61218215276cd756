"""Distorted-region IoU and localization error metrics.

A box's image region is bounded by the four arcs its edges project to. The
arcs are sampled with sub-pixel spacing, chained into a closed polyline and
handed to shapely for area and clipping.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import shapely
from numpy.typing import NDArray
from shapely.geometry import Polygon
from shapely.geometry import box as shapely_box

from omnidrl.domain.boxes import BOUNDARY, CylBox, corners
from omnidrl.domain.camera import CameraIntrinsics
from omnidrl.domain.exceptions import DatasetError, DegenerateSegmentError, ProjectionAtInfinityError
from omnidrl.domain.lines import segment_curve, segment_curve_masked
from omnidrl.domain.models import EvalRecord, MetricsSummary
from omnidrl.utils.common import signed_angle_difference

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["steps", "final_iou", "correct", "rho_err", "beta_err"]


@dataclass(frozen=True)
class DistortedRegion:
    polyline: NDArray[np.float64]
    polygon: Polygon
    clipped: bool = False

    @property
    def area(self) -> float:
        return float(self.polygon.area)

    @property
    def envelope(self) -> tuple:
        """(u_min, v_min, u_max, v_max) of the boundary samples"""
        if len(self.polyline) == 0:
            return (math.nan, math.nan, math.nan, math.nan)
        u_min, v_min = self.polyline.min(axis=0)
        u_max, v_max = self.polyline.max(axis=0)
        return (float(u_min), float(v_min), float(u_max), float(v_max))


def _edge_pixels(a: NDArray[np.float64], b: NDArray[np.float64], cam: CameraIntrinsics) -> tuple:
    """Pixel samples of one edge and whether any part of it had to be dropped"""
    try:
        return segment_curve(a, b, cam).pixels, False
    except (ProjectionAtInfinityError, DegenerateSegmentError):
        pixels, valid = segment_curve_masked(a, b, cam)
        return pixels[valid], True


def _make_polygon(polyline: NDArray[np.float64]) -> Polygon:
    if len(polyline) < 4:
        return Polygon()
    polygon = Polygon(polyline)
    if not polygon.is_valid:
        repaired = shapely.make_valid(polygon)
        polygons = [g for g in getattr(repaired, "geoms", [repaired]) if isinstance(g, Polygon)]
        polygon = max(polygons, key=lambda g: g.area) if polygons else Polygon()
    return polygon


def region_from_polyline(polyline: NDArray[np.float64], clipped: bool = False) -> DistortedRegion:
    pts = np.asarray(polyline, dtype=np.float64)
    if len(pts) and not np.array_equal(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[:1]])
    return DistortedRegion(polyline=pts, polygon=_make_polygon(pts), clipped=clipped)


def region_from_box(box: CylBox, cam: CameraIntrinsics) -> DistortedRegion:
    """Closed region bounded by the projected arcs of the box edges, in pixels"""
    xs = corners(box)
    chain = []
    clipped = False
    for i, j in BOUNDARY:
        pixels, edge_clipped = _edge_pixels(xs[i], xs[j], cam)
        clipped |= edge_clipped
        if len(pixels) == 0:
            continue
        # consecutive edges share a corner sample
        chain.append(pixels if not chain else pixels[1:])

    if clipped:
        logger.debug(f"Region of {box} clipped at the field-of-view boundary")
    polyline = np.vstack(chain) if chain else np.empty((0, 2))
    return region_from_polyline(polyline, clipped=clipped)


def region_from_rect(u_min: float, v_min: float, u_max: float, v_max: float) -> DistortedRegion:
    """Axis-aligned pixel rectangle as a region (image-domain boxes)"""
    polyline = np.array([[u_min, v_min], [u_max, v_min], [u_max, v_max], [u_min, v_max], [u_min, v_min]], dtype=np.float64)
    return DistortedRegion(polyline=polyline, polygon=shapely_box(u_min, v_min, u_max, v_max))


def _ordered_pair(a: DistortedRegion, b: DistortedRegion) -> tuple:
    # fixed evaluation order keeps the result bit-identical under argument swap
    key_a = (a.area, a.polygon.bounds, len(a.polyline))
    key_b = (b.area, b.polygon.bounds, len(b.polyline))
    return (a, b) if key_a <= key_b else (b, a)


def _same_region(a: DistortedRegion, b: DistortedRegion) -> bool:
    return a is b or (a.polyline.shape == b.polyline.shape and np.array_equal(a.polyline, b.polyline))


def distorted_iou(a: DistortedRegion, b: DistortedRegion) -> float:
    if _same_region(a, b):
        return 1.0
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    first, second = _ordered_pair(a, b)
    if not first.polygon.intersects(second.polygon):
        return 0.0
    inter = first.polygon.intersection(second.polygon).area
    union = first.area + second.area - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def coverage(region: DistortedRegion, target: DistortedRegion) -> float:
    """Share of the target's area inside region"""
    if target.area <= 0.0 or region.area <= 0.0:
        return 0.0
    return float(region.polygon.intersection(target.polygon).area / target.area)


def _rmse(errors: NDArray[np.float64]) -> float:
    return float(np.sqrt(np.mean(errors**2))) if errors.size else math.nan


def _std(errors: NDArray[np.float64]) -> float:
    if errors.size == 0:
        return math.nan
    if errors.size == 1:
        return 0.0
    return float(np.std(errors, ddof=1))


def rmse_metrics(records: Sequence[EvalRecord], cls_accuracy: Optional[float] = None) -> MetricsSummary:
    if not records:
        raise DatasetError("Cannot summarize an empty list of evaluation records")

    rho = np.array([r.rho_error for r in records], dtype=np.float64)
    beta = np.array([signed_angle_difference(r.beta_error) for r in records if math.isfinite(r.beta_error)], dtype=np.float64)
    rho = rho[np.isfinite(rho)]

    return MetricsSummary(
        episodes=len(records),
        avg_steps=float(np.mean([r.steps for r in records])),
        avg_iou=float(np.mean([r.final_iou for r in records])),
        correct_pct=100.0 * float(np.mean([r.triggered_correct for r in records])),
        rmse_rho=_rmse(rho),
        rmse_beta=_rmse(beta),
        std_rho=_std(rho),
        std_beta=_std(beta),
        cls_accuracy=cls_accuracy,
    )


def records_frame(records: Sequence[EvalRecord], summary: MetricsSummary) -> pd.DataFrame:
    """One row per episode followed by the summary row (means, correct fraction, RMSEs)"""
    rows: List[dict] = [
        {
            "steps": r.steps,
            "final_iou": r.final_iou,
            "correct": int(r.triggered_correct),
            "rho_err": r.rho_error,
            "beta_err": signed_angle_difference(r.beta_error) if math.isfinite(r.beta_error) else math.nan,
        }
        for r in records
    ]
    rows.append(
        {
            "steps": summary.avg_steps,
            "final_iou": summary.avg_iou,
            "correct": summary.correct_pct / 100.0,
            "rho_err": summary.rmse_rho,
            "beta_err": summary.rmse_beta,
        }
    )
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def write_metrics_csv(records: Sequence[EvalRecord], summary: MetricsSummary, path: str) -> None:
    records_frame(records, summary).to_csv(path, index=False)
    logger.info(f"Wrote {len(records)} evaluation rows and the summary row to {path}")
