import math
import os

import numpy as np
import pandas as pd
import pytest
from shapely import affinity

from omnidrl.domain.boxes import CylBox
from omnidrl.domain.camera import pixel_to_ray_masked
from omnidrl.domain.exceptions import DatasetError
from omnidrl.domain.models import EvalRecord
from omnidrl.service.metrics import (
    METRIC_COLUMNS,
    coverage,
    distorted_iou,
    region_from_box,
    region_from_polyline,
    region_from_rect,
    rmse_metrics,
    write_metrics_csv,
)

SUBPIXEL = 0.25


def _ray_box_mask(rays, valid, box):
    """Rays that hit the box rectangle in front of the camera"""
    cos_b, sin_b = math.cos(box.beta), math.sin(box.beta)
    along_normal = rays[..., 0] * cos_b + rays[..., 1] * sin_b
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(along_normal > 0.0, box.rho / along_normal, np.nan)
    points = rays * t[..., None]
    s = -points[..., 0] * sin_b + points[..., 1] * cos_b
    z = points[..., 2]
    return valid & np.isfinite(t) & (np.abs(s) <= box.w / 2) & (z >= box.z) & (z <= box.z + box.h)


def _ray_cast_iou(a, b, cam):
    """IoU of the two boxes' silhouettes, counted on a sub-pixel grid by casting a ray per sample"""
    bounds = np.array([region_from_box(a, cam).envelope, region_from_box(b, cam).envelope])
    u_min, v_min = np.floor(bounds[:, :2].min(axis=0)) - 1
    u_max, v_max = np.ceil(bounds[:, 2:].max(axis=0)) + 1
    v, u = np.mgrid[v_min:v_max:SUBPIXEL, u_min:u_max:SUBPIXEL]
    rays, valid = pixel_to_ray_masked(np.stack([u + SUBPIXEL / 2, v + SUBPIXEL / 2], axis=-1), cam)
    in_a = _ray_box_mask(rays, valid, a)
    in_b = _ray_box_mask(rays, valid, b)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


def _box_pairs(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        gt = CylBox(
            rho=rng.uniform(1.5, 4.0),
            beta=rng.uniform(0.0, 2 * math.pi),
            z=-1.0,
            w=rng.uniform(0.4, 0.8),
            h=rng.uniform(1.4, 1.9),
        )
        other = CylBox(
            rho=gt.rho * rng.uniform(0.8, 1.2),
            beta=gt.beta + rng.uniform(-0.1, 0.1),
            z=-1.0,
            w=gt.w * rng.uniform(0.7, 1.3),
            h=gt.h * rng.uniform(0.7, 1.3),
        )
        yield gt, other


def _max_oracle_gap(camera, n, seed):
    gaps = []
    for a, b in _box_pairs(n, seed):
        iou = distorted_iou(region_from_box(a, camera), region_from_box(b, camera))
        gaps.append(abs(iou - _ray_cast_iou(a, b, camera)))
    return max(gaps)


@pytest.fixture
def gt():
    return CylBox(rho=2.0, beta=0.7, z=-1.0, w=0.5, h=1.7)


class TestDistortedIoU:
    def test_matches_ray_cast_silhouettes(self, camera):
        assert _max_oracle_gap(camera, n=20, seed=11) < 0.01

    @pytest.mark.slow
    def test_matches_ray_cast_silhouettes_many_pairs(self, camera):
        assert _max_oracle_gap(camera, n=200, seed=12) < 0.01

    def test_wide_boxes_with_curved_sides(self, camera):
        a = CylBox(rho=1.0, beta=0.0, z=-0.5, w=2.0, h=1.5)
        b = CylBox(rho=1.1, beta=0.3, z=-0.5, w=1.6, h=1.5)
        region_a, region_b = region_from_box(a, camera), region_from_box(b, camera)

        assert not region_a.clipped and not region_b.clipped
        assert abs(distorted_iou(region_a, region_b) - _ray_cast_iou(a, b, camera)) < 0.01

    def test_shrinking_a_region_lowers_the_iou(self, camera, gt):
        target = region_from_box(gt, camera)
        scales = [1.0, 0.9, 0.75, 0.6, 0.45, 0.3]
        ious = []
        for s in scales:
            shrunk = affinity.scale(target.polygon, s, s, origin="centroid")
            ious.append(distorted_iou(region_from_polyline(np.asarray(shrunk.exterior.coords)), target))

        assert all(later < earlier for earlier, later in zip(ious, ious[1:]))
        for s, iou in zip(scales, ious):
            assert s**2 - 0.02 <= iou <= s**2 + 1e-9

    def test_identical_regions(self, camera, gt):
        assert distorted_iou(region_from_box(gt, camera), region_from_box(gt, camera)) == 1.0

    def test_symmetric(self, camera, gt):
        a = region_from_box(gt, camera)
        b = region_from_box(gt.model_copy(update={"beta": 0.8, "w": 0.7}), camera)
        assert distorted_iou(a, b) == distorted_iou(b, a)
        assert 0.0 < distorted_iou(a, b) < 1.0

    def test_disjoint_boxes(self, camera, gt):
        opposite = gt.model_copy(update={"beta": gt.beta + math.pi})
        assert distorted_iou(region_from_box(gt, camera), region_from_box(opposite, camera)) == 0.0

    def test_nested_boxes(self, camera, gt):
        """A box behind another with the same angular extent covers the same region"""
        far = CylBox(rho=4.0, beta=gt.beta, z=-2.0, w=1.0, h=3.4)
        iou = distorted_iou(region_from_box(gt, camera), region_from_box(far, camera))
        assert iou == pytest.approx(1.0, abs=1e-3)

    def test_empty_region(self, camera, gt):
        empty = region_from_polyline(np.empty((0, 2)))
        assert empty.area == 0.0
        assert distorted_iou(region_from_box(gt, camera), empty) == 0.0

    def test_rectangles(self):
        a = region_from_rect(0.0, 0.0, 10.0, 10.0)
        b = region_from_rect(5.0, 0.0, 15.0, 10.0)
        assert distorted_iou(a, b) == pytest.approx(1.0 / 3.0)
        assert coverage(a, b) == pytest.approx(0.5)


class TestRegion:
    def test_region_is_closed_and_unclipped(self, camera, gt):
        region = region_from_box(gt, camera)

        np.testing.assert_array_equal(region.polyline[0], region.polyline[-1])
        assert not region.clipped
        assert region.polygon.is_valid and region.area > 0.0

    def test_envelope_bounds_the_polyline(self, camera, gt):
        region = region_from_box(gt, camera)
        u_min, v_min, u_max, v_max = region.envelope
        assert region.polygon.bounds == pytest.approx((u_min, v_min, u_max, v_max))

    def test_box_leaving_the_field_of_view_is_clipped(self, camera):
        region = region_from_box(CylBox(rho=0.5, beta=0.0, z=-3.0, w=0.5, h=3.0), camera)
        assert region.clipped

    def test_coverage_of_itself(self, camera, gt):
        region = region_from_box(gt, camera)
        assert coverage(region, region) == pytest.approx(1.0)


class TestErrorMetrics:
    @pytest.fixture
    def records(self):
        return [
            EvalRecord(steps=10, final_iou=0.8, triggered_correct=True, rho_error=0.1, beta_error=0.05),
            EvalRecord(steps=20, final_iou=0.4, triggered_correct=False, rho_error=-0.1, beta_error=2 * math.pi - 0.05),
            EvalRecord(steps=30, final_iou=0.9, triggered_correct=True, rho_error=0.2, beta_error=0.1),
        ]

    def test_summary(self, records):
        summary = rmse_metrics(records, cls_accuracy=0.75)

        assert summary.episodes == 3
        assert summary.avg_steps == pytest.approx(20.0)
        assert summary.avg_iou == pytest.approx(0.7)
        assert summary.correct_pct == pytest.approx(200.0 / 3.0)
        assert summary.rmse_rho == pytest.approx(math.sqrt(0.06 / 3))
        assert summary.rmse_beta == pytest.approx(math.sqrt(0.015 / 3))
        assert summary.std_rho == pytest.approx(np.std([0.1, -0.1, 0.2], ddof=1))
        assert summary.cls_accuracy == 0.75

    def test_missing_position_errors_are_ignored(self):
        summary = rmse_metrics([EvalRecord(steps=1, final_iou=0.5, triggered_correct=False)])
        assert math.isnan(summary.rmse_rho) and math.isnan(summary.std_beta)

    def test_empty_records_rejected(self):
        with pytest.raises(DatasetError):
            rmse_metrics([])

    def test_csv_has_episode_rows_and_summary_row(self, records, temp_dir):
        path = os.path.join(temp_dir, "metrics.csv")
        summary = rmse_metrics(records)
        write_metrics_csv(records, summary, path)

        frame = pd.read_csv(path)
        assert list(frame.columns) == METRIC_COLUMNS
        assert len(frame) == 4
        assert frame["beta_err"].iloc[1] == pytest.approx(-0.05)
        assert frame["correct"].iloc[-1] == pytest.approx(2.0 / 3.0)
        assert frame["rho_err"].iloc[-1] == pytest.approx(summary.rmse_rho)
