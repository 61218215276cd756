"""Images of 3D lines and line segments under the unified sphere model.

A 3D line is represented by its moment l = x1 × x2, the normal of the
interpretation plane through the projection center. Its image on the
normalized plane lies on the conic m^T C m = 0, m = (ix, iy, 1), with

    C = | l1²(1-ξ²) - l3²ξ²   l1 l2 (1-ξ²)        l1 l3 |
        | l1 l2 (1-ξ²)        l2²(1-ξ²) - l3²ξ²   l2 l3 |
        | l1 l3               l2 l3               l3²   |

The segment arc is selected by sampling the 3D segment and projecting each
sample, which keeps the arc on the side that actually images the segment.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from omnidrl.domain.camera import CameraIntrinsics, normalized_to_pixel, project_normalized, project_normalized_masked
from omnidrl.domain.exceptions import DegenerateSegmentError, GeometryDomainError, ProjectionAtInfinityError

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 64
MAX_PIXEL_GAP = 1.0
MAX_SAMPLES = 2**16 + 1


@dataclass(frozen=True)
class CurveSegment:
    """Ordered samples of a projected segment, on the normalized plane and in pixels"""

    points: NDArray[np.float64]
    pixels: NDArray[np.float64]
    conic: NDArray[np.float64]

    @property
    def endpoints(self) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.points[0], self.points[-1]

    def __len__(self) -> int:
        return len(self.points)


def line_moment(x1: ArrayLike, x2: ArrayLike) -> NDArray[np.float64]:
    return np.cross(np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64))


def line_conic(l: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    """Symmetric conic of the image of every line with moment l, scaled so that max |entry| = 1"""
    moment = np.asarray(l, dtype=np.float64)
    norm = np.linalg.norm(moment)
    if norm == 0.0:
        raise GeometryDomainError("Line moment must be non-zero")
    l1, l2, l3 = moment / norm
    k = 1.0 - cam.xi**2
    x2 = cam.xi**2
    conic = np.array(
        [
            [l1 * l1 * k - l3 * l3 * x2, l1 * l2 * k, l1 * l3],
            [l1 * l2 * k, l2 * l2 * k - l3 * l3 * x2, l2 * l3],
            [l1 * l3, l2 * l3, l3 * l3],
        ]
    )
    scale = np.max(np.abs(conic))
    if scale <= 1e-15:
        # ξ = 1 with the plane through the optical axis: the quadratic vanishes, the image is the line l1 ix + l2 iy = 0
        conic = np.outer([l1, l2, 0.0], [l1, l2, 0.0])
        scale = np.max(np.abs(conic))
    return conic / scale


def conic_residual(conic: ArrayLike, points: ArrayLike) -> NDArray[np.float64]:
    """m^T C m for normalized-plane points m = (ix, iy, 1)"""
    p = np.asarray(points, dtype=np.float64)
    m = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return np.einsum("...i,ij,...j->...", m, np.asarray(conic), m)


def sample_segment(x1: ArrayLike, x2: ArrayLike, n: int) -> NDArray[np.float64]:
    """n evenly spaced 3D points from x1 to x2, endpoints exact"""
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1.0 - t) * a + t * b
    pts[0], pts[-1] = a, b
    return pts


def _check_segment(x1: NDArray[np.float64], x2: NDArray[np.float64]) -> NDArray[np.float64]:
    moment = np.cross(x1, x2)
    if np.linalg.norm(moment) <= 1e-12 * np.linalg.norm(x1) * np.linalg.norm(x2):
        raise DegenerateSegmentError(f"Segment {x1.tolist()} -> {x2.tolist()} is collinear with the projection center")
    return moment


def _max_gap(pixels: NDArray[np.float64]) -> float:
    return float(np.max(np.linalg.norm(np.diff(pixels, axis=0), axis=-1)))


def segment_curve(
    x1: ArrayLike, x2: ArrayLike, cam: CameraIntrinsics, n_samples: int = DEFAULT_SAMPLES, max_gap: float = MAX_PIXEL_GAP
) -> CurveSegment:
    """Image of the segment x1 -> x2 sampled densely enough that consecutive pixels are < max_gap apart"""
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    moment = _check_segment(a, b)
    project_normalized(np.stack([a, b]), cam)

    n = max(int(n_samples), 2)
    while True:
        normalized, valid = project_normalized_masked(sample_segment(a, b, n), cam)
        if not np.all(valid):
            raise ProjectionAtInfinityError("Segment passes through the region that projects to infinity")
        pixels = normalized_to_pixel(normalized, cam)
        if _max_gap(pixels) < max_gap or n >= MAX_SAMPLES:
            break
        n = 2 * n - 1

    if n >= MAX_SAMPLES:
        logger.warning(f"Segment sampling capped at {n} samples (max gap {_max_gap(pixels):.2f}px)")
    return CurveSegment(points=normalized, pixels=pixels, conic=line_conic(moment, cam))


def segment_curve_masked(
    x1: ArrayLike, x2: ArrayLike, cam: CameraIntrinsics, n_samples: int = DEFAULT_SAMPLES, max_gap: float = MAX_PIXEL_GAP
) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Pixel samples of a segment that may leave the field of view, with the mask of projectable samples.

    Only gaps between samples near the image (within one image size of its border) drive the refinement.
    """
    a = np.asarray(x1, dtype=np.float64)
    b = np.asarray(x2, dtype=np.float64)
    n = max(int(n_samples), 2)
    while True:
        normalized, valid = project_normalized_masked(sample_segment(a, b, n), cam)
        pixels = normalized_to_pixel(normalized, cam)
        near = valid & (np.abs(pixels[:, 0] - cam.width / 2) < 1.5 * cam.width) & (np.abs(pixels[:, 1] - cam.height / 2) < 1.5 * cam.height)
        gaps = np.linalg.norm(np.diff(pixels, axis=0), axis=-1)
        finite_gaps = gaps[near[1:] & near[:-1]]
        if finite_gaps.size == 0 or np.max(finite_gaps) < max_gap or n >= MAX_SAMPLES:
            return pixels, valid
        n = 2 * n - 1
