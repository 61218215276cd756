"""Unified sphere camera model.

A world point is pushed onto the unit sphere, the frame is shifted by ξ along
the optical axis, the shifted point is divided by its z coordinate (normalized
plane z = 1) and finally mapped to pixels by the generalized camera matrix.

All functions are vectorized over a trailing coordinate axis: a ``Point3`` is
any array of shape ``(..., 3)``, a ``NormalizedPoint`` or ``PixelPoint`` any
array of shape ``(..., 2)``. The ``*_masked`` variants never raise and return
a validity mask instead, which the renderer and the region clipper rely on.
"""

import logging
import os
from typing import Tuple

import numpy as np
import yaml
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field

from omnidrl.configurator.settings.base import PROJECTION_EPSILON
from omnidrl.domain.exceptions import GeometryDomainError, OutOfFovError, ProjectionAtInfinityError

logger = logging.getLogger(__name__)

Point3 = NDArray[np.float64]
NormalizedPoint = NDArray[np.float64]
PixelPoint = NDArray[np.float64]

CALIBRATION_KEYS = ("xi", "eta", "f1", "f2", "skew", "u0", "v0", "width", "height")


class CameraIntrinsics(BaseModel):
    """Unified-sphere parameters (xi, eta) plus the pinhole part of the generalized camera matrix"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    xi: float = Field(ge=0.0, le=1.0)
    eta: float = Field(gt=0.0)
    f1: float = Field(gt=0.0)
    f2: float = Field(gt=0.0)
    skew: float = 0.0
    u0: float
    v0: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    def with_xi(self, xi: float) -> "CameraIntrinsics":
        return self.model_copy(update={"xi": xi})

    def contains(self, pixels: ArrayLike) -> NDArray[np.bool_]:
        """In-bounds test against the image rectangle [0, width) x [0, height)"""
        p = np.asarray(pixels, dtype=np.float64)
        return (p[..., 0] >= 0.0) & (p[..., 0] <= self.width - 1) & (p[..., 1] >= 0.0) & (p[..., 1] <= self.height - 1)


def _as_points(x: ArrayLike, dim: int) -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != dim:
        raise GeometryDomainError(f"Expected trailing dimension {dim}, got shape {arr.shape}")
    return arr


def lift_to_sphere(x: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    """Sphere point closer to x, expressed in the frame centered at (0, 0, ξ)"""
    pts = _as_points(x, 3)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0.0):
        raise GeometryDomainError("Cannot lift the projection center onto the sphere")
    n = pts / r[..., None]
    n[..., 2] += cam.xi
    return n


def _shifted_z(pts: NDArray[np.float64], xi: float) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    r = np.linalg.norm(pts, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        nz = pts[..., 2] / r + xi
    return r, nz


def project_normalized_masked(x: ArrayLike, cam: CameraIntrinsics) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Normalized-plane projection plus a mask of points that are finite (n_z > ε, ‖x‖ > 0)"""
    pts = _as_points(x, 3)
    r, nz = _shifted_z(pts, cam.xi)
    valid = (r > 0.0) & (nz > PROJECTION_EPSILON)
    # n_x / n_z == x1 / (x3 + ξ r); for ξ = 0 this is exactly x1 / x3
    denom = pts[..., 2] + cam.xi * r
    safe = np.where(valid, denom, 1.0)
    out = np.stack([pts[..., 0] / safe, pts[..., 1] / safe], axis=-1)
    out[~valid] = np.nan
    return out, valid


def project_normalized(x: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    pts = _as_points(x, 3)
    if np.any(np.linalg.norm(pts, axis=-1) == 0.0):
        raise GeometryDomainError("Cannot project the projection center")
    out, valid = project_normalized_masked(pts, cam)
    if not np.all(valid):
        raise ProjectionAtInfinityError(f"{int(np.size(valid) - np.count_nonzero(valid))} point(s) project to infinity (xi={cam.xi})")
    return out


def normalized_to_pixel(p: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    q = _as_points(p, 2)
    ix, iy = q[..., 0], q[..., 1]
    u = cam.f1 * cam.eta * ix + cam.f1 * cam.eta * cam.skew * iy + cam.u0
    v = cam.f2 * cam.eta * iy + cam.v0
    return np.stack([u, v], axis=-1)


def pixel_to_normalized(p: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    q = _as_points(p, 2)
    iy = (q[..., 1] - cam.v0) / (cam.f2 * cam.eta)
    ix = (q[..., 0] - cam.u0 - cam.f1 * cam.eta * cam.skew * iy) / (cam.f1 * cam.eta)
    return np.stack([ix, iy], axis=-1)


def project(x: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    """World point to pixel (normalized projection followed by the camera matrix)"""
    return normalized_to_pixel(project_normalized(x, cam), cam)


def project_masked(x: ArrayLike, cam: CameraIntrinsics) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    normalized, valid = project_normalized_masked(x, cam)
    return normalized_to_pixel(normalized, cam), valid


def pixel_to_ray_masked(p: ArrayLike, cam: CameraIntrinsics) -> Tuple[NDArray[np.float64], NDArray[np.bool_]]:
    """Unit viewing directions for pixels, plus a mask of pixels inside the model's valid region"""
    m = pixel_to_normalized(p, cam)
    r2 = m[..., 0] ** 2 + m[..., 1] ** 2
    disc = 1.0 + (1.0 - cam.xi**2) * r2
    with np.errstate(invalid="ignore"):
        # n_z of the shifted sphere point; the sphere point itself is (s·m, s - ξ)
        s = (cam.xi + np.sqrt(disc)) / (r2 + 1.0)
    valid = (disc >= 0.0) & (s > PROJECTION_EPSILON)
    ray = np.stack([s * m[..., 0], s * m[..., 1], s - cam.xi], axis=-1)
    norm = np.linalg.norm(ray, axis=-1)
    valid &= norm > 0.0
    ray = ray / np.where(valid, norm, 1.0)[..., None]
    ray[~valid] = np.nan
    return ray, valid


def pixel_to_ray(p: ArrayLike, cam: CameraIntrinsics) -> NDArray[np.float64]:
    ray, valid = pixel_to_ray_masked(p, cam)
    if not np.all(valid):
        raise OutOfFovError(f"{int(np.size(valid) - np.count_nonzero(valid))} pixel(s) outside the valid image region")
    return ray


def load_intrinsics(path: str) -> CameraIntrinsics:
    """Read a calibration file (YAML with keys xi, eta, f1, f2, skew, u0, v0, width, height)"""
    with open(path, "r") as f:
        payload = yaml.safe_load(f) or {}
    missing = [key for key in CALIBRATION_KEYS if key not in payload]
    if missing:
        raise GeometryDomainError(f"Calibration file {path} is missing keys: {missing}")
    cam = CameraIntrinsics(**payload)
    logger.info(f"Loaded intrinsics from {path}: xi={cam.xi}, eta={cam.eta}, size={cam.width}x{cam.height}")
    return cam


def save_intrinsics(cam: CameraIntrinsics, path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump({key: getattr(cam, key) for key in CALIBRATION_KEYS}, f, sort_keys=False)
