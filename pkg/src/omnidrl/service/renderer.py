"""Ray-cast renderer for synthetic omnidirectional scenes.

Every pixel is lifted to its viewing ray, intersected with a cylindrical room
(floor, wall, ceiling) and the pedestrian proxy, and the nearest hit is
shaded. The proxy is a textured vertical rectangle facing the camera, so its
ground-truth box is exact.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from omnidrl.domain.boxes import CylBox
from omnidrl.domain.camera import CameraIntrinsics, pixel_to_ray_masked
from omnidrl.domain.exceptions import DatasetError
from omnidrl.domain.models import Scene
from omnidrl.utils.common import make_rng

logger = logging.getLogger(__name__)

PEDESTRIAN_ID = 4


@dataclass(frozen=True)
class OmniImage:
    pixels: NDArray[np.uint8]
    cam: CameraIntrinsics

    def __post_init__(self) -> None:
        if self.pixels.shape[:2] != (self.cam.height, self.cam.width):
            raise ValueError(f"Image shape {self.pixels.shape[:2]} does not match intrinsics {self.cam.height}x{self.cam.width}")


def gt_box(scene: Scene) -> CylBox:
    """Box exactly enclosing the pedestrian proxy"""
    if not scene.has_pedestrian:
        raise DatasetError("Scene has no pedestrian, so it has no ground-truth box")
    return CylBox(rho=scene.rho, beta=scene.beta, z=-scene.camera_height, w=scene.width, h=scene.height)


def pixel_grid(cam: CameraIntrinsics) -> NDArray[np.float64]:
    """(H, W, 2) pixel-center coordinates (u = column, v = row)"""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def _floor_hits(rays: NDArray[np.float64], scene: Scene) -> NDArray[np.float64]:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -scene.camera_height / rays[..., 2]
    return np.where(rays[..., 2] < 0.0, t, np.inf)


def _ceiling_hits(rays: NDArray[np.float64], scene: Scene) -> NDArray[np.float64]:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = scene.ceiling_height / rays[..., 2]
    return np.where(rays[..., 2] > 0.0, t, np.inf)


def _wall_hits(rays: NDArray[np.float64], scene: Scene) -> NDArray[np.float64]:
    horizontal = np.hypot(rays[..., 0], rays[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = scene.room_radius / horizontal
    return np.where(horizontal > 0.0, t, np.inf)


def _pedestrian_hits(rays: NDArray[np.float64], scene: Scene):
    """Ray parameter of the proxy plane hit (inf when missed) and the hit's local (s, height) coordinates"""
    cos_b, sin_b = math.cos(scene.beta), math.sin(scene.beta)
    along_normal = rays[..., 0] * cos_b + rays[..., 1] * sin_b
    with np.errstate(divide="ignore", invalid="ignore"):
        t = scene.rho / along_normal
    hit = np.where(along_normal > 0.0, t, np.inf)
    finite = np.isfinite(hit)
    points = rays * np.where(finite, hit, 0.0)[..., None]
    s = -points[..., 0] * sin_b + points[..., 1] * cos_b
    height = points[..., 2] + scene.camera_height
    inside = finite & (np.abs(s) <= scene.width / 2.0) & (height >= 0.0) & (height <= scene.height)
    return np.where(inside, hit, np.inf), s, height


def _pedestrian_shade(s: NDArray[np.float64], height: NDArray[np.float64], scene: Scene) -> NDArray[np.float64]:
    """Smooth clothing-like texture: dark trousers, lighter shirt, pale head band"""
    rel = height / scene.height
    across = s / scene.width
    trousers = np.stack([60 + 20 * np.cos(6.0 * across), 70 + 10 * np.cos(4.0 * rel), 120 + 15 * np.cos(3.0 * across)], axis=-1)
    shirt = np.stack([170 + 30 * np.cos(5.0 * rel + scene.texture_phase), 60 + 20 * np.cos(4.0 * across), np.full_like(rel, 50.0)], axis=-1)
    head = np.stack([215 + 10 * np.cos(4.0 * across), 180 + 10 * np.cos(3.0 * rel), np.full_like(rel, 150.0)], axis=-1)
    weight_shirt = 1.0 / (1.0 + np.exp(-(rel - 0.47) * 40.0))
    weight_head = 1.0 / (1.0 + np.exp(-(rel - 0.86) * 40.0))
    colour = trousers * (1.0 - weight_shirt)[..., None] + shirt * weight_shirt[..., None]
    return colour * (1.0 - weight_head)[..., None] + head * weight_head[..., None]


def _background_shade(points: NDArray[np.float64], surface: NDArray[np.int64], scene: Scene) -> NDArray[np.float64]:
    colour = np.zeros(points.shape, dtype=np.float64)
    radial = np.hypot(points[..., 0], points[..., 1])
    azimuth = np.arctan2(points[..., 1], points[..., 0])

    floor = surface == 1
    tiles = (np.floor(points[..., 0] / 0.5) + np.floor(points[..., 1] / 0.5)) % 2
    colour[floor] = np.stack([110 + 30 * tiles, 105 + 30 * tiles, 95 + 30 * tiles], axis=-1)[floor]

    wall = surface == 2
    stripes = 0.5 + 0.5 * np.cos(12.0 * azimuth)
    wall_rgb = np.stack([140 + 40 * stripes, 150 + 30 * stripes, 160 + 20 * stripes], axis=-1)
    colour[wall] = wall_rgb[wall]

    ceiling = surface == 3
    glow = np.exp(-radial / 3.0)
    colour[ceiling] = np.stack([200 + 40 * glow, 200 + 40 * glow, 195 + 40 * glow], axis=-1)[ceiling]
    return colour


def render_surfaces(scene: Scene, cam: CameraIntrinsics):
    """Per-pixel nearest surface id (0 none, 1 floor, 2 wall, 3 ceiling, 4 pedestrian), hit points and proxy coordinates"""
    rays, valid = pixel_to_ray_masked(pixel_grid(cam), cam)
    rays = np.where(valid[..., None], rays, 0.0)

    candidates = [_floor_hits(rays, scene), _wall_hits(rays, scene), _ceiling_hits(rays, scene)]
    s = height = None
    if scene.has_pedestrian:
        pedestrian_t, s, height = _pedestrian_hits(rays, scene)
        candidates.append(pedestrian_t)
    stacked = np.stack(candidates, axis=-1)
    stacked[~valid] = np.inf

    nearest = np.argmin(stacked, axis=-1)
    t = np.take_along_axis(stacked, nearest[..., None], axis=-1)[..., 0]
    surface = np.where(np.isfinite(t), nearest + 1, 0)
    points = rays * np.where(np.isfinite(t), t, 0.0)[..., None]
    return surface, points, s, height


def render_scene(scene: Scene, cam: CameraIntrinsics) -> OmniImage:
    """Shade the nearest hit for every pixel; deterministic given the scene's seed"""
    surface, points, s, height = render_surfaces(scene, cam)
    colour = _background_shade(points, surface, scene)
    if scene.has_pedestrian:
        pedestrian = surface == PEDESTRIAN_ID
        colour[pedestrian] = _pedestrian_shade(s, height, scene)[pedestrian]

    colour *= scene.light
    if scene.noise_std > 0.0:
        colour += make_rng([scene.seed, 7]).normal(0.0, scene.noise_std, size=colour.shape)
    colour[surface == 0] = 0.0

    pixels = np.clip(np.rint(colour), 0, 255).astype(np.uint8)
    logger.debug(f"Rendered scene seed={scene.seed} pedestrian={scene.has_pedestrian} ({np.count_nonzero(surface == PEDESTRIAN_ID)} proxy px)")
    return OmniImage(pixels=pixels, cam=cam)


def pedestrian_mask(scene: Scene, cam: CameraIntrinsics) -> NDArray[np.bool_]:
    """Silhouette of the proxy in the rendered image"""
    surface, _, _, _ = render_surfaces(scene, cam)
    return surface == PEDESTRIAN_ID
