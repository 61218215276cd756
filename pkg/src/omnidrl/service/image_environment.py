"""Image-domain baseline: an axis-aligned pixel rectangle moved in the image plane.

Action indices keep their slot numbers but act on the rectangle: right, left,
up, down, bigger, smaller, fatter, taller, trigger. Every move changes the box
by image_step_fraction of its current width or height. Rewards and IoU use the
same distorted ground-truth region as the cylindrical environment.
"""

import logging
import math
from enum import IntEnum
from typing import List, Tuple

import numpy as np

from omnidrl.configurator.settings.config import EnvConfig
from omnidrl.domain.boxes import Action, CylBox, PixelBox
from omnidrl.domain.exceptions import ContractViolationError, EmptyEnvelopeError
from omnidrl.service.dataset import SceneSample
from omnidrl.service.environment import Box, BoxState, LocalizationEnvironment, crop_envelope, init_boxes
from omnidrl.service.metrics import region_from_box, region_from_rect
from omnidrl.service.renderer import OmniImage

logger = logging.getLogger(__name__)

MIN_SIDE = 4.0


class PixelAction(IntEnum):
    RIGHT = 0
    LEFT = 1
    UP = 2
    DOWN = 3
    BIGGER = 4
    SMALLER = 5
    FATTER = 6
    TALLER = 7
    TRIGGER = 8


def apply_pixel_action(box: PixelBox, action: int, fraction: float, width: int, height: int) -> PixelBox:
    action = PixelAction(action)
    if action is PixelAction.TRIGGER:
        raise ContractViolationError("The trigger action does not move the box")

    du, dv = fraction * box.width, fraction * box.height
    u_min, v_min, u_max, v_max = box.u_min, box.v_min, box.u_max, box.v_max
    if action is PixelAction.RIGHT:
        u_min, u_max = u_min + du, u_max + du
    elif action is PixelAction.LEFT:
        u_min, u_max = u_min - du, u_max - du
    elif action is PixelAction.UP:
        v_min, v_max = v_min - dv, v_max - dv
    elif action is PixelAction.DOWN:
        v_min, v_max = v_min + dv, v_max + dv
    elif action is PixelAction.BIGGER:
        u_min, u_max, v_min, v_max = u_min - du / 2, u_max + du / 2, v_min - dv / 2, v_max + dv / 2
    elif action is PixelAction.SMALLER:
        u_min, u_max, v_min, v_max = u_min + du / 2, u_max - du / 2, v_min + dv / 2, v_max - dv / 2
    elif action is PixelAction.FATTER:
        v_min, v_max = v_min + dv / 2, v_max - dv / 2
    else:
        u_min, u_max = u_min + du / 2, u_max - du / 2
    return clip_pixel_box(u_min, v_min, u_max, v_max, width, height)


def clip_pixel_box(u_min: float, v_min: float, u_max: float, v_max: float, width: int, height: int) -> PixelBox:
    """Keep the rectangle inside the image and at least MIN_SIDE pixels on each side"""
    u_min, u_max = _clip_interval(u_min, u_max, width - 1)
    v_min, v_max = _clip_interval(v_min, v_max, height - 1)
    return PixelBox(u_min=u_min, v_min=v_min, u_max=u_max, v_max=v_max)


def _clip_interval(low: float, high: float, limit: float) -> Tuple[float, float]:
    if high - low < MIN_SIDE:
        centre = (low + high) / 2
        low, high = centre - MIN_SIDE / 2, centre + MIN_SIDE / 2
    size = min(high - low, limit)
    # shift rather than cut so that translations saturate at the border
    if low < 0.0:
        low, high = 0.0, size
    if high > limit:
        low, high = limit - size, limit
    return low, high


def envelope_box(box: CylBox, image: OmniImage) -> PixelBox:
    u_min, v_min, u_max, v_max = region_from_box(box, image.cam).envelope
    if not all(math.isfinite(x) for x in (u_min, v_min, u_max, v_max)):
        raise EmptyEnvelopeError(f"Box {box} has no visible outline")
    return clip_pixel_box(u_min, v_min, u_max, v_max, image.cam.width, image.cam.height)


def render_pixel_state(box: PixelBox, image: OmniImage, config: EnvConfig, step_index: int = 0) -> BoxState:
    envelope = (int(math.floor(box.u_min)), int(math.floor(box.v_min)), int(math.ceil(box.u_max)), int(math.ceil(box.v_max)))
    region = region_from_rect(box.u_min, box.v_min, box.u_max, box.v_max)
    outline = region.polyline if config.draw_outline else None
    return BoxState(crop=crop_envelope(image, envelope, config, outline), box=box, step_index=step_index, region=region)


class ImageBoxEnvironment(LocalizationEnvironment):
    """Rectangles start from the pixel envelopes of the cylindrical initial boxes"""

    def _initial_states(self, mode: str, sample: SceneSample, rng: np.random.Generator) -> List[BoxState]:
        base_z = -sample.record.scene.camera_height
        boxes = init_boxes(mode, self.config, rng, base_z, sample.record.gt)
        return [self._box_state(box) for box in boxes]

    def _advance(self, state: BoxState, action: Action) -> BoxState:
        cam = self._require_sample().image.cam
        box = apply_pixel_action(state.box, int(action), self.config.image_step_fraction, cam.width, cam.height)
        return render_pixel_state(box, self._require_sample().image, self.config, state.step_index + 1)

    def _box_state(self, box: CylBox) -> BoxState:
        image = self._require_sample().image
        return render_pixel_state(envelope_box(box, image), image, self.config)

    def _position_errors(self, box: Box) -> Tuple[float, float]:
        return math.nan, math.nan
