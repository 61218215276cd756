import math
from enum import IntEnum
from typing import Dict, Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from omnidrl.domain.exceptions import ContractViolationError
from omnidrl.utils.common import quantize, wrap_angle


class Action(IntEnum):
    RHO_PLUS = 0
    RHO_MINUS = 1
    BETA_PLUS = 2
    BETA_MINUS = 3
    W_PLUS = 4
    W_MINUS = 5
    H_PLUS = 6
    H_MINUS = 7
    TRIGGER = 8

    @property
    def is_terminal(self) -> bool:
        return self is Action.TRIGGER


N_ACTIONS = len(Action)

# Corner pairs joined by box edges; corners are ordered bottom-left, bottom-right, top-left, top-right
EDGES = ((0, 1), (0, 2), (1, 3), (2, 3))

# Edges traversed head to tail around the box outline
BOUNDARY = ((0, 1), (1, 3), (3, 2), (2, 0))


class CylBox(BaseModel):
    """Vertical planar rectangle facing the camera, in cylindrical world coordinates.

    Every field is kept on a 1e-9 lattice so that an action followed by its
    opposite returns the identical box.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = Field(gt=0.0)
    beta: float
    z: float
    w: float = Field(gt=0.0)
    h: float = Field(gt=0.0)

    @field_validator("rho", "z", "w", "h")
    @classmethod
    def _on_lattice(cls, value: float) -> float:
        return quantize(value)

    @field_validator("beta")
    @classmethod
    def _wrap_beta(cls, value: float) -> float:
        return wrap_angle(quantize(wrap_angle(value)))

    @property
    def center(self) -> NDArray[np.float64]:
        return np.array([self.rho * math.cos(self.beta), self.rho * math.sin(self.beta), self.z + self.h / 2.0])


class ActionStepSizes(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = Field(default=0.1, gt=0.0)
    beta: float = Field(default=0.05, gt=0.0)
    w: float = Field(default=0.05, gt=0.0)
    h: float = Field(default=0.05, gt=0.0)

    @field_validator("rho", "beta", "w", "h")
    @classmethod
    def _on_lattice(cls, value: float) -> float:
        return quantize(value)


class BoxBounds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rho_min: float = Field(default=0.5, gt=0.0)
    rho_max: float = 8.0
    w_min: float = Field(default=0.1, gt=0.0)
    w_max: float = 3.0
    h_min: float = Field(default=0.2, gt=0.0)
    h_max: float = 3.5

    @model_validator(mode="after")
    def _ordered(self) -> "BoxBounds":
        for low, high in ((self.rho_min, self.rho_max), (self.w_min, self.w_max), (self.h_min, self.h_max)):
            if low > high:
                raise ValueError(f"Lower bound {low} exceeds upper bound {high}")
        return self

    def contains(self, box: CylBox) -> bool:
        return (
            self.rho_min <= box.rho <= self.rho_max
            and self.w_min <= box.w <= self.w_max
            and self.h_min <= box.h <= self.h_max
        )

    def clamp(self, box: CylBox) -> CylBox:
        return CylBox(**self.clamp_params(box.model_dump()))

    def clamp_params(self, params: Dict[str, float]) -> Dict[str, float]:
        clamped = dict(params)
        clamped["rho"] = min(max(params["rho"], self.rho_min), self.rho_max)
        clamped["w"] = min(max(params["w"], self.w_min), self.w_max)
        clamped["h"] = min(max(params["h"], self.h_min), self.h_max)
        return clamped


def corners(box: CylBox) -> NDArray[np.float64]:
    """Four corners (4, 3): bottom-left, bottom-right, top-left, top-right as seen from the camera"""
    cos_b, sin_b = math.cos(box.beta), math.sin(box.beta)
    cx, cy = box.rho * cos_b, box.rho * sin_b
    # horizontal tangent, perpendicular to the radial direction
    tx, ty = -sin_b * box.w / 2.0, cos_b * box.w / 2.0
    bottom, top = box.z, box.z + box.h
    return np.array(
        [
            [cx - tx, cy - ty, bottom],
            [cx + tx, cy + ty, bottom],
            [cx - tx, cy - ty, top],
            [cx + tx, cy + ty, top],
        ]
    )


def apply_action(box: CylBox, action: Action, steps: ActionStepSizes, bounds: Optional[BoxBounds] = None) -> CylBox:
    """Move exactly one box parameter by one step; z is never changed"""
    action = Action(action)
    if action.is_terminal:
        raise ContractViolationError("The trigger action does not move the box")

    field, sign = _ACTION_EFFECTS[action]
    params = box.model_dump()
    params[field] += sign * getattr(steps, field)
    if bounds is not None:
        params = bounds.clamp_params(params)
    return CylBox(**params)


_ACTION_EFFECTS = {
    Action.RHO_PLUS: ("rho", 1.0),
    Action.RHO_MINUS: ("rho", -1.0),
    Action.BETA_PLUS: ("beta", 1.0),
    Action.BETA_MINUS: ("beta", -1.0),
    Action.W_PLUS: ("w", 1.0),
    Action.W_MINUS: ("w", -1.0),
    Action.H_PLUS: ("h", 1.0),
    Action.H_MINUS: ("h", -1.0),
}


class PixelBox(BaseModel):
    """Axis-aligned rectangle in pixel coordinates (image-domain localization)"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    @model_validator(mode="after")
    def _positive_size(self) -> "PixelBox":
        if self.u_max <= self.u_min or self.v_max <= self.v_min:
            raise ValueError(f"Empty pixel box ({self.u_min}, {self.v_min}, {self.u_max}, {self.v_max})")
        return self

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min
