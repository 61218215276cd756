"""Box-localization environment over omnidirectional images.

The agent moves a cylindrical box (CylBox) with nine discrete actions. The
state is the image crop inside the pixel envelope of the box's projected
edges, the reward is the sign of the IoU change, and the trigger action ends
the episode with +/- trigger_reward depending on the IoU threshold.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import cv2
import numpy as np
from numpy.typing import NDArray

from omnidrl.configurator.settings.config import EnvConfig
from omnidrl.domain.boxes import Action, CylBox, PixelBox, apply_action
from omnidrl.domain.exceptions import ContractViolationError, DatasetError, EmptyEnvelopeError
from omnidrl.service.dataset import SceneCache, SceneSample
from omnidrl.service.metrics import DistortedRegion, coverage, distorted_iou, region_from_box
from omnidrl.service.renderer import OmniImage
from omnidrl.utils.common import TWO_PI

logger = logging.getLogger(__name__)

OUTLINE_COLOUR = (0, 255, 0)
# draws per scene of the split before reset() gives up on finding a positive one
RESET_DRAWS_PER_SCENE = 4

Box = Union[CylBox, PixelBox]


@dataclass(frozen=True)
class BoxState:
    crop: NDArray[np.float32]
    box: Box
    step_index: int = 0
    degraded: bool = False
    terminal: bool = False
    region: Optional[DistortedRegion] = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class StepOutcome:
    next_state: BoxState
    reward: float
    terminal: bool
    iou: float


@dataclass(frozen=True)
class Transition:
    """What an environment hands back to the trainer after one action"""

    observation: NDArray[np.float32]
    reward: float
    terminal: bool
    info: Dict[str, Any] = field(default_factory=dict)


def pixel_envelope(region: DistortedRegion, width: int, height: int) -> Tuple[Tuple[int, int, int, int], bool]:
    """Integer (col_min, row_min, col_max, row_max) envelope clipped to the image, and whether clipping happened"""
    if len(region.polyline) == 0:
        raise EmptyEnvelopeError("Box projects to no visible pixel")
    u_min, v_min, u_max, v_max = region.envelope
    if u_max < 0.0 or v_max < 0.0 or u_min > width - 1 or v_min > height - 1:
        raise EmptyEnvelopeError(f"Envelope ({u_min:.1f}, {v_min:.1f}, {u_max:.1f}, {v_max:.1f}) lies outside the image")

    clipped = u_min < 0.0 or v_min < 0.0 or u_max > width - 1 or v_max > height - 1
    col_min = int(math.floor(max(u_min, 0.0)))
    row_min = int(math.floor(max(v_min, 0.0)))
    col_max = int(math.ceil(min(u_max, width - 1)))
    row_max = int(math.ceil(min(v_max, height - 1)))
    return (col_min, row_min, col_max, row_max), clipped


def crop_envelope(
    image: OmniImage, envelope: Tuple[int, int, int, int], config: EnvConfig, outline: Optional[NDArray[np.float64]] = None
) -> NDArray[np.float32]:
    """Crop, optionally draw the box outline, resample to the network input and scale to [0, 1]; returns (C, R, R)"""
    col_min, row_min, col_max, row_max = envelope
    patch = image.pixels[row_min : row_max + 1, col_min : col_max + 1]
    if patch.size == 0:
        raise EmptyEnvelopeError(f"Empty crop for envelope {envelope}")

    if outline is not None and len(outline) > 1:
        patch = patch.copy()
        points = np.rint(outline - np.array([col_min, row_min])).astype(np.int32).reshape(-1, 1, 2)
        cv2.polylines(patch, [points], isClosed=True, color=OUTLINE_COLOUR, thickness=1)

    resolution = config.input_resolution
    interpolation = cv2.INTER_AREA if patch.shape[0] >= resolution and patch.shape[1] >= resolution else cv2.INTER_LINEAR
    resized = cv2.resize(patch, (resolution, resolution), interpolation=interpolation)
    if config.channels == 1:
        channels = cv2.cvtColor(resized, cv2.COLOR_RGB2GRAY)[None, :, :]
    else:
        channels = np.transpose(resized, (2, 0, 1))
    return (channels.astype(np.float32) / 255.0).astype(np.float32)


def render_state(box: CylBox, image: OmniImage, config: EnvConfig, step_index: int = 0) -> BoxState:
    """State for a box: the crop inside the envelope of its projected edges"""
    region = region_from_box(box, image.cam)
    envelope, clipped = pixel_envelope(region, image.cam.width, image.cam.height)
    outline = region.polyline if config.draw_outline else None
    crop = crop_envelope(image, envelope, config, outline)
    return BoxState(crop=crop, box=box, step_index=step_index, degraded=clipped or region.clipped, region=region)


def state_iou(state: BoxState, gt_region: Optional[DistortedRegion]) -> float:
    if gt_region is None or state.region is None:
        return 0.0
    return distorted_iou(state.region, gt_region)


def transition(
    state: BoxState, action: Action, gt_region: Optional[DistortedRegion], config: EnvConfig, advance: Callable[[BoxState, Action], BoxState]
) -> StepOutcome:
    """Reward and episode control shared by every box parameterization"""
    if state.terminal or state.step_index >= config.max_steps:
        raise ContractViolationError(f"Episode already ended after {state.step_index} steps")

    action = Action(action)
    current_iou = state_iou(state, gt_region)
    if action.is_terminal:
        reward = config.trigger_reward if current_iou >= config.tau else -config.trigger_reward
        next_state = replace(state, step_index=state.step_index + 1, terminal=True)
        return StepOutcome(next_state=next_state, reward=reward, terminal=True, iou=current_iou)

    try:
        next_state = advance(state, action)
    except EmptyEnvelopeError as e:
        # a move that would leave the image is refused; the unchanged IoU earns -1
        logger.debug(f"Refused {action.name} at step {state.step_index}: {e}")
        next_state = replace(state, step_index=state.step_index + 1)

    next_iou = state_iou(next_state, gt_region)
    reward = 1.0 if next_iou - current_iou > 0.0 else -1.0
    terminal = next_state.step_index >= config.max_steps
    return StepOutcome(next_state=replace(next_state, terminal=terminal), reward=reward, terminal=terminal, iou=next_iou)


def step(state: BoxState, action: Action, gt_region: Optional[DistortedRegion], image: OmniImage, config: EnvConfig) -> StepOutcome:
    """One environment step; a pure function of its arguments"""

    def advance(current: BoxState, move: Action) -> BoxState:
        box = apply_action(current.box, move, config.steps, config.bounds)
        return render_state(box, image, config, current.step_index + 1)

    return transition(state, action, gt_region, config, advance)


def candidate_betas(n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """One random azimuth inside the middle half of each of n equal sectors"""
    offsets = rng.uniform(0.25, 0.75, size=n)
    return (np.arange(n) + offsets) * (TWO_PI / n)


def init_boxes(mode: str, config: EnvConfig, rng: np.random.Generator, base_z: float, gt: Optional[CylBox] = None) -> List[CylBox]:
    """Initial boxes: the fixed-distance candidates in test mode, a single start box in train mode"""
    init = config.init
    if mode == "test":
        return [
            config.bounds.clamp(CylBox(rho=init.rho0, beta=float(beta), z=base_z, w=init.w0, h=init.h0))
            for beta in candidate_betas(init.n_candidates, rng)
        ]
    if mode != "train":
        raise ValueError(f"Unknown episode mode {mode!r}")
    if gt is None:
        raise DatasetError("Training episodes need a ground-truth box")

    if rng.random() < init.train_fixed_fraction:
        beta = candidate_betas(init.n_candidates, rng)[rng.integers(init.n_candidates)]
        return [config.bounds.clamp(CylBox(rho=init.rho0, beta=float(beta), z=gt.z, w=init.w0, h=init.h0))]

    params = {
        "rho": gt.rho + rng.uniform(-init.perturb_rho, init.perturb_rho),
        "beta": gt.beta + rng.uniform(-init.perturb_beta, init.perturb_beta),
        "z": gt.z,
        "w": gt.w * (1.0 + rng.uniform(-init.perturb_scale, init.perturb_scale)),
        "h": gt.h * (1.0 + rng.uniform(-init.perturb_scale, init.perturb_scale)),
    }
    return [CylBox(**config.bounds.clamp_params(params))]


def init_episode(mode: str, sample: SceneSample, config: EnvConfig, rng: np.random.Generator) -> List[BoxState]:
    base_z = -sample.record.scene.camera_height
    boxes = init_boxes(mode, config, rng, base_z, sample.record.gt)
    return [render_state(box, sample.image, config) for box in boxes]


class EpisodeSource:
    """Draws scenes for training episodes from a loaded split"""

    def __init__(self, cache: SceneCache):
        if len(cache) == 0:
            raise DatasetError("Cannot draw episodes from an empty split")
        self.cache = cache

    def __len__(self) -> int:
        return len(self.cache)

    def draw(self, rng: np.random.Generator) -> SceneSample:
        for _ in range(len(self.cache)):
            sample = self.cache.get(int(rng.integers(len(self.cache))))
            if sample is not None:
                return sample
        raise DatasetError("Every drawn scene of the split is unreadable")


class LocalizationEnvironment:
    """Episode bookkeeping shared by the cylindrical and the image-domain environments.

    Negative scenes never start an RL episode; their candidate crops are
    queued for the classification branch instead.
    """

    def __init__(self, config: EnvConfig, source: Optional[EpisodeSource] = None):
        self.config = config
        self.source = source
        self.sample: Optional[SceneSample] = None
        self.state: Optional[BoxState] = None
        self.gt_region: Optional[DistortedRegion] = None
        self.terminal = False
        self.iou = 0.0
        self._pending_labels: List[Tuple[NDArray[np.float32], int]] = []

    # parameterization hooks

    def _initial_states(self, mode: str, sample: SceneSample, rng: np.random.Generator) -> List[BoxState]:
        raise NotImplementedError

    def _advance(self, state: BoxState, action: Action) -> BoxState:
        raise NotImplementedError

    def _box_state(self, box: CylBox) -> BoxState:
        raise NotImplementedError

    def _position_errors(self, box: Box) -> Tuple[float, float]:
        """(rho error, beta error) of a box against the ground truth"""
        raise NotImplementedError

    # episode control

    def load(self, sample: SceneSample) -> None:
        """Bind a scene without starting an episode"""
        self.sample = sample
        gt = sample.record.gt
        self.gt_region = region_from_box(gt, sample.image.cam) if gt is not None else None
        self.state = None
        self.terminal = False
        self.iou = 0.0

    def candidates(self, rng: np.random.Generator) -> List[BoxState]:
        return self._initial_states("test", self._require_sample(), rng)

    def start(self, state: BoxState) -> NDArray[np.float32]:
        self.state = replace(state, step_index=0, terminal=False)
        self.terminal = False
        self.iou = state_iou(self.state, self.gt_region)
        if self.state.degraded:
            logger.debug(f"Episode starts from a degraded state (box {self.state.box})")
        return self.state.crop

    def reset(self, rng: np.random.Generator) -> NDArray[np.float32]:
        """Start a training episode on a random positive scene"""
        if self.source is None:
            raise DatasetError("Environment has no episode source")
        max_draws = RESET_DRAWS_PER_SCENE * max(1, len(self.source))
        for _ in range(max_draws):
            sample = self.source.draw(rng)
            self.load(sample)
            if sample.record.gt is not None:
                break
            self._queue_labels(self.candidates(rng))
        else:
            raise DatasetError(f"No positive scene among {max_draws} draws; the split has no readable pedestrian images")

        self._queue_labels(self.candidates(rng))
        return self.start(self._initial_states("train", sample, rng)[0])

    def act(self, action: int) -> Transition:
        if self.state is None or self.terminal:
            raise ContractViolationError("act() called without a running episode")
        outcome = transition(self.state, Action(action), self.gt_region, self.config, self._advance)
        self.state = outcome.next_state
        self.terminal = outcome.terminal
        self.iou = outcome.iou
        return Transition(
            observation=outcome.next_state.crop,
            reward=outcome.reward,
            terminal=outcome.terminal,
            info={"iou": outcome.iou, "triggered": Action(action).is_terminal, "degraded": outcome.next_state.degraded},
        )

    def teleport(self, box: CylBox) -> None:
        """Replace the current box, keeping the step count"""
        step_index = self.state.step_index if self.state is not None else 0
        self.state = replace(self._box_state(box), step_index=step_index)
        self.iou = state_iou(self.state, self.gt_region)

    def position_errors(self) -> Tuple[float, float]:
        if self.state is None or self.sample is None or self.sample.record.gt is None:
            return math.nan, math.nan
        return self._position_errors(self.state.box)

    # classification branch

    def crop_label(self, state: BoxState) -> int:
        if self.gt_region is None or state.region is None:
            return 0
        return int(coverage(state.region, self.gt_region) >= self.config.label_coverage)

    def classification_samples(self) -> List[Tuple[NDArray[np.float32], int]]:
        samples, self._pending_labels = self._pending_labels, []
        return samples

    def _queue_labels(self, states: List[BoxState]) -> None:
        self._pending_labels.extend((state.crop, self.crop_label(state)) for state in states)

    def _require_sample(self) -> SceneSample:
        if self.sample is None:
            raise ContractViolationError("No scene loaded")
        return self.sample


class BoxEnvironment(LocalizationEnvironment):
    """Cylindrical boxes moved in world coordinates"""

    def _initial_states(self, mode: str, sample: SceneSample, rng: np.random.Generator) -> List[BoxState]:
        return init_episode(mode, sample, self.config, rng)

    def _advance(self, state: BoxState, action: Action) -> BoxState:
        box = apply_action(state.box, action, self.config.steps, self.config.bounds)
        return render_state(box, self._require_sample().image, self.config, state.step_index + 1)

    def _box_state(self, box: CylBox) -> BoxState:
        return render_state(box, self._require_sample().image, self.config)

    def _position_errors(self, box: Box) -> Tuple[float, float]:
        gt = self._require_sample().record.gt
        return box.rho - gt.rho, box.beta - gt.beta
