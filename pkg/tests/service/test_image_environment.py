import math

import numpy as np
import pytest

from omnidrl.domain.boxes import PixelBox
from omnidrl.domain.exceptions import ContractViolationError
from omnidrl.domain.models import Scene
from omnidrl.service.image_environment import (
    MIN_SIDE,
    ImageBoxEnvironment,
    PixelAction,
    apply_pixel_action,
    clip_pixel_box,
    envelope_box,
    render_pixel_state,
)
from omnidrl.service.metrics import region_from_box


@pytest.fixture
def box():
    return PixelBox(u_min=40.0, v_min=40.0, u_max=60.0, v_max=80.0)


def _bounds(box):
    return (box.u_min, box.v_min, box.u_max, box.v_max)


class TestPixelActions:
    @pytest.mark.parametrize(
        "action,expected",
        [
            (PixelAction.RIGHT, (44.0, 40.0, 64.0, 80.0)),
            (PixelAction.LEFT, (36.0, 40.0, 56.0, 80.0)),
            (PixelAction.UP, (40.0, 32.0, 60.0, 72.0)),
            (PixelAction.DOWN, (40.0, 48.0, 60.0, 88.0)),
            (PixelAction.BIGGER, (38.0, 36.0, 62.0, 84.0)),
            (PixelAction.SMALLER, (42.0, 44.0, 58.0, 76.0)),
            (PixelAction.FATTER, (40.0, 44.0, 60.0, 76.0)),
            (PixelAction.TALLER, (42.0, 40.0, 58.0, 80.0)),
        ],
    )
    def test_moves(self, box, action, expected):
        moved = apply_pixel_action(box, action, 0.2, 128, 128)
        assert _bounds(moved) == pytest.approx(expected)

    def test_translation_saturates_at_the_border(self):
        box = PixelBox(u_min=1.0, v_min=10.0, u_max=21.0, v_max=30.0)
        moved = apply_pixel_action(box, PixelAction.LEFT, 0.2, 128, 128)
        assert _bounds(moved) == pytest.approx((0.0, 10.0, 20.0, 30.0))

    def test_shrinking_stops_at_the_minimum_side(self, box):
        for _ in range(30):
            box = apply_pixel_action(box, PixelAction.SMALLER, 0.2, 128, 128)
        assert box.width == pytest.approx(MIN_SIDE)
        assert box.height == pytest.approx(MIN_SIDE)

    def test_box_never_outgrows_the_image(self, box):
        for _ in range(30):
            box = apply_pixel_action(box, PixelAction.BIGGER, 0.2, 128, 128)
        assert _bounds(box) == pytest.approx((0.0, 0.0, 127.0, 127.0))

    def test_trigger_does_not_move(self, box):
        with pytest.raises(ContractViolationError):
            apply_pixel_action(box, PixelAction.TRIGGER, 0.2, 128, 128)

    def test_clip_pixel_box(self):
        assert _bounds(clip_pixel_box(120.0, -3.0, 140.0, 5.0, 128, 128)) == pytest.approx((107.0, 0.0, 127.0, 8.0))


class TestImageBoxEnvironment:
    @pytest.fixture
    def env_config(self, tiny_config):
        return tiny_config.environment.model_copy(update={"kind": "image"})

    @pytest.fixture
    def sample(self, sample_factory):
        return sample_factory(Scene(rho=2.0, beta=0.0, width=0.5, height=1.7, seed=5))

    def test_envelope_box_bounds_the_projected_region(self, sample):
        gt = sample.record.gt
        u_min, v_min, u_max, v_max = region_from_box(gt, sample.image.cam).envelope
        pixel_box = envelope_box(gt, sample.image)
        assert _bounds(pixel_box) == pytest.approx((u_min, v_min, u_max, v_max))

    def test_pixel_state(self, sample, env_config, box):
        state = render_pixel_state(box, sample.image, env_config)
        assert state.crop.shape == (1, 16, 16)
        assert state.region.area == pytest.approx(box.width * box.height)

    def test_candidates_are_pixel_boxes(self, sample, env_config, rng):
        env = ImageBoxEnvironment(env_config)
        env.load(sample)
        states = env.candidates(rng)

        assert len(states) == 6
        assert all(isinstance(s.box, PixelBox) for s in states)

    def test_episode(self, sample, env_config, rng):
        env = ImageBoxEnvironment(env_config)
        env.load(sample)
        env.start(env.candidates(rng)[0])

        result = env.act(PixelAction.RIGHT)

        assert result.observation.shape == (1, 16, 16)
        assert result.reward in (-1.0, 1.0)
        assert env.state.step_index == 1
        assert all(math.isnan(e) for e in env.position_errors())

    def test_teleport_to_the_ground_truth_envelope(self, sample, env_config, rng):
        env = ImageBoxEnvironment(env_config)
        env.load(sample)
        env.start(env.candidates(rng)[0])

        env.teleport(sample.record.gt)

        assert isinstance(env.state.box, PixelBox)
        assert 0.3 < env.iou < 1.0
        assert env.act(PixelAction.TRIGGER).terminal
        np.testing.assert_array_equal(env.state.crop, render_pixel_state(env.state.box, sample.image, env_config).crop)
