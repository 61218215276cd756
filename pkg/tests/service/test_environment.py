import math
import os
from dataclasses import replace

import cv2
import numpy as np
import pytest

from omnidrl.domain.boxes import Action, CylBox, corners
from omnidrl.domain.camera import project
from omnidrl.domain.exceptions import ContractViolationError, DatasetError, EmptyEnvelopeError
from omnidrl.domain.models import Scene, Split
from omnidrl.service.dataset import SceneCache, generate_dataset, load_split
from omnidrl.service.environment import (
    RESET_DRAWS_PER_SCENE,
    BoxEnvironment,
    EpisodeSource,
    candidate_betas,
    crop_envelope,
    init_boxes,
    pixel_envelope,
    render_state,
    state_iou,
    step,
    transition,
)
from omnidrl.service.metrics import region_from_box, region_from_rect
from omnidrl.service.renderer import gt_box


class ScriptedSource:
    """Hands out samples in a fixed order"""

    def __init__(self, samples):
        self.samples = list(samples)
        self.draws = 0

    def __len__(self):
        return len(self.samples)

    def draw(self, rng):
        sample = self.samples[self.draws % len(self.samples)]
        self.draws += 1
        return sample


@pytest.fixture
def env_config(tiny_config):
    return tiny_config.environment


@pytest.fixture
def sample(sample_factory, scene):
    return sample_factory(scene)


@pytest.fixture
def gt(sample):
    return sample.record.gt


@pytest.fixture
def gt_region(sample, gt):
    return region_from_box(gt, sample.image.cam)


class TestRenderState:
    def test_crop_shape_and_range(self, sample, gt, env_config):
        state = render_state(gt, sample.image, env_config)

        assert state.crop.shape == (1, 16, 16)
        assert state.crop.dtype == np.float32
        assert 0.0 <= state.crop.min() and state.crop.max() <= 1.0
        assert state.step_index == 0 and not state.degraded

    def test_colour_crop(self, sample, gt, env_config):
        state = render_state(gt, sample.image, env_config.model_copy(update={"channels": 3}))
        assert state.crop.shape == (3, 16, 16)

    def test_full_image_crop_is_a_plain_resize(self, sample, env_config):
        crop = crop_envelope(sample.image, (0, 0, 127, 127), env_config)
        expected = cv2.cvtColor(cv2.resize(sample.image.pixels, (16, 16), interpolation=cv2.INTER_AREA), cv2.COLOR_RGB2GRAY)
        np.testing.assert_array_equal(crop[0], expected.astype(np.float32) / 255.0)

    def test_outline_changes_the_crop(self, sample, gt, env_config):
        plain = render_state(gt, sample.image, env_config)
        outlined = render_state(gt, sample.image, env_config.model_copy(update={"draw_outline": True}))
        assert not np.array_equal(plain.crop, outlined.crop)

    def test_state_of_the_ground_truth_has_unit_iou(self, sample, gt, gt_region, env_config):
        assert state_iou(render_state(gt, sample.image, env_config), gt_region) == 1.0
        assert state_iou(render_state(gt, sample.image, env_config), None) == 0.0


class TestPixelEnvelope:
    def test_envelope_inside_the_image(self):
        envelope, clipped = pixel_envelope(region_from_rect(10.2, 20.7, 40.5, 60.0), 128, 128)
        assert envelope == (10, 20, 41, 60)
        assert not clipped

    def test_envelope_is_clipped_to_the_image(self):
        envelope, clipped = pixel_envelope(region_from_rect(-5.0, 10.0, 50.0, 200.0), 128, 128)
        assert envelope == (0, 10, 50, 127)
        assert clipped

    def test_envelope_outside_the_image(self):
        with pytest.raises(EmptyEnvelopeError):
            pixel_envelope(region_from_rect(200.0, 200.0, 300.0, 300.0), 128, 128)

    def test_pinhole_envelope_is_the_corner_bounds(self, small_camera):
        cam = small_camera.with_xi(0.0)
        box = CylBox(rho=1.0, beta=0.3, z=1.0, w=0.5, h=0.5)
        pixels = project(corners(box), cam)

        envelope = region_from_box(box, cam).envelope

        np.testing.assert_allclose(envelope[:2], pixels.min(axis=0), atol=1e-9)
        np.testing.assert_allclose(envelope[2:], pixels.max(axis=0), atol=1e-9)


class TestStep:
    def test_trigger_on_the_ground_truth(self, sample, gt, gt_region, env_config):
        state = render_state(gt, sample.image, env_config)
        outcome = step(state, Action.TRIGGER, gt_region, sample.image, env_config)

        assert outcome.reward == 10.0
        assert outcome.terminal
        assert outcome.iou == 1.0
        assert outcome.next_state.box == gt
        assert outcome.next_state.step_index == 1

    def test_trigger_far_from_the_ground_truth(self, sample, gt, gt_region, env_config):
        far = gt.model_copy(update={"beta": gt.beta + math.pi})
        outcome = step(render_state(far, sample.image, env_config), Action.TRIGGER, gt_region, sample.image, env_config)
        assert outcome.reward == -10.0
        assert outcome.terminal

    def test_reward_is_the_sign_of_the_iou_change(self, sample, gt, gt_region, env_config):
        state = render_state(gt, sample.image, env_config)

        away = step(state, Action.BETA_PLUS, gt_region, sample.image, env_config)
        back = step(away.next_state, Action.BETA_MINUS, gt_region, sample.image, env_config)

        assert away.reward == -1.0 and away.iou < 1.0
        assert back.reward == 1.0 and back.iou == 1.0
        assert back.next_state.box == gt
        assert not away.terminal and not back.terminal

    def test_unchanged_iou_is_penalized(self, sample, gt_region, env_config):
        far = CylBox(rho=2.0, beta=4.0, z=-1.0, w=0.5, h=1.7)
        outcome = step(render_state(far, sample.image, env_config), Action.H_PLUS, gt_region, sample.image, env_config)
        assert outcome.iou == 0.0
        assert outcome.reward == -1.0

    def test_episode_is_capped(self, sample, gt, gt_region, env_config):
        state = replace(render_state(gt, sample.image, env_config), step_index=env_config.max_steps - 1)
        outcome = step(state, Action.RHO_PLUS, gt_region, sample.image, env_config)

        assert outcome.terminal
        with pytest.raises(ContractViolationError):
            step(outcome.next_state, Action.RHO_MINUS, gt_region, sample.image, env_config)

    def test_triggered_state_is_terminal(self, sample, gt, gt_region, env_config):
        state = render_state(gt, sample.image, env_config)
        outcome = step(state, Action.TRIGGER, gt_region, sample.image, env_config)

        assert outcome.next_state.terminal
        assert not state.terminal
        with pytest.raises(ContractViolationError):
            step(outcome.next_state, Action.RHO_PLUS, gt_region, sample.image, env_config)

    def test_capped_state_is_terminal(self, sample, gt, gt_region, env_config):
        state = replace(render_state(gt, sample.image, env_config), step_index=env_config.max_steps - 1)
        outcome = step(state, Action.W_PLUS, gt_region, sample.image, env_config)
        assert outcome.next_state.terminal

        early = step(render_state(gt, sample.image, env_config), Action.W_PLUS, gt_region, sample.image, env_config)
        assert not early.next_state.terminal

    def test_step_is_pure(self, sample, gt, gt_region, env_config):
        state = render_state(gt, sample.image, env_config)
        first = step(state, Action.W_PLUS, gt_region, sample.image, env_config)
        second = step(state, Action.W_PLUS, gt_region, sample.image, env_config)

        assert first.reward == second.reward and first.iou == second.iou
        assert first.next_state.box == second.next_state.box
        np.testing.assert_array_equal(first.next_state.crop, second.next_state.crop)
        assert state.box == gt and state.step_index == 0

    def test_refused_move_keeps_the_state(self, sample, gt, gt_region, env_config):
        state = render_state(gt, sample.image, env_config)

        def leave_the_image(current, action):
            raise EmptyEnvelopeError("outside")

        outcome = transition(state, Action.RHO_MINUS, gt_region, env_config, leave_the_image)

        assert outcome.next_state.box == state.box
        assert outcome.next_state.step_index == 1
        assert outcome.reward == -1.0


class TestInitialBoxes:
    def test_candidate_betas_are_spread(self, rng):
        for _ in range(100):
            betas = candidate_betas(6, rng)
            gaps = np.diff(np.append(betas, betas[0] + 2 * math.pi))
            assert np.all(betas >= 0.0) and np.all(betas < 2 * math.pi)
            assert np.all(gaps >= 2 * math.pi / 12 - 1e-12)

    def test_test_mode_candidates(self, env_config, rng):
        boxes = init_boxes("test", env_config, rng, base_z=-1.0)

        assert len(boxes) == 6
        for box in boxes:
            assert (box.rho, box.z, box.w, box.h) == (1.2, -1.0, 1.0, 2.4)

    def test_train_mode_perturbs_the_ground_truth(self, env_config, gt, rng):
        config = env_config.model_copy(update={"init": env_config.init.model_copy(update={"train_fixed_fraction": 0.0})})
        for _ in range(50):
            (box,) = init_boxes("train", config, rng, base_z=-1.0, gt=gt)
            assert abs(box.rho - gt.rho) <= config.init.perturb_rho + 1e-9
            assert box.z == gt.z
            assert config.bounds.contains(box)

    def test_train_mode_fixed_protocol(self, env_config, gt, rng):
        config = env_config.model_copy(update={"init": env_config.init.model_copy(update={"train_fixed_fraction": 1.0})})
        (box,) = init_boxes("train", config, rng, base_z=-1.0, gt=gt)
        assert (box.rho, box.w, box.h) == (1.2, 1.0, 2.4)

    def test_train_mode_needs_ground_truth(self, env_config, rng):
        with pytest.raises(DatasetError):
            init_boxes("train", env_config, rng, base_z=-1.0)

    def test_unknown_mode(self, env_config, rng):
        with pytest.raises(ValueError):
            init_boxes("eval", env_config, rng, base_z=-1.0)


class TestBoxEnvironment:
    @pytest.fixture
    def negative(self, sample_factory):
        return sample_factory(Scene(has_pedestrian=False, seed=2), record_id=1)

    def test_reset_skips_negative_scenes_and_queues_their_crops(self, env_config, sample, negative, rng):
        source = ScriptedSource([negative, sample])
        env = BoxEnvironment(env_config, source)

        observation = env.reset(rng)

        assert source.draws == 2
        assert env.sample is sample
        assert observation.shape == (1, 16, 16)
        samples = env.classification_samples()
        assert len(samples) == 12
        assert [label for _, label in samples[:6]] == [0] * 6
        assert env.classification_samples() == []

    def test_reset_needs_a_source(self, env_config, rng):
        with pytest.raises(DatasetError):
            BoxEnvironment(env_config).reset(rng)

    def test_reset_gives_up_without_readable_positives(self, tiny_config, temp_dir, rng):
        records = generate_dataset(tiny_config.dataset.n_test, Split.TEST, tiny_config, seed=0, out_dir=temp_dir)
        for record in records:
            if record.label == 1:
                os.remove(os.path.join(temp_dir, Split.TEST.value, record.image_path))
        index, loaded = load_split(temp_dir, Split.TEST)
        env = BoxEnvironment(tiny_config.environment, EpisodeSource(SceneCache(index, loaded)))

        with pytest.raises(DatasetError):
            env.reset(rng)

    def test_reset_draws_are_bounded(self, env_config, negative, rng):
        source = ScriptedSource([negative])
        env = BoxEnvironment(env_config, source)

        with pytest.raises(DatasetError):
            env.reset(rng)
        assert source.draws == RESET_DRAWS_PER_SCENE
        assert len(env.classification_samples()) == 6 * RESET_DRAWS_PER_SCENE

    def test_act_reports_the_transition(self, env_config, sample, gt, rng):
        env = BoxEnvironment(env_config, ScriptedSource([sample]))
        env.reset(rng)
        env.teleport(gt)

        result = env.act(Action.TRIGGER)

        assert result.reward == 10.0
        assert result.terminal
        assert result.info["triggered"] and result.info["iou"] == 1.0
        with pytest.raises(ContractViolationError):
            env.act(Action.RHO_PLUS)

    def test_episode_ends_at_the_step_cap(self, env_config, sample, rng):
        env = BoxEnvironment(env_config, ScriptedSource([sample]))
        env.reset(rng)
        results = [env.act(Action.W_PLUS if i % 2 == 0 else Action.W_MINUS) for i in range(env_config.max_steps)]

        assert [r.terminal for r in results] == [False] * (env_config.max_steps - 1) + [True]

    def test_teleport_and_position_errors(self, env_config, sample, gt, rng):
        env = BoxEnvironment(env_config)
        env.load(sample)
        env.start(env.candidates(rng)[0])
        env.act(Action.RHO_PLUS)

        env.teleport(gt)

        assert env.iou == 1.0
        assert env.state.step_index == 1
        assert env.position_errors() == (0.0, 0.0)

    def test_crop_labels(self, env_config, sample, gt):
        env = BoxEnvironment(env_config)
        env.load(sample)

        assert env.crop_label(render_state(gt, sample.image, env_config)) == 1
        far = gt.model_copy(update={"beta": gt.beta + math.pi})
        assert env.crop_label(render_state(far, sample.image, env_config)) == 0

    def test_negative_scene_has_no_position_errors(self, env_config, negative, rng):
        env = BoxEnvironment(env_config)
        env.load(negative)
        env.start(env.candidates(rng)[0])

        assert all(math.isnan(e) for e in env.position_errors())
        assert env.crop_label(env.state) == 0

    def test_candidates_need_a_scene(self, env_config, rng):
        with pytest.raises(ContractViolationError):
            BoxEnvironment(env_config).candidates(rng)

    def test_gt_box_helper_agrees_with_the_record(self, sample, scene):
        assert sample.record.gt == gt_box(scene)
