import shutil
import tempfile

import numpy as np
import pytest

from omnidrl.configurator.settings.config import (
    DEFAULT_CAMERA,
    ArchitectureSpec,
    ConvSpec,
    DatasetConfig,
    EnvConfig,
    RunConfig,
    SceneConfig,
    TrainConfig,
)
from omnidrl.domain.camera import CameraIntrinsics
from omnidrl.domain.models import Scene
from omnidrl.service.dataset import SceneSample, make_record
from omnidrl.service.renderer import render_scene


@pytest.fixture
def camera():
    """Full-resolution default camera (1024x1024, xi = 0.9)"""
    return DEFAULT_CAMERA


@pytest.fixture
def small_camera():
    """Same field of view as the default camera at 128x128"""
    return CameraIntrinsics(xi=0.9, eta=1.0, f1=17.5, f2=17.5, skew=0.0, u0=63.5, v0=63.5, width=128, height=128)


@pytest.fixture
def tiny_config(small_camera):
    """Run config small enough to train and evaluate in a few seconds"""
    return RunConfig(
        seed=3,
        camera=small_camera,
        scene=SceneConfig(noise_std=0.0),
        environment=EnvConfig(input_resolution=16, max_steps=12),
        dataset=DatasetConfig(n_train=6, n_test=4, negative_fraction=0.25),
        network=ArchitectureSpec(
            input_resolution=16,
            channels=1,
            shared_conv=[ConvSpec(out_channels=4, kernel=3, stride=2)],
            branch_conv=[],
            fc_hidden=[16],
        ),
        training=TrainConfig(max_steps=60, batch_size=4, replay_capacity=200, target_sync=20, checkpoint_every=25, learning_rate=1e-3),
    )


@pytest.fixture
def scene():
    return Scene(rho=2.0, beta=0.7, width=0.5, height=1.7, seed=5)


@pytest.fixture
def sample_factory(tiny_config):
    """Build an in-memory SceneSample for a scene, rendered with the tiny config's camera"""

    def build(scene: Scene, record_id: int = 0) -> SceneSample:
        record = make_record(record_id, "test", scene, tiny_config.camera, None)
        return SceneSample(record=record, image=render_scene(scene, tiny_config.camera))

    return build


@pytest.fixture
def temp_dir():
    path = tempfile.mkdtemp()
    yield path
    shutil.rmtree(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
