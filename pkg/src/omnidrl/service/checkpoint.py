"""Versioned model checkpoints and resumable training state, stored as npz archives.

A model checkpoint holds the architecture, the flat parameter vector, the
training step and the metadata needed to refuse an incompatible dataset.
Strings are stored as numpy unicode scalars so archives load without pickle.
"""

import json
import logging
import os
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel

from omnidrl.configurator.settings.base import CHECKPOINT_FORMAT_VERSION
from omnidrl.configurator.settings.config import ArchitectureSpec, RunConfig
from omnidrl.domain.camera import CameraIntrinsics
from omnidrl.domain.exceptions import CheckpointMismatchError
from omnidrl.domain.models import DatasetRecord
from omnidrl.service.network import QNetwork

logger = logging.getLogger(__name__)

MODEL_FILE = "model.npz"
STATE_FILE = "training_state.npz"


class CheckpointMeta(BaseModel):
    format_version: int = CHECKPOINT_FORMAT_VERSION
    step: int = 0
    environment_kind: str = "cylindrical"
    architecture: ArchitectureSpec
    intrinsics: Optional[CameraIntrinsics] = None
    config_hash: str = ""


def _atomic_savez(path: str, arrays: Dict[str, Any]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp_path, path)


def save_checkpoint(path: str, net: QNetwork, meta: CheckpointMeta) -> None:
    meta = meta.model_copy(update={"architecture": net.spec})
    _atomic_savez(path, {"meta": np.array(meta.model_dump_json()), "params": net.get_flat()})
    logger.info(f"Saved checkpoint at step {meta.step} to {path}")


def load_checkpoint(path: str) -> Tuple[QNetwork, CheckpointMeta]:
    if not os.path.exists(path):
        raise CheckpointMismatchError(f"No checkpoint at {path}")
    with np.load(path, allow_pickle=False) as archive:
        if "meta" not in archive or "params" not in archive:
            raise CheckpointMismatchError(f"{path} is not an omnidrl checkpoint")
        meta = CheckpointMeta(**json.loads(str(archive["meta"])))
        params = archive["params"]

    if meta.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(f"Checkpoint format {meta.format_version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})")
    net = QNetwork(meta.architecture, np.random.default_rng(0))
    if params.size != net.n_params:
        raise CheckpointMismatchError(f"Checkpoint has {params.size} parameters, its architecture needs {net.n_params}")
    net.set_flat(params)
    logger.info(f"Loaded checkpoint from {path} (step {meta.step}, {net.n_params} parameters)")
    return net, meta


def check_compatible(meta: CheckpointMeta, config: RunConfig, records: Sequence[DatasetRecord]) -> None:
    """Refuse a checkpoint whose input, environment or camera differs from the evaluation setup"""
    arch = meta.architecture
    env = config.environment
    if arch.feature_size is not None or (arch.channels, arch.input_resolution) != (env.channels, env.input_resolution):
        raise CheckpointMismatchError(
            f"Checkpoint expects {arch.channels}x{arch.input_resolution} crops, environment produces {env.channels}x{env.input_resolution}"
        )
    if arch.n_actions != config.network.n_actions:
        raise CheckpointMismatchError(f"Checkpoint has {arch.n_actions} actions, config has {config.network.n_actions}")
    if meta.environment_kind != env.kind:
        raise CheckpointMismatchError(f"Checkpoint was trained in the {meta.environment_kind} environment, config selects {env.kind}")
    if meta.intrinsics is not None:
        for record in records:
            if record.intrinsics != meta.intrinsics:
                raise CheckpointMismatchError(f"Record {record.id} was rendered with different intrinsics than the training data")


def save_training_state(path: str, arrays: Dict[str, NDArray], extra: Dict[str, Any]) -> None:
    payload = {f"array__{name}": value for name, value in arrays.items()}
    payload["extra"] = np.array(json.dumps(extra, sort_keys=True))
    payload["format_version"] = np.array(CHECKPOINT_FORMAT_VERSION)
    _atomic_savez(path, payload)
    logger.info(f"Saved training state at step {extra.get('step')} to {path}")


def load_training_state(path: str) -> Tuple[Dict[str, NDArray], Dict[str, Any]]:
    if not os.path.exists(path):
        raise CheckpointMismatchError(f"No training state at {path}")
    with np.load(path, allow_pickle=False) as archive:
        if int(archive["format_version"]) != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointMismatchError(f"Training state format {int(archive['format_version'])} is not supported")
        arrays = {name[len("array__") :]: archive[name] for name in archive.files if name.startswith("array__")}
        extra = json.loads(str(archive["extra"]))
    return arrays, extra
