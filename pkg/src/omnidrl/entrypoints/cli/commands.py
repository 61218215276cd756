import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd

from omnidrl import __version__
from omnidrl.configurator.settings.config import RunConfig, config_hash, dump_config
from omnidrl.domain.boxes import CylBox
from omnidrl.domain.exceptions import CheckpointMismatchError, DatasetError, OmniDRLError
from omnidrl.domain.lines import segment_curve_masked
from omnidrl.domain.models import MetricsSummary, RunManifest, Scene, Split
from omnidrl.service.checkpoint import (
    MODEL_FILE,
    STATE_FILE,
    CheckpointMeta,
    check_compatible,
    load_checkpoint,
    load_training_state,
    save_checkpoint,
    save_training_state,
)
from omnidrl.service.dataset import SceneCache, generate_dataset, load_image, load_split
from omnidrl.service.environment import BoxEnvironment, EpisodeSource, LocalizationEnvironment
from omnidrl.service.image_environment import ImageBoxEnvironment
from omnidrl.service.inference import OracleAgent, QAgent, evaluate
from omnidrl.service.metrics import region_from_box, write_metrics_csv
from omnidrl.service.network import QNetwork
from omnidrl.service.renderer import gt_box, render_scene
from omnidrl.service.trainer import DQNTrainer
from omnidrl.utils.common import make_rng

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.yaml"
LOG_FILE = "train_log.csv"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"

BOX_COLOUR = (0, 255, 0)
LINE_COLOUR = (255, 0, 0)

COMPARISON_COLUMNS = ["method", "avg_steps", "avg_iou", "correct_pct", "training_steps"]
POSITION_COLUMNS = ["method", "rmse_rho", "std_rho", "rmse_beta", "std_beta", "cls_accuracy"]


def write_manifest(out_dir: str, command: str, config: RunConfig, outputs: Dict) -> RunManifest:
    manifest = RunManifest(
        command=command,
        version=__version__,
        seed=config.seed,
        config_hash=config_hash(config),
        config=config.model_dump(mode="json"),
        outputs=outputs,
    )
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, MANIFEST_FILE), "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    dump_config(config, os.path.join(out_dir, CONFIG_FILE))
    return manifest


def make_environment(config: RunConfig, source: Optional[EpisodeSource] = None) -> LocalizationEnvironment:
    if config.environment.kind == "image":
        return ImageBoxEnvironment(config.environment, source)
    return BoxEnvironment(config.environment, source)


def cmd_generate(config: RunConfig, out_dir: str) -> RunManifest:
    """Render the train and test splits with their indexes and a manifest"""
    n_train, n_test = config.dataset.split_counts()
    logger.info(f"Generating {n_train} train and {n_test} test scenes into {out_dir} (seed {config.seed})")
    outputs = {}
    for split, n in ((Split.TRAIN, n_train), (Split.TEST, n_test)):
        records = generate_dataset(n, split, config, config.seed, out_dir)
        outputs[split.value] = {"scenes": len(records), "negatives": sum(r.label == 0 for r in records)}
    return write_manifest(out_dir, "generate", config, outputs)


class _CheckpointWriter:
    """Writes the model at every offered checkpoint and the training state whenever it can be captured"""

    def __init__(self, out_dir: str, config: RunConfig, intrinsics):
        self.out_dir = out_dir
        self.config = config
        self.intrinsics = intrinsics

    def __call__(self, trainer: DQNTrainer, final: bool) -> None:
        meta = CheckpointMeta(
            step=trainer.step,
            environment_kind=self.config.environment.kind,
            architecture=trainer.net.spec,
            intrinsics=self.intrinsics,
            config_hash=config_hash(self.config),
        )
        save_checkpoint(os.path.join(self.out_dir, MODEL_FILE), trainer.net, meta)
        trainer.write_log(os.path.join(self.out_dir, LOG_FILE))
        if trainer.at_episode_boundary:
            arrays, extra = trainer.state_dict()
            save_training_state(os.path.join(self.out_dir, STATE_FILE), arrays, extra)
        elif final:
            logger.info(f"Run ended mid-episode at step {trainer.step}; the last resumable state is the previous checkpoint")


def cmd_train(config: RunConfig, dataset_dir: str, out_dir: str, resume: bool = False) -> DQNTrainer:
    index, records = load_split(dataset_dir, Split.TRAIN)
    if not any(r.label == 1 for r in records):
        raise DatasetError(f"Training split in {dataset_dir} has no pedestrian scene")

    env = make_environment(config, EpisodeSource(SceneCache(index, records)))
    net = QNetwork(config.network, make_rng([config.seed, 11]))
    writer = _CheckpointWriter(out_dir, config, records[0].intrinsics)
    trainer = DQNTrainer(net, env, config.training, make_rng([config.seed, 12]), checkpoint_hook=writer)

    state_path = os.path.join(out_dir, STATE_FILE)
    if resume:
        arrays, extra = load_training_state(state_path)
        trainer.load_state_dict(arrays, extra)

    write_manifest(out_dir, "train", config, {"checkpoint": MODEL_FILE, "log": LOG_FILE, "max_steps": config.training.max_steps})
    trainer.train()
    return trainer


def cmd_eval(
    config: RunConfig, dataset_dir: str, out_dir: str, checkpoint: Optional[str] = None, agent_kind: Optional[str] = None
) -> Tuple[list, MetricsSummary]:
    agent_kind = agent_kind or config.evaluation.agent
    index, records = load_split(dataset_dir, Split.TEST)
    if not records:
        raise DatasetError(f"Test split in {dataset_dir} is empty")

    training_steps = 0
    if agent_kind == "oracle":
        agent = OracleAgent()
        method = f"oracle ({config.environment.kind})"
    else:
        if checkpoint is None:
            raise CheckpointMismatchError("A checkpoint is required for the greedy agent")
        net, meta = load_checkpoint(checkpoint)
        check_compatible(meta, config, records)
        agent = QAgent(net)
        training_steps = meta.step
        method = f"{meta.environment_kind} {'multi-task' if net.cls_branch is not None else 'single-task'}"

    env = make_environment(config)
    eval_records, summary = evaluate(agent, env, SceneCache(index, records), config, config.seed)

    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(eval_records, summary, os.path.join(out_dir, METRICS_FILE))
    with open(os.path.join(out_dir, SUMMARY_FILE), "w") as f:
        f.write(summary.model_dump_json(indent=2))
    write_manifest(
        out_dir, "eval", config, {"metrics": METRICS_FILE, "summary": SUMMARY_FILE, "method": method, "training_steps": training_steps}
    )
    return eval_records, summary


def _draw_polyline(pixels: np.ndarray, points: np.ndarray, colour, closed: bool) -> None:
    if len(points) < 2:
        return
    cv2.polylines(pixels, [np.rint(points).astype(np.int32).reshape(-1, 1, 2)], isClosed=closed, color=colour, thickness=2)


def _visible_runs(pixels: np.ndarray, valid: np.ndarray) -> List[np.ndarray]:
    """Split a sampled curve into runs of consecutive projectable samples"""
    runs, start = [], None
    for i, ok in enumerate(list(valid) + [False]):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            runs.append(pixels[start:i])
            start = None
    return runs


def cmd_render(
    config: RunConfig,
    out_path: str,
    dataset_dir: Optional[str] = None,
    split: Split = Split.TEST,
    record_id: Optional[int] = None,
    box: Optional[CylBox] = None,
    lines: Sequence[Tuple[Sequence[float], Sequence[float]]] = (),
) -> str:
    """Overlay projected box outlines and 3D segments on a dataset image (or a freshly rendered default scene)"""
    gt = None
    if dataset_dir is not None:
        index, records = load_split(dataset_dir, split)
        matches = [r for r in records if r.id == record_id] if record_id is not None else records[:1]
        if not matches:
            raise DatasetError(f"No record {record_id} in the {Split(split).value} split of {dataset_dir}")
        image = load_image(index, matches[0])
        gt = matches[0].gt
    else:
        scene = Scene(camera_height=config.scene.camera_height, room_radius=config.scene.room_radius, ceiling_height=config.scene.ceiling_height)
        image = render_scene(scene, config.camera)
        gt = gt_box(scene)

    canvas = image.pixels.copy()
    for target in [b for b in (box if box is not None else gt,) if b is not None]:
        region = region_from_box(target, image.cam)
        if region.clipped:
            logger.warning(f"Box {target} leaves the field of view; only its visible part is drawn")
        _draw_polyline(canvas, region.polyline, BOX_COLOUR, closed=True)

    for start, end in lines:
        pixels, valid = segment_curve_masked(np.asarray(start, dtype=float), np.asarray(end, dtype=float), image.cam)
        if not np.all(valid):
            logger.warning(f"Segment {tuple(start)} -> {tuple(end)} is partly outside the field of view")
        for run in _visible_runs(pixels, valid):
            _draw_polyline(canvas, run, LINE_COLOUR, closed=False)

    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if not cv2.imwrite(out_path, cv2.cvtColor(canvas, cv2.COLOR_RGB2BGR)):
        raise OmniDRLError(f"Could not write {out_path}")
    logger.info(f"Rendered overlay to {out_path}")
    return out_path


def _read_eval_run(run_dir: str) -> dict:
    try:
        with open(os.path.join(run_dir, SUMMARY_FILE), "r") as f:
            summary = MetricsSummary(**json.load(f))
        with open(os.path.join(run_dir, MANIFEST_FILE), "r") as f:
            manifest = RunManifest(**json.load(f))
    except FileNotFoundError as e:
        raise DatasetError(f"{run_dir} is not an evaluation run: {e}") from e
    row = summary.model_dump()
    row["method"] = manifest.outputs.get("method", os.path.basename(os.path.normpath(run_dir)))
    row["training_steps"] = manifest.outputs.get("training_steps", 0)
    return row


def _text_table(frame: pd.DataFrame) -> str:
    table = frame.to_string(index=False, float_format="{:.4f}".format, na_rep="n/a")
    return f"```\n{table}\n```\n"


def cmd_report(run_dirs: Sequence[str], out_dir: str) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Side-by-side comparison and position-error tables over several evaluation runs"""
    if not run_dirs:
        raise DatasetError("No evaluation runs given")
    rows = [_read_eval_run(run_dir) for run_dir in run_dirs]
    frame = pd.DataFrame(rows)
    frame["cls_accuracy"] = frame["cls_accuracy"].astype(float)
    comparison = frame[COMPARISON_COLUMNS]
    positions = frame[POSITION_COLUMNS]

    os.makedirs(out_dir, exist_ok=True)
    comparison.to_csv(os.path.join(out_dir, "comparison.csv"), index=False)
    positions.to_csv(os.path.join(out_dir, "position_errors.csv"), index=False)
    with open(os.path.join(out_dir, "report.md"), "w") as f:
        f.write("## Localization\n\n" + _text_table(comparison) + "\n## Position errors\n\n" + _text_table(positions))
    logger.info(f"Wrote report over {len(rows)} runs to {out_dir}")
    return comparison, positions
