import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from omnidrl.configurator.settings.base import OMNIDRL_THREADS
from omnidrl.configurator.settings.config import RunConfig
from omnidrl.domain.camera import CameraIntrinsics
from omnidrl.domain.exceptions import DatasetError
from omnidrl.domain.models import DatasetIndex, DatasetRecord, Scene, Split
from omnidrl.service.renderer import OmniImage, gt_box, render_scene
from omnidrl.utils.common import make_rng

logger = logging.getLogger(__name__)

INDEX_FILE = "index.jsonl"

# disjoint generator streams per split
_SPLIT_STREAMS = {Split.TRAIN: 101, Split.TEST: 202}


@dataclass(frozen=True)
class SceneSample:
    """A dataset record together with its decoded image"""

    record: DatasetRecord
    image: OmniImage


def sample_scene(rng: np.random.Generator, config: RunConfig, has_pedestrian: bool, seed: int) -> Scene:
    scene_cfg = config.scene
    return Scene(
        has_pedestrian=has_pedestrian,
        rho=float(rng.uniform(*scene_cfg.rho_range)),
        beta=float(rng.uniform(0.0, 2.0 * math.pi)),
        width=float(rng.uniform(*scene_cfg.width_range)),
        height=float(rng.uniform(*scene_cfg.height_range)),
        camera_height=scene_cfg.camera_height,
        room_radius=scene_cfg.room_radius,
        ceiling_height=scene_cfg.ceiling_height,
        light=float(rng.uniform(*scene_cfg.light_range)),
        texture_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
        noise_std=scene_cfg.noise_std,
        seed=seed,
    )


def plan_scenes(n: int, split: Split, config: RunConfig, seed: int) -> List[Scene]:
    """Scene parameters for a split: exactly round(n * negative_fraction) negatives at random positions"""
    if n <= 0:
        raise DatasetError(f"Cannot generate {n} scenes")
    rng = make_rng([seed, _SPLIT_STREAMS[Split(split)]])
    n_negative = int(round(n * config.dataset.negative_fraction))
    negative = np.zeros(n, dtype=bool)
    negative[rng.permutation(n)[:n_negative]] = True
    scene_seeds = rng.integers(0, 2**31 - 1, size=n)
    return [sample_scene(rng, config, not bool(negative[i]), int(scene_seeds[i])) for i in range(n)]


def encode_png(image: OmniImage) -> bytes:
    ok, buffer = cv2.imencode(".png", cv2.cvtColor(image.pixels, cv2.COLOR_RGB2BGR))
    if not ok:
        raise DatasetError("PNG encoding failed")
    return buffer.tobytes()


def make_record(index: int, split: Split, scene: Scene, cam: CameraIntrinsics, image_crc32: Optional[int]) -> DatasetRecord:
    return DatasetRecord(
        id=index,
        split=split,
        image_path=f"scene_{index:05d}.png",
        intrinsics=cam,
        gt=gt_box(scene) if scene.has_pedestrian else None,
        label=int(scene.has_pedestrian),
        scene=scene,
        image_crc32=image_crc32,
    )


def generate_dataset(n: int, split: Split, config: RunConfig, seed: int, out_dir: Optional[str] = None) -> List[DatasetRecord]:
    """Render n scenes of one split; with out_dir, write PNGs and the split index under out_dir/<split>/"""
    split = Split(split)
    scenes = plan_scenes(n, split, config, seed)
    cam = config.camera

    if out_dir is None:
        return [make_record(i, split, scene, cam, None) for i, scene in enumerate(scenes)]

    split_dir = os.path.join(out_dir, split.value)
    os.makedirs(split_dir, exist_ok=True)
    index_path = os.path.join(split_dir, INDEX_FILE)
    if os.path.exists(index_path):
        os.remove(index_path)
    index = DatasetIndex(index_path)

    def render_and_write(item: Tuple[int, Scene]) -> DatasetRecord:
        i, scene = item
        png = encode_png(render_scene(scene, cam))
        record = make_record(i, split, scene, cam, zlib.crc32(png))
        with open(os.path.join(split_dir, record.image_path), "wb") as f:
            f.write(png)
        return record

    with ThreadPoolExecutor(max_workers=max(1, OMNIDRL_THREADS)) as pool:
        records = list(pool.map(render_and_write, enumerate(scenes)))

    # index rows are appended in id order regardless of completion order
    records = [index.append(record) for record in records]
    logger.info(f"Generated {len(records)} {split.value} scenes ({sum(r.label == 0 for r in records)} negatives) in {split_dir}")
    return records


def load_split(dataset_dir: str, split: Split) -> Tuple[DatasetIndex, List[DatasetRecord]]:
    index_path = os.path.join(dataset_dir, Split(split).value, INDEX_FILE)
    if not os.path.exists(index_path):
        raise DatasetError(f"No {Split(split).value} index at {index_path}")
    index = DatasetIndex(index_path)
    records = index.read_all()
    logger.info(f"Loaded {len(records)} {Split(split).value} records from {index_path}")
    return index, records


def load_image(index: DatasetIndex, record: DatasetRecord) -> OmniImage:
    path = index.resolve(record)
    with open(path, "rb") as f:
        data = f.read()
    if record.image_crc32 is not None and zlib.crc32(data) != record.image_crc32:
        raise DatasetError(f"Image {path} does not match its index checksum")
    bgr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"Cannot decode image {path}")
    return OmniImage(pixels=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), cam=record.intrinsics)


class SceneCache:
    """Lazily decoded images of a split, keyed by record id"""

    def __init__(self, index: DatasetIndex, records: List[DatasetRecord], max_items: int = 256):
        self.index = index
        self.records = records
        self.max_items = max_items
        self._images: Dict[int, OmniImage] = {}
        self._skipped: set = set()

    def __len__(self) -> int:
        return len(self.records)

    def get(self, position: int) -> Optional[SceneSample]:
        """Sample at a list position, or None if its image is missing or corrupted"""
        record = self.records[position]
        if record.id in self._skipped:
            return None
        image = self._images.get(record.id)
        if image is None:
            try:
                image = load_image(self.index, record)
            except (OSError, DatasetError) as e:
                logger.warning(f"Skipping record {record.id}: {e}")
                self._skipped.add(record.id)
                return None
            self._remember(record.id, image)
        return SceneSample(record=record, image=image)

    def _remember(self, record_id: int, image: OmniImage) -> None:
        if len(self._images) >= self.max_items:
            self._images.pop(next(iter(self._images)))
        self._images[record_id] = image
