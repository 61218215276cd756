import json
import logging
import math
import os
import zlib
from enum import Enum
from typing import Any, Dict, List, Optional, Set

from pydantic import BaseModel, ConfigDict, Field, model_validator

from omnidrl.domain.boxes import CylBox
from omnidrl.domain.camera import CameraIntrinsics

logger = logging.getLogger(__name__)


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class Scene(BaseModel):
    """Synthetic room with at most one pedestrian proxy standing on the floor"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    has_pedestrian: bool = True
    rho: float = Field(default=2.0, gt=0.0)
    beta: float = 0.0
    width: float = Field(default=0.5, gt=0.0)
    height: float = Field(default=1.7, gt=0.0)
    camera_height: float = Field(default=1.0, gt=0.0)
    room_radius: float = Field(default=6.0, gt=0.0)
    ceiling_height: float = Field(default=1.6, gt=0.0)
    light: float = Field(default=1.0, gt=0.0)
    texture_phase: float = 0.0
    noise_std: float = Field(default=0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _pedestrian_inside_room(self) -> "Scene":
        if self.has_pedestrian and self.rho >= self.room_radius:
            raise ValueError(f"Pedestrian at rho={self.rho} stands outside the room (radius {self.room_radius})")
        return self


class DatasetRecord(BaseModel):
    """One row of a split index; crc covers every other field"""

    id: int
    split: Split
    image_path: str
    intrinsics: CameraIntrinsics
    gt: Optional[CylBox] = None
    label: int = Field(ge=0, le=1)
    scene: Scene
    image_crc32: Optional[int] = None
    crc: Optional[int] = None

    @model_validator(mode="after")
    def _label_matches_pedestrian(self) -> "DatasetRecord":
        if (self.label == 1) != (self.gt is not None):
            raise ValueError("label 1 must come with a ground-truth box and label 0 without one")
        return self

    def calculate_crc(self) -> int:
        """CRC32 over the record content except the CRC itself"""
        data_for_crc = self.model_dump(mode="json")
        data_for_crc.pop("crc", None)
        json_str = json.dumps(data_for_crc, sort_keys=True)
        return zlib.crc32(json_str.encode())

    def validate_crc(self) -> bool:
        if self.crc is None:
            return False
        return self.crc == self.calculate_crc()


class EvalRecord(BaseModel):
    steps: int = Field(ge=0)
    final_iou: float = Field(ge=0.0, le=1.0)
    triggered_correct: bool
    rho_error: float = math.nan
    beta_error: float = math.nan
    predicted_label: Optional[int] = None


class MetricsSummary(BaseModel):
    episodes: int
    avg_steps: float
    avg_iou: float
    correct_pct: float
    rmse_rho: float
    rmse_beta: float
    std_rho: float
    std_beta: float
    cls_accuracy: Optional[float] = None


class RunManifest(BaseModel):
    command: str
    version: str
    seed: int
    config_hash: str
    config: Dict[str, Any]
    outputs: Dict[str, Any] = Field(default_factory=dict)


class DatasetIndex:
    """Append-only JSON-lines index of one split.

    Rows that fail to parse or fail their CRC check are skipped with a warning,
    the same way a write-ahead log tolerates torn or corrupted tail entries.
    """

    def __init__(self, index_path: str):
        self.index_path = index_path
        self.index_dir = os.path.dirname(index_path)
        self.existing_ids: Set[int] = set()
        self._ensure_index_exists()
        self._load_existing_ids()

    def _ensure_index_exists(self) -> None:
        if self.index_dir:
            os.makedirs(self.index_dir, exist_ok=True)
        if not os.path.exists(self.index_path):
            with open(self.index_path, "w"):
                pass

    def _load_existing_ids(self) -> None:
        for record in self.read_all():
            self.existing_ids.add(record.id)

    def append(self, record: DatasetRecord) -> DatasetRecord:
        """Append a record; ids already present are ignored"""
        if record.id in self.existing_ids:
            return record

        record = record.model_copy(update={"crc": None})
        record = record.model_copy(update={"crc": record.calculate_crc()})
        with open(self.index_path, "a") as f:
            f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")

        self.existing_ids.add(record.id)
        return record

    def read_all(self) -> List[DatasetRecord]:
        records = []
        with open(self.index_path, "r") as f:
            for line_number, line in enumerate(f, 1):
                record = self._parse_line(line, line_number)
                if record is not None:
                    records.append(record)
        records.sort(key=lambda r: r.id)
        return records

    def _parse_line(self, line: str, line_number: int) -> Optional[DatasetRecord]:
        if not line.strip():
            return None
        try:
            record = DatasetRecord(**json.loads(line))
        except (json.JSONDecodeError, ValueError) as e:
            logger.warning(f"Skipping unparsable index row {line_number} in {self.index_path}: {e}")
            return None

        if not record.validate_crc():
            logger.warning(f"Skipping index row {line_number} (id={record.id}) in {self.index_path}: CRC mismatch")
            return None
        return record

    def resolve(self, record: DatasetRecord) -> str:
        """Absolute path of a record's image"""
        if os.path.isabs(record.image_path):
            return record.image_path
        return os.path.join(self.index_dir, record.image_path)
