"""Dataset model: annotations, samples, test-case expansion, splits.

On-disk format is a single JSON document:

    {
      "images":      [{"id", "file_name", "width", "height", "split", "source"}, ...],
      "annotations": [{"ann_id", "image_id", "bbox": [x1, y1, x2, y2],
                       "category_name", "underspecified_referent": [...],
                       "is_target", "attributes", "keypoints"}, ...],
      "meta":        {"gt_direction": {"<image_id>": [dx, dy], ...}}
    }

Boxes are absolute pixels. The hand annotation of an image carries the fixed
id "anno_hand". Loading is collect-and-continue: per-sample invariant
violations are reported alongside the usable samples, not raised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .geometry import BBox2D, CoordinateMode, sanitize

HAND_ANN_ID = "anno_hand"
PURE_DEIXIS_REFERENT = "this one"
DEFAULT_QUESTION = "what is this?"
SPLIT_NAMES = ("train", "val", "test")


class Task(str, Enum):
    EDG = "EDG"
    DREC = "D-REC"
    POG = "POG"
    DVQA = "D-VQA"


TASK_CLI_NAMES = {"edg": Task.EDG, "drec": Task.DREC, "pog": Task.POG, "dvqa": Task.DVQA}


class DatasetError(Exception):
    """The dataset document is missing or structurally unreadable."""


@dataclass(frozen=True)
class Annotation:
    ann_id: str
    bbox: BBox2D
    category_name: str = ""
    underspecified_referents: tuple[str, ...] = ()
    attributes: str | None = None
    keypoints: tuple[tuple[str, tuple[float, float]], ...] | None = None

    @property
    def is_hand(self) -> bool:
        return self.ann_id == HAND_ANN_ID

    def keypoint(self, name: str) -> tuple[float, float] | None:
        if self.keypoints is None:
            return None
        for k, v in self.keypoints:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_ref: str
    width: int
    height: int
    annotations: tuple[Annotation, ...]
    gt_target_ann_id: str | None = None
    gt_direction: tuple[float, float] | None = None
    split: str = "test"
    source: str = "synthetic"

    @property
    def is_negative(self) -> bool:
        return self.gt_target_ann_id is None

    def hand(self) -> Annotation | None:
        for ann in self.annotations:
            if ann.is_hand:
                return ann
        return None

    def target(self) -> Annotation | None:
        if self.gt_target_ann_id is None:
            return None
        return self.find(self.gt_target_ann_id)

    def find(self, ann_id: str) -> Annotation | None:
        for ann in self.annotations:
            if ann.ann_id == ann_id:
                return ann
        return None

    def objects(self) -> tuple[Annotation, ...]:
        return tuple(ann for ann in self.annotations if not ann.is_hand)


@dataclass(frozen=True)
class TestCase:
    """One evaluable unit: a sample viewed through a task, with its query text."""

    sample: Sample
    task: Task
    case_id: str
    referent: str | None = None
    question: str | None = None


@dataclass
class LoadedDataset:
    samples: list[Sample]
    issues: list[tuple[str, str]] = field(default_factory=list)


def _as_box(raw: object) -> BBox2D | None:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        return None
    try:
        vals = [float(v) for v in raw]
    except (TypeError, ValueError):
        return None
    return BBox2D(*vals, mode=CoordinateMode.ABSOLUTE)


def _as_keypoints(raw: object) -> tuple[tuple[str, tuple[float, float]], ...] | None:
    if not isinstance(raw, dict):
        return None
    out = []
    for name, xy in raw.items():
        if not isinstance(xy, (list, tuple)) or len(xy) != 2:
            return None
        out.append((str(name), (float(xy[0]), float(xy[1]))))
    return tuple(out)


def load_dataset(path: str | Path) -> LoadedDataset:
    """Load and validate a dataset document, collecting per-sample issues."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable dataset document {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DatasetError(f"dataset document {path} lacks an 'images' list")

    meta = doc.get("meta") or {}
    directions = meta.get("gt_direction") or {} if isinstance(meta, dict) else {}
    ann_rows: dict[str, list[dict]] = {}
    for row in doc.get("annotations") or []:
        if isinstance(row, dict):
            ann_rows.setdefault(str(row.get("image_id")), []).append(row)

    issues: list[tuple[str, str]] = []
    image_ids = {str(img["id"]) for img in doc["images"] if isinstance(img, dict) and "id" in img}
    for image_id in sorted(set(ann_rows) - image_ids):
        issues.append((image_id, f"{len(ann_rows[image_id])} annotations reference an unknown image"))
    samples: list[Sample] = []
    for img in doc["images"]:
        if not isinstance(img, dict) or "id" not in img:
            issues.append(("<images>", "image entry without an id"))
            continue
        sid = str(img["id"])
        try:
            width, height = int(img["width"]), int(img["height"])
        except (KeyError, TypeError, ValueError):
            issues.append((sid, "missing or non-numeric width/height"))
            continue
        if width <= 0 or height <= 0:
            issues.append((sid, f"non-positive dims {width}x{height}"))
            continue

        annotations: list[Annotation] = []
        seen_ids: set[str] = set()
        target_id: str | None = None
        for row in ann_rows.get(sid, ()):
            ann_id = str(row.get("ann_id", ""))
            if not ann_id:
                issues.append((sid, "annotation without ann_id"))
                continue
            if ann_id in seen_ids:
                issues.append((sid, f"duplicate ann_id {ann_id}; keeping the first"))
                continue
            box = _as_box(row.get("bbox"))
            if box is None:
                issues.append((sid, f"annotation {ann_id} has a malformed bbox"))
                continue
            clean = sanitize(box, width, height)
            if clean is None:
                issues.append((sid, f"annotation {ann_id} has a degenerate bbox"))
                continue
            referents = row.get("underspecified_referent") or ()
            if not (isinstance(referents, (list, tuple)) and all(isinstance(r, str) for r in referents)):
                issues.append((sid, f"annotation {ann_id} has malformed referents"))
                referents = ()
            ann = Annotation(
                ann_id=ann_id,
                bbox=clean,
                category_name=str(row.get("category_name", "") or ""),
                underspecified_referents=tuple(referents),
                attributes=(str(row["attributes"]) if row.get("attributes") else None),
                keypoints=_as_keypoints(row.get("keypoints")),
            )
            seen_ids.add(ann_id)
            annotations.append(ann)
            if row.get("is_target"):
                if ann.is_hand:
                    issues.append((sid, "hand annotation flagged as target; ignored"))
                elif target_id is not None:
                    issues.append((sid, f"multiple targets; keeping {target_id}"))
                else:
                    target_id = ann_id

        direction = None
        raw_dir = directions.get(sid)
        if raw_dir is not None:
            if isinstance(raw_dir, (list, tuple)) and len(raw_dir) == 2:
                direction = (float(raw_dir[0]), float(raw_dir[1]))
            else:
                issues.append((sid, "malformed gt_direction entry"))

        samples.append(
            Sample(
                sample_id=sid,
                image_ref=str(img.get("file_name", f"{sid}.png")),
                width=width,
                height=height,
                annotations=tuple(annotations),
                gt_target_ann_id=target_id,
                gt_direction=direction,
                split=str(img.get("split", "test")),
                source=str(img.get("source", "synthetic")),
            )
        )
    return LoadedDataset(samples=samples, issues=issues)


def _referents_for(sample: Sample) -> tuple[str, ...]:
    target = sample.target()
    if target is not None and target.underspecified_referents:
        return target.underspecified_referents
    return (PURE_DEIXIS_REFERENT,)


def expand_cases(samples: list[Sample], task: Task) -> tuple[list[TestCase], dict[str, int]]:
    """Expand samples into per-task cases; unusable samples are counted, not raised.

    EDG and D-REC yield one case per referent (negatives fall back to the
    pure-deixis phrase for EDG); POG yields one case per hand-bearing sample;
    D-VQA yields one question case per hand-bearing positive sample.
    """
    skips = {"missing_target": 0, "missing_hand_bbox": 0}
    cases: list[TestCase] = []
    for sample in samples:
        has_hand = sample.hand() is not None
        if task in (Task.EDG, Task.POG, Task.DVQA) and not has_hand:
            skips["missing_hand_bbox"] += 1
            continue
        if task in (Task.DREC, Task.DVQA) and sample.is_negative:
            skips["missing_target"] += 1
            continue
        if task in (Task.EDG, Task.DREC):
            for i, referent in enumerate(_referents_for(sample)):
                cases.append(
                    TestCase(
                        sample=sample,
                        task=task,
                        case_id=f"{sample.sample_id}:{i}",
                        referent=referent,
                    )
                )
        elif task == Task.POG:
            cases.append(TestCase(sample=sample, task=task, case_id=f"{sample.sample_id}:0"))
        else:
            cases.append(
                TestCase(
                    sample=sample,
                    task=task,
                    case_id=f"{sample.sample_id}:0",
                    question=DEFAULT_QUESTION,
                )
            )
    return cases, skips


def split_dataset(
    samples: list[Sample], mode: str = "mixed", seed: int = 0
) -> dict[str, list[Sample]]:
    """Partition samples into train/val/test.

    "mixed" shuffles with the seed and cuts 7:2:1 by count. "domain_adaptive"
    sends every source == "real" sample to test and cuts the rest 7:2 into
    train/val.
    """
    import random

    if not samples:
        raise ValueError("cannot split an empty sample list")
    rng = random.Random(seed)
    if mode == "mixed":
        pool = list(samples)
        rng.shuffle(pool)
        n = len(pool)
        n_train = (7 * n) // 10
        n_val = (2 * n) // 10
        return {
            "train": pool[:n_train],
            "val": pool[n_train : n_train + n_val],
            "test": pool[n_train + n_val :],
        }
    if mode == "domain_adaptive":
        test = [s for s in samples if s.source == "real"]
        rest = [s for s in samples if s.source != "real"]
        rng.shuffle(rest)
        n_train = (7 * len(rest)) // 9
        return {"train": rest[:n_train], "val": rest[n_train:], "test": test}
    raise ValueError(f"unknown split mode: {mode!r}")
