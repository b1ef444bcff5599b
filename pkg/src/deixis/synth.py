"""Seeded procedural generator of pointing scenes with exact geometric ground truth.

Scenes are built constructively: a hand box near the frame bottom, a pointing
direction aimed up into the frame, a target box centered on the ray beyond the
hand's exit point (positives only), and off-ray distractors. The on-ray /
off-ray facts are enforced with `ray_box_intersect` at build time, so the
resolution chain can be scored against the construction rather than against
human labels.

Direction noise does not move any box: the scene is always built on the clean
direction, and the stored ground-truth direction is the clean one rotated by
sigma times a unit normal draw. The normal draw happens whether or not sigma
is zero, so fixture sets that differ only in sigma share all other geometry.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .geometry import BBox2D, Ray2D, centroid, intersection_area, ray_box_intersect, rotate_unit
from .schema import HAND_ANN_ID, PURE_DEIXIS_REFERENT, Annotation, Sample

DEFAULT_CATEGORY_POOL: tuple[tuple[str, str], ...] = (
    ("cup", "red"),
    ("cup", "blue"),
    ("bottle", "green"),
    ("bottle", "plastic"),
    ("book", "yellow"),
    ("book", "thick"),
    ("phone", "black"),
    ("laptop", "silver"),
    ("bowl", "white"),
    ("plate", "ceramic"),
    ("pen", "blue"),
    ("notebook", "small"),
    ("apple", "red"),
    ("banana", "ripe"),
    ("keyboard", "gray"),
    ("mouse", "wireless"),
    ("lamp", "tall"),
    ("box", "wooden"),
    ("plant", "potted"),
    ("remote", "slim"),
)

_FRAME_MARGIN = 3
_MIN_OBJ = 28
_MAX_OBJ = 90
_MIN_DISTRACTOR = 24
_MAX_DISTRACTOR = 80
_SCENE_RETRIES = 100
_PLACE_RETRIES = 100


class SceneGenerationError(Exception):
    """The configuration could not be realized for a scene index."""


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    width: int = 640
    height: int = 480
    n_candidates_mean: float = 2.8
    same_category_rate: float = 0.637
    negative_rate: float = 0.1415
    direction_noise_sigma: float = 0.0
    occlusion_rate: float = 0.425
    category_pool: tuple[tuple[str, str], ...] = DEFAULT_CATEGORY_POOL

    def __post_init__(self) -> None:
        if self.width < 64 or self.height < 64:
            raise ValueError(f"frame too small: {self.width}x{self.height}")
        for name in ("same_category_rate", "negative_rate", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_candidates_mean < 1.0:
            raise ValueError(f"n_candidates_mean must be >= 1, got {self.n_candidates_mean}")
        if self.direction_noise_sigma < 0.0:
            raise ValueError(f"direction_noise_sigma must be >= 0, got {self.direction_noise_sigma}")
        if len({c for c, _ in self.category_pool}) < 2:
            raise ValueError("category_pool needs at least two distinct categories")


def _poisson(rng: random.Random, lam: float) -> int:
    limit = math.exp(-lam)
    k, p = 0, 1.0
    while True:
        p *= rng.random()
        if p <= limit:
            return k
        k += 1


def _poisson_rate(config: SceneConfig) -> float:
    # The same-category branch lifts n to at least 2 on positives, so the base
    # Poisson rate is solved (fixed point) to keep the realized mean on target.
    bump = (1.0 - config.negative_rate) * config.same_category_rate
    lam = max(config.n_candidates_mean - 1.0, 1e-9)
    for _ in range(12):
        lam = max(config.n_candidates_mean - 1.0 - bump * math.exp(-lam), 1e-9)
    return lam


def _boxes_overlap(a: BBox2D, b: BBox2D) -> bool:
    return intersection_area(a, b) > 0.0


def _round_box(x1: float, y1: float, x2: float, y2: float) -> BBox2D:
    return BBox2D(float(round(x1)), float(round(y1)), float(round(x2)), float(round(y2)))


def _axis_interval(o: float, d: float, lo: float, hi: float) -> tuple[float, float] | None:
    """Range of t keeping o + t*d inside [lo, hi]; None when impossible."""
    if d == 0.0:
        return (-math.inf, math.inf) if lo <= o <= hi else None
    t0, t1 = (lo - o) / d, (hi - o) / d
    return (t0, t1) if t0 <= t1 else (t1, t0)


def _place_off_ray(
    rng: random.Random,
    ray: Ray2D,
    existing: list[BBox2D],
    width: int,
    height: int,
) -> BBox2D | None:
    for _ in range(_PLACE_RETRIES):
        bw = rng.uniform(_MIN_DISTRACTOR, _MAX_DISTRACTOR)
        bh = rng.uniform(_MIN_DISTRACTOR, _MAX_DISTRACTOR)
        x1 = rng.uniform(_FRAME_MARGIN, width - _FRAME_MARGIN - bw)
        y1 = rng.uniform(_FRAME_MARGIN, height - _FRAME_MARGIN - bh)
        box = _round_box(x1, y1, x1 + bw, y1 + bh)
        if ray_box_intersect(ray, box) is not None:
            continue
        if any(_boxes_overlap(box, other) for other in existing):
            continue
        return box
    return None


def _place_occluder(
    rng: random.Random,
    ray: Ray2D,
    target: BBox2D,
    others: list[BBox2D],
    width: int,
    height: int,
) -> BBox2D | None:
    """A distractor that partially overlaps the target while staying off the ray.

    Overlap is capped at 35% of the smaller box so the occluder can never reach
    IoU 0.5 against the target.
    """
    for _ in range(_PLACE_RETRIES):
        bw = rng.uniform(_MIN_DISTRACTOR, _MAX_DISTRACTOR)
        bh = rng.uniform(_MIN_DISTRACTOR, _MAX_DISTRACTOR)
        cx = rng.uniform(target.x1 - bw, target.x2)
        cy = rng.uniform(target.y1 - bh, target.y2)
        x1 = min(max(cx, _FRAME_MARGIN), width - _FRAME_MARGIN - bw)
        y1 = min(max(cy, _FRAME_MARGIN), height - _FRAME_MARGIN - bh)
        box = _round_box(x1, y1, x1 + bw, y1 + bh)
        inter = intersection_area(box, target)
        if inter <= 0.0 or inter > 0.35 * min(box.area, target.area):
            continue
        if ray_box_intersect(ray, box) is not None:
            continue
        if any(_boxes_overlap(box, other) for other in others):
            continue
        return box
    return None


def _draw_hand(rng: random.Random, width: int, height: int) -> BBox2D:
    base = min(width, height)
    hw = rng.uniform(0.11, 0.17) * base
    hh = rng.uniform(0.11, 0.17) * base
    cx = rng.uniform(0.30 * width, 0.70 * width)
    cy = rng.uniform(0.78 * height, 0.88 * height)
    cx = min(max(cx, _FRAME_MARGIN + hw / 2), width - _FRAME_MARGIN - hw / 2)
    cy = min(max(cy, _FRAME_MARGIN + hh / 2), height - _FRAME_MARGIN - hh / 2)
    return _round_box(cx - hw / 2, cy - hh / 2, cx + hw / 2, cy + hh / 2)


def _draw_target(
    rng: random.Random,
    ray: Ray2D,
    hand: BBox2D,
    width: int,
    height: int,
) -> tuple[BBox2D, float] | None:
    bw = rng.uniform(_MIN_OBJ, _MAX_OBJ)
    bh = rng.uniform(_MIN_OBJ, _MAX_OBJ)
    (ox, oy), (dx, dy) = ray.origin, ray.direction
    ix = _axis_interval(ox, dx, _FRAME_MARGIN + bw / 2, width - _FRAME_MARGIN - bw / 2)
    iy = _axis_interval(oy, dy, _FRAME_MARGIN + bh / 2, height - _FRAME_MARGIN - bh / 2)
    if ix is None or iy is None:
        return None
    hand_diag = math.hypot(hand.width, hand.height)
    target_diag = math.hypot(bw, bh)
    t_lo = max(ix[0], iy[0], (hand_diag + target_diag) / 2 + 8.0)
    t_hi = min(ix[1], iy[1])
    if t_hi <= t_lo:
        return None
    t_c = rng.uniform(t_lo, t_hi)
    cx, cy = ray.point_at(t_c)
    return _round_box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), t_c


def _pick_same_category(
    rng: random.Random, pool: tuple[tuple[str, str], ...], target: tuple[str, str]
) -> tuple[str, str]:
    alternates = [p for p in pool if p[0] == target[0] and p[1] != target[1]]
    return rng.choice(alternates) if alternates else target


def _pick_other_category(
    rng: random.Random, pool: tuple[tuple[str, str], ...], target_cat: str
) -> tuple[str, str]:
    others = [p for p in pool if p[0] != target_cat]
    return rng.choice(others)


def _build_scene(config: SceneConfig, index: int) -> tuple[Sample, dict]:
    rng = random.Random(f"{config.seed}:{index}")

    # Unconditional draws first, in a fixed order, so that configs differing
    # only in direction_noise_sigma replay the identical stream.
    negative = rng.random() < config.negative_rate
    same_category = rng.random() < config.same_category_rate
    occluded = rng.random() < config.occlusion_rate
    noise_u = rng.gauss(0.0, 1.0)
    n_raw = 1 + _poisson(rng, _poisson_rate(config))

    positive = not negative
    if positive and same_category:
        n_raw = max(n_raw, 2)
    n_distractors = n_raw - 1 if positive else n_raw

    last_error = "no feasible layout"
    for _ in range(_SCENE_RETRIES):
        hand = _draw_hand(rng, config.width, config.height)
        delta = rng.uniform(-0.85, 0.85)
        direction = (math.sin(delta), -math.cos(delta))
        ray = Ray2D.from_vector(centroid(hand), direction)

        boxes: list[BBox2D] = [hand]
        target_box: BBox2D | None = None
        t_center = None
        if positive:
            drawn = _draw_target(rng, ray, hand, config.width, config.height)
            if drawn is None:
                last_error = "no on-ray placement for the target"
                continue
            target_box, t_center = drawn
            span = ray_box_intersect(ray, target_box)
            hand_exit = ray_box_intersect(ray, hand)
            if span is None or hand_exit is None or span[0] <= hand_exit[1] + 1.0:
                last_error = "target not cleanly beyond the hand"
                continue
            if _boxes_overlap(target_box, hand):
                last_error = "target overlaps the hand"
                continue
            boxes.append(target_box)

        target_cat, target_attr = config.category_pool[rng.randrange(len(config.category_pool))]

        distractors: list[tuple[BBox2D, str, str]] = []
        want_occluder = occluded and positive and n_distractors >= 1
        feasible = True
        for k in range(n_distractors):
            if positive and same_category and k == 0:
                cat, attr = _pick_same_category(rng, config.category_pool, (target_cat, target_attr))
            elif positive:
                cat, attr = _pick_other_category(rng, config.category_pool, target_cat)
            else:
                cat, attr = config.category_pool[rng.randrange(len(config.category_pool))]
            box = None
            if want_occluder and k == n_distractors - 1 and target_box is not None:
                box = _place_occluder(
                    rng, ray, target_box, [b for b in boxes if b is not target_box],
                    config.width, config.height,
                )
            if box is None:
                box = _place_off_ray(rng, ray, boxes, config.width, config.height)
            if box is None:
                feasible = False
                break
            boxes.append(box)
            distractors.append((box, cat, attr))
        if not feasible:
            last_error = "could not place a distractor off the ray"
            continue

        # Assemble annotations: hand first, target (if any), then distractors.
        base = min(hand.width, hand.height)
        hc = centroid(hand)
        wrist = (hc[0] - 0.35 * base * ray.direction[0], hc[1] - 0.35 * base * ray.direction[1])
        tip = (hc[0] + 0.45 * base * ray.direction[0], hc[1] + 0.45 * base * ray.direction[1])
        annotations = [
            Annotation(
                ann_id=HAND_ANN_ID,
                bbox=hand,
                category_name="hand",
                keypoints=(("wrist", wrist), ("fingertip", tip)),
            )
        ]
        target_ann_id = None
        if target_box is not None:
            target_ann_id = "anno_obj_0"
            annotations.append(
                Annotation(
                    ann_id=target_ann_id,
                    bbox=target_box,
                    category_name=target_cat,
                    attributes=target_attr,
                    underspecified_referents=(
                        f"this {target_cat}",
                        f"that {target_attr} {target_cat}",
                        PURE_DEIXIS_REFERENT,
                    ),
                )
            )
        for k, (box, cat, attr) in enumerate(distractors):
            annotations.append(
                Annotation(
                    ann_id=f"anno_obj_{k + 1 if positive else k}",
                    bbox=box,
                    category_name=cat,
                    attributes=attr,
                )
            )

        stored_direction = rotate_unit(ray.direction, noise_u * config.direction_noise_sigma)
        sample_id = f"scene_{index:05d}"
        sample = Sample(
            sample_id=sample_id,
            image_ref=f"{sample_id}.png",
            width=config.width,
            height=config.height,
            annotations=tuple(annotations),
            gt_target_ann_id=target_ann_id,
            gt_direction=stored_direction,
            split="test",
            source="synthetic",
        )
        info = {
            "true_direction": [ray.direction[0], ray.direction[1]],
            "noise_radians": noise_u * config.direction_noise_sigma,
            "target_ann_id": target_ann_id,
            "t_center": t_center,
            "negative": negative,
            "same_category": bool(positive and same_category),
            "occluded": bool(want_occluder),
            "n_objects": len(annotations) - 1,
        }
        return sample, info
    raise SceneGenerationError(f"scene {index} infeasible after {_SCENE_RETRIES} attempts: {last_error}")


def generate_scene(config: SceneConfig, index: int) -> Sample:
    """Deterministically build scene `index`; same (config, index) gives the same Sample."""
    return _build_scene(config, index)[0]


def _annotation_row(sample_id: str, ann: Annotation) -> dict:
    row: dict = {
        "ann_id": ann.ann_id,
        "image_id": sample_id,
        "bbox": ann.bbox.as_list(),
        "category_name": ann.category_name,
    }
    if ann.underspecified_referents:
        row["underspecified_referent"] = list(ann.underspecified_referents)
    if ann.attributes is not None:
        row["attributes"] = ann.attributes
    if ann.keypoints is not None:
        row["keypoints"] = {name: [xy[0], xy[1]] for name, xy in ann.keypoints}
    return row


def generate_fixture_set(
    config: SceneConfig, count: int, out_path: str | Path
) -> tuple[Path, Path]:
    """Write `count` scenes as a dataset document plus a ground-truth sidecar.

    The sidecar (same path with a ".gt" suffix) records the stored direction
    and the construction facts for each scene. Output bytes depend only on
    (config, count).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_path = Path(out_path)
    images, annotations, gt_direction, sidecar = [], [], {}, {}
    for index in range(count):
        sample, info = _build_scene(config, index)
        images.append(
            {
                "id": sample.sample_id,
                "file_name": sample.image_ref,
                "width": sample.width,
                "height": sample.height,
                "split": sample.split,
                "source": sample.source,
            }
        )
        for ann in sample.annotations:
            row = _annotation_row(sample.sample_id, ann)
            if ann.ann_id == sample.gt_target_ann_id:
                row["is_target"] = True
            annotations.append(row)
        gt_direction[sample.sample_id] = list(sample.gt_direction)
        sidecar[sample.sample_id] = {
            "direction": list(sample.gt_direction),
            "construction": info,
        }
    doc = {
        "images": images,
        "annotations": annotations,
        "meta": {"gt_direction": gt_direction},
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    sidecar_path = Path(str(out_path) + ".gt")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out_path, sidecar_path


def load_sidecar(dataset_path: str | Path) -> dict:
    """Read the construction sidecar written next to a fixture set."""
    return json.loads(Path(str(dataset_path) + ".gt").read_text())
