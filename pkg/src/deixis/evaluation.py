"""Task runners, metrics, records, and run metadata.

A run writes three artifacts into its output directory: `metadata.json`
(configuration snapshot plus reconciling counts), `records.jsonl` (one record
per executed case, streamed as the run progresses), and `report.json` (the
metrics recomputable from the records alone). Overlay rendering is a separate
pass that draws boxes and the reasoning ray into visualize/<scorer_name>/.

Counting contract: every executed case emits exactly one record; samples a
task cannot use at all (no hand, no target) are skipped before execution and
appear only in the metadata skip counts, so

    sample_count = records emitted + hard skips
    parsed_ok + parse_failed + infer_exception = records emitted
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import BBox2D, CoordinateMode, iou as box_iou
from .parsing import normalize_answer
from .pipeline import (
    DirectResult,
    MockVerifier,
    RemoteVerifier,
    Verifier,
    run_direct,
    run_direct_qa,
    run_language_only,
    run_svcot,
)
from .schema import Sample, Task, TestCase, expand_cases
from .scorers import (
    DEFAULT_MODEL_FAMILY,
    ChatClient,
    DirectionEstimationError,
    InferenceError,
    PromptTemplate,
    get_template,
)

METADATA_NAME = "metadata.json"
RECORDS_NAME = "records.jsonl"
REPORT_NAME = "report.json"
VISUALIZE_DIR = "visualize"
PRECISION_THRESHOLDS = (0.3, 0.5, 0.7)
IOU_TASKS = (Task.EDG, Task.DREC, Task.POG)

PARSE_FAILED = "parse_failed"
INFER_EXCEPTION = "infer_exception"
ERROR_TAGS = ("missing_target", "missing_hand_bbox", PARSE_FAILED, INFER_EXCEPTION)


@dataclass
class EvalRecord:
    case_id: str
    task: Task
    width: int
    height: int
    gt_box: BBox2D | None = None
    pred_box: BBox2D | None = None
    pred_box_raw: BBox2D | None = None
    hand_box: BBox2D | None = None
    iou: float | None = None
    prompt: str = ""
    raw_output: str = ""
    error_tag: str | None = None
    answer_pred: str | None = None
    answer_gt: str | None = None
    trace: dict | None = None

    def __post_init__(self) -> None:
        if self.error_tag is not None and self.pred_box is not None:
            raise ValueError("error_tag and pred_box are mutually exclusive")
        if (self.iou is not None) != (self.gt_box is not None and self.pred_box is not None):
            raise ValueError("iou must be present exactly when both boxes are")


def _rel(box: BBox2D | None, width: int, height: int) -> list[float] | None:
    if box is None:
        return None
    return [box.x1 / width, box.y1 / height, box.x2 / width, box.y2 / height]


def record_to_dict(r: EvalRecord) -> dict:
    return {
        "case_id": r.case_id,
        "task": r.task.value,
        "width": r.width,
        "height": r.height,
        "gt_box_abs": None if r.gt_box is None else r.gt_box.as_list(),
        "gt_box_rel": _rel(r.gt_box, r.width, r.height),
        "pred_box_abs": None if r.pred_box is None else r.pred_box.as_list(),
        "pred_box_rel": _rel(r.pred_box, r.width, r.height),
        "pred_box_raw": (
            None
            if r.pred_box_raw is None
            else {"mode": r.pred_box_raw.mode.value, "box": r.pred_box_raw.as_list()}
        ),
        "hand_box_abs": None if r.hand_box is None else r.hand_box.as_list(),
        "iou": r.iou,
        "prompt": r.prompt,
        "raw_output": r.raw_output,
        "error_tag": r.error_tag,
        "answer_pred": r.answer_pred,
        "answer_gt": r.answer_gt,
        "trace": r.trace,
    }


def record_from_dict(d: dict) -> EvalRecord:
    def _abs_box(key: str) -> BBox2D | None:
        raw = d.get(key)
        return None if raw is None else BBox2D(*[float(v) for v in raw])

    raw_entry = d.get("pred_box_raw")
    pred_raw = None
    if raw_entry is not None:
        pred_raw = BBox2D(*[float(v) for v in raw_entry["box"]], mode=CoordinateMode(raw_entry["mode"]))
    return EvalRecord(
        case_id=d["case_id"],
        task=Task(d["task"]),
        width=int(d["width"]),
        height=int(d["height"]),
        gt_box=_abs_box("gt_box_abs"),
        pred_box=_abs_box("pred_box_abs"),
        pred_box_raw=pred_raw,
        hand_box=_abs_box("hand_box_abs"),
        iou=d.get("iou"),
        prompt=d.get("prompt", ""),
        raw_output=d.get("raw_output", ""),
        error_tag=d.get("error_tag"),
        answer_pred=d.get("answer_pred"),
        answer_gt=d.get("answer_gt"),
        trace=d.get("trace"),
    )


def precision_at_tau(records: list[EvalRecord], tau: float) -> float:
    """Fraction of positive-sample records whose IoU clears tau.

    Negative samples are excluded from the denominator; records with an error
    or no prediction count as misses.
    """
    positives = [r for r in records if r.gt_box is not None]
    if not positives:
        raise ValueError("precision is undefined without positive-sample records")
    hits = sum(1 for r in positives if r.iou is not None and r.iou >= tau)
    return hits / len(positives)


def rejection_accuracy(records: list[EvalRecord]) -> float:
    """Fraction of negative-sample records with no predicted box."""
    negatives = [r for r in records if r.gt_box is None]
    if not negatives:
        raise ValueError("rejection accuracy is undefined without negative-sample records")
    return sum(1 for r in negatives if r.pred_box is None) / len(negatives)


def classification_metrics(preds: list[str], gts: list[str]) -> tuple[float, float, float]:
    """(accuracy, macro F1, macro recall) over the classes present in the ground truth."""
    if not gts:
        raise ValueError("classification metrics are undefined on empty input")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    classes = sorted(set(gts))
    accuracy = sum(1 for p, g in zip(preds, gts) if p == g) / len(gts)
    f1s, recalls = [], []
    for c in classes:
        tp = sum(1 for p, g in zip(preds, gts) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, gts) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, gts) if p != c and g == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        f1s.append(f1)
        recalls.append(recall)
    return accuracy, sum(f1s) / len(f1s), sum(recalls) / len(recalls)


@dataclass
class MetricsReport:
    task: Task
    precision_at: dict[str, float] | None = None
    iou_avg: float | None = None
    rejection_accuracy: float | None = None
    accuracy: float | None = None
    macro_f1: float | None = None
    macro_recall: float | None = None

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "precision_at": self.precision_at,
            "iou_avg": self.iou_avg,
            "rejection_accuracy": self.rejection_accuracy,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_recall": self.macro_recall,
        }


def compute_report(records: list[EvalRecord], task: Task) -> MetricsReport:
    report = MetricsReport(task=task)
    if task in IOU_TASKS:
        if any(r.gt_box is not None for r in records):
            report.precision_at = {
                str(t): precision_at_tau(records, t) for t in PRECISION_THRESHOLDS
            }
        with_iou = [r.iou for r in records if r.iou is not None]
        if with_iou:
            report.iou_avg = sum(with_iou) / len(with_iou)
        if any(r.gt_box is None for r in records):
            report.rejection_accuracy = rejection_accuracy(records)
    else:
        scored = [r for r in records if r.answer_gt is not None]
        if scored:
            preds = [r.answer_pred or "" for r in scored]
            gts = [r.answer_gt for r in scored]
            report.accuracy, report.macro_f1, report.macro_recall = classification_metrics(
                preds, gts
            )
    return report


def serialize_report(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class RunSettings:
    engine: str = "svcot"
    verifier: str = "mock"
    direction: str = "fixture_gt"
    tau: float = 0.5
    cone_half_angle: float = 0.0
    model_family: str = DEFAULT_MODEL_FAMILY
    coordinate_mode: CoordinateMode | None = None
    workers: int = 1
    seed: int = 0
    client: ChatClient | None = None
    template: PromptTemplate | None = None

    def scorer_id(self) -> str:
        if self.engine == "svcot":
            return f"svcot_{self.verifier}_{self.direction}"
        return f"direct_{self.model_family}"


@dataclass
class RunMetadata:
    scorer_id: str
    data_path: str
    task: Task
    coordinate_mode: str
    sample_count: int
    parsed_ok: int
    valid_iou_count: int
    skips: dict[str, int]
    errors: dict[str, int]
    config: dict
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "scorer_id": self.scorer_id,
            "data_path": self.data_path,
            "task": self.task.value,
            "coordinate_mode": self.coordinate_mode,
            "sample_count": self.sample_count,
            "parsed_ok": self.parsed_ok,
            "valid_iou_count": self.valid_iou_count,
            "skips": self.skips,
            "errors": self.errors,
            "config": self.config,
            "timestamp": self.timestamp,
        }


def _make_verifier(settings: RunSettings) -> Verifier:
    if settings.verifier == "mock":
        return MockVerifier()
    if settings.verifier == "remote":
        if settings.client is None:
            raise ValueError("remote verification requires a configured endpoint")
        return RemoteVerifier(settings.client)
    raise ValueError(f"unknown verifier: {settings.verifier!r}")


def _resolve_template(settings: RunSettings, task: Task) -> PromptTemplate:
    if settings.template is not None:
        return settings.template
    return get_template(task, settings.model_family)


def _base_record(case: TestCase) -> EvalRecord:
    sample = case.sample
    hand = sample.hand()
    target = sample.target()
    return EvalRecord(
        case_id=case.case_id,
        task=case.task,
        width=sample.width,
        height=sample.height,
        gt_box=None if target is None else target.bbox,
        hand_box=None if hand is None else hand.bbox,
        prompt=case.referent or case.question or "",
    )


def _finish_iou(record: EvalRecord) -> None:
    if record.gt_box is not None and record.pred_box is not None:
        record.iou = box_iou(record.pred_box, record.gt_box)


def _run_case_svcot(case: TestCase, settings: RunSettings, verifier: Verifier) -> EvalRecord:
    record = _base_record(case)
    sample = case.sample
    try:
        if case.task == Task.DREC:
            outcome, trace = run_language_only(case, verifier, settings.tau)
        else:
            outcome, trace = run_svcot(
                case,
                direction_strategy=settings.direction,
                verifier=verifier,
                tau=settings.tau,
                cone_half_angle=settings.cone_half_angle,
                client=settings.client,
            )
    except (DirectionEstimationError, InferenceError) as exc:
        record.error_tag = INFER_EXCEPTION
        record.raw_output = str(exc)
        return record
    record.trace = trace.to_dict()
    record.raw_output = trace.to_json()
    if outcome.accepted:
        record.pred_box = outcome.box
    if case.task == Task.DVQA:
        target = sample.target()
        record.answer_gt = normalize_answer(target.category_name) if target else None
        if outcome.accepted:
            ann = sample.find(outcome.ann_id)
            record.answer_pred = normalize_answer(ann.category_name) if ann else ""
        else:
            record.answer_pred = ""
        # The question task reports classification metrics, not IoU.
        record.pred_box = None
        return record
    _finish_iou(record)
    return record


def _run_case_direct(case: TestCase, settings: RunSettings, template: PromptTemplate) -> EvalRecord:
    record = _base_record(case)
    assert settings.client is not None
    try:
        if case.task == Task.DVQA:
            prompt, text = run_direct_qa(case, template, settings.client)
            record.prompt, record.raw_output = prompt, text
            target = case.sample.target()
            record.answer_gt = normalize_answer(target.category_name) if target else None
            record.answer_pred = normalize_answer(text)
            return record
        result: DirectResult = run_direct(case, template, settings.client, settings.coordinate_mode)
    except InferenceError as exc:
        record.error_tag = INFER_EXCEPTION
        record.raw_output = str(exc)
        return record
    record.prompt, record.raw_output = result.prompt, result.raw_text
    record.pred_box_raw = result.pred_box_raw
    if result.failure is not None:
        record.error_tag = result.failure
        return record
    record.pred_box = result.pred_box
    _finish_iou(record)
    return record


def run_task(
    samples: list[Sample],
    task: Task,
    settings: RunSettings,
    out_dir: str | Path,
    data_path: str = "",
    start: int = 0,
    end: int = -1,
) -> tuple[RunMetadata, Path, MetricsReport]:
    """Execute a task over samples and write metadata, records, and the report.

    `start`/`end` slice the expanded case list (end = -1 means the full split);
    a resumed run with start > 0 appends to an existing records file. Per-case
    failures become error-tagged records and never abort the run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, skips = expand_cases(samples, task)
    stop = len(cases) if end < 0 else min(end, len(cases))
    window = cases[start:stop]

    if settings.engine == "svcot":
        verifier = _make_verifier(settings)
        runner = lambda case: _run_case_svcot(case, settings, verifier)
        declared_mode = "absolute"
    elif settings.engine == "direct":
        if settings.client is None:
            raise ValueError("the direct engine requires a configured endpoint")
        template = _resolve_template(settings, task)
        runner = lambda case: _run_case_direct(case, settings, template)
        declared_mode = (settings.coordinate_mode or template.coordinate_mode).value
    else:
        raise ValueError(f"unknown engine: {settings.engine!r}")

    records_path = out_dir / RECORDS_NAME
    mode = "a" if start > 0 and records_path.exists() else "w"
    records: list[EvalRecord] = []
    with records_path.open(mode) as fh:
        if settings.workers > 1:
            with ThreadPoolExecutor(max_workers=settings.workers) as pool:
                produced = pool.map(runner, window)
                for record in produced:
                    records.append(record)
                    fh.write(json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":")) + "\n")
        else:
            for case in window:
                record = runner(case)
                records.append(record)
                fh.write(json.dumps(record_to_dict(record), sort_keys=True, separators=(",", ":")) + "\n")

    error_counts = {PARSE_FAILED: 0, INFER_EXCEPTION: 0}
    for r in records:
        if r.error_tag is not None:
            error_counts[r.error_tag] = error_counts.get(r.error_tag, 0) + 1
    parsed_ok = sum(1 for r in records if r.error_tag is None)
    metadata = RunMetadata(
        scorer_id=settings.scorer_id(),
        data_path=str(data_path),
        task=task,
        coordinate_mode=declared_mode,
        sample_count=len(records) + sum(skips.values()),
        parsed_ok=parsed_ok,
        valid_iou_count=sum(1 for r in records if r.iou is not None),
        skips=dict(skips),
        errors=error_counts,
        config={
            "engine": settings.engine,
            "verifier": settings.verifier,
            "direction": settings.direction,
            "tau": settings.tau,
            "cone_half_angle": settings.cone_half_angle,
            "model_family": settings.model_family,
            "workers": settings.workers,
            "seed": settings.seed,
            "start": start,
            "end": end,
        },
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    )
    report = compute_report(records, task)
    (out_dir / METADATA_NAME).write_text(json.dumps(metadata.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / REPORT_NAME).write_text(serialize_report(report))
    return metadata, records_path, report


def load_records(run_dir: str | Path) -> list[EvalRecord]:
    path = Path(run_dir) / RECORDS_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {RECORDS_NAME} under {run_dir}")
    records = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_dict(json.loads(line)))
    return records


def score_run(run_dir: str | Path) -> tuple[MetricsReport, str]:
    """Recompute the report from the records alone; returns (report, serialized form)."""
    records = load_records(run_dir)
    if not records:
        raise ValueError(f"no records to score under {run_dir}")
    report = compute_report(records, records[0].task)
    return report, serialize_report(report)


def render_overlays(
    records: list[EvalRecord],
    samples: dict[str, Sample],
    run_dir: str | Path,
    scorer_name: str,
    image_root: str | Path | None = None,
) -> Path:
    """Draw per-case overlays plus paired prompt/output text files.

    Ground truth is green, the prediction red, the hand blue, surviving
    candidates orange, and the reasoning ray gray. Scenes without a backing
    image file are drawn on a blank canvas.
    """
    from PIL import Image, ImageDraw

    out = Path(run_dir) / VISUALIZE_DIR / scorer_name
    out.mkdir(parents=True, exist_ok=True)
    for record in records:
        sample_id = record.case_id.rsplit(":", 1)[0]
        sample = samples.get(sample_id)
        canvas = None
        if sample is not None and image_root is not None:
            candidate = Path(image_root) / sample.image_ref
            if candidate.exists():
                canvas = Image.open(candidate).convert("RGB").resize((record.width, record.height))
        if canvas is None:
            canvas = Image.new("RGB", (record.width, record.height), (255, 255, 255))
        draw = ImageDraw.Draw(canvas)
        trace = record.trace or {}
        for cand in trace.get("candidates") or []:
            draw.rectangle(cand["box"], outline=(255, 165, 0), width=2)
        ray = trace.get("ray")
        if ray is not None:
            ox, oy = ray["origin"]
            dx, dy = ray["direction"]
            reach = record.width + record.height
            draw.line([ox, oy, ox + dx * reach, oy + dy * reach], fill=(128, 128, 128), width=1)
        if record.hand_box is not None:
            draw.rectangle(record.hand_box.as_list(), outline=(40, 80, 220), width=3)
        if record.gt_box is not None:
            draw.rectangle(record.gt_box.as_list(), outline=(0, 180, 0), width=3)
        if record.pred_box is not None:
            draw.rectangle(record.pred_box.as_list(), outline=(220, 40, 40), width=2)
        stem = record.case_id.replace(":", "_")
        canvas.save(out / f"{stem}.png")
        (out / f"{stem}.prompt.txt").write_text(record.prompt)
        (out / f"{stem}.output.txt").write_text(record.raw_output)
    return out
