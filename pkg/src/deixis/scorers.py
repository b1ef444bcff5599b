"""Direction estimation, semantic verification, and prompt templating.

The semantic verifier interface is pluggable: the mock verifier is a
deterministic token-overlap scorer used for offline runs and oracle checks;
the remote verifier asks a chat-completion endpoint to score candidates.
Prompt templates are plain text with exactly-once placeholders, substituted
literally (no format-string machinery, the templates contain JSON braces).
"""

from __future__ import annotations

import os
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import requests

from .geometry import BBox2D, CoordinateMode, anchor_tokens, convert_mode, unit
from .parsing import first_json_number_array
from .schema import Annotation, Sample, Task, TestCase

STOPWORDS = frozenset({"the", "a", "an", "this", "that", "one", "is", "of", "on"})
PURE_DEIXIS_SCORE = 0.5
DEFAULT_MODEL_FAMILY = "qwen3_vl"
ENV_API_BASE = "EGO_API_BASE"
ENV_API_KEY = "EGO_API_KEY"

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


class DirectionEstimationError(Exception):
    """The requested direction strategy cannot run on this sample."""


class InferenceError(Exception):
    """A remote call failed in transport or returned an unusable payload."""


class PromptError(ValueError):
    """A template is malformed or missing a required substitution value."""


@dataclass(frozen=True)
class DirectionEstimate:
    direction: tuple[float, float]
    confidence: float
    provenance: str


@dataclass(frozen=True)
class SemanticScore:
    candidate_ann_id: str
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def _tokens(text: str | None) -> list[str]:
    if not text:
        return []
    return text.lower().translate(_PUNCT_TABLE).split()


def mock_verify(candidate: Annotation, query: str) -> SemanticScore:
    """Token-set Jaccard between the query and the candidate's category plus attributes.

    A query that is pure deixis (every token is a stopword) carries no category
    information, so every candidate gets the neutral 0.5.
    """
    q = {t for t in _tokens(query) if t not in STOPWORDS}
    if not q:
        return SemanticScore(candidate.ann_id, PURE_DEIXIS_SCORE)
    c = set(_tokens(candidate.category_name)) | set(_tokens(candidate.attributes))
    return SemanticScore(candidate.ann_id, len(q & c) / len(q | c))


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model: str = "default"
    timeout: float = 60.0

    @classmethod
    def from_env(cls, env: dict | None = None, **overrides) -> EndpointConfig:
        env = os.environ if env is None else env
        base = overrides.pop("base_url", None) or env.get(ENV_API_BASE)
        if not base:
            raise ValueError(f"no endpoint configured: set {ENV_API_BASE} or pass base_url")
        key = overrides.pop("api_key", None) or env.get(ENV_API_KEY, "")
        return cls(base_url=base, api_key=key, **overrides)


class ChatClient:
    """Minimal chat-completion client: a message list in, the reply text out."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Callable[[list[dict]], str] | None = None,
    ) -> None:
        self.config = config
        self._transport = transport

    def complete(self, messages: list[dict]) -> str:
        if self._transport is not None:
            try:
                return self._transport(messages)
            except InferenceError:
                raise
            except Exception as exc:
                raise InferenceError(f"transport failure: {exc}") from exc
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = requests.post(
                url,
                json={"model": self.config.model, "messages": messages},
                headers=headers,
                timeout=self.config.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
            return payload["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            raise InferenceError(f"chat endpoint failure: {exc}") from exc


def _user_message(prompt: str, image_ref: str | None) -> list[dict]:
    content: list[dict] = [{"type": "text", "text": prompt}]
    if image_ref:
        content.append({"type": "image_url", "image_url": {"url": image_ref}})
    return [{"role": "user", "content": content}]


def estimate_direction(
    sample: Sample, strategy: str = "fixture_gt", client: ChatClient | None = None
) -> DirectionEstimate:
    """Produce a unit pointing direction for a sample.

    "fixture_gt" replays the stored ground-truth direction, "keypoint_heuristic"
    points from the wrist keypoint through the fingertip, "remote" asks a chat
    endpoint and parses a {"direction": [dx, dy]} reply.
    """
    if strategy == "fixture_gt":
        if sample.gt_direction is None:
            raise DirectionEstimationError(f"{sample.sample_id} has no stored direction")
        return DirectionEstimate(unit(sample.gt_direction), 1.0, "fixture_gt")
    if strategy == "keypoint_heuristic":
        hand = sample.hand()
        if hand is None:
            raise DirectionEstimationError(f"{sample.sample_id} has no hand annotation")
        wrist, tip = hand.keypoint("wrist"), hand.keypoint("fingertip")
        if wrist is None or tip is None:
            raise DirectionEstimationError(f"{sample.sample_id} lacks wrist/fingertip keypoints")
        if wrist == tip:
            raise DirectionEstimationError(f"{sample.sample_id} has coincident keypoints")
        return DirectionEstimate(
            unit((tip[0] - wrist[0], tip[1] - wrist[1])), 1.0, "keypoint_heuristic"
        )
    if strategy == "remote":
        hand = sample.hand()
        if hand is None or client is None:
            raise DirectionEstimationError("remote direction needs a hand box and a client")
        anchor = anchor_tokens(hand.bbox, sample.width, sample.height)
        prompt = (
            "A hand in the image occupies the box with anchor tokens "
            f"{' '.join(anchor.tokens())} (x1 y1 x2 y2 on a 1000-bin grid). "
            "In which direction is it pointing? Reply with one JSON object "
            '{"direction": [dx, dy]} using image coordinates (y grows downward).'
        )
        text = client.complete(_user_message(prompt, sample.image_ref))
        values = first_json_number_array(text, "direction", 2)
        if values is None or (values[0] == 0.0 and values[1] == 0.0):
            raise InferenceError(f"unparseable direction reply: {text[:200]!r}")
        return DirectionEstimate(unit((values[0], values[1])), 0.5, "remote")
    raise DirectionEstimationError(f"unknown direction strategy: {strategy!r}")


def remote_verify(
    image_ref: str,
    candidates: list[Annotation],
    query: str,
    client: ChatClient,
    width: int,
    height: int,
) -> list[SemanticScore]:
    """Score every candidate against the query with one chat call.

    Candidates are enumerated with their quantized anchor tokens; the reply
    must bind "scores" to one number per candidate, in order.
    """
    if not candidates:
        return []
    lines = []
    for i, ann in enumerate(candidates):
        anchor = anchor_tokens(ann.bbox, width, height)
        label = ann.category_name or "object"
        lines.append(f"{i}: {label} at {' '.join(anchor.tokens())}")
    prompt = (
        f"Query: {query}\n"
        "Rate how well each candidate region matches the query, 0 to 1.\n"
        + "\n".join(lines)
        + '\nReply with one JSON object {"scores": [s0, s1, ...]} covering every candidate.'
    )
    text = client.complete(_user_message(prompt, image_ref))
    values = first_json_number_array(text, "scores", len(candidates))
    if values is None:
        raise InferenceError(f"unparseable scores reply: {text[:200]!r}")
    return [
        SemanticScore(ann.ann_id, min(max(v, 0.0), 1.0))
        for ann, v in zip(candidates, values)
    ]


_PLACEHOLDERS = {
    Task.EDG: ("{underspecified_referent}", "{hand_input}"),
    Task.DREC: ("{underspecified_referent}",),
    Task.POG: ("{hand_input}",),
    Task.DVQA: ("{hand_input}", "{question}"),
}


@dataclass(frozen=True)
class PromptTemplate:
    task: Task
    model_family: str
    coordinate_mode: CoordinateMode
    template: str

    def __post_init__(self) -> None:
        for ph in _PLACEHOLDERS[self.task]:
            n = self.template.count(ph)
            if n != 1:
                raise PromptError(
                    f"template ({self.task.value}, {self.model_family}) must contain "
                    f"{ph} exactly once, found {n}"
                )


def format_box_for_prompt(box: BBox2D) -> str:
    """Serialize a box the way prompts expect: ints except in unit-normalized mode."""
    if box.mode == CoordinateMode.RELATIVE_1:
        vals = [round(v, 3) for v in box.as_list()]
    else:
        vals = [int(round(v)) for v in box.as_list()]
    return "[" + ", ".join(str(v) for v in vals) + "]"


def render_prompt(
    template: PromptTemplate, case: TestCase, hand_box: BBox2D | None = None
) -> str:
    """Substitute case fields into a template, byte-preserving everything else."""
    text = template.template
    needed = _PLACEHOLDERS[template.task]
    if "{underspecified_referent}" in needed:
        if case.referent is None:
            raise PromptError(f"case {case.case_id} has no referent")
        text = text.replace("{underspecified_referent}", case.referent)
    if "{hand_input}" in needed:
        if hand_box is None:
            raise PromptError(f"case {case.case_id} needs a hand box")
        scaled = convert_mode(
            hand_box, template.coordinate_mode, case.sample.width, case.sample.height
        )
        text = text.replace("{hand_input}", format_box_for_prompt(scaled))
    if "{question}" in needed:
        if case.question is None:
            raise PromptError(f"case {case.case_id} has no question")
        text = text.replace("{question}", case.question)
    return text


def _t(task: Task, family: str, mode: CoordinateMode, template: str) -> PromptTemplate:
    return PromptTemplate(task=task, model_family=family, coordinate_mode=mode, template=template)


_R1000 = CoordinateMode.RELATIVE_1000
_R1 = CoordinateMode.RELATIVE_1

BUILTIN_TEMPLATES: dict[tuple[Task, str], PromptTemplate] = {
    (t.task, t.model_family): t
    for t in (
        _t(
            Task.DREC,
            "groundinggpt",
            _R1,
            "{underspecified_referent}",
        ),
        _t(
            Task.DREC,
            "qwen3_vl",
            _R1000,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Your task is to localize the pointed-at target object "
            "and output its bounding box. Use [x1, y1, x2, y2] coordinates in range [0, 1000] "
            "(relative to image size). The underspecified reference below is auxiliary text "
            "about the target. Underspecified reference: {underspecified_referent}. Return "
            'ONLY one JSON object in this format: {"bbox_2d": [x1, y1, x2, y2]}.',
        ),
        _t(
            Task.DREC,
            "internvl_3_5",
            _R1000,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object, predict the bounding box of "
            "<ref>{underspecified_referent}</ref> being pointed at in format [x1, y1, x2, y2] "
            "where coordinates are in range [0, 1000] (relative to image size). Return ONLY "
            "the bbox of the pointed object in format [x1, y1, x2, y2]. Give me the result "
            "directly, do not reason.",
        ),
        _t(
            Task.DREC,
            "llava_onevision",
            _R1,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Your task is to localize the pointed-at target object "
            "and output its bounding box, where each coordinate is normalized to [0, 1] "
            "relative to image width/height. Underspecified reference: "
            "{underspecified_referent}. Return ONLY the bbox in this exact format: "
            "[x1, y1, x2, y2].",
        ),
        _t(
            Task.DREC,
            "ferret",
            _R1000,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Your task is to localize the pointed-at target object "
            "and output its bounding box in format [x1, y1, x2, y2], where coordinates are "
            "in range [0, 1000] (relative to image size). Underspecified reference: "
            "{underspecified_referent}. Return ONLY the bbox of the pointed object as "
            "[x1, y1, x2, y2].",
        ),
        _t(
            Task.DREC,
            "deepseek_vl2",
            _R1000,
            "<|grounding|> You are given an egocentric (first-person) image where a visible "
            "hand/finger is pointing to an object. Your task is to localize the pointed-at "
            "target object and output its bounding box in format [x1, y1, x2, y2], where "
            "each coordinate is in [0, 1000] relative to image size. Target object's "
            "underspecified reference: {underspecified_referent}. Return ONLY one bbox in "
            "[x1, y1, x2, y2].",
        ),
        _t(
            Task.POG,
            "groundinggpt",
            _R1,
            "You are a pointed object bounding box detector. Given an image and a hand bbox, "
            "predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2]. Hand bbox (xyxy, normalized to [0,1]): {hand_input}. Return "
            "ONLY the bbox of the pointed object in this format: [x1, y1, x2, y2].",
        ),
        _t(
            Task.POG,
            "qwen3_vl",
            _R1000,
            "You are a pointed object bounding box detector. Given an image and a hand bbox, "
            "predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2] where coordinates are in range [0, 1000] (relative to image "
            "size). Input hand bbox: {hand_input}. Return ONLY the bbox of the hand-pointed "
            'object in this format: {"bbox_2d": [x1, y1, x2, y2]}.',
        ),
        _t(
            Task.POG,
            "internvl_3_5",
            _R1000,
            "You are a pointed object bounding box detector. Given an image and a hand bbox, "
            "predict the bounding box of <ref>the object being pointed</ref> in format "
            "[x1, y1, x2, y2] where coordinates are in range [0, 1000] (relative to image "
            "size). Input hand bbox: {hand_input}. Return ONLY the bbox of the pointed "
            "object in format [x1, y1, x2, y2].",
        ),
        _t(
            Task.POG,
            "llava_onevision",
            _R1,
            "You are a pointed object bounding box detector. Given an image and a hand bbox, "
            "predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2], where each coordinate is normalized to [0, 1] relative to "
            "image width/height. Input hand bbox (xyxy, normalized to [0, 1]): {hand_input}. "
            "Return ONLY the bbox in this exact JSON format: [x1, y1, x2, y2].",
        ),
        _t(
            Task.POG,
            "ferret",
            _R1000,
            "You are a pointed object bounding box detector. Given an image and a hand bbox, "
            "predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2] where coordinates are in range [0, 1000] (relative to image "
            "size). Input hand bbox: {hand_input}. Return ONLY about the POINTED OBJECT, do "
            "not mention the hand, do not reason, return the result directly as "
            "[x1, y1, x2, y2].",
        ),
        _t(
            Task.POG,
            "deepseek_vl2",
            _R1000,
            "<|grounding|> You are a pointed object grounding model. Given an image and a "
            "hand bbox, predict the bbox of the object being pointed at in format "
            "[x1, y1, x2, y2] where coordinates are in [0, 1000] relative to image size. "
            "Input hand bbox: {hand_input}. Return ONLY one bbox in [x1, y1, x2, y2].",
        ),
        _t(
            Task.EDG,
            "qwen3_vl",
            _R1000,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Your task is to localize the pointed-at target object "
            "and output its bounding box. Use [x1, y1, x2, y2] coordinates in range [0, 1000] "
            "(relative to image size). Input hand bbox: {hand_input}. The underspecified "
            "reference below is auxiliary text about the target. Underspecified reference: "
            "{underspecified_referent}. Return ONLY one JSON object in this format: "
            '{"bbox_2d": [x1, y1, x2, y2]}.',
        ),
        _t(
            Task.DVQA,
            "qwen3_vl",
            _R1000,
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Input hand bbox: {hand_input}, with coordinates in "
            "range [0, 1000] (relative to image size). Question about the pointed-at object: "
            "{question}. Answer with the object category in a few words.",
        ),
    )
}

_TEMPLATE_FILE_RE = re.compile(r"^(edg|drec|pog|dvqa)__([A-Za-z0-9_]+)__([a-z0-9_]+)\.txt$")
_FILE_TASKS = {"edg": Task.EDG, "drec": Task.DREC, "pog": Task.POG, "dvqa": Task.DVQA}


def load_templates(directory: str | Path) -> dict[tuple[Task, str], PromptTemplate]:
    """Read templates from <task>__<model_family>__<coordinate_mode>.txt files."""
    directory = Path(directory)
    out: dict[tuple[Task, str], PromptTemplate] = {}
    for path in sorted(directory.glob("*.txt")):
        m = _TEMPLATE_FILE_RE.match(path.name)
        if m is None:
            raise PromptError(f"unrecognized template file name: {path.name}")
        task = _FILE_TASKS[m.group(1)]
        family = m.group(2)
        try:
            mode = CoordinateMode(m.group(3))
        except ValueError as exc:
            raise PromptError(f"unknown coordinate mode in {path.name}") from exc
        text = path.read_text()
        if text.endswith("\n"):
            text = text[:-1]
        out[(task, family)] = PromptTemplate(task, family, mode, text)
    return out


def get_template(task: Task, model_family: str) -> PromptTemplate:
    try:
        return BUILTIN_TEMPLATES[(task, model_family)]
    except KeyError:
        raise PromptError(f"no built-in template for ({task.value}, {model_family})") from None
