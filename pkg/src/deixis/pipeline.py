"""The staged grounding chain: direction, ray, pruning, verification, resolution.

The chain is explicit and inspectable. Given a hand-bearing case it estimates
a pointing direction, casts a ray from the hand centroid, prunes candidates to
those the forward ray (or cone) hits, scores the survivors semantically, and
resolves with a rejection threshold: the best-scoring survivor wins only when
its score clears tau, otherwise the chain explicitly declines to ground.

Pointing-only and question cases carry no category information, so every
pruned candidate receives the neutral pure-deixis score and resolution
degenerates to the nearest candidate along the ray. Language-only cases have
no ray at all: every non-hand candidate is scored and the geometric tie-break
collapses to box area then annotation id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

from .geometry import BBox2D, CoordinateMode, Ray2D, centroid, convert_mode, ray_box_intersect, sanitize
from .parsing import ParseOutcome, extract_bbox
from .schema import Annotation, Sample, Task, TestCase
from .scorers import (
    PURE_DEIXIS_SCORE,
    ChatClient,
    DirectionEstimate,
    PromptTemplate,
    SemanticScore,
    estimate_direction,
    mock_verify,
    remote_verify,
    render_prompt,
    _user_message,
)


class Verifier(Protocol):
    def __call__(
        self, sample: Sample, candidates: Sequence[Annotation], query: str
    ) -> list[SemanticScore]: ...


class MockVerifier:
    name = "mock"

    def __call__(
        self, sample: Sample, candidates: Sequence[Annotation], query: str
    ) -> list[SemanticScore]:
        return [mock_verify(c, query) for c in candidates]


class RemoteVerifier:
    name = "remote"

    def __init__(self, client: ChatClient) -> None:
        self._client = client

    def __call__(
        self, sample: Sample, candidates: Sequence[Annotation], query: str
    ) -> list[SemanticScore]:
        return remote_verify(
            sample.image_ref, list(candidates), query, self._client, sample.width, sample.height
        )


@dataclass(frozen=True)
class PrunedCandidate:
    """A candidate the forward ray hits, with its entry/exit parameters."""

    ann_id: str
    box: BBox2D
    t_entry: float
    t_exit: float


@dataclass(frozen=True)
class GroundingOutcome:
    """Either an accepted annotation or an explicit rejection."""

    ann_id: str | None
    box: BBox2D | None

    @property
    def accepted(self) -> bool:
        return self.ann_id is not None

    @classmethod
    def accept(cls, ann_id: str, box: BBox2D) -> GroundingOutcome:
        return cls(ann_id=ann_id, box=box)

    @classmethod
    def reject(cls) -> GroundingOutcome:
        return cls(ann_id=None, box=None)


@dataclass(frozen=True)
class ReasoningTrace:
    direction: DirectionEstimate | None
    ray: Ray2D | None
    pruned: tuple[PrunedCandidate, ...]
    scores: tuple[SemanticScore, ...]
    decision: GroundingOutcome

    def to_dict(self) -> dict:
        return {
            "direction": (
                None
                if self.direction is None
                else {
                    "vector": list(self.direction.direction),
                    "confidence": self.direction.confidence,
                    "provenance": self.direction.provenance,
                }
            ),
            "ray": (
                None
                if self.ray is None
                else {"origin": list(self.ray.origin), "direction": list(self.ray.direction)}
            ),
            "candidates": [
                {
                    "ann_id": c.ann_id,
                    "box": c.box.as_list(),
                    "t_entry": c.t_entry,
                    "t_exit": c.t_exit,
                }
                for c in self.pruned
            ],
            "scores": [{"ann_id": s.candidate_ann_id, "score": s.score} for s in self.scores],
            "decision": {
                "accepted": self.decision.accepted,
                "ann_id": self.decision.ann_id,
                "box": None if self.decision.box is None else self.decision.box.as_list(),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def prune_candidates(
    ray: Ray2D,
    candidates: Sequence[Annotation],
    hand_ann_id: str,
    cone_half_angle: float = 0.0,
) -> list[PrunedCandidate]:
    """Keep candidates the forward ray hits, sorted by entry parameter.

    The hand annotation never survives pruning. A positive cone half-angle
    widens the test to three rays (center and both cone boundaries); a box is
    kept when any of them hits it, with the interval envelope over the hits.
    """
    rays = [ray]
    if cone_half_angle > 0.0:
        rays += [ray.rotated(cone_half_angle), ray.rotated(-cone_half_angle)]
    kept: list[PrunedCandidate] = []
    for ann in candidates:
        if ann.ann_id == hand_ann_id or ann.is_hand:
            continue
        spans = [s for s in (ray_box_intersect(r, ann.bbox) for r in rays) if s is not None]
        if not spans:
            continue
        kept.append(
            PrunedCandidate(
                ann_id=ann.ann_id,
                box=ann.bbox,
                t_entry=min(s[0] for s in spans),
                t_exit=max(s[1] for s in spans),
            )
        )
    kept.sort(key=lambda c: (c.t_entry, c.ann_id))
    return kept


def resolve(
    pruned: Sequence[PrunedCandidate],
    scores: Sequence[SemanticScore],
    tau: float,
) -> GroundingOutcome:
    """Thresholded argmax over semantic scores.

    Score ties break toward the smaller entry parameter, then the smaller box
    area, then the lexicographically smaller annotation id. An empty candidate
    set or a best score below tau is an explicit rejection.
    """
    if len(pruned) != len(scores):
        raise ValueError(f"{len(pruned)} candidates but {len(scores)} scores")
    for c, s in zip(pruned, scores):
        if c.ann_id != s.candidate_ann_id:
            raise ValueError(f"score for {s.candidate_ann_id} misaligned with candidate {c.ann_id}")
    if not pruned:
        return GroundingOutcome.reject()
    ranked = sorted(
        zip(pruned, scores),
        key=lambda cs: (-cs[1].score, cs[0].t_entry, cs[0].box.area, cs[0].ann_id),
    )
    best_c, best_s = ranked[0]
    if best_s.score < tau:
        return GroundingOutcome.reject()
    return GroundingOutcome.accept(best_c.ann_id, best_c.box)


def run_svcot(
    case: TestCase,
    direction_strategy: str = "fixture_gt",
    verifier: Verifier | None = None,
    tau: float = 0.5,
    cone_half_angle: float = 0.0,
    client: ChatClient | None = None,
) -> tuple[GroundingOutcome, ReasoningTrace]:
    """Run the full chain on a hand-bearing case (EDG, POG, or D-VQA).

    EDG scores survivors against the referent through the verifier; POG and
    D-VQA are pure pointing, so survivors get the neutral deixis score and the
    nearest-along-ray candidate wins.
    """
    if case.task == Task.DREC:
        raise ValueError("language-only cases have no ray; use run_language_only")
    sample = case.sample
    hand = sample.hand()
    if hand is None:
        raise ValueError(f"case {case.case_id} has no hand annotation")
    verifier = verifier or MockVerifier()
    direction = estimate_direction(sample, direction_strategy, client)
    ray = Ray2D(centroid(hand.bbox), direction.direction)
    pruned = prune_candidates(ray, sample.annotations, hand.ann_id, cone_half_angle)
    by_id = {ann.ann_id: ann for ann in sample.annotations}
    if case.task == Task.EDG and case.referent is not None:
        ordered = [by_id[c.ann_id] for c in pruned]
        scores = list(verifier(sample, ordered, case.referent))
    else:
        scores = [SemanticScore(c.ann_id, PURE_DEIXIS_SCORE) for c in pruned]
    outcome = resolve(pruned, scores, tau)
    trace = ReasoningTrace(
        direction=direction,
        ray=ray,
        pruned=tuple(pruned),
        scores=tuple(scores),
        decision=outcome,
    )
    return outcome, trace


def run_language_only(
    case: TestCase,
    verifier: Verifier | None = None,
    tau: float = 0.5,
) -> tuple[GroundingOutcome, ReasoningTrace]:
    """Ground from the referent alone: no hand, no ray, every object a candidate."""
    if case.referent is None:
        raise ValueError(f"case {case.case_id} has no referent")
    sample = case.sample
    verifier = verifier or MockVerifier()
    objects = sample.objects()
    # Zeroed intervals neutralize the geometric tie-break; area and id remain.
    pseudo = [PrunedCandidate(ann.ann_id, ann.bbox, 0.0, 0.0) for ann in objects]
    scores = list(verifier(sample, list(objects), case.referent))
    outcome = resolve(pseudo, scores, tau)
    trace = ReasoningTrace(
        direction=None,
        ray=None,
        pruned=tuple(pseudo),
        scores=tuple(scores),
        decision=outcome,
    )
    return outcome, trace


@dataclass(frozen=True)
class DirectResult:
    """One remote grounding attempt: raw reply, parsed boxes, or a failure tag."""

    prompt: str
    raw_text: str
    pred_box_raw: BBox2D | None
    pred_box: BBox2D | None
    failure: str | None


def run_direct(
    case: TestCase,
    template: PromptTemplate,
    client: ChatClient,
    declared_mode: CoordinateMode | None = None,
) -> DirectResult:
    """Prompt a remote model end-to-end and parse one box from its reply.

    The parsed box is interpreted in `declared_mode` (default: the template's
    mode), converted to absolute pixels and sanitized; a reply with no
    recoverable box keeps the raw text and carries the parse failure tag.
    """
    sample = case.sample
    hand = sample.hand()
    prompt = render_prompt(template, case, None if hand is None else hand.bbox)
    text = client.complete(_user_message(prompt, sample.image_ref))
    mode = declared_mode or template.coordinate_mode
    parsed: ParseOutcome = extract_bbox(text, mode)
    if not parsed.ok:
        return DirectResult(prompt, text, None, None, parsed.failure_reason)
    raw_box = parsed.result
    absolute = convert_mode(raw_box, CoordinateMode.ABSOLUTE, sample.width, sample.height)
    return DirectResult(prompt, text, raw_box, sanitize(absolute, sample.width, sample.height), None)


def run_direct_qa(case: TestCase, template: PromptTemplate, client: ChatClient) -> tuple[str, str]:
    """Prompt a remote model with a question case; returns (prompt, raw reply)."""
    sample = case.sample
    hand = sample.hand()
    prompt = render_prompt(template, case, None if hand is None else hand.bbox)
    return prompt, client.complete(_user_message(prompt, sample.image_ref))
