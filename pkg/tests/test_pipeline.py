"""Chain behavior: pruning, thresholded resolution, per-task runs, direct baseline."""

from __future__ import annotations

import json
from dataclasses import replace

import pytest

from deixis.geometry import BBox2D, CoordinateMode, Ray2D, centroid
from deixis.parsing import PARSE_FAILED
from deixis.pipeline import (
    GroundingOutcome,
    MockVerifier,
    PrunedCandidate,
    RemoteVerifier,
    prune_candidates,
    resolve,
    run_direct,
    run_direct_qa,
    run_language_only,
    run_svcot,
)
from deixis.schema import HAND_ANN_ID, Annotation, Sample, Task
from deixis.schema import TestCase as Case
from deixis.scorers import ChatClient, EndpointConfig, SemanticScore, get_template
from fakes import FakeTransport, prompt_text

RIGHT = Ray2D((0.0, 0.0), (1.0, 0.0))


def _ann(ann_id, box, cat="thing", attr=None):
    return Annotation(ann_id, BBox2D(*box), cat, (), attr)


class TestPrune:
    CANDS = [
        _ann("a", (5, -1, 6, 1)),
        _ann("b", (10, -1, 11, 1)),
        _ann("c", (5, 5, 6, 6)),
    ]

    def test_center_ray_keeps_on_ray_in_entry_order(self):
        pruned = prune_candidates(RIGHT, self.CANDS, hand_ann_id="hand")
        assert [(c.ann_id, c.t_entry, c.t_exit) for c in pruned] == [
            ("a", 5.0, 6.0),
            ("b", 10.0, 11.0),
        ]

    def test_narrow_cone_still_excludes_off_ray(self):
        pruned = prune_candidates(RIGHT, self.CANDS, "hand", cone_half_angle=0.2)
        assert [c.ann_id for c in pruned] == ["a", "b"]

    def test_wide_cone_recovers_diagonal_box(self):
        import math

        pruned = prune_candidates(RIGHT, self.CANDS, "hand", cone_half_angle=math.pi / 4)
        assert "c" in [c.ann_id for c in pruned]

    def test_cone_envelope_widens_interval(self):
        pruned = prune_candidates(RIGHT, [self.CANDS[0]], "hand", cone_half_angle=0.1)
        (only,) = pruned
        assert only.t_entry <= 5.0 and only.t_exit >= 6.0

    def test_hand_never_survives(self):
        cands = [_ann("the_hand", (2, -1, 3, 1)), _ann(HAND_ANN_ID, (4, -1, 4.5, 1))]
        assert prune_candidates(RIGHT, cands, "the_hand") == []

    def test_entry_tie_breaks_on_id(self):
        cands = [_ann("z", (5, -1, 6, 1)), _ann("y", (5, -2, 7, 2))]
        pruned = prune_candidates(RIGHT, cands, "hand")
        assert [c.ann_id for c in pruned] == ["y", "z"]


def _pc(ann_id, t_entry=1.0, area_box=(0, 0, 10, 10)):
    return PrunedCandidate(ann_id, BBox2D(*area_box), t_entry, t_entry + 1.0)


def _sc(ann_id, score):
    return SemanticScore(ann_id, score)


class TestResolve:
    def test_argmax_wins(self):
        out = resolve([_pc("a"), _pc("b")], [_sc("a", 0.4), _sc("b", 0.9)], tau=0.5)
        assert out.accepted and out.ann_id == "b"

    def test_below_tau_rejects(self):
        out = resolve([_pc("a")], [_sc("a", 0.49)], tau=0.5)
        assert not out.accepted and out.ann_id is None and out.box is None

    def test_at_tau_accepts(self):
        assert resolve([_pc("a")], [_sc("a", 0.5)], tau=0.5).accepted

    def test_empty_rejects(self):
        assert not resolve([], [], tau=0.0).accepted

    def test_score_tie_breaks_to_nearer_entry(self):
        out = resolve(
            [_pc("far", 9.0), _pc("near", 2.0)],
            [_sc("far", 0.8), _sc("near", 0.8)],
            tau=0.5,
        )
        assert out.ann_id == "near"

    def test_entry_tie_breaks_to_smaller_area(self):
        out = resolve(
            [_pc("big", 2.0, (0, 0, 20, 20)), _pc("small", 2.0, (0, 0, 5, 5))],
            [_sc("big", 0.8), _sc("small", 0.8)],
            tau=0.5,
        )
        assert out.ann_id == "small"

    def test_full_tie_breaks_to_smaller_id(self):
        out = resolve(
            [_pc("b", 2.0), _pc("a", 2.0)],
            [_sc("b", 0.8), _sc("a", 0.8)],
            tau=0.5,
        )
        assert out.ann_id == "a"

    def test_alignment_errors(self):
        with pytest.raises(ValueError):
            resolve([_pc("a")], [], tau=0.5)
        with pytest.raises(ValueError):
            resolve([_pc("a")], [_sc("b", 0.9)], tau=0.5)

    def test_tau_monotone(self):
        pruned = [_pc("a", 1.0), _pc("b", 2.0)]
        scores = [_sc("a", 0.55), _sc("b", 0.75)]
        accepted_at = [
            tau for tau in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0) if resolve(pruned, scores, tau).accepted
        ]
        assert accepted_at == [0.0, 0.2, 0.4, 0.6]
        for tau in accepted_at:
            assert resolve(pruned, scores, tau).ann_id == "b"


def _scene(scale=1.0, extra_offray=False):
    s = scale
    anns = [
        Annotation(
            HAND_ANN_ID,
            BBox2D(90 * s, 300 * s, 110 * s, 320 * s),
            "hand",
            keypoints=(("wrist", (100 * s, 317 * s)), ("fingertip", (100 * s, 304 * s))),
        ),
        Annotation("obj_cup", BBox2D(80 * s, 100 * s, 120 * s, 140 * s), "cup", (), "red"),
        Annotation("obj_book", BBox2D(300 * s, 80 * s, 360 * s, 140 * s), "book", (), "thick"),
    ]
    if extra_offray:
        anns.append(Annotation("obj_lamp", BBox2D(500 * s, 30 * s, 560 * s, 90 * s), "lamp"))
    return Sample(
        sample_id="scene",
        image_ref="scene.png",
        width=int(640 * s),
        height=int(480 * s),
        annotations=tuple(anns),
        gt_target_ann_id="obj_cup",
        gt_direction=(0.0, -1.0),
    )


class TestRunSvcot:
    def test_edg_accepts_matching_referent(self):
        case = Case(_scene(), Task.EDG, "scene:0", referent="this cup")
        outcome, trace = run_svcot(case, tau=0.5)
        assert outcome.accepted and outcome.ann_id == "obj_cup"
        assert trace.decision == outcome
        assert [c.ann_id for c in trace.pruned] == ["obj_cup"]
        assert trace.direction.provenance == "fixture_gt"
        assert trace.ray.origin == centroid(_scene().hand().bbox)

    def test_edg_rejects_mismatched_referent(self):
        case = Case(_scene(), Task.EDG, "scene:0", referent="this banana")
        outcome, trace = run_svcot(case, tau=0.5)
        assert not outcome.accepted
        assert trace.scores[0].score == 0.0

    def test_pog_takes_nearest_on_ray(self):
        sample = _scene()
        near = Annotation("obj_near", BBox2D(85, 200, 115, 230), "plate")
        sample = replace(sample, annotations=sample.annotations + (near,))
        case = Case(sample, Task.POG, "scene:0")
        outcome, trace = run_svcot(case, tau=0.5)
        assert outcome.ann_id == "obj_near"
        assert all(s.score == 0.5 for s in trace.scores)

    def test_dvqa_is_pure_pointing(self):
        case = Case(_scene(), Task.DVQA, "scene:0", question="what is this?")
        outcome, _ = run_svcot(case, tau=0.5)
        assert outcome.ann_id == "obj_cup"

    def test_drec_refused(self):
        case = Case(_scene(), Task.DREC, "scene:0", referent="this cup")
        with pytest.raises(ValueError):
            run_svcot(case)

    def test_missing_hand_is_an_error(self):
        sample = _scene()
        handless = replace(sample, annotations=tuple(sample.objects()))
        with pytest.raises(ValueError):
            run_svcot(Case(handless, Task.POG, "scene:0"))

    def test_keypoint_strategy_matches_fixture_gt_here(self):
        case = Case(_scene(), Task.POG, "scene:0")
        a, _ = run_svcot(case, direction_strategy="fixture_gt")
        b, _ = run_svcot(case, direction_strategy="keypoint_heuristic")
        assert a == b

    def test_scale_invariant_winner(self):
        for s in (0.5, 2.0, 3.5):
            case = Case(_scene(scale=s), Task.EDG, "scene:0", referent="this cup")
            outcome, _ = run_svcot(case, tau=0.5)
            assert outcome.ann_id == "obj_cup"

    def test_off_ray_additions_do_not_change_outcome(self):
        base = Case(_scene(), Task.EDG, "scene:0", referent="this cup")
        jammed = Case(_scene(extra_offray=True), Task.EDG, "scene:0", referent="this cup")
        assert run_svcot(base)[0] == run_svcot(jammed)[0]

    def test_tau_sweep_monotone_on_chain(self):
        exact = Case(_scene(), Task.EDG, "scene:0", referent="that red cup")
        partial = Case(_scene(), Task.EDG, "scene:0", referent="this cup")
        taus = (0.0, 0.5, 0.9, 1.0)
        assert [tau for tau in taus if run_svcot(exact, tau=tau)[0].accepted] == [0.0, 0.5, 0.9, 1.0]
        assert [tau for tau in taus if run_svcot(partial, tau=tau)[0].accepted] == [0.0, 0.5]

    def test_trace_serializes(self):
        case = Case(_scene(), Task.EDG, "scene:0", referent="this cup")
        _, trace = run_svcot(case)
        doc = json.loads(trace.to_json())
        assert doc["decision"]["ann_id"] == "obj_cup"
        assert doc["direction"]["provenance"] == "fixture_gt"
        assert doc["candidates"][0]["ann_id"] == "obj_cup"


class TestRunLanguageOnly:
    def test_unique_category_wins_without_geometry(self):
        case = Case(_scene(), Task.DREC, "scene:0", referent="that thick book")
        outcome, trace = run_language_only(case)
        assert outcome.ann_id == "obj_book"
        assert trace.ray is None and trace.direction is None
        assert {c.t_entry for c in trace.pruned} == {0.0}

    def test_pure_deixis_falls_back_to_area_then_id(self):
        case = Case(_scene(), Task.DREC, "scene:0", referent="this one")
        outcome, _ = run_language_only(case)
        # all candidates score 0.5; the cup box (40x40) is smaller than the book (60x60)
        assert outcome.ann_id == "obj_cup"

    def test_no_match_rejects(self):
        case = Case(_scene(), Task.DREC, "scene:0", referent="this banana")
        assert not run_language_only(case, tau=0.5)[0].accepted

    def test_requires_referent(self):
        with pytest.raises(ValueError):
            run_language_only(Case(_scene(), Task.DREC, "scene:0"))


class TestVerifierAdapters:
    def test_mock_verifier_orders_scores(self):
        sample = _scene()
        scores = MockVerifier()(sample, sample.objects(), "this cup")
        assert [s.candidate_ann_id for s in scores] == ["obj_cup", "obj_book"]
        assert [s.score for s in scores] == [0.5, 0.0]

    def test_remote_verifier_delegates(self):
        transport = FakeTransport('{"scores": [0.8, 0.2]}')
        verifier = RemoteVerifier(ChatClient(EndpointConfig("http://u"), transport=transport))
        sample = _scene()
        scores = verifier(sample, sample.objects(), "this cup")
        assert [s.score for s in scores] == [0.8, 0.2]
        assert "Query: this cup" in prompt_text(transport.calls[0])


def _direct_sample():
    hand = Annotation(HAND_ANN_ID, BBox2D(200, 400, 300, 500), "hand")
    obj = Annotation("obj", BBox2D(50, 50, 100, 100), "cup", ("this cup",), "red")
    return Sample(
        sample_id="d1",
        image_ref="d1.png",
        width=500,
        height=500,
        annotations=(hand, obj),
        gt_target_ann_id="obj",
        gt_direction=(0.0, -1.0),
    )


class TestRunDirect:
    def test_grid_reply_converted_to_absolute(self):
        case = Case(_direct_sample(), Task.POG, "d1:0")
        client = ChatClient(
            EndpointConfig("http://u"), transport=FakeTransport('{"bbox_2d": [100, 100, 200, 200]}')
        )
        result = run_direct(case, get_template(Task.POG, "qwen3_vl"), client)
        assert result.failure is None
        assert result.pred_box_raw.mode is CoordinateMode.RELATIVE_1000
        assert result.pred_box.as_list() == [50.0, 50.0, 100.0, 100.0]
        assert result.pred_box.mode is CoordinateMode.ABSOLUTE
        assert "Input hand bbox: [400, 800, 600, 1000]." in result.prompt

    def test_declared_mode_overrides_template(self):
        case = Case(_direct_sample(), Task.POG, "d1:0")
        client = ChatClient(
            EndpointConfig("http://u"), transport=FakeTransport("[100, 100, 200, 200]")
        )
        result = run_direct(
            case, get_template(Task.POG, "qwen3_vl"), client, declared_mode=CoordinateMode.ABSOLUTE
        )
        assert result.pred_box.as_list() == [100.0, 100.0, 200.0, 200.0]

    def test_unparseable_reply_tagged(self):
        case = Case(_direct_sample(), Task.POG, "d1:0")
        client = ChatClient(EndpointConfig("http://u"), transport=FakeTransport("I cannot find it."))
        result = run_direct(case, get_template(Task.POG, "qwen3_vl"), client)
        assert result.failure == PARSE_FAILED
        assert result.pred_box is None and result.pred_box_raw is None
        assert result.raw_text == "I cannot find it."

    def test_out_of_frame_reply_clamped(self):
        case = Case(_direct_sample(), Task.POG, "d1:0")
        client = ChatClient(
            EndpointConfig("http://u"), transport=FakeTransport('{"bbox_2d": [900, 900, 2000, 2000]}')
        )
        result = run_direct(case, get_template(Task.POG, "qwen3_vl"), client)
        assert result.failure is None
        assert result.pred_box.as_list() == [450.0, 450.0, 500.0, 500.0]

    def test_degenerate_after_clamp_is_boxless_but_not_a_parse_failure(self):
        case = Case(_direct_sample(), Task.POG, "d1:0")
        client = ChatClient(
            EndpointConfig("http://u"), transport=FakeTransport('{"bbox_2d": [1200, 100, 1400, 300]}')
        )
        result = run_direct(case, get_template(Task.POG, "qwen3_vl"), client)
        assert result.failure is None
        assert result.pred_box is None
        assert result.pred_box_raw is not None

    def test_qa_returns_prompt_and_reply(self):
        case = Case(_direct_sample(), Task.DVQA, "d1:0", question="what is this?")
        client = ChatClient(EndpointConfig("http://u"), transport=FakeTransport("a red cup"))
        prompt, reply = run_direct_qa(case, get_template(Task.DVQA, "qwen3_vl"), client)
        assert "what is this?" in prompt
        assert reply == "a red cup"


class TestOutcome:
    def test_constructors(self):
        acc = GroundingOutcome.accept("x", BBox2D(0, 0, 1, 1))
        rej = GroundingOutcome.reject()
        assert acc.accepted and not rej.accepted
        assert rej.box is None
