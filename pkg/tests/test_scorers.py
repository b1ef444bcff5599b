"""Verifier scoring, direction strategies, endpoint client, and prompt rendering."""

from __future__ import annotations

import socket

import pytest

from deixis.geometry import BBox2D, CoordinateMode
from deixis.schema import HAND_ANN_ID, Annotation, Sample, Task
from deixis.schema import TestCase as Case
from deixis.scorers import (
    BUILTIN_TEMPLATES,
    PURE_DEIXIS_SCORE,
    ChatClient,
    DirectionEstimationError,
    EndpointConfig,
    InferenceError,
    PromptError,
    PromptTemplate,
    SemanticScore,
    estimate_direction,
    format_box_for_prompt,
    get_template,
    load_templates,
    mock_verify,
    remote_verify,
    render_prompt,
)
from fakes import FakeTransport, LocalChatEndpoint, prompt_text

CUP = Annotation("obj_1", BBox2D(150, 50, 250, 150), "cup", ("this cup",), "red")


def _sample(with_keypoints=True, with_hand=True):
    anns = []
    if with_hand:
        kp = (("wrist", (200.0, 330.0)), ("fingertip", (200.0, 270.0))) if with_keypoints else None
        anns.append(Annotation(HAND_ANN_ID, BBox2D(100, 200, 300, 400), "hand", keypoints=kp))
    anns.append(CUP)
    return Sample(
        sample_id="s1",
        image_ref="s1.png",
        width=1000,
        height=1000,
        annotations=tuple(anns),
        gt_target_ann_id="obj_1",
        gt_direction=(0.0, -1.0),
    )


class TestMockVerify:
    def test_pure_deixis_is_neutral(self):
        assert mock_verify(CUP, "this one").score == PURE_DEIXIS_SCORE
        assert mock_verify(CUP, "that").score == PURE_DEIXIS_SCORE

    def test_full_match(self):
        assert mock_verify(CUP, "that red cup").score == 1.0

    def test_partial_match(self):
        assert mock_verify(CUP, "this cup").score == 0.5

    def test_no_match(self):
        assert mock_verify(CUP, "this banana").score == 0.0

    def test_token_order_irrelevant(self):
        assert mock_verify(CUP, "cup red").score == mock_verify(CUP, "red cup").score == 1.0

    def test_punctuation_and_case_folded(self):
        assert mock_verify(CUP, "The RED cup!").score == 1.0

    def test_candidate_tokens_are_not_stopword_filtered(self):
        oddball = Annotation("x", BBox2D(0, 0, 1, 1), "one", (), None)
        # "one" is a stopword in queries but remains a candidate token
        assert mock_verify(oddball, "shiny one").score == 0.0
        assert mock_verify(oddball, "this one").score == PURE_DEIXIS_SCORE

    def test_score_range_enforced(self):
        with pytest.raises(ValueError):
            SemanticScore("x", 1.2)
        with pytest.raises(ValueError):
            SemanticScore("x", -0.1)


class TestEstimateDirection:
    def test_fixture_gt_normalizes(self):
        sample = _sample()
        est = estimate_direction(sample, "fixture_gt")
        assert est.direction == (0.0, -1.0)
        assert est.provenance == "fixture_gt"

    def test_fixture_gt_missing_direction(self):
        sample = Sample("s", "s.png", 100, 100, (CUP,))
        with pytest.raises(DirectionEstimationError):
            estimate_direction(sample, "fixture_gt")

    def test_keypoint_heuristic(self):
        est = estimate_direction(_sample(), "keypoint_heuristic")
        assert est.direction == pytest.approx((0.0, -1.0))
        assert est.provenance == "keypoint_heuristic"

    def test_keypoint_heuristic_failures(self):
        with pytest.raises(DirectionEstimationError):
            estimate_direction(_sample(with_hand=False), "keypoint_heuristic")
        with pytest.raises(DirectionEstimationError):
            estimate_direction(_sample(with_keypoints=False), "keypoint_heuristic")

    def test_remote_parses_and_normalizes(self):
        transport = FakeTransport('{"direction": [3, -4]}')
        client = ChatClient(EndpointConfig("http://unused"), transport=transport)
        est = estimate_direction(_sample(), "remote", client=client)
        assert est.direction == pytest.approx((0.6, -0.8))
        assert est.provenance == "remote"
        prompt = prompt_text(transport.calls[0])
        # quantized hand anchor for [100, 200, 300, 400] in a 1000x1000 frame
        assert "<bin_99> <bin_199> <bin_299> <bin_399>" in prompt

    def test_remote_rejects_unusable_replies(self):
        for reply in ("no idea", '{"direction": [0, 0]}', '{"direction": [1]}'):
            client = ChatClient(EndpointConfig("http://unused"), transport=FakeTransport(reply))
            with pytest.raises(InferenceError):
                estimate_direction(_sample(), "remote", client=client)

    def test_remote_needs_client(self):
        with pytest.raises(DirectionEstimationError):
            estimate_direction(_sample(), "remote", client=None)

    def test_unknown_strategy(self):
        with pytest.raises(DirectionEstimationError):
            estimate_direction(_sample(), "magic")


class TestRemoteVerify:
    def _client(self, reply):
        return ChatClient(EndpointConfig("http://unused"), transport=FakeTransport(reply))

    def test_scores_align_with_candidate_order(self):
        cands = [CUP, Annotation("obj_2", BBox2D(10, 10, 60, 60), "book", (), None)]
        scores = remote_verify(
            "s.png", cands, "this cup", self._client('{"scores": [0.9, 0.1]}'), 1000, 1000
        )
        assert [(s.candidate_ann_id, s.score) for s in scores] == [("obj_1", 0.9), ("obj_2", 0.1)]

    def test_out_of_range_scores_clamped(self):
        scores = remote_verify(
            "s.png", [CUP], "this cup", self._client('{"scores": [1.7]}'), 1000, 1000
        )
        assert scores[0].score == 1.0
        scores = remote_verify(
            "s.png", [CUP], "this cup", self._client('{"scores": [-0.4]}'), 1000, 1000
        )
        assert scores[0].score == 0.0

    def test_length_mismatch_is_an_error(self):
        cands = [CUP, Annotation("obj_2", BBox2D(10, 10, 60, 60), "book", (), None)]
        with pytest.raises(InferenceError):
            remote_verify("s.png", cands, "q", self._client('{"scores": [0.9]}'), 1000, 1000)

    def test_garbage_reply_is_an_error(self):
        with pytest.raises(InferenceError):
            remote_verify("s.png", [CUP], "q", self._client("hmm"), 1000, 1000)

    def test_empty_candidates_short_circuit(self):
        transport = FakeTransport("should never be called")
        client = ChatClient(EndpointConfig("http://unused"), transport=transport)
        assert remote_verify("s.png", [], "q", client, 1000, 1000) == []
        assert transport.calls == []

    def test_prompt_enumerates_candidates_with_anchors(self):
        transport = FakeTransport('{"scores": [0.5]}')
        client = ChatClient(EndpointConfig("http://unused"), transport=transport)
        remote_verify("s.png", [CUP], "this cup", client, 1000, 1000)
        prompt = prompt_text(transport.calls[0])
        assert "Query: this cup" in prompt
        assert "0: cup at <bin_149> <bin_49> <bin_249> <bin_149>" in prompt


class TestChatClient:
    MESSAGES = [{"role": "user", "content": [{"type": "text", "text": "ping"}]}]

    def test_transport_errors_wrapped(self):
        def boom(messages):
            raise RuntimeError("socket reset")

        client = ChatClient(EndpointConfig("http://unused"), transport=boom)
        with pytest.raises(InferenceError):
            client.complete(self.MESSAGES)

    def test_http_round_trip_with_env_config(self):
        with LocalChatEndpoint(lambda req: "pong") as ep:
            env = {"EGO_API_BASE": ep.base_url, "EGO_API_KEY": "sk-test"}
            client = ChatClient(EndpointConfig.from_env(env=env))
            assert client.complete(self.MESSAGES) == "pong"
            assert ep.requests[0]["path"] == "/chat/completions"
            assert ep.requests[0]["auth"] == "Bearer sk-test"
            assert ep.requests[0]["body"]["messages"] == self.MESSAGES

    def test_no_key_sends_no_auth_header(self):
        with LocalChatEndpoint(lambda req: "ok") as ep:
            client = ChatClient(EndpointConfig(base_url=ep.base_url))
            client.complete(self.MESSAGES)
            assert ep.requests[0]["auth"] is None

    def test_connection_failure_is_inference_error(self):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        client = ChatClient(EndpointConfig(f"http://127.0.0.1:{port}", timeout=2.0))
        with pytest.raises(InferenceError):
            client.complete(self.MESSAGES)

    def test_from_env_requires_base(self):
        with pytest.raises(ValueError):
            EndpointConfig.from_env(env={})
        cfg = EndpointConfig.from_env(env={"EGO_API_BASE": "http://h"}, model="m2")
        assert cfg.base_url == "http://h" and cfg.model == "m2" and cfg.api_key == ""


class TestFormatBox:
    def test_integers_for_absolute_and_grid_modes(self):
        assert format_box_for_prompt(BBox2D(100.4, 200.0, 299.6, 400.0)) == "[100, 200, 300, 400]"
        box = BBox2D(1, 2, 3, 4, CoordinateMode.RELATIVE_1000)
        assert format_box_for_prompt(box) == "[1, 2, 3, 4]"

    def test_three_decimals_for_unit_mode(self):
        box = BBox2D(0.1234, 0.2, 0.35, 0.4005, CoordinateMode.RELATIVE_1)
        assert format_box_for_prompt(box) == "[0.123, 0.2, 0.35, 0.401]"


class TestRenderPrompt:
    HAND = BBox2D(100, 200, 300, 400)

    def _case(self, task, referent=None, question=None):
        return Case(_sample(), task, "s1:0", referent=referent, question=question)

    def test_pog_grid_mode_frozen(self):
        got = render_prompt(get_template(Task.POG, "qwen3_vl"), self._case(Task.POG), self.HAND)
        assert got == (
            "You are a pointed object bounding box detector. Given an image and a hand "
            "bbox, predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2] where coordinates are in range [0, 1000] (relative to image "
            "size). Input hand bbox: [100, 200, 300, 400]. Return ONLY the bbox of the "
            'hand-pointed object in this format: {"bbox_2d": [x1, y1, x2, y2]}.'
        )

    def test_pog_unit_mode_frozen(self):
        got = render_prompt(
            get_template(Task.POG, "llava_onevision"), self._case(Task.POG), self.HAND
        )
        assert got == (
            "You are a pointed object bounding box detector. Given an image and a hand "
            "bbox, predict the bounding box of the object being pointed at in format "
            "[x1, y1, x2, y2], where each coordinate is normalized to [0, 1] relative to "
            "image width/height. Input hand bbox (xyxy, normalized to [0, 1]): "
            "[0.1, 0.2, 0.3, 0.4]. Return ONLY the bbox in this exact JSON format: "
            "[x1, y1, x2, y2]."
        )

    def test_edg_frozen(self):
        case = self._case(Task.EDG, referent="this cup")
        got = render_prompt(get_template(Task.EDG, "qwen3_vl"), case, self.HAND)
        assert got == (
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Your task is to localize the pointed-at target "
            "object and output its bounding box. Use [x1, y1, x2, y2] coordinates in range "
            "[0, 1000] (relative to image size). Input hand bbox: [100, 200, 300, 400]. "
            "The underspecified reference below is auxiliary text about the target. "
            "Underspecified reference: this cup. Return ONLY one JSON object in this "
            'format: {"bbox_2d": [x1, y1, x2, y2]}.'
        )

    def test_dvqa_frozen(self):
        case = self._case(Task.DVQA, question="what is this?")
        got = render_prompt(get_template(Task.DVQA, "qwen3_vl"), case, self.HAND)
        assert got == (
            "You are given an egocentric (first-person) image where a visible hand/finger "
            "is pointing to an object. Input hand bbox: [100, 200, 300, 400], with "
            "coordinates in range [0, 1000] (relative to image size). Question about the "
            "pointed-at object: what is this?. Answer with the object category in a few "
            "words."
        )

    def test_bare_referent_template(self):
        case = self._case(Task.DREC, referent="that red cup")
        assert render_prompt(get_template(Task.DREC, "groundinggpt"), case) == "that red cup"

    def test_missing_inputs_raise(self):
        with pytest.raises(PromptError):
            render_prompt(get_template(Task.POG, "qwen3_vl"), self._case(Task.POG), None)
        with pytest.raises(PromptError):
            render_prompt(get_template(Task.EDG, "qwen3_vl"), self._case(Task.EDG), self.HAND)
        with pytest.raises(PromptError):
            render_prompt(get_template(Task.DVQA, "qwen3_vl"), self._case(Task.DVQA), self.HAND)

    def test_placeholder_multiplicity_enforced(self):
        with pytest.raises(PromptError):
            PromptTemplate(Task.POG, "x", CoordinateMode.ABSOLUTE, "no placeholder here")
        with pytest.raises(PromptError):
            PromptTemplate(
                Task.POG, "x", CoordinateMode.ABSOLUTE, "{hand_input} and {hand_input}"
            )


class TestTemplateRegistry:
    SIX = {"qwen3_vl", "internvl_3_5", "llava_onevision", "ferret", "deepseek_vl2", "groundinggpt"}

    def test_builtin_coverage(self):
        by_task = {}
        for task, family in BUILTIN_TEMPLATES:
            by_task.setdefault(task, set()).add(family)
        assert by_task[Task.DREC] == self.SIX
        assert by_task[Task.POG] == self.SIX
        assert by_task[Task.EDG] == {"qwen3_vl"}
        assert by_task[Task.DVQA] == {"qwen3_vl"}

    def test_get_template_missing(self):
        with pytest.raises(PromptError):
            get_template(Task.EDG, "ferret")

    def test_load_templates_round_trip(self, tmp_path):
        (tmp_path / "pog__custom_model__relative_1000.txt").write_text(
            "Hand at {hand_input}. Box please.\n"
        )
        (tmp_path / "drec__custom_model__absolute.txt").write_text("Find {underspecified_referent}")
        loaded = load_templates(tmp_path)
        pog = loaded[(Task.POG, "custom_model")]
        assert pog.coordinate_mode is CoordinateMode.RELATIVE_1000
        assert pog.template == "Hand at {hand_input}. Box please."
        assert loaded[(Task.DREC, "custom_model")].coordinate_mode is CoordinateMode.ABSOLUTE

    def test_load_templates_rejects_bad_names(self, tmp_path):
        (tmp_path / "pog-custom.txt").write_text("{hand_input}")
        with pytest.raises(PromptError):
            load_templates(tmp_path)

    def test_load_templates_rejects_bad_mode(self, tmp_path):
        (tmp_path / "pog__m__percent.txt").write_text("{hand_input}")
        with pytest.raises(PromptError):
            load_templates(tmp_path)

    def test_load_templates_validates_placeholders(self, tmp_path):
        (tmp_path / "pog__m__absolute.txt").write_text("no placeholder")
        with pytest.raises(PromptError):
            load_templates(tmp_path)
