"""Explanation pipeline tests: prompts, stub rater truth table, remote backend
error taxonomy, and the end-to-end consistency evaluation."""

import pytest
import requests

from locret.corpus import Finding, finding_description
from locret.explain import (SCORING_PROMPT_TEMPLATE, BackendError,
                            BackendResponseError, BackendTransportError,
                            ConsistencyScore, ExplainError,
                            ExplainabilityResult, ExplanationRequest,
                            RemoteBackend, RetrievedReport, ScoreParseError,
                            StubBackend, build_explanation_prompt,
                            build_scoring_prompt, evaluate_explainability,
                            generate_explanation, score_consistency,
                            stub_for_meta)
from locret.model import VisionLanguageModel

from conftest import tiny_model_config

DISEASES = ("nodule", "consolidation", "edema")
REGIONS = ("left-upper", "right-upper", "left-lower", "right-lower")


def make_stub(**kwargs):
    return StubBackend(diseases=DISEASES, region_names=REGIONS, **kwargs)


def make_request(descriptions, condition=None):
    condition = condition or Finding("left-upper", "nodule")
    reports = [RetrievedReport(rank=i + 1, description=d, sample_id=f"s{i}")
               for i, d in enumerate(descriptions)]
    return ExplanationRequest(query_id="q0", condition=condition, reports=reports)


GOLDEN_EXPLANATION_PROMPT = (
    "You are reviewing retrieved patient cases to explain an X-ray finding.\n"
    "Query region: left upper region\n"
    "Retrieved case descriptions:\n"
    "1. nodule at left upper region\n"
    "2. edema at right lower region\n"
    "Using only the retrieved descriptions, write one sentence stating the "
    "most likely disease and its anatomical region for the query."
)


class TestPrompts:
    def test_explanation_prompt_golden(self):
        request = make_request(["nodule at left upper region",
                                "edema at right lower region"])
        assert build_explanation_prompt(request) == GOLDEN_EXPLANATION_PROMPT

    def test_scoring_prompt_golden(self):
        got = build_scoring_prompt("X", "Y")
        assert got == SCORING_PROMPT_TEMPLATE.format(generated="X", ground_truth="Y")
        assert got.endswith("Following are the two descriptions: A. X. B. Y")

    def test_scoring_prompt_defines_all_five_scores(self):
        got = build_scoring_prompt("a", "b")
        for n in range(1, 6):
            assert f"Score {n} represents" in got
        assert got.startswith("Can you rate the consistency")

    def test_scoring_prompt_rejects_blank_descriptions(self):
        with pytest.raises(ExplainError, match="non-empty"):
            build_scoring_prompt("", "truth")
        with pytest.raises(ExplainError, match="non-empty"):
            build_scoring_prompt("gen", "   ")

    def test_request_validation(self):
        with pytest.raises(ExplainError, match="at least one"):
            ExplanationRequest(query_id="q", condition=Finding("left-upper", "nodule"),
                               reports=[])
        bad = [RetrievedReport(rank=1, description="a"),
               RetrievedReport(rank=3, description="b")]
        with pytest.raises(ExplainError, match="ranks"):
            ExplanationRequest(query_id="q", condition=Finding("left-upper", "nodule"),
                               reports=bad)


class TestStubTruthTable:
    def score(self, generated, truth, **kwargs):
        return score_consistency(make_stub(**kwargs), generated, truth).score

    def test_full_match_scores_five(self):
        assert self.score("nodule at left upper region",
                          "nodule at left upper region") == 5

    def test_wording_differences_keep_five_without_strict(self):
        assert self.score("Most likely finding: nodule at left upper region.",
                          "nodule at left upper region") == 5

    def test_strict_wording_drops_paraphrase_to_four(self):
        assert self.score("Most likely finding: nodule at left upper region.",
                          "nodule at left upper region", strict_wording=True) == 4

    def test_strict_wording_keeps_five_for_identical_text(self):
        assert self.score("nodule at left upper region",
                          "nodule at left upper region", strict_wording=True) == 5

    def test_disease_only_match_scores_three(self):
        assert self.score("nodule at right lower region",
                          "nodule at left upper region") == 3

    def test_multi_finding_text_cannot_cross_match_pairs(self):
        # Disease from one clause plus region from another is not a match.
        assert self.score("edema at left upper region; nodule at right lower region",
                          "nodule at left upper region") == 3

    def test_extra_finding_alongside_exact_match_scores_four(self):
        # The nodule finding agrees, but the extra edema clause is an
        # inconsistent symptom description, so the texts are not level-5.
        assert self.score("edema at right lower region; nodule at left upper region",
                          "nodule at left upper region") == 4

    def test_same_finding_set_in_different_clause_order_scores_five(self):
        assert self.score("nodule at left upper region; edema at right lower region",
                          "edema at right lower region; nodule at left upper region") == 5

    def test_related_diseases_score_two(self):
        related = {"nodule": ("edema",)}
        assert self.score("nodule at left upper region",
                          "edema at left upper region", related=related) == 2

    def test_related_table_is_directional(self):
        related = {"nodule": ("edema",)}
        assert self.score("edema at left upper region",
                          "nodule at left upper region", related=related) == 1

    def test_unrelated_diseases_score_one(self):
        assert self.score("consolidation at left upper region",
                          "nodule at left upper region") == 1

    def test_normal_descriptions_match(self):
        assert self.score("no findings seen", "no findings seen") == 5

    def test_region_free_texts_fall_back_to_disease_match(self):
        assert self.score("clear nodule", "nodule") == 5

    def test_generated_text_containing_separator_still_parses(self):
        tricky = "nodule at left upper region. B. decoy"
        # The decoy contains no labels, so the real pair still decides the score.
        assert self.score(tricky, "decoy") == 1
        assert self.score("nodule at left upper region", tricky) == 1

    def test_deterministic(self):
        stub = make_stub()
        prompt = build_scoring_prompt("nodule at left upper region",
                                      "nodule at left upper region")
        assert stub.complete(prompt) == stub.complete(prompt) == "5"


class TestStubGeneration:
    def test_echoes_top_one_description(self):
        stub = make_stub()
        request = make_request(["edema at right lower region",
                                "nodule at left upper region"])
        out = generate_explanation(stub, request)
        assert out == "Most likely finding: edema at right lower region."
        assert "edema" in out and "right lower region" in out

    def test_generation_then_scoring_closes_the_loop(self):
        stub = make_stub()
        truth = "nodule at left upper region"
        request = make_request([truth])
        generated = generate_explanation(stub, request)
        result = score_consistency(stub, generated, truth)
        assert isinstance(result, ConsistencyScore)
        assert result.score == 5
        assert result.rater == "stub"

    def test_prompt_without_rank_one_rejected(self):
        with pytest.raises(BackendResponseError, match="rank-1"):
            make_stub().complete("free-form text, not a known prompt")


class TestScoreParsing:
    class FixedBackend:
        name = "fixed"

        def __init__(self, reply):
            self.reply = reply

        def complete(self, prompt):
            return self.reply

    def test_first_standalone_digit_wins(self):
        result = score_consistency(self.FixedBackend("I rate this 4 out of 5."),
                                   "a", "b")
        assert result.score == 4
        assert result.raw_response == "I rate this 4 out of 5."

    def test_embedded_digits_do_not_match(self):
        with pytest.raises(ScoreParseError) as exc:
            score_consistency(self.FixedBackend("item 45 applies"), "a", "b")
        assert exc.value.raw == "item 45 applies"
        assert not exc.value.retriable

    def test_out_of_range_digits_rejected(self):
        with pytest.raises(ScoreParseError):
            score_consistency(self.FixedBackend("score: 7"), "a", "b")

    def test_score_object_validates_range(self):
        with pytest.raises(ValueError, match="1..5"):
            ConsistencyScore(score=6, rater="x", raw_response="6")


class TestRemoteBackend:
    class FakeResponse:
        def __init__(self, status_code=200, payload=None, text=""):
            self.status_code = status_code
            self._payload = payload
            self.text = text

        def json(self):
            if self._payload is None:
                raise ValueError("not json")
            return self._payload

    def test_success_returns_completion(self, monkeypatch):
        seen = {}

        def fake_post(url, json=None, headers=None, timeout=None):
            seen.update(url=url, json=json, headers=headers, timeout=timeout)
            return self.FakeResponse(payload={"completion": "5"})

        monkeypatch.setattr(requests, "post", fake_post)
        monkeypatch.setenv("LOCRET_API_TOKEN", "secret")
        backend = RemoteBackend(endpoint="http://example/api", model="rater-1")
        assert backend.complete("hello") == "5"
        assert seen["url"] == "http://example/api"
        assert seen["json"] == {"model": "rater-1", "prompt": "hello"}
        assert seen["headers"]["Authorization"] == "Bearer secret"
        assert backend.name == "rater-1"

    def test_missing_token_sends_no_auth_header(self, monkeypatch):
        seen = {}

        def fake_post(url, json=None, headers=None, timeout=None):
            seen["headers"] = headers
            return self.FakeResponse(payload={"completion": "ok"})

        monkeypatch.setattr(requests, "post", fake_post)
        monkeypatch.delenv("LOCRET_API_TOKEN", raising=False)
        RemoteBackend(endpoint="http://example", model="m").complete("p")
        assert "Authorization" not in seen["headers"]

    def test_timeout_is_retriable_transport_error(self, monkeypatch):
        def fake_post(*args, **kwargs):
            raise requests.Timeout("slow")

        monkeypatch.setattr(requests, "post", fake_post)
        backend = RemoteBackend(endpoint="http://example", model="m")
        with pytest.raises(BackendTransportError) as exc:
            backend.complete("p")
        assert exc.value.retriable
        assert isinstance(exc.value, BackendError)

    def test_bad_status_is_response_error(self, monkeypatch):
        monkeypatch.setattr(requests, "post",
                            lambda *a, **k: self.FakeResponse(status_code=503,
                                                              text="down"))
        backend = RemoteBackend(endpoint="http://example", model="m")
        with pytest.raises(BackendResponseError, match="503") as exc:
            backend.complete("p")
        assert not exc.value.retriable

    def test_malformed_body_is_response_error(self, monkeypatch):
        monkeypatch.setattr(requests, "post",
                            lambda *a, **k: self.FakeResponse(payload={"other": 1}))
        backend = RemoteBackend(endpoint="http://example", model="m")
        with pytest.raises(BackendResponseError, match="malformed"):
            backend.complete("p")


@pytest.fixture(scope="module")
def explain_setup(meta, small_corpus):
    model = VisionLanguageModel(tiny_model_config(meta)).init_weights(11)
    return model, meta, small_corpus


class TestEvaluate:
    def test_region_query_mode_structure(self, explain_setup):
        model, meta, samples = explain_setup
        stub = stub_for_meta(meta)
        result = evaluate_explainability(model, meta.vocab, samples,
                                         "region-query", stub, k=1)
        assert isinstance(result, ExplainabilityResult)
        n_abnormal = sum(1 for s in samples for f in s.findings if not f.is_normal)
        assert result.n_queries == n_abnormal
        assert len(result.records) == n_abnormal
        assert result.mode == "region-query" and result.rater == "stub"
        scores = [r["score"] for r in result.records]
        assert all(1 <= s <= 5 for s in scores)
        assert result.overall_mean == pytest.approx(sum(scores) / len(scores))
        assert set(result.per_region_mean) <= set(REGIONS)

    def test_pseudo_ground_truth_scores_exactly_five(self, explain_setup):
        model, meta, samples = explain_setup
        result = evaluate_explainability(model, meta.vocab, samples,
                                         "region-query", stub_for_meta(meta), k=1)
        assert result.pseudo_gt_mean == 5.0
        assert all(r["pseudo_score"] == 5 for r in result.records)
        assert result.pseudo_gt_mean >= result.overall_mean

    def test_global_image_mode_runs(self, explain_setup):
        model, meta, samples = explain_setup
        result = evaluate_explainability(model, meta.vocab, samples[:10],
                                         "global-image", stub_for_meta(meta), k=2)
        assert result.mode == "global-image"
        assert result.n_queries >= 1

    def test_unknown_mode_rejected(self, explain_setup):
        model, meta, samples = explain_setup
        with pytest.raises(ValueError, match="unknown retrieval mode"):
            evaluate_explainability(model, meta.vocab, samples, "bogus",
                                    stub_for_meta(meta))

    def test_normal_only_test_set_rejected(self, explain_setup):
        model, meta, samples = explain_setup
        normals = [s for s in samples if s.findings[0].is_normal]
        with pytest.raises(ExplainError, match="no abnormal"):
            evaluate_explainability(model, meta.vocab, normals, "region-query",
                                    stub_for_meta(meta))

    def test_stub_for_meta_uses_corpus_lexicon(self, explain_setup):
        _, meta, _ = explain_setup
        stub = stub_for_meta(meta, strict_wording=True)
        assert stub.diseases == tuple(meta.diseases)
        assert stub.region_names == tuple(meta.layout.names)
        assert stub.strict_wording

    def test_repeat_run_identical(self, explain_setup):
        model, meta, samples = explain_setup
        a = evaluate_explainability(model, meta.vocab, samples[:8],
                                    "region-query", stub_for_meta(meta))
        b = evaluate_explainability(model, meta.vocab, samples[:8],
                                    "region-query", stub_for_meta(meta))
        assert a.records == b.records
        assert a.overall_mean == b.overall_mean
