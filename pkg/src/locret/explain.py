"""Retrieval-grounded explanation generation and 1-5 consistency scoring.

The text-generation backend is pluggable: a deterministic offline stub (a pure
function of the prompt and its label lexicon) or a remote completion service.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .corpus import (NORMAL, CorpusSample, Finding, Vocab, finding_description,
                     region_query_words, region_words)
from .model import VisionLanguageModel
from .retrieval import build_index, rank_all

SCORING_PROMPT_TEMPLATE = (
    "Can you rate the consistency of the following two descriptions of a patient "
    "X-ray report in a scale of 1-5? Score 1 represents completely inconsistent "
    "disease diagnose and symptom descriptions. Score 2 represents inconsistent "
    "disease diagnose with little consistent symptom descriptions. Score 3 "
    "represents roughly consistent disease diagnose with certain degree of "
    "inconsistent symptom descriptions. Score 4 represents consistent disease "
    "diagnose with some inconsistent symptom descriptions. Score 5 represents "
    "completely consistent disease diagnose and symptom descriptions. Following "
    "are the two descriptions: A. {generated}. B. {ground_truth}"
)

_SCORING_PREFIX = "Can you rate the consistency"
_AB_MARKER = "Following are the two descriptions: A. "
_B_MARKER = ". B. "


class ExplainError(RuntimeError):
    """Raised for invalid explanation-pipeline inputs (e.g. empty test set)."""


class BackendError(RuntimeError):
    """Base for text-generation backend failures."""

    retriable = False


class BackendTransportError(BackendError):
    """Network-level failure (timeout, connection); safe to retry."""

    retriable = True


class BackendResponseError(BackendError):
    """The backend answered, but unusably (bad status, empty completion)."""


class ScoreParseError(BackendError):
    """No standalone 1-5 digit found in a scoring completion."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


@dataclass
class RetrievedReport:
    """One retrieved case description to ground an explanation on."""

    rank: int
    description: str
    sample_id: str = ""


@dataclass
class ExplanationRequest:
    """Top-k retrieved descriptions for one (query, condition) pair."""

    query_id: str
    condition: Finding
    reports: list[RetrievedReport]

    def __post_init__(self):
        if not self.reports:
            raise ExplainError("explanation request needs at least one report")
        if [r.rank for r in self.reports] != list(range(1, len(self.reports) + 1)):
            raise ExplainError("report ranks must increase strictly from 1")


@dataclass
class ConsistencyScore:
    score: int
    rater: str
    raw_response: str

    def __post_init__(self):
        if self.score not in (1, 2, 3, 4, 5):
            raise ValueError(f"score must be in 1..5, got {self.score}")


class TextGenBackend(Protocol):
    name: str

    def complete(self, prompt: str) -> str: ...


def build_explanation_prompt(request: ExplanationRequest) -> str:
    """Deterministic generation prompt naming the query region and the
    retrieved regional descriptions."""
    region = " ".join(region_query_words(request.condition))
    lines = [
        "You are reviewing retrieved patient cases to explain an X-ray finding.",
        f"Query region: {region}",
        "Retrieved case descriptions:",
    ]
    lines.extend(f"{r.rank}. {r.description}" for r in request.reports)
    lines.append("Using only the retrieved descriptions, write one sentence "
                 "stating the most likely disease and its anatomical region "
                 "for the query.")
    return "\n".join(lines)


def build_scoring_prompt(generated: str, ground_truth: str) -> str:
    """The fixed 1-5 consistency rating prompt with both descriptions filled in."""
    if not generated.strip() or not ground_truth.strip():
        raise ExplainError("scoring prompt needs two non-empty descriptions")
    return SCORING_PROMPT_TEMPLATE.format(generated=generated,
                                          ground_truth=ground_truth)


@dataclass
class StubBackend:
    """Offline rater/generator: a pure function of the prompt.

    Generation echoes the top-1 retrieved description. Scoring extracts
    (disease, region) label pairs from both descriptions with the configured
    lexicon — a disease only pairs with a region named in the same clause, so
    multi-finding descriptions cannot borrow one finding's disease and
    another's region — and applies a fixed truth table mirroring the rating
    prompt's level definitions: 5 when the two pair sets agree exactly
    ("completely consistent"; 4 instead when ``strict_wording`` is set and
    the texts differ), 4 when a pair matches but one side adds or omits
    findings ("some inconsistent symptom descriptions"), 3 disease-only
    match at the wrong region, 2 related diseases per ``related`` table,
    1 otherwise.
    """

    diseases: tuple[str, ...]
    region_names: tuple[str, ...]
    strict_wording: bool = False
    related: dict[str, tuple[str, ...]] = field(default_factory=dict)
    name: str = "stub"

    def complete(self, prompt: str) -> str:
        if prompt.startswith(_SCORING_PREFIX):
            return str(self._score(prompt))
        match = re.search(r"^1\. (.*)$", prompt, flags=re.MULTILINE)
        if match is None:
            raise BackendResponseError("stub got a prompt without a rank-1 description")
        return f"Most likely finding: {match.group(1)}."

    def _labels(self, text: str) -> tuple[set[str], set[str]]:
        t = text.lower()
        diseases = {d for d in self.diseases
                    if re.search(rf"\b{re.escape(d.lower())}\b", t)}
        if "no findings" in t:
            diseases.add(NORMAL)
        regions = {r for r in self.region_names
                   if f"{' '.join(region_words(r))} region" in t}
        return diseases, regions

    def _pairs(self, text: str) -> set[tuple[str, str | None]]:
        """Clause-scoped (disease, region) pairs; region-free clauses pair
        their diseases with ``None``."""
        pairs: set[tuple[str, str | None]] = set()
        for clause in re.split(r"[;.\n]", text):
            diseases, regions = self._labels(clause)
            pairs.update((d, r) for d in diseases for r in (regions or {None}))
        return pairs

    def _score(self, prompt: str) -> int:
        _, _, tail = prompt.partition(_AB_MARKER)
        a_text, sep, b_text = tail.rpartition(_B_MARKER)
        if not sep:
            raise BackendResponseError("malformed scoring prompt")
        da, _ = self._labels(a_text)
        db, _ = self._labels(b_text)
        pa, pb = self._pairs(a_text), self._pairs(b_text)
        if pa and pa == pb:
            if self.strict_wording and _normalize(a_text) != _normalize(b_text):
                return 4
            return 5
        if pa & pb:
            return 4
        if da & db:
            return 3
        if any(b in self.related.get(a, ()) for a in da for b in db):
            return 2
        return 1


def _normalize(text: str) -> str:
    return re.sub(r"[^a-z0-9 ]", "", text.lower()).strip()


def stub_for_meta(meta, **kwargs) -> StubBackend:
    return StubBackend(diseases=tuple(meta.diseases),
                       region_names=tuple(meta.layout.names), **kwargs)


@dataclass
class RemoteBackend:
    """Minimal HTTP completion client; the auth token comes from the environment."""

    endpoint: str
    model: str
    token_env: str = "LOCRET_API_TOKEN"
    timeout: float = 30.0

    @property
    def name(self) -> str:
        return self.model

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(self.endpoint,
                                 json={"model": self.model, "prompt": prompt},
                                 headers=headers, timeout=self.timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise BackendTransportError(f"backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendResponseError(
                f"backend status {resp.status_code}: {resp.text[:200]}")
        try:
            completion = resp.json()["completion"]
        except (ValueError, KeyError) as exc:
            raise BackendResponseError(f"malformed backend response: {exc}") from exc
        return completion


def generate_explanation(backend: TextGenBackend, request: ExplanationRequest) -> str:
    completion = backend.complete(build_explanation_prompt(request))
    if not completion.strip():
        raise BackendResponseError("empty completion")
    return completion


def score_consistency(backend: TextGenBackend, generated: str,
                      ground_truth: str) -> ConsistencyScore:
    """Rate generated-vs-truth consistency; parses the first standalone 1-5."""
    raw = backend.complete(build_scoring_prompt(generated, ground_truth))
    match = re.search(r"\b([1-5])\b", raw)
    if match is None:
        raise ScoreParseError("no 1-5 score found in completion", raw)
    return ConsistencyScore(score=int(match.group(1)), rater=backend.name,
                            raw_response=raw)


@dataclass
class ExplainabilityResult:
    """Consistency-score means for one retrieval mode plus the known-correct
    top-1 upper bound."""

    mode: str
    rater: str
    overall_mean: float
    per_region_mean: dict[str, float]
    pseudo_gt_mean: float
    records: list[dict]
    n_queries: int


def _retrieved_reports(model: VisionLanguageModel, vocab: Vocab,
                       samples: Sequence[CorpusSample], mode: str,
                       k: int) -> list[tuple[CorpusSample, Finding, list[RetrievedReport]]]:
    """Top-k retrieved descriptions per (sample, abnormal finding) query."""
    out = []
    if mode == "region-query":
        index = build_index(model, vocab, samples, "region-query")
        by_id = {s.id: s for s in samples}
        for pos, entry in enumerate(index.entries):
            if entry.condition is None or entry.condition.is_normal:
                continue
            items = rank_all(index, index.vectors[pos], exclude_sample=entry.sample_id)
            reports = [RetrievedReport(rank=r + 1,
                                       description=finding_description(it.entry.condition),
                                       sample_id=it.entry.sample_id)
                       for r, it in enumerate(items[:k])]
            out.append((by_id[entry.sample_id], entry.condition, reports))
    elif mode == "global-image":
        index = build_index(model, vocab, samples, "global-image")
        row = {e.sample_id: i for i, e in enumerate(index.entries)}
        for s in samples:
            for f in s.findings:
                if f.is_normal:
                    continue
                items = rank_all(index, index.vectors[row[s.id]], exclude_sample=s.id)
                reports = [RetrievedReport(
                    rank=r + 1,
                    description="; ".join(finding_description(g)
                                          for g in it.entry.findings),
                    sample_id=it.entry.sample_id) for r, it in enumerate(items[:k])]
                out.append((s, f, reports))
    else:
        raise ValueError(f"unknown retrieval mode '{mode}'")
    return out


def evaluate_explainability(model: VisionLanguageModel, vocab: Vocab,
                            samples: Sequence[CorpusSample], mode: str,
                            backend: TextGenBackend, k: int = 1) -> ExplainabilityResult:
    """Generate and score an explanation per (sample, abnormal finding).

    Each query is scored twice: once on the retrieved top-k and once with the
    retrieved top-1 replaced by the query's own ground-truth description (the
    upper bound reported as ``pseudo_gt_mean``).
    """
    queries = _retrieved_reports(model, vocab, samples, mode, k)
    if not queries:
        raise ExplainError("no abnormal findings to explain in the test set")
    records: list[dict] = []
    by_region: dict[str, list[int]] = {}
    pseudo_scores: list[int] = []
    for sample, condition, reports in queries:
        truth = finding_description(condition)
        request = ExplanationRequest(query_id=sample.id, condition=condition,
                                     reports=reports)
        score = score_consistency(backend, generate_explanation(backend, request),
                                  truth)
        pseudo_request = ExplanationRequest(
            query_id=sample.id, condition=condition,
            reports=[RetrievedReport(rank=1, description=truth, sample_id=sample.id)])
        pseudo = score_consistency(
            backend, generate_explanation(backend, pseudo_request), truth)
        pseudo_scores.append(pseudo.score)
        by_region.setdefault(condition.region, []).append(score.score)
        records.append({"query_id": sample.id, "region": condition.region,
                        "disease": condition.disease, "mode": mode,
                        "score": score.score, "pseudo_score": pseudo.score,
                        "backend": backend.name})
    all_scores = [r["score"] for r in records]
    return ExplainabilityResult(
        mode=mode, rater=backend.name,
        overall_mean=float(np.mean(all_scores)),
        per_region_mean={r: float(np.mean(v)) for r, v in sorted(by_region.items())},
        pseudo_gt_mean=float(np.mean(pseudo_scores)),
        records=records, n_queries=len(records),
    )
