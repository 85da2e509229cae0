"""Location-conditioned triplets from (region, disease) labels, and the
region-conditioned multimodal embeddings used for metric learning/retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch

from .corpus import CorpusSample, Finding, Vocab, finding_description, region_query_tokens
from .encoders import images_to_tensor
from .model import VisionLanguageModel, pad_reports

PairRole = Literal["positive", "negative", "excluded"]

POSITIVE: PairRole = "positive"
NEGATIVE: PairRole = "negative"
EXCLUDED: PairRole = "excluded"


class MiningError(RuntimeError):
    """Raised when a corpus cannot produce any valid triplet."""

    def __init__(self, message: str, counts: dict | None = None):
        super().__init__(message)
        self.counts = counts or {}


@dataclass(frozen=True)
class Triplet:
    """Sample ids for one (anchor, positive, negative) draw plus the anchor's
    conditioning finding."""

    anchor_id: str
    positive_id: str
    negative_id: str
    condition: Finding


def pair_validity(anchor: Finding, other_findings: Sequence[Finding],
                  hard_region_negatives: bool = False) -> PairRole:
    """Classify a candidate sample's findings against an anchor condition.

    Positive requires the exact (region, disease) to appear; negative requires
    the anchor's disease to be absent everywhere; a sample carrying the
    anchor's disease only at other regions is excluded from both roles unless
    ``hard_region_negatives`` opts it in as a negative. Normal anchors pair
    with normal samples as positives and any abnormal sample as a negative.
    """
    other_normal = all(f.is_normal for f in other_findings)
    if anchor.is_normal:
        return POSITIVE if other_normal else NEGATIVE
    if any(f == anchor for f in other_findings):
        return POSITIVE
    if any(f.disease == anchor.disease for f in other_findings):
        return NEGATIVE if hard_region_negatives else EXCLUDED
    return NEGATIVE


def _candidate_table(samples: Sequence[CorpusSample],
                     hard_region_negatives: bool) -> dict[Finding, tuple[list[str], list[str]]]:
    """condition -> (positive candidate ids, negative candidate ids)."""
    conditions = {f for s in samples for f in s.findings}
    table: dict[Finding, tuple[list[str], list[str]]] = {}
    for cond in conditions:
        pos: list[str] = []
        neg: list[str] = []
        for s in samples:
            role = pair_validity(cond, s.findings, hard_region_negatives)
            if role == POSITIVE:
                pos.append(s.id)
            elif role == NEGATIVE:
                neg.append(s.id)
        table[cond] = (pos, neg)
    return table


def sample_triplets(samples: Sequence[CorpusSample], batch_size: int, seed: int,
                    hard_region_negatives: bool = False) -> list[Triplet]:
    """Draw ``batch_size`` valid triplets, uniformly and with replacement.

    Anchors are drawn uniformly over samples; multi-finding anchors condition
    on one uniformly chosen finding. Deterministic given the seed.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not samples:
        raise MiningError("empty corpus")
    table = _candidate_table(samples, hard_region_negatives)
    viable = any(
        any(pid != s.id for pid in table[f][0]) and table[f][1]
        for s in samples for f in s.findings)
    if not viable:
        counts = {finding_description(cond): {"positives": len(pos), "negatives": len(neg)}
                  for cond, (pos, neg) in sorted(table.items(),
                                                 key=lambda kv: finding_description(kv[0]))}
        raise MiningError("corpus yields no valid triplet", counts)
    rng = np.random.default_rng(seed)
    triplets: list[Triplet] = []
    attempts, max_attempts = 0, 1000 + 200 * batch_size
    while len(triplets) < batch_size:
        attempts += 1
        if attempts > max_attempts:
            raise MiningError(
                f"gave up after {max_attempts} draws with "
                f"{len(triplets)}/{batch_size} triplets")
        anchor = samples[int(rng.integers(len(samples)))]
        condition = anchor.findings[int(rng.integers(len(anchor.findings)))]
        pos_pool, neg_pool = table[condition]
        pos_pool = [pid for pid in pos_pool if pid != anchor.id]
        if not pos_pool or not neg_pool:
            continue
        triplets.append(Triplet(
            anchor_id=anchor.id,
            positive_id=pos_pool[int(rng.integers(len(pos_pool)))],
            negative_id=neg_pool[int(rng.integers(len(neg_pool)))],
            condition=condition,
        ))
    return triplets


@dataclass
class RegionQueryEmbedding:
    """Unit-norm multimodal embedding of one (image, region description) pair."""

    sample_id: str
    condition: Finding
    vector: np.ndarray  # (d,), float64, unit norm


def region_query_vectors(model: VisionLanguageModel, images: torch.Tensor,
                         token_ids: torch.Tensor,
                         feature: str | None = None) -> torch.Tensor:
    """Differentiable batch of pooled, L2-normalized region-query embeddings.

    Pools the projected cross-attended token sequence (or the self-attended one
    when ``feature="self"``) by the [CLS]-derived weights over non-[CLS]
    positions.
    """
    feature = feature or model.config.triplet_feature
    if feature not in ("cross", "self"):
        raise ValueError(f"unknown feature '{feature}'")
    pairs = model(images, token_ids)
    seq = pairs.attn.cross_joint if feature == "cross" else pairs.attn.self_joint
    pooled = torch.einsum("nk,nkd->nd", pairs.attn.cls_weights, seq[:, 1:, :])
    norms = torch.linalg.vector_norm(pooled, dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm pooled query embedding")
    return pooled / norms


def embed_condition_queries(model: VisionLanguageModel, vocab: Vocab,
                            samples: Sequence[CorpusSample],
                            conditions: Sequence[Finding],
                            feature: str | None = None) -> torch.Tensor:
    """Tokenize each condition, batch with each sample's image, and embed."""
    if len(samples) != len(conditions):
        raise ValueError("need one condition per sample")
    tokens = [region_query_tokens(vocab, c) for c in conditions]
    token_ids = pad_reports(tokens, max(len(t) for t in tokens))
    return region_query_vectors(model, images_to_tensor([s.image for s in samples]),
                                token_ids, feature)


def embed_region_query(model: VisionLanguageModel, image: np.ndarray,
                       tokens: Sequence[int], *, sample_id: str = "",
                       condition: Finding | None = None,
                       feature: str | None = None) -> RegionQueryEmbedding:
    """Embed a single (image, tokenized region description) pair."""
    token_ids = pad_reports([list(tokens)], len(tokens))
    with torch.no_grad():
        vec = region_query_vectors(model, images_to_tensor([image]), token_ids, feature)
    return RegionQueryEmbedding(sample_id=sample_id,
                                condition=condition if condition is not None
                                else Finding.normal(),
                                vector=vec[0].numpy())
