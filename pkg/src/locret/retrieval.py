"""Embedding index, cosine ranking, and retrieval metrics (Rank@K in both the
precision and hit-rate senses, mean average precision)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from .corpus import CorpusSample, Finding, Vocab, _finding_from_json, _finding_to_json
from .encoders import images_to_tensor
from .mining import embed_condition_queries
from .model import VisionLanguageModel, pad_reports

INDEX_FORMAT_VERSION = 1

IndexMode = Literal["region-query", "global-image", "report"]


class IndexFormatError(RuntimeError):
    """Raised for corrupt or version-incompatible index files."""


@dataclass(frozen=True)
class IndexEntry:
    """One indexed item: its unique id, source sample, and label metadata."""

    entry_id: str
    sample_id: str
    condition: Finding | None
    findings: tuple[Finding, ...]


@dataclass
class EmbeddingIndex:
    """Immutable flat index of unit-norm embeddings with label metadata."""

    modality: str
    dimension: int
    normalized: bool
    entries: list[IndexEntry]
    vectors: np.ndarray  # (n, dimension) float32

    def __post_init__(self):
        if self.vectors.shape != (len(self.entries), self.dimension):
            raise ValueError(
                f"vector block {self.vectors.shape} does not match "
                f"{len(self.entries)} entries of dimension {self.dimension}")
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids in index")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class GalleryItem:
    entry: IndexEntry
    score: float


@dataclass
class Gallery:
    """A ranked gallery for one query; scores non-increasing, ties by id."""

    query_id: str
    condition: Finding | None
    items: list[GalleryItem]
    k: int


def _forward_batches(model: VisionLanguageModel, samples: Sequence[CorpusSample],
                     batch_size: int = 64):
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        pad = max(len(s.report) for s in batch)
        with torch.no_grad():
            yield batch, model(images_to_tensor([s.image for s in batch]),
                               pad_reports([s.report for s in batch], pad))


def _unit_rows_np(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding row")
    return x / norms


def build_index(model: VisionLanguageModel, vocab: Vocab,
                samples: Sequence[CorpusSample], mode: IndexMode,
                batch_size: int = 64) -> EmbeddingIndex:
    """Embed the corpus under one of three modes.

    region-query: one entry per (sample, finding), embedded from the image
    conditioned on that finding's region description. global-image: pooled
    projected patch features, one entry per sample. report: the projected
    [CLS] text embedding, one entry per sample.
    """
    if not samples:
        raise ValueError("cannot index an empty corpus")
    entries: list[IndexEntry] = []
    blocks: list[np.ndarray] = []
    if mode == "region-query":
        flat = [(s, f) for s in samples for f in s.findings]
        for start in range(0, len(flat), batch_size):
            chunk = flat[start:start + batch_size]
            with torch.no_grad():
                vecs = embed_condition_queries(model, vocab, [s for s, _ in chunk],
                                               [f for _, f in chunk])
            blocks.append(vecs.numpy())
        for i, (s, f) in enumerate(flat):
            entries.append(IndexEntry(entry_id=f"{s.id}#{i}", sample_id=s.id,
                                      condition=f, findings=tuple(s.findings)))
    elif mode in ("global-image", "report"):
        for batch, pairs in _forward_batches(model, samples, batch_size):
            raw = pairs.global_image if mode == "global-image" else pairs.global_text
            blocks.append(_unit_rows_np(raw.numpy()))
        entries = [IndexEntry(entry_id=s.id, sample_id=s.id, condition=None,
                              findings=tuple(s.findings)) for s in samples]
    else:
        raise ValueError(f"unknown index mode '{mode}'")
    vectors = np.concatenate(blocks).astype(np.float32)
    return EmbeddingIndex(modality=mode, dimension=vectors.shape[1],
                          normalized=True, entries=entries, vectors=vectors)


def rank_all(index: EmbeddingIndex, query_vector: np.ndarray,
             exclude_sample: str | None = None) -> list[GalleryItem]:
    """Full cosine ranking: descending score, ties broken by ascending id."""
    if len(index) == 0:
        raise ValueError("empty index")
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dimension:
        raise ValueError(f"query dim {q.shape[0]} != index dim {index.dimension}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("zero-norm query vector")
    rows = _unit_rows_np(index.vectors.astype(np.float64))
    scores = rows @ (q / qn)
    items = [GalleryItem(entry=e, score=float(s))
             for e, s in zip(index.entries, scores)
             if exclude_sample is None or e.sample_id != exclude_sample]
    items.sort(key=lambda it: (-it.score, it.entry.entry_id))
    return items


def query(index: EmbeddingIndex, query_vector: np.ndarray, k: int,
          query_id: str = "", condition: Finding | None = None) -> Gallery:
    """Exact top-k gallery; k past the index size returns the full ranking."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    items = rank_all(index, query_vector)
    return Gallery(query_id=query_id, condition=condition, items=items[:k], k=k)


RelevancePredicate = Callable[[Gallery, IndexEntry], bool]


def region_relevance(gallery: Gallery, entry: IndexEntry) -> bool:
    """Retrieved sample shows the query's disease at the query's region."""
    return gallery.condition in entry.findings


def global_relevance(gallery: Gallery, entry: IndexEntry) -> bool:
    """Retrieved sample shows the query's disease at any region."""
    return gallery.condition.disease in {f.disease for f in entry.findings}


def rank_at_k(galleries: Sequence[Gallery], relevant: RelevancePredicate, k: int,
              variant: str = "precision") -> float:
    """Percentage score at cutoff k.

    precision: mean fraction of the top-k that is relevant (short galleries
    count missing slots as non-relevant). hitrate: fraction of queries with at
    least one relevant item in the top-k.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if variant not in ("precision", "hitrate"):
        raise ValueError(f"unknown variant '{variant}'")
    per_query = []
    for g in galleries:
        hits = sum(1 for item in g.items[:k] if relevant(g, item.entry))
        per_query.append((hits / k) if variant == "precision" else float(hits > 0))
    return float(100.0 * np.mean(per_query))


@dataclass
class ApReport:
    value: float
    n_queries: int
    n_excluded: int


def mean_ap(galleries: Sequence[Gallery], relevant: RelevancePredicate) -> ApReport:
    """Mean over queries of average precision across relevant ranks.

    Queries whose gallery contains no relevant item are excluded with a
    warning and counted in the report.
    """
    aps = []
    excluded = 0
    for g in galleries:
        flags = [relevant(g, item.entry) for item in g.items]
        ranks = [i + 1 for i, f in enumerate(flags) if f]
        if not ranks:
            excluded += 1
            continue
        hits = np.cumsum(flags)
        aps.append(float(np.mean([hits[r - 1] / r for r in ranks])))
    if excluded:
        warnings.warn(f"mean_ap: excluded {excluded} of {len(galleries)} queries "
                      "with no relevant gallery item")
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    return ApReport(value=float(100.0 * np.mean(aps)), n_queries=len(aps),
                    n_excluded=excluded)


@dataclass
class RetrievalMetrics:
    """Rank@K in both reported senses plus mAP for one evaluation run."""

    level: str
    precision_at: dict[int, float]
    hitrate_at: dict[int, float]
    map: float
    n_queries: int
    n_excluded: int

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "rank_at_k_precision": {str(k): v for k, v in self.precision_at.items()},
            "rank_at_k_hitrate": {str(k): v for k, v in self.hitrate_at.items()},
            "map": self.map,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
        }


def lcmmr_galleries(model: VisionLanguageModel, vocab: Vocab,
                    samples: Sequence[CorpusSample]) -> list[Gallery]:
    """One fully-ranked gallery per (sample, abnormal finding) query.

    Queries are restricted to regions where a disease exists; the gallery is
    the region-query index of every other sample.
    """
    index = build_index(model, vocab, samples, "region-query")
    galleries = []
    for pos, entry in enumerate(index.entries):
        if entry.condition is None or entry.condition.is_normal:
            continue
        items = rank_all(index, index.vectors[pos], exclude_sample=entry.sample_id)
        galleries.append(Gallery(query_id=entry.entry_id, condition=entry.condition,
                                 items=items, k=len(items)))
    return galleries


def score_galleries(galleries: Sequence[Gallery], level: str,
                    k_values: Sequence[int] = (1, 5, 10)) -> RetrievalMetrics:
    if level == "region":
        predicate: RelevancePredicate = region_relevance
    elif level == "global":
        predicate = global_relevance
    else:
        raise ValueError(f"unknown level '{level}'")
    ap = mean_ap(galleries, predicate)
    return RetrievalMetrics(
        level=level,
        precision_at={k: rank_at_k(galleries, predicate, k, "precision")
                      for k in k_values},
        hitrate_at={k: rank_at_k(galleries, predicate, k, "hitrate")
                    for k in k_values},
        map=ap.value, n_queries=len(galleries), n_excluded=ap.n_excluded,
    )


def evaluate_lcmmr(model: VisionLanguageModel, vocab: Vocab,
                   samples: Sequence[CorpusSample], level: str,
                   k_values: Sequence[int] = (1, 5, 10)) -> RetrievalMetrics:
    """Location-conditioned retrieval metrics at region or global relevance."""
    if not any(not f.is_normal for s in samples for f in s.findings):
        raise ValueError("test corpus has no abnormal findings to query")
    return score_galleries(lcmmr_galleries(model, vocab, samples), level, k_values)


def _pooled_text_vectors(model: VisionLanguageModel,
                         samples: Sequence[CorpusSample]) -> np.ndarray:
    """Per-report multimodal text embedding: [CLS]-weighted pooled projected
    cross-attended tokens, conditioned on the report's own paired image."""
    blocks = []
    for _batch, pairs in _forward_batches(model, samples):
        pooled = torch.einsum("nk,nkd->nd", pairs.attn.cls_weights,
                              pairs.attn.cross_joint[:, 1:, :])
        blocks.append(_unit_rows_np(pooled.numpy()))
    return np.concatenate(blocks)


def _global_image_vectors(model: VisionLanguageModel,
                          samples: Sequence[CorpusSample]) -> np.ndarray:
    blocks = [_unit_rows_np(pairs.global_image.numpy())
              for _batch, pairs in _forward_batches(model, samples)]
    return np.concatenate(blocks)


def paired_relevance(gallery: Gallery, entry: IndexEntry) -> bool:
    return entry.sample_id == gallery.query_id


@dataclass
class CrossModalMetrics:
    direction: str
    hitrate_at: dict[int, float]
    precision_at: dict[int, float]
    map: float
    n_queries: int

    def to_json(self) -> dict:
        return {
            "direction": self.direction,
            "rank_at_k_hitrate": {str(k): v for k, v in self.hitrate_at.items()},
            "rank_at_k_precision": {str(k): v for k, v in self.precision_at.items()},
            "map": self.map,
            "n_queries": self.n_queries,
        }


def evaluate_cross_modal(model: VisionLanguageModel, samples: Sequence[CorpusSample],
                         direction: str,
                         k_values: Sequence[int] = (1, 5, 10)) -> CrossModalMetrics:
    """Paired image/report retrieval.

    Hit-rate treats the true paired item as the sole relevant target; the
    precision variant relaxes relevance to any shared disease label.
    """
    if direction not in ("image2report", "report2image"):
        raise ValueError(f"unknown direction '{direction}'")
    image_vecs = _global_image_vectors(model, samples)
    text_vecs = _pooled_text_vectors(model, samples)
    queries, targets = ((image_vecs, text_vecs) if direction == "image2report"
                        else (text_vecs, image_vecs))
    index = EmbeddingIndex(
        modality="report" if direction == "image2report" else "global-image",
        dimension=targets.shape[1], normalized=True,
        entries=[IndexEntry(entry_id=s.id, sample_id=s.id, condition=None,
                            findings=tuple(s.findings)) for s in samples],
        vectors=targets.astype(np.float32))
    by_id = {s.id: s for s in samples}
    galleries = []
    for s, qvec in zip(samples, queries):
        items = rank_all(index, qvec)
        galleries.append(Gallery(query_id=s.id, condition=None, items=items,
                                 k=len(items)))

    def overlap(gallery: Gallery, entry: IndexEntry) -> bool:
        lhs = {f.disease for f in by_id[gallery.query_id].findings}
        return bool(lhs & {f.disease for f in entry.findings})

    ap = mean_ap(galleries, paired_relevance)
    return CrossModalMetrics(
        direction=direction,
        hitrate_at={k: rank_at_k(galleries, paired_relevance, k, "hitrate")
                    for k in k_values},
        precision_at={k: rank_at_k(galleries, overlap, k, "precision")
                      for k in k_values},
        map=ap.value, n_queries=len(galleries),
    )


def save_index(index: EmbeddingIndex, path) -> None:
    """Header JSON line + packed little-endian float32 rows; metadata sidecar."""
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "dimension": index.dimension,
        "count": len(index),
        "normalized": index.normalized,
        "modality": index.modality,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    with open(f"{path}.meta.jsonl", "w", encoding="utf-8") as fh:
        for e in index.entries:
            fh.write(json.dumps({
                "entry_id": e.entry_id,
                "sample_id": e.sample_id,
                "condition": None if e.condition is None else _finding_to_json(e.condition),
                "findings": [_finding_to_json(f) for f in e.findings],
            }, sort_keys=True) + "\n")


def load_index(path) -> EmbeddingIndex:
    try:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("ascii"))
            raw = fh.read()
    except (OSError, ValueError) as exc:
        raise IndexFormatError(f"unreadable index '{path}': {exc}") from exc
    if header.get("format_version") != INDEX_FORMAT_VERSION:
        raise IndexFormatError(
            f"index version {header.get('format_version')} != supported {INDEX_FORMAT_VERSION}")
    count, dim = header["count"], header["dimension"]
    expected = count * dim * 4
    if len(raw) != expected:
        raise IndexFormatError(
            f"index '{path}' truncated: {len(raw)} bytes, expected {expected}")
    vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    entries = []
    with open(f"{path}.meta.jsonl", "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            obj = json.loads(line)
            entries.append(IndexEntry(
                entry_id=obj["entry_id"], sample_id=obj["sample_id"],
                condition=None if obj["condition"] is None
                else _finding_from_json(obj["condition"], line_no),
                findings=tuple(_finding_from_json(f, line_no) for f in obj["findings"])))
    if len(entries) != count:
        raise IndexFormatError(
            f"index sidecar has {len(entries)} entries, header says {count}")
    return EmbeddingIndex(modality=header["modality"], dimension=dim,
                          normalized=header["normalized"], entries=entries,
                          vectors=vectors)
