"""Synthetic planted-lesion corpus: paired images, token reports, and region/disease labels.

Images are grayscale float32 grids in [0, 1] with deterministic disease motifs
rendered inside named rectangular regions. Reports are token-id sequences over a
small closed vocabulary following a fixed template grammar, so every report
decodes back to its exact (region, disease) findings.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CORPUS_FORMAT_VERSION = 1
IMAGE_ENCODING = "b64_float32_le"

NORMAL = "normal"

CLS_TOKEN = "[CLS]"
PAD_TOKEN = "[PAD]"
CLS_ID = 0
PAD_ID = 1

# Structural words the template grammar relies on; these may not be used as
# disease or region names.
STRUCTURAL_WORDS = ("the", "seen", "at", "and", "region", "no", "findings")

# Filler vocabulary so [CLS] attention weighting has uninformative tokens to
# suppress. Padded onto every vocabulary regardless of layout/diseases.
FILLER_WORDS = (
    "a", "is", "of", "in", "on", "with", "noted", "present", "mild",
    "small", "large", "stable", "lung", "chest", "field", "zone", "area",
    "patient", "appearance", "unchanged",
)

DEFAULT_DISEASES = ("nodule", "consolidation", "edema")


class CorpusFormatError(ValueError):
    """Raised when a serialized corpus file fails to parse or validate."""

    def __init__(self, message: str, line: int | None = None, field_name: str | None = None):
        detail = message
        if line is not None:
            detail = f"line {line}: {detail}"
        if field_name is not None:
            detail = f"{detail} (field '{field_name}')"
        super().__init__(detail)
        self.line = line
        self.field_name = field_name


class GrammarError(ValueError):
    """Raised when a token sequence does not parse under the report grammar."""


Rect = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open pixel bounds


def rect_area(rect: Rect) -> int:
    x0, y0, x1, y1 = rect
    return max(0, x1 - x0) * max(0, y1 - y0)


def rect_contains(outer: Rect, inner: Rect) -> bool:
    return (
        outer[0] <= inner[0]
        and outer[1] <= inner[1]
        and inner[2] <= outer[2]
        and inner[3] <= outer[3]
    )


def rects_disjoint(a: Rect, b: Rect) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


@dataclass(frozen=True)
class RegionLayout:
    """Named, disjoint rectangular regions tiling part of an image canvas."""

    regions: tuple[tuple[str, Rect], ...]
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        w, h = self.image_size
        if w < 1 or h < 1:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        names = [name for name, _ in self.regions]
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        for name, rect in self.regions:
            x0, y0, x1, y1 = rect
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(f"region '{name}' rect {rect} outside image bounds {self.image_size}")
        rects = [rect for _, rect in self.regions]
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                if not rects_disjoint(rects[i], rects[j]):
                    raise ValueError(
                        f"regions '{names[i]}' and '{names[j]}' overlap: {rects[i]} vs {rects[j]}"
                    )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.regions)

    def rect(self, name: str) -> Rect:
        for rname, rect in self.regions:
            if rname == name:
                return rect
        raise KeyError(f"unknown region '{name}'")


def default_layout(image_size: int = 64) -> RegionLayout:
    """2x2 quadrant layout; the smallest grid where same-disease-different-region exists."""
    half = image_size // 2
    return RegionLayout(
        regions=(
            ("left-upper", (0, 0, half, half)),
            ("right-upper", (half, 0, image_size, half)),
            ("left-lower", (0, half, half, image_size)),
            ("right-lower", (half, half, image_size, image_size)),
        ),
        image_size=(image_size, image_size),
    )


@dataclass(frozen=True)
class Finding:
    """An (anatomical region, disease) label pair, or the distinguished normal case."""

    region: str | None
    disease: str

    def __post_init__(self):
        if self.disease == NORMAL and self.region is not None:
            raise ValueError("normal finding carries no region")
        if self.disease != NORMAL and not self.region:
            raise ValueError(f"finding '{self.disease}' requires a region")

    @classmethod
    def normal(cls) -> "Finding":
        return cls(region=None, disease=NORMAL)

    @property
    def is_normal(self) -> bool:
        return self.disease == NORMAL


@dataclass(eq=False)
class CorpusSample:
    """One paired (image, report) record with its findings and lesion boxes."""

    id: str
    image: np.ndarray  # float32, (height, width), values in [0, 1]
    report: list[int]
    findings: list[Finding]
    boxes: list[tuple[Finding, Rect]] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.image.dtype == other.image.dtype
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.report == other.report
            and self.findings == other.findings
            and self.boxes == other.boxes
        )


class Vocab:
    """Closed token vocabulary with fixed ids; [CLS]=0 and [PAD]=1 reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [CLS_TOKEN, PAD_TOKEN]:
            raise ValueError("vocabulary must start with [CLS], [PAD]")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise ValueError(f"token '{token}' not in vocabulary") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise ValueError(f"token id {token_id} out of range (vocab size {len(self._tokens)})")
        return self._tokens[token_id]

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token(i) for i in ids]


def region_words(region_name: str) -> list[str]:
    return region_name.split("-")


def build_vocab(layout: RegionLayout, diseases: Sequence[str]) -> Vocab:
    """Deterministic vocabulary: specials, structural words, region words, diseases, fillers."""
    for d in diseases:
        if " " in d or "-" in d:
            raise ValueError(f"disease names must be single words, got '{d}'")
        if d in STRUCTURAL_WORDS or d == NORMAL:
            raise ValueError(f"disease name '{d}' collides with a reserved word")
    seen: dict[str, None] = {}
    for w in STRUCTURAL_WORDS:
        seen.setdefault(w, None)
    for name in layout.names:
        for w in region_words(name):
            if w in diseases:
                raise ValueError(f"region word '{w}' collides with a disease name")
            seen.setdefault(w, None)
    for d in diseases:
        if d in seen:
            raise ValueError(f"disease name '{d}' collides with a region word")
        seen.setdefault(d, None)
    for w in FILLER_WORDS:
        seen.setdefault(w, None)
    return Vocab([CLS_TOKEN, PAD_TOKEN, *seen.keys()])


# --- report grammar ---------------------------------------------------------

NORMAL_WORDS = ("no", "findings", "seen")
JOINER = "and"


def finding_phrase_words(finding: Finding) -> list[str]:
    if finding.is_normal:
        return list(NORMAL_WORDS)
    return ["the", finding.disease, "seen", "at", *region_words(finding.region), "region"]


def report_words(findings: Sequence[Finding]) -> list[str]:
    if len(findings) == 1 and findings[0].is_normal:
        return list(NORMAL_WORDS)
    words: list[str] = []
    for i, f in enumerate(findings):
        if f.is_normal:
            raise ValueError("normal finding cannot be mixed with lesion findings")
        if i > 0:
            words.append(JOINER)
        words.extend(finding_phrase_words(f))
    return words


def report_tokens(vocab: Vocab, findings: Sequence[Finding]) -> list[int]:
    return [CLS_ID, *vocab.encode(report_words(findings))]


def finding_phrase_tokens(vocab: Vocab, finding: Finding) -> list[int]:
    """[CLS]-prefixed phrase for one finding, as used in grounding queries."""
    return [CLS_ID, *vocab.encode(finding_phrase_words(finding))]


def region_query_words(condition: Finding) -> list[str]:
    """Region description words used for location-conditioned queries."""
    if condition.is_normal:
        return list(NORMAL_WORDS)
    return [*region_words(condition.region), "region"]


def region_query_tokens(vocab: Vocab, condition: Finding) -> list[int]:
    return [CLS_ID, *vocab.encode(region_query_words(condition))]


def finding_description(finding: Finding) -> str:
    """Plain-text regional description, e.g. 'nodule at left upper region'."""
    if finding.is_normal:
        return " ".join(NORMAL_WORDS)
    return " ".join([finding.disease, "at", *region_words(finding.region), "region"])


def decode_report(vocab: Vocab, token_ids: Sequence[int]) -> list[Finding]:
    """Parse a report token sequence back into its findings. Inverse of report_tokens."""
    if not token_ids or token_ids[0] != CLS_ID:
        raise GrammarError("report must start with [CLS]")
    words = [vocab.token(i) for i in token_ids[1:] if i != PAD_ID]
    if words == list(NORMAL_WORDS):
        return [Finding.normal()]
    findings: list[Finding] = []
    pos = 0
    while pos < len(words):
        if findings:
            if words[pos] != JOINER:
                raise GrammarError(f"expected '{JOINER}' at word {pos}, got '{words[pos]}'")
            pos += 1
        if pos + 4 >= len(words) or words[pos] != "the":
            raise GrammarError(f"malformed finding phrase at word {pos}")
        disease = words[pos + 1]
        if words[pos + 2] != "seen" or words[pos + 3] != "at":
            raise GrammarError(f"malformed finding phrase at word {pos}")
        pos += 4
        rwords: list[str] = []
        while pos < len(words) and words[pos] != "region":
            rwords.append(words[pos])
            pos += 1
        if pos >= len(words) or not rwords:
            raise GrammarError("finding phrase missing region terminator")
        pos += 1  # consume 'region'
        findings.append(Finding(region="-".join(rwords), disease=disease))
    if not findings:
        raise GrammarError("empty report body")
    return findings


def max_report_length(layout: RegionLayout, max_findings: int = 3) -> int:
    rw = max(len(region_words(n)) for n in layout.names)
    phrase = 5 + rw  # the <disease> seen at <region words> region
    return 1 + max_findings * phrase + (max_findings - 1)


_LATERAL_SWAP = {"left": "right", "right": "left"}


def mirror_region_name(region_name: str) -> str:
    return "-".join(_LATERAL_SWAP.get(w, w) for w in region_words(region_name))


def mirror_finding(finding: Finding) -> Finding:
    if finding.is_normal:
        return finding
    return Finding(region=mirror_region_name(finding.region), disease=finding.disease)


def mirror_sample(sample: CorpusSample, vocab: Vocab) -> CorpusSample:
    """Left-right mirror of a sample with its lateralization swapped everywhere.

    The image flips horizontally; every left/right word in the report and in
    region names swaps; box x-extents reflect. Semantics-preserving only for
    layouts whose regions mirror onto each other, like the default quadrants.
    Applying it twice returns an equal sample.
    """
    swap: dict[int, int] = {}
    if "left" in vocab and "right" in vocab:
        left, right = vocab.id("left"), vocab.id("right")
        swap = {left: right, right: left}
    width = sample.image.shape[1]

    def reflect(rect: Rect) -> Rect:
        x0, y0, x1, y1 = rect
        return (width - x1, y0, width - x0, y1)

    return CorpusSample(
        id=sample.id,
        image=np.ascontiguousarray(np.flip(sample.image, axis=1)),
        report=[swap.get(t, t) for t in sample.report],
        findings=[mirror_finding(f) for f in sample.findings],
        boxes=[(mirror_finding(f), reflect(rect)) for f, rect in sample.boxes],
    )


# --- motif rendering --------------------------------------------------------

BACKGROUND_LEVEL = 0.15
BACKGROUND_SIGMA = 0.05
MIN_LESION = 10
MAX_LESION = 24


def _paint_disc(patch: np.ndarray, rng: np.random.Generator) -> None:
    h, w = patch.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = min(h, w) / 2.0 - 0.5
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    patch[mask] = 0.9


def _paint_crosshatch(patch: np.ndarray, rng: np.random.Generator) -> None:
    patch[::3, :] = 0.85
    patch[:, ::3] = 0.85


def _paint_gradient(patch: np.ndarray, rng: np.random.Generator) -> None:
    h, w = patch.shape
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (yy + xx) / max(1, (h - 1) + (w - 1))
    patch[:, :] = 0.35 + 0.6 * ramp


_MOTIF_PAINTERS = (_paint_disc, _paint_crosshatch, _paint_gradient)


def render_motif(image: np.ndarray, disease_index: int, region_rect: Rect,
                 rng: np.random.Generator) -> Rect:
    """Paint a disease motif inside the region and return the painted lesion box."""
    x0, y0, x1, y1 = region_rect
    rw, rh = x1 - x0, y1 - y0
    max_w = min(MAX_LESION, rw - 2)
    max_h = min(MAX_LESION, rh - 2)
    min_w = min(MIN_LESION, max_w)
    min_h = min(MIN_LESION, max_h)
    w = int(rng.integers(min_w, max_w + 1))
    h = int(rng.integers(min_h, max_h + 1))
    bx0 = x0 + int(rng.integers(1, rw - w))
    by0 = y0 + int(rng.integers(1, rh - h))
    box = (bx0, by0, bx0 + w, by0 + h)
    painter = _MOTIF_PAINTERS[disease_index % len(_MOTIF_PAINTERS)]
    painter(image[by0:by0 + h, bx0:bx0 + w], rng)
    return box


# --- generation -------------------------------------------------------------

@dataclass(frozen=True)
class CorpusMeta:
    """Header metadata shared by every sample of a corpus file."""

    layout: RegionLayout
    diseases: tuple[str, ...]
    vocab: Vocab
    max_report_len: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorpusMeta):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.diseases == other.diseases
            and self.vocab.tokens == other.vocab.tokens
            and self.max_report_len == other.max_report_len
        )


def corpus_meta(layout: RegionLayout, diseases: Sequence[str]) -> CorpusMeta:
    return CorpusMeta(
        layout=layout,
        diseases=tuple(diseases),
        vocab=build_vocab(layout, diseases),
        max_report_len=max_report_length(layout),
    )


def gen_corpus(layout: RegionLayout, diseases: Sequence[str], n_samples: int,
               normal_fraction: float, seed: int) -> list[CorpusSample]:
    """Generate a deterministic synthetic corpus.

    Exactly round(n_samples * normal_fraction) samples are normal; the rest carry
    1-3 distinct (region, disease) findings, each rendered as a motif inside its
    region with the painted box recorded.
    """
    if len(layout.names) < 2:
        raise ValueError("layout must define at least 2 regions")
    if len(diseases) == 0:
        raise ValueError("disease list must not be empty")
    if len(diseases) < 2:
        raise ValueError("at least 2 diseases required")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not 0.0 <= normal_fraction <= 1.0:
        raise ValueError(f"normal_fraction must be in [0, 1], got {normal_fraction}")

    meta = corpus_meta(layout, diseases)
    vocab = meta.vocab
    rng = np.random.default_rng(seed)
    width, height = layout.image_size

    n_normal = int(round(n_samples * normal_fraction))
    flags = np.array([True] * n_normal + [False] * (n_samples - n_normal))
    rng.shuffle(flags)

    combos = [(rname, d) for rname in layout.names for d in diseases]
    disease_index = {d: i for i, d in enumerate(diseases)}

    samples: list[CorpusSample] = []
    for i in range(n_samples):
        image = np.clip(
            BACKGROUND_LEVEL + BACKGROUND_SIGMA * rng.standard_normal((height, width)),
            0.0, 1.0,
        )
        findings: list[Finding]
        boxes: list[tuple[Finding, Rect]] = []
        if flags[i]:
            findings = [Finding.normal()]
        else:
            k = int(rng.integers(1, 4))
            picked = rng.choice(len(combos), size=k, replace=False)
            findings = []
            for ci in picked:
                rname, d = combos[int(ci)]
                f = Finding(region=rname, disease=d)
                findings.append(f)
                box = render_motif(image, disease_index[d], layout.rect(rname), rng)
                boxes.append((f, box))
        samples.append(CorpusSample(
            id=f"s{i:05d}",
            image=image.astype(np.float32),
            report=report_tokens(vocab, findings),
            findings=findings,
            boxes=boxes,
        ))
    return samples


# --- serialization ----------------------------------------------------------

def _encode_image(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _decode_image(data: str, shape: tuple[int, int]) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return arr.astype(np.float32, copy=True)


def _finding_to_json(f: Finding) -> list:
    return [f.region, f.disease]


def _finding_from_json(obj, line: int) -> Finding:
    if not isinstance(obj, list) or len(obj) != 2:
        raise CorpusFormatError("finding must be a [region, disease] pair", line, "findings")
    try:
        return Finding(region=obj[0], disease=obj[1])
    except ValueError as exc:
        raise CorpusFormatError(str(exc), line, "findings") from exc


def save_corpus(samples: Sequence[CorpusSample], path, meta: CorpusMeta) -> None:
    """Write one header line plus one JSON record per sample (UTF-8 JSONL)."""
    header = {
        "format_version": CORPUS_FORMAT_VERSION,
        "image_encoding": IMAGE_ENCODING,
        "layout": {
            "image_size": list(meta.layout.image_size),
            "regions": [[name, list(rect)] for name, rect in meta.layout.regions],
        },
        "diseases": list(meta.diseases),
        "vocab": meta.vocab.tokens,
        "max_report_len": meta.max_report_len,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            record = {
                "id": s.id,
                "image": _encode_image(s.image),
                "report": list(s.report),
                "findings": [_finding_to_json(f) for f in s.findings],
                "boxes": [[_finding_to_json(f), list(rect)] for f, rect in s.boxes],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus_meta(path) -> CorpusMeta:
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
    return _parse_header(header_line)


def _parse_header(header_line: str) -> CorpusMeta:
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid header JSON: {exc}", line=1) from exc
    if header.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(
            f"unsupported format_version {header.get('format_version')!r}", line=1,
            field_name="format_version")
    if header.get("image_encoding") != IMAGE_ENCODING:
        raise CorpusFormatError(
            f"unsupported image_encoding {header.get('image_encoding')!r}", line=1,
            field_name="image_encoding")
    for key in ("layout", "vocab", "diseases", "max_report_len"):
        if key not in header:
            raise CorpusFormatError("missing header field", line=1, field_name=key)
    lay = header["layout"]
    layout = RegionLayout(
        regions=tuple((name, tuple(rect)) for name, rect in lay["regions"]),
        image_size=tuple(lay["image_size"]),
    )
    return CorpusMeta(
        layout=layout,
        diseases=tuple(header["diseases"]),
        vocab=Vocab(header["vocab"]),
        max_report_len=int(header["max_report_len"]),
    )


def load_corpus(path) -> list[CorpusSample]:
    """Load samples; field-for-field inverse of save_corpus."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise CorpusFormatError("empty corpus file", line=1)
    meta = _parse_header(lines[0])
    height = meta.layout.image_size[1]
    width = meta.layout.image_size[0]
    samples: list[CorpusSample] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid record JSON: {exc}", line=lineno) from exc
        for key in ("id", "image", "report", "findings", "boxes"):
            if key not in record:
                raise CorpusFormatError("missing record field", line=lineno, field_name=key)
        sid = record["id"]
        if sid in seen_ids:
            raise CorpusFormatError(f"duplicate id '{sid}'", line=lineno, field_name="id")
        seen_ids.add(sid)
        try:
            image = _decode_image(record["image"], (height, width))
        except ValueError as exc:
            raise CorpusFormatError(str(exc), line=lineno, field_name="image") from exc
        if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
            raise CorpusFormatError("image values must be finite in [0, 1]",
                                    line=lineno, field_name="image")
        report = [int(t) for t in record["report"]]
        if not 2 <= len(report) <= meta.max_report_len:
            raise CorpusFormatError(
                f"report length {len(report)} outside [2, {meta.max_report_len}]",
                line=lineno, field_name="report")
        findings = [_finding_from_json(f, lineno) for f in record["findings"]]
        boxes = []
        for entry in record["boxes"]:
            if not isinstance(entry, list) or len(entry) != 2:
                raise CorpusFormatError("box entry must be [finding, rect]",
                                        line=lineno, field_name="boxes")
            bf = _finding_from_json(entry[0], lineno)
            if bf not in findings:
                raise CorpusFormatError("boxed finding not present in findings",
                                        line=lineno, field_name="boxes")
            boxes.append((bf, tuple(int(v) for v in entry[1])))
        samples.append(CorpusSample(id=sid, image=image, report=report,
                                    findings=findings, boxes=boxes))
    return samples


def split_corpus(samples: Sequence[CorpusSample], train_fraction: float,
                 seed: int) -> tuple[list[CorpusSample], list[CorpusSample]]:
    """Disjoint, exhaustive, deterministic train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train = int(round(len(samples) * train_fraction))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]
