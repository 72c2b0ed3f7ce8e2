"""Quantitative instruments: CHAIR, Cover, attention entropy, per-layer
grounding quality, and sink-proximity statistics over decode traces.

Object mentions are the tagger's nouns and noun phrases canonicalized
through the annotation synonym map; anything the map does not know is not
a mention. Within one caption repeated mentions of the same object count
once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .decoder import DecodeTrace
from .grounding import BinaryMask, SpatialMap, binarize, iou
from .linguistics import PosLexicon, SinkLexicon, extract_concepts_from_words
from .vocab import tokenize_text


@dataclass
class ImageAnnotation:
    objects: frozenset[str]
    boxes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)


@dataclass
class AnnotationSet:
    """Ground-truth object labels (plus optional patch-grid boxes) per image
    and the word -> canonical-label synonym map."""

    images: dict[str, ImageAnnotation]
    synonyms: dict[str, str]

    @classmethod
    def from_json(cls, path: str | Path) -> "AnnotationSet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, data: dict) -> "AnnotationSet":
        images = {}
        for image_id, entry in data["images"].items():
            boxes = {label: tuple(int(v) for v in box)
                     for label, box in entry.get("boxes", {}).items()}
            images[image_id] = ImageAnnotation(frozenset(entry["objects"]), boxes)
        return cls(images=images, synonyms=dict(data.get("synonyms", {})))

    def to_dict(self) -> dict:
        return {
            "images": {i: {"objects": sorted(a.objects),
                           "boxes": {k: list(v) for k, v in sorted(a.boxes.items())}}
                       for i, a in sorted(self.images.items())},
            "synonyms": dict(sorted(self.synonyms.items())),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


@dataclass
class ChairResult:
    c_s: float
    c_i: float
    per_caption: list[dict] = field(default_factory=list)


@dataclass
class LayerAnalysisRow:
    layer: int
    mean_iou: float
    mean_entropy: float


def extract_mentions(caption: str, pos: PosLexicon, synonyms: dict[str, str]) -> set[str]:
    """Canonical object labels mentioned in a caption.

    Concept surfaces are looked up in the synonym map first; for noun
    phrases the map misses, each noun-tagged component word is tried.
    """
    words = tokenize_text(caption)
    mentions: set[str] = set()
    for concept in extract_concepts_from_words(words, pos):
        label = synonyms.get(concept.surface)
        if label is not None:
            mentions.add(label)
            continue
        if concept.kind == "noun_phrase":
            for word in concept.surface.split():
                label = synonyms.get(word)
                if label is not None and pos.tag(word) == "NOUN":
                    mentions.add(label)
    return mentions


def chair(captions: Sequence[tuple[str, str]], annotations: AnnotationSet,
          pos: Optional[PosLexicon] = None) -> ChairResult:
    """CHAIR over (image_id, caption) pairs.

    c_i: hallucinated mention instances over all mention instances,
    pooled across captions (per-caption duplicates collapse first);
    c_s: fraction of captions containing at least one hallucination.
    """
    pos = pos or PosLexicon()
    n_mentions = 0
    n_halluc = 0
    n_bad_captions = 0
    per_caption = []
    for image_id, caption in captions:
        if image_id not in annotations.images:
            raise KeyError(f"caption for unknown image id {image_id!r}")
        truth = annotations.images[image_id].objects
        mentions = extract_mentions(caption, pos, annotations.synonyms)
        hallucinated = {m for m in mentions if m not in truth}
        n_mentions += len(mentions)
        n_halluc += len(hallucinated)
        n_bad_captions += bool(hallucinated)
        per_caption.append({"image_id": image_id, "mentions": sorted(mentions),
                            "hallucinated": sorted(hallucinated)})
    c_i = n_halluc / n_mentions if n_mentions else 0.0
    c_s = n_bad_captions / len(per_caption) if per_caption else 0.0
    return ChairResult(c_s=c_s, c_i=c_i, per_caption=per_caption)


def cover(caption: str, image_id: str, annotations: AnnotationSet,
          pos: Optional[PosLexicon] = None) -> float:
    """Fraction of this image's ground-truth objects the caption mentions."""
    pos = pos or PosLexicon()
    truth = annotations.images[image_id].objects
    if not truth:
        raise ValueError(f"image {image_id!r} has no annotated objects")
    mentions = extract_mentions(caption, pos, annotations.synonyms)
    return len(mentions & truth) / len(truth)


def attention_entropy(row: np.ndarray) -> float:
    """Shannon entropy (nats) of an attention slice over image positions,
    renormalized to sum 1; 0 log 0 counts as 0."""
    row = np.asarray(row, dtype=np.float64)
    if (row < 0).any():
        raise ValueError("attention entropy of a row with negative entries")
    total = row.sum()
    if total <= 0:
        raise ValueError("attention entropy of an all-zero row")
    p = row / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def box_mask(box: tuple[int, int, int, int], side: int) -> BinaryMask:
    """Patch-grid box [r0, c0, r1, c1] (half-open) as a boolean mask."""
    r0, c0, r1, c1 = box
    if not (0 <= r0 < r1 <= side and 0 <= c0 < c1 <= side):
        raise ValueError(f"box {box} outside {side}x{side} grid")
    grid = np.zeros((side, side), dtype=bool)
    grid[r0:r1, c0:c1] = True
    return BinaryMask(grid)


def layer_analysis(traces: Sequence[DecodeTrace], annotations: AnnotationSet,
                   vocab, n_layers: int, grid_side: int,
                   pos: Optional[PosLexicon] = None,
                   rel_threshold: float = 0.5) -> tuple[list[LayerAnalysisRow], int, int]:
    """Per-layer grounding quality of ground-truth concept tokens.

    For every generated token that canonicalizes to an annotated object
    with a box, each layer contributes the IoU of its (best-head,
    binarized) image-attention map against the box mask, plus the entropy
    of that attention slice. Returns (rows, n_samples, n_skipped) where a
    skipped trace matched no boxed concept.
    """
    pos = pos or PosLexicon()
    sums = {l: [0.0, 0.0] for l in range(n_layers)}
    n_samples = 0
    n_skipped = 0
    n_img = grid_side * grid_side
    for trace in traces:
        state = trace.state
        if state is None:
            raise ValueError("layer analysis needs in-memory traces (run decode first)")
        ann = annotations.images[trace.image_id]
        matched = 0
        for t, token in enumerate(state.generated):
            label = annotations.synonyms.get(vocab.to_string(token))
            if label is None or label not in ann.objects or label not in ann.boxes:
                continue
            gt = box_mask(ann.boxes[label], grid_side)
            logged = state.attention_log[t]
            matched += 1
            for layer in range(n_layers):
                heads = sorted(h for (l, h) in logged if l == layer)
                best = max(heads, key=lambda h: (logged[(layer, h)].post[:n_img].mean(), -h))
                img = logged[(layer, best)].post[:n_img]
                mask = binarize(SpatialMap.from_raw(img, "attention"), rel_threshold)
                sums[layer][0] += iou(mask, gt)
                sums[layer][1] += attention_entropy(img)
        if matched == 0:
            n_skipped += 1
        n_samples += matched
    rows = []
    for layer in range(n_layers):
        s_iou, s_ent = sums[layer]
        rows.append(LayerAnalysisRow(
            layer=layer,
            mean_iou=s_iou / n_samples if n_samples else 0.0,
            mean_entropy=s_ent / n_samples if n_samples else 0.0))
    return rows, n_samples, n_skipped


def sink_proximity(trace: DecodeTrace, window: int = 5,
                   lexicon: Optional[SinkLexicon] = None) -> float:
    """Fraction of hallucination-labeled tokens within ``window`` steps of
    the most recent preceding sink token. Sinks are recomputed from token
    strings so baseline traces measure the same way as modulated ones."""
    lexicon = lexicon or SinkLexicon()
    tokens = trace.tokens()
    if not any("halluc" in e for e in tokens):
        raise ValueError("trace carries no hallucination labels")
    last_sink: Optional[int] = None
    n_halluc = 0
    n_near = 0
    for event in tokens:
        step = event["step"]
        if event.get("halluc"):
            n_halluc += 1
            if last_sink is not None and step - last_sink <= window:
                n_near += 1
        if event["token"] in lexicon:
            last_sink = step
    return n_near / n_halluc if n_halluc else 0.0
