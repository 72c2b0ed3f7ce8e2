"""Spatial grounding maps over the image-token grid and their overlap score.

Two map families: the sink token's self-attention over image tokens, and
gradient-weighted activation maps for extracted concepts. Both reduce to
P x P grids; binarized masks are compared with IoU to decide whether the
model's visual focus is trustworthy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .linguistics import Concept, SinkEvent


class MapShapeError(ValueError):
    pass


class EmptyMaskListError(ValueError):
    pass


class DetachedActivationsError(RuntimeError):
    """Vision activations are not reachable on the current tape."""


@dataclass(frozen=True)
class SpatialMap:
    """P x P non-negative grid, max-normalized to [0, 1] (max exactly 1
    unless the map is identically zero)."""

    grid: np.ndarray
    provenance: str  # attention | gradcam

    def __post_init__(self):
        g = self.grid
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise MapShapeError(f"spatial map must be square 2-D, got {g.shape}")
        if not np.isfinite(g).all():
            raise MapShapeError("spatial map has non-finite values")
        if g.min() < 0 or g.max() > 1 or (g.max() not in (0.0, 1.0)):
            raise MapShapeError("spatial map must be max-normalized to [0, 1]")

    @classmethod
    def from_raw(cls, raw: np.ndarray, provenance: str) -> "SpatialMap":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            side = int(round(raw.size ** 0.5))
            if side * side != raw.size:
                raise MapShapeError(f"cannot grid a length-{raw.size} vector")
            raw = raw.reshape(side, side)
        peak = raw.max()
        grid = raw / peak if peak > 0 else np.zeros_like(raw)
        return cls(grid, provenance)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.grid.reshape(-1)]


@dataclass(frozen=True)
class BinaryMask:
    grid: np.ndarray

    def __post_init__(self):
        if self.grid.dtype != bool or self.grid.ndim != 2:
            raise MapShapeError("mask must be a 2-D boolean grid")

    def to_list(self) -> list[int]:
        return [int(v) for v in self.grid.reshape(-1)]

    @classmethod
    def from_list(cls, flat: Sequence[int], side: int) -> "BinaryMask":
        return cls(np.asarray(flat, dtype=bool).reshape(side, side))


@dataclass
class GroundingReport:
    """Everything one sink trigger produced: maps, masks, overlap, decision."""

    sink: SinkEvent
    concepts: list[Concept]
    i1_map: Optional[SpatialMap]
    i1_mask: Optional[BinaryMask]
    per_concept_masks: list[BinaryMask] = field(default_factory=list)
    i2_mask: Optional[BinaryMask] = None
    overlap: float = 0.0
    decision: str = "skip"  # reinforce | diffuse | skip
    selected_layer_set: tuple[int, ...] = ()
    selected_layer: Optional[int] = None
    selected_head: Optional[int] = None


def select_attention_source(state, step: int, layers: Sequence[int]) -> tuple[int, int]:
    """(layer, head) with maximal mean post-modulation mass on image tokens
    at ``step``; ties break toward the lowest (layer, head)."""
    layers = tuple(layers)
    if not layers:
        raise ValueError("empty layer set")
    if step >= len(state.attention_log) or step < 0:
        raise IndexError(f"step {step} has no logged attention")
    logged = state.attention_log[step]
    n_img = state.num_image_tokens
    best = None
    best_mass = -1.0
    for layer in sorted(layers):
        for head in sorted(h for (l, h) in logged if l == layer):
            row = logged[(layer, head)].post
            mass = float(row[:n_img].mean())
            if mass > best_mass:
                best_mass = mass
                best = (layer, head)
    if best is None:
        raise IndexError(f"no attention logged for layers {layers} at step {step}")
    return best


def attention_map(state, sink: SinkEvent, layers: Sequence[int]) -> tuple[SpatialMap, int]:
    """Sink-token grounding map: best middle-layer head's image attention,
    gridded and max-normalized. Returns the map and the head index."""
    layer, head = select_attention_source(state, sink.step, layers)
    row = state.attention_log[sink.step][(layer, head)].post
    img = row[: state.num_image_tokens]
    return SpatialMap.from_raw(img, "attention"), head


def gradcam_map(activations: np.ndarray, gradients: np.ndarray) -> SpatialMap:
    """Gradient-weighted activation map.

    Channel weights are the spatial mean of the gradient; the map is the
    relu of the weighted channel sum, max-normalized. All-zero maps (relu
    kills everything) are legal.
    """
    acts = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(gradients, dtype=np.float64)
    if acts.shape != grads.shape or acts.ndim != 2:
        raise MapShapeError(f"activations {acts.shape} vs gradients {grads.shape}")
    weights = grads.mean(axis=0)
    cam = np.maximum(acts @ weights, 0.0)
    return SpatialMap.from_raw(cam, "gradcam")


def binarize(spatial: SpatialMap, rel_threshold: float) -> BinaryMask:
    """Cells at or above rel_threshold x map-max; all-false for a zero map."""
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError(f"rel_threshold must be in (0, 1), got {rel_threshold}")
    peak = spatial.grid.max()
    if peak == 0.0:
        return BinaryMask(np.zeros_like(spatial.grid, dtype=bool))
    return BinaryMask(spatial.grid >= rel_threshold * peak)


def union_masks(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise EmptyMaskListError("union of zero masks (no concepts?)")
    shape = masks[0].grid.shape
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.grid.shape != shape:
            raise MapShapeError(f"mask shapes differ: {m.grid.shape} vs {shape}")
        out |= m.grid
    return BinaryMask(out)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.grid.shape != b.grid.shape:
        raise MapShapeError(f"mask shapes differ: {a.grid.shape} vs {b.grid.shape}")
    union = int(np.logical_or(a.grid, b.grid).sum())
    if union == 0:
        return 0.0
    inter = int(np.logical_and(a.grid, b.grid).sum())
    return inter / union


def area_ratio(mask: BinaryMask) -> float:
    return float(mask.grid.sum()) / mask.grid.size


def write_pgm(obj: SpatialMap | BinaryMask, path: str | Path) -> None:
    """8-bit binary PGM of a map or mask, for eyeballing."""
    grid = obj.grid.astype(np.float64) if obj.grid.dtype == bool else obj.grid
    side = grid.shape[0]
    data = np.clip(np.rint(grid * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{side} {side}\n255\n".encode())
        fh.write(data.tobytes())
