"""Scripted test-double backend: predetermined tokens, attention, attribution.

Scripts pin every observable the pipeline consumes, so end-to-end runs are
bit-exact and overlap scores can be computed by hand. The scripted
attention values are the image-segment entries of each row; the remaining
probability mass is spread uniformly over the visible text positions.
Optional overrides let a script emit a different token while a diffuse (or
reinforce) directive is in force, giving the corpus a way to encode
"grounding intervention would have fixed this token".
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .decoder import apply_directive
from .grounding import SpatialMap
from .linguistics import Concept
from .vlm import AttnRows, DecodeError, DecodeState, VlmConfig

DEFAULT_IMAGE_MASS = 0.5


class ScriptError(ValueError):
    pass


@dataclass
class OracleScript:
    tokens: list[str]
    attention: dict[int, dict[tuple[int, int], np.ndarray]] = field(default_factory=dict)
    gradcam: dict[str, np.ndarray] = field(default_factory=dict)
    gt_objects: list[str] = field(default_factory=list)
    halluc_labels: list[bool] = field(default_factory=list)
    overrides: dict[str, dict[int, dict]] = field(default_factory=dict)

    def validate(self, config: VlmConfig) -> None:
        n_img = config.num_image_tokens
        if not self.tokens:
            raise ScriptError("script has no tokens")
        if len(self.halluc_labels) != len(self.tokens):
            raise ScriptError("halluc_labels length != tokens length")
        if config.vocab is not None:
            for t in self.tokens:
                config.vocab.to_id(t)
        for step, rows in self.attention.items():
            if not 0 <= step < len(self.tokens):
                raise ScriptError(f"attention step {step} outside script")
            for (l, h), row in rows.items():
                if not (0 <= l < config.decoder_layers and 0 <= h < config.heads):
                    raise ScriptError(f"attention key {l}.{h} outside model")
                if row.shape != (n_img,) or row.min() < 0 or row.sum() > 1 + 1e-9:
                    raise ScriptError(f"bad attention row at step {step} head {l}.{h}")
        for surface, grid in self.gradcam.items():
            if grid.shape != (n_img,) or grid.min() < 0 or not np.isfinite(grid).all():
                raise ScriptError(f"bad gradcam map for {surface!r}")

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "attention": {str(s): {f"{l}.{h}": [float(v) for v in row]
                                   for (l, h), row in sorted(rows.items())}
                          for s, rows in sorted(self.attention.items())},
            "gradcam": {k: [float(v) for v in row] for k, row in sorted(self.gradcam.items())},
            "gt_objects": list(self.gt_objects),
            "halluc_labels": [bool(b) for b in self.halluc_labels],
            "overrides": {kind: {str(s): dict(o) for s, o in sorted(steps.items())}
                          for kind, steps in sorted(self.overrides.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleScript":
        attention = {
            int(step): {(int(k.split(".")[0]), int(k.split(".")[1])): np.asarray(row, dtype=np.float64)
                        for k, row in rows.items()}
            for step, rows in d.get("attention", {}).items()}
        return cls(
            tokens=list(d["tokens"]),
            attention=attention,
            gradcam={k: np.asarray(v, dtype=np.float64) for k, v in d.get("gradcam", {}).items()},
            gt_objects=list(d.get("gt_objects", [])),
            halluc_labels=[bool(b) for b in d.get("halluc_labels", [])],
            overrides={kind: {int(s): dict(o) for s, o in steps.items()}
                       for kind, steps in d.get("overrides", {}).items()},
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "OracleScript":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


class OracleVlm:
    """Backend that replays an OracleScript instead of running a network."""

    def __init__(self, config: VlmConfig, script: OracleScript):
        if config.vocab is None:
            raise ValueError("VlmConfig.vocab is required")
        self.config = config
        self.vocab = config.vocab
        self.script = script
        script.validate(config)

    def begin_decode(self, pixels, prompt: str) -> DecodeState:
        ids = [i for i in self.vocab.encode(prompt) if i != self.vocab.image_id]
        return DecodeState(prompt_ids=ids, num_image_tokens=self.config.num_image_tokens)

    def _image_row(self, step: int, layer: int, head: int) -> np.ndarray:
        n_img = self.config.num_image_tokens
        row = self.script.attention.get(step, {}).get((layer, head))
        if row is None:
            return np.full(n_img, DEFAULT_IMAGE_MASS / n_img)
        return row

    def _emitted(self, state: DecodeState, step: int) -> tuple[str, Optional[bool]]:
        token = self.script.tokens[step]
        label = self.script.halluc_labels[step] if self.script.halluc_labels else None
        directive = state.active_directive
        if directive is not None:
            kind = "reinforce" if directive.scale > 1 else ("diffuse" if directive.scale < 1 else "")
            override = self.script.overrides.get(kind, {}).get(step)
            if override is not None:
                token = override["token"]
                label = bool(override.get("halluc", False))
        return token, label

    def decode_step(self, state: DecodeState) -> int:
        cfg = self.config
        step = state.step
        if step >= cfg.max_new_tokens:
            raise DecodeError(f"exceeded max_new_tokens={cfg.max_new_tokens}")
        if step >= len(self.script.tokens):
            raise DecodeError(f"script exhausted at step {step}")
        n_text = state.text_len()
        directive = state.active_directive
        row_log: dict[tuple[int, int], AttnRows] = {}
        for l in range(cfg.decoder_layers):
            targeted = directive is not None and l in directive.target_layers
            for h in range(cfg.heads):
                img = self._image_row(step, l, h)
                rest = (1.0 - img.sum()) / n_text
                pre = np.concatenate([img, np.full(n_text, rest)])
                if targeted:
                    t0 = time.perf_counter()
                    post = apply_directive(pre, directive, cfg.num_image_tokens)
                    state.add_time("modulation", time.perf_counter() - t0)
                else:
                    post = pre
                row_log[(l, h)] = AttnRows(pre=pre, post=post)
        token_str, label = self._emitted(state, step)
        token = self.vocab.to_id(token_str)
        logits = np.zeros(len(self.vocab))
        logits[token] = 1.0
        state.attention_log.append(row_log)
        state.logits_log.append(logits)
        state.generated.append(token)
        state.halluc_labels.append(label)
        state.step += 1
        return token

    def gradcam(self, state: DecodeState, concept: Concept) -> SpatialMap:
        """Scripted attribution; concepts the script never mentions get a
        zero map (binarizes to an empty mask)."""
        grid = self.script.gradcam.get(concept.surface)
        if grid is None:
            side = self.config.grid_side
            return SpatialMap(np.zeros((side, side)), "gradcam")
        return SpatialMap.from_raw(grid, "gradcam")
