"""Sink-triggered grounded decoding with adaptive attention modulation.

The controller runs greedy autoregressive decoding and, whenever a sink
token fires (or a periodic schedule does), verifies the visual grounding
of the just-closed segment: concepts are extracted, the sink token's
image attention is compared against the concepts' gradient attribution,
and the IoU decides whether image attention is reinforced (scaled up,
renormalized) or diffused (scaled down) for the following steps.

Trace files are JSONL, one event per line, and contain only reproducible
payloads: wall-clock component timings live in the run manifest, the
trace's timing events carry call counts.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .grounding import (BinaryMask, GroundingReport, SpatialMap, area_ratio,
                        attention_map, binarize, iou, select_attention_source,
                        union_masks)
from .linguistics import (Concept, PosLexicon, SinkEvent, SinkLexicon,
                          extract_concepts, is_sink)

DEFAULT_PROMPT = "Please describe this image in detail."

# grids accepted for modulation-scale sweeps
DIFFUSE_GRID = (0.3, 0.5, 0.6, 0.8)
REINFORCE_GRID = (1.2, 1.5, 1.8, 2.0)

TIMED_COMPONENTS = ("concept_extraction", "attention_iou", "gradcam", "modulation")


class ConfigError(ValueError):
    pass


class DecodeAborted(RuntimeError):
    """Model failure mid-decode; carries the partial trace for flushing."""

    def __init__(self, trace: "DecodeTrace", cause: BaseException):
        super().__init__(f"decode aborted at step {len(trace.tokens())}: {cause}")
        self.trace = trace
        self.cause = cause


def parse_trigger(spec: str) -> tuple[str, Optional[int]]:
    """"sink" | "off" | "periodic:N" -> (kind, period)."""
    if spec in ("sink", "off"):
        return spec, None
    if spec.startswith("periodic:") or spec.startswith("periodic("):
        digits = spec.split(":", 1)[1] if ":" in spec else spec[9:].rstrip(")")
        period = int(digits)
        if period < 1:
            raise ConfigError(f"periodic trigger needs period >= 1, got {period}")
        return "periodic", period
    raise ConfigError(f"unknown trigger {spec!r}")


def middle_layers(n_layers: int) -> tuple[int, ...]:
    """Default grounding layers: the middle third, [L/3, 2L/3); for very
    shallow stacks, the single central layer."""
    lo, hi = n_layers // 3, (2 * n_layers) // 3
    if lo >= hi:
        return ((n_layers - 1) // 2,)
    return tuple(range(lo, hi))


@dataclass
class SageConfig:
    tau: float = 0.5
    scale_reinforce: float = 1.8
    scale_diffuse: float = 0.6
    trigger: str = "sink"  # sink | periodic:N | off
    reliability_mode: str = "gradcam_iou"  # gradcam_iou | attention_area
    modulation_scope: str = "until_next_sink"  # until_next_sink | at_sink_only
    modulation_mode: str = "both"  # both | reinforce_only | diffuse_only
    layer_set: Optional[tuple[int, ...]] = None  # None -> middle third
    rel_threshold: float = 0.5
    prompt: str = DEFAULT_PROMPT

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        # scale 1.0 is the documented no-op boundary, accepted on both sides
        if self.scale_reinforce < 1.0:
            raise ConfigError(f"scale_reinforce must be >= 1, got {self.scale_reinforce}")
        if not 0.0 < self.scale_diffuse <= 1.0:
            raise ConfigError(f"scale_diffuse must be in (0, 1], got {self.scale_diffuse}")
        if not 0.0 < self.rel_threshold < 1.0:
            raise ConfigError(f"rel_threshold must be in (0, 1), got {self.rel_threshold}")
        if self.reliability_mode not in ("gradcam_iou", "attention_area"):
            raise ConfigError(f"unknown reliability_mode {self.reliability_mode!r}")
        if self.modulation_scope not in ("until_next_sink", "at_sink_only"):
            raise ConfigError(f"unknown modulation_scope {self.modulation_scope!r}")
        if self.modulation_mode not in ("both", "reinforce_only", "diffuse_only"):
            raise ConfigError(f"unknown modulation_mode {self.modulation_mode!r}")
        parse_trigger(self.trigger)
        if self.layer_set is not None:
            if not self.layer_set:
                raise ConfigError("layer_set must be non-empty when given")
            self.layer_set = tuple(int(l) for l in self.layer_set)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "scale_reinforce": self.scale_reinforce,
            "scale_diffuse": self.scale_diffuse, "trigger": self.trigger,
            "reliability_mode": self.reliability_mode,
            "modulation_scope": self.modulation_scope,
            "modulation_mode": self.modulation_mode,
            "layer_set": list(self.layer_set) if self.layer_set is not None else None,
            "rel_threshold": self.rel_threshold, "prompt": self.prompt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SageConfig":
        d = dict(d)
        if d.get("layer_set") is not None:
            d["layer_set"] = tuple(d["layer_set"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "SageConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
        return cls.from_dict(data)


@dataclass(frozen=True)
class ModulationDirective:
    scale: float
    target_layers: tuple[int, ...]
    installed_at: int
    expires: str  # next-sink | one-step

    @property
    def kind(self) -> str:
        if self.scale > 1.0:
            return "reinforce"
        if self.scale < 1.0:
            return "diffuse"
        return "neutral"


def apply_directive(attention_row: np.ndarray, directive: ModulationDirective,
                    num_image_positions: int) -> np.ndarray:
    """Scale the image-position weights, renormalize the row to sum 1.

    Text positions keep their relative proportions. A uniform scale over
    every position would renormalize away, which is why the scale is
    restricted to image positions.
    """
    if directive.scale <= 0:
        raise ValueError(f"directive scale must be positive, got {directive.scale}")
    svec = np.ones_like(attention_row)
    svec[:num_image_positions] = directive.scale
    scaled = attention_row * svec
    return scaled / scaled.sum()


@dataclass
class DecodeTrace:
    """Ordered decode events plus the in-memory decode state (the state,
    with its full attention log, never serializes)."""

    events: list[dict] = field(default_factory=list)
    state: Optional[object] = None
    image_id: Optional[str] = None

    def tokens(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "token"]

    def grounding_events(self) -> list[dict]:
        return [e for e in self.events if e["kind"] == "grounding"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n"
                       for e in self.events)

    @staticmethod
    def parse_jsonl(text: str) -> "DecodeTrace":
        events = [json.loads(line) for line in text.splitlines() if line.strip()]
        return DecodeTrace(events=events)


def _concept_dict(c: Concept) -> dict:
    return {"surface": c.surface, "span": list(c.span), "kind": c.kind}


def _mask_list(m: Optional[BinaryMask]) -> Optional[list[int]]:
    return m.to_list() if m is not None else None


def grounding_check(state, sink: SinkEvent, model, config: SageConfig,
                    layer_set: tuple[int, ...],
                    pos_lexicon: Optional[PosLexicon] = None) -> GroundingReport:
    """One verification pass at a trigger. Failures inside never abort the
    decode; they degrade to a "skip" report."""
    pos = pos_lexicon or PosLexicon()
    a, b = sink.segment
    report = GroundingReport(sink=sink, concepts=[], i1_map=None, i1_mask=None,
                             selected_layer_set=tuple(layer_set))
    try:
        t0 = time.perf_counter()
        concepts = extract_concepts(state.generated[a:b], model.vocab, pos, offset=a)
        state.add_time("concept_extraction", time.perf_counter() - t0)
        report.concepts = concepts
        if not concepts:
            return report

        t0 = time.perf_counter()
        layer, head = select_attention_source(state, sink.step, layer_set)
        i1, _ = attention_map(state, sink, layer_set)
        i1_mask = binarize(i1, config.rel_threshold)
        state.add_time("attention_iou", time.perf_counter() - t0)
        report.i1_map, report.i1_mask = i1, i1_mask
        report.selected_layer, report.selected_head = layer, head

        if config.reliability_mode == "attention_area":
            t0 = time.perf_counter()
            overlap = area_ratio(i1_mask)
            state.add_time("attention_iou", time.perf_counter() - t0)
        else:
            per_concept = []
            for concept in concepts:
                t0 = time.perf_counter()
                if state.tape is not None:
                    state.tape.reset_grads()
                per_concept.append(binarize(model.gradcam(state, concept),
                                            config.rel_threshold))
                state.add_time("gradcam", time.perf_counter() - t0)
            t0 = time.perf_counter()
            i2_mask = union_masks(per_concept)
            overlap = iou(i1_mask, i2_mask)
            state.add_time("attention_iou", time.perf_counter() - t0)
            report.per_concept_masks = per_concept
            report.i2_mask = i2_mask

        report.overlap = overlap
        report.decision = "reinforce" if overlap > config.tau else "diffuse"
    except (ValueError, RuntimeError, KeyError, IndexError):
        report.decision = "skip"
    return report


def _grounding_event(report: GroundingReport, mode: str) -> dict:
    return {
        "kind": "grounding",
        "step": report.sink.step,
        "mode": mode,
        "concepts": [_concept_dict(c) for c in report.concepts],
        "i1": report.i1_map.to_list() if report.i1_map is not None else None,
        "i1_mask": _mask_list(report.i1_mask),
        "per_concept_masks": [m.to_list() for m in report.per_concept_masks],
        "i2_mask": _mask_list(report.i2_mask),
        "overlap": report.overlap,
        "decision": report.decision,
        "layer_set": list(report.selected_layer_set),
        "layer": report.selected_layer,
        "head": report.selected_head,
    }


def run_decode(image, prompt: str, model, config: SageConfig,
               sink_lexicon: Optional[SinkLexicon] = None,
               pos_lexicon: Optional[PosLexicon] = None) -> DecodeTrace:
    """Greedy decode under the configured trigger policy.

    Grounding checks fire at sink tokens (or every N steps); each decision
    replaces the previous modulation directive. Segment spans cover the
    stream between triggers, sink tokens excluded.
    """
    sinks = sink_lexicon or SinkLexicon()
    trigger_kind, period = parse_trigger(config.trigger)
    layer_set = config.layer_set or middle_layers(model.config.decoder_layers)
    expires = "one-step" if config.modulation_scope == "at_sink_only" else "next-sink"
    trace = DecodeTrace(events=[])
    state = model.begin_decode(image, prompt)
    trace.state = state
    vocab = model.vocab
    boundary = 0  # first generated index of the open segment

    while state.step < model.config.max_new_tokens:
        try:
            token = model.decode_step(state)
        except Exception as exc:  # partial trace stays flushable
            _append_timing_events(trace, state)
            raise DecodeAborted(trace, exc) from exc
        t = state.step - 1
        event = {"kind": "token", "step": t, "token_id": token,
                 "token": vocab.to_string(token)}
        if state.halluc_labels[t] is not None:
            event["halluc"] = bool(state.halluc_labels[t])
        trace.events.append(event)

        directive = state.active_directive
        if directive is not None and directive.expires == "one-step" \
                and t > directive.installed_at:
            _expire_directive(trace, state, t)

        if token == vocab.eos_id:
            break

        fired = None
        if trigger_kind == "sink" and is_sink(token, vocab, sinks):
            fired = SinkEvent(step=t, token=token, segment=(boundary, t))
            trace.events.append({"kind": "sink", "step": t,
                                 "token": vocab.to_string(token),
                                 "segment": [boundary, t]})
            boundary = t + 1
        elif trigger_kind == "periodic" and t > 0 and t % period == 0:
            fired = SinkEvent(step=t, token=token, segment=(boundary, t))
            boundary = t

        if fired is None:
            continue
        if state.active_directive is not None and expires == "next-sink":
            _expire_directive(trace, state, t)
        if fired.segment[0] >= fired.segment[1]:
            continue  # nothing to ground (consecutive sinks)

        report = grounding_check(state, fired, model, config, layer_set, pos_lexicon)
        trace.events.append(_grounding_event(report, config.reliability_mode))

        decision = report.decision
        if decision == "reinforce" and config.modulation_mode == "diffuse_only":
            continue
        if decision == "diffuse" and config.modulation_mode == "reinforce_only":
            continue
        if decision in ("reinforce", "diffuse"):
            scale = (config.scale_reinforce if decision == "reinforce"
                     else config.scale_diffuse)
            directive = ModulationDirective(scale=scale, target_layers=tuple(layer_set),
                                            installed_at=t, expires=expires)
            state.active_directive = directive
            trace.events.append({"kind": "directive", "step": t, "action": "install",
                                 "scale": scale, "target_layers": list(layer_set),
                                 "expires": expires})

    _append_timing_events(trace, state)
    return trace


def _expire_directive(trace: DecodeTrace, state, step: int) -> None:
    d = state.active_directive
    trace.events.append({"kind": "directive", "step": step, "action": "expire",
                         "scale": d.scale, "target_layers": list(d.target_layers),
                         "expires": d.expires})
    state.active_directive = None


def _append_timing_events(trace: DecodeTrace, state) -> None:
    for component in TIMED_COMPONENTS:
        trace.events.append({"kind": "timing", "component": component,
                             "calls": state.counts.get(component, 0)})
