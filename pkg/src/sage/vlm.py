"""Desk-scale vision-language model with the hook surface grounding needs.

One config, one decode-state record, and the random-weight transformer
backend: a bidirectional patch encoder feeding a causal decoder through a
linear projector. Per-step, per-layer, per-head attention rows of the
newest token are logged (pre- and post-modulation), per-step logits are
retained on a persistent tape, and the final-layer vision activations are
a gradient cut point so a decoder logit can be backpropagated to them.

The attention row logged at step t is the one from the forward pass that
emitted token t.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .grounding import SpatialMap, gradcam_map
from .linguistics import Concept
from .vocab import IMAGE, Vocabulary


class DecodeError(RuntimeError):
    pass


@dataclass
class VlmConfig:
    image_size: int = 32
    patch_size: int = 8
    vision_layers: int = 2
    decoder_layers: int = 3
    heads: int = 2
    embed_dim: int = 32
    seed: int = 0
    max_new_tokens: int = 32
    vocab: Optional[Vocabulary] = None
    init_std: float = 0.02
    channels: int = 3
    concept_logit_mode: str = "sum"  # sum | first_token
    prompt_headroom: int = 16

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.concept_logit_mode not in ("sum", "first_token"):
            raise ValueError(f"unknown concept_logit_mode {self.concept_logit_mode!r}")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_image_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def max_positions(self) -> int:
        return self.num_image_tokens + 1 + self.prompt_headroom + self.max_new_tokens

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "image_size", "patch_size", "vision_layers", "decoder_layers", "heads",
            "embed_dim", "seed", "max_new_tokens", "init_std", "channels",
            "concept_logit_mode", "prompt_headroom")}
        d["vocab"] = self.vocab.words if self.vocab is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VlmConfig":
        d = dict(d)
        words = d.pop("vocab", None)
        cfg = cls(**d)
        if words is not None:
            cfg.vocab = Vocabulary([w for w in words if not w.startswith("<")])
        return cfg


@dataclass
class AttnRows:
    """One (layer, head) attention row at one step, before and after any
    modulation directive was applied."""

    pre: np.ndarray
    post: np.ndarray


@dataclass
class DecodeState:
    """Grows over one decode: tokens, attention log, retained logits,
    per-layer KV cache, and the modulation directive currently in force."""

    prompt_ids: list[int]
    num_image_tokens: int
    generated: list[int] = field(default_factory=list)
    step: int = 0
    attention_log: list[dict[tuple[int, int], AttnRows]] = field(default_factory=list)
    logits_log: list = field(default_factory=list)
    active_directive: Optional[object] = None
    kv_cache: list[dict[str, T.DiffTensor]] = field(default_factory=list)
    tape: Optional[T.Tape] = None
    vision_activations: Optional[T.DiffTensor] = None
    halluc_labels: list[Optional[bool]] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    img_x: Optional[T.DiffTensor] = None

    def text_len(self) -> int:
        """Text-segment length currently in context: bos + prompt + generated."""
        return 1 + len(self.prompt_ids) + len(self.generated)

    def context_len(self) -> int:
        return self.num_image_tokens + self.text_len()

    def add_time(self, component: str, seconds: float) -> None:
        self.timings[component] = self.timings.get(component, 0.0) + seconds
        self.counts[component] = self.counts.get(component, 0) + 1


def greedy_select(logits_row: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest token id."""
    return int(np.argmax(logits_row))


def _directive_targets(directive, layer: int) -> bool:
    return directive is not None and layer in directive.target_layers


def _modulated(attn: T.DiffTensor, scale: float, n_img: int) -> T.DiffTensor:
    """Scale image-position weights of a [1, ctx] row, renormalize to 1."""
    svec = np.ones((1, attn.shape[1]))
    svec[0, :n_img] = scale
    return T.normalize_rows(T.mul(attn, T.DiffTensor(svec)))


class ToyVlm:
    """Seeded random-weight backend; honest numerics, no trained behavior."""

    def __init__(self, config: VlmConfig):
        if config.vocab is None:
            raise ValueError("VlmConfig.vocab is required")
        self.config = config
        self.vocab = config.vocab
        self.weights = self._init_weights()

    # ------------------------------------------------------------ weights

    def _init_weights(self) -> dict[str, T.DiffTensor]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d = cfg.embed_dim
        w: dict[str, np.ndarray] = {}
        w["patch_proj"] = rng.normal(0, cfg.init_std, (cfg.patch_size ** 2 * cfg.channels, d))
        w["vis_pos"] = rng.normal(0, cfg.init_std, (cfg.num_image_tokens, d))
        for l in range(cfg.vision_layers):
            for name in ("wq", "wk", "wv", "wo"):
                w[f"vis{l}.{name}"] = rng.normal(0, cfg.init_std, (d, d))
            w[f"vis{l}.w1"] = rng.normal(0, cfg.init_std, (d, 4 * d))
            w[f"vis{l}.w2"] = rng.normal(0, cfg.init_std, (4 * d, d))
        w["proj"] = rng.normal(0, cfg.init_std, (d, d))
        w["tok_emb"] = rng.normal(0, cfg.init_std, (len(self.vocab), d))
        w["dec_pos"] = rng.normal(0, cfg.init_std, (cfg.max_positions, d))
        for l in range(cfg.decoder_layers):
            for name in ("wq", "wk", "wv", "wo"):
                w[f"dec{l}.{name}"] = rng.normal(0, cfg.init_std, (d, d))
            w[f"dec{l}.w1"] = rng.normal(0, cfg.init_std, (d, 4 * d))
            w[f"dec{l}.w2"] = rng.normal(0, cfg.init_std, (4 * d, d))
        w["w_out"] = rng.normal(0, cfg.init_std, (d, len(self.vocab)))
        return {k: T.DiffTensor(v) for k, v in w.items()}

    # ------------------------------------------------------------- vision

    def _patchify(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self.config
        s, p, g = cfg.image_size, cfg.patch_size, cfg.grid_side
        px = np.asarray(pixels, dtype=np.float64)
        if px.shape != (s, s, cfg.channels):
            raise DecodeError(f"image shape {px.shape} != {(s, s, cfg.channels)}")
        patches = px.reshape(g, p, g, p, cfg.channels).transpose(0, 2, 1, 3, 4)
        return patches.reshape(g * g, p * p * cfg.channels)

    def encode_image(self, pixels: np.ndarray) -> tuple[T.DiffTensor, T.DiffTensor]:
        """Returns (projected image-token embeddings, vision activations).

        The activations are the final vision-layer output, re-wrapped as a
        requires_grad leaf: the gradient cut point for attribution. The
        projection runs on the active tape so decoder logits reach it.
        """
        acts = self.vision_forward(pixels)
        leaf = T.DiffTensor(acts, requires_grad=True)
        img_embeds = T.matmul(leaf, self.weights["proj"])
        return img_embeds, leaf

    def vision_forward(self, pixels: np.ndarray) -> np.ndarray:
        """Plain forward of the patch encoder; returns [P^2, D] values."""
        cfg = self.config
        x = T.DiffTensor(self._patchify(pixels))
        x = T.add(T.matmul(x, self.weights["patch_proj"]), self.weights["vis_pos"])
        for l in range(cfg.vision_layers):
            x = T.add(x, self._attention_block(x, f"vis{l}", causal=False))
            x = T.add(x, self._mlp_block(x, f"vis{l}"))
        return x.values

    def _attention_block(self, x: T.DiffTensor, prefix: str, causal: bool) -> T.DiffTensor:
        cfg = self.config
        h = T.layer_norm(x)
        q = T.matmul(h, self.weights[f"{prefix}.wq"])
        k = T.matmul(h, self.weights[f"{prefix}.wk"])
        v = T.matmul(h, self.weights[f"{prefix}.wv"])
        n = x.shape[0]
        mask = np.tril(np.ones((n, n), dtype=bool)) if causal else None
        parts = []
        dh = cfg.head_dim
        for i in range(cfg.heads):
            qh = T.col_slice(q, i * dh, (i + 1) * dh)
            kh = T.col_slice(k, i * dh, (i + 1) * dh)
            vh = T.col_slice(v, i * dh, (i + 1) * dh)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            attn = T.softmax_rows(scores, mask)
            parts.append(T.matmul(attn, vh))
        return T.matmul(T.concat_cols(parts), self.weights[f"{prefix}.wo"])

    def _mlp_block(self, x: T.DiffTensor, prefix: str) -> T.DiffTensor:
        h = T.layer_norm(x)
        return T.matmul(T.gelu(T.matmul(h, self.weights[f"{prefix}.w1"])),
                        self.weights[f"{prefix}.w2"])

    # ------------------------------------------------------------- decode

    def _prompt_token_ids(self, prompt: str) -> list[int]:
        ids = self.vocab.encode(prompt)
        image_id = self.vocab.image_id
        ids = [i for i in ids if i != image_id]  # image segment is implicit
        if len(ids) + 1 > self.config.prompt_headroom:
            raise DecodeError(f"prompt too long: {len(ids)} tokens")
        return ids

    def begin_decode(self, pixels: np.ndarray, prompt: str,
                     vision_activations_override: Optional[np.ndarray] = None) -> DecodeState:
        """Prefill-ready state. The whole decode lives on one tape so any
        retained logit can later reach the vision activations."""
        cfg = self.config
        state = DecodeState(prompt_ids=self._prompt_token_ids(prompt),
                            num_image_tokens=cfg.num_image_tokens)
        state.tape = T.Tape()
        with state.tape:
            if vision_activations_override is not None:
                leaf = T.DiffTensor(vision_activations_override, requires_grad=True)
                img_embeds = T.matmul(leaf, self.weights["proj"])
            else:
                img_embeds, leaf = self.encode_image(pixels)
            state.vision_activations = leaf
            pos = T.embedding_lookup(self.weights["dec_pos"],
                                     list(range(cfg.num_image_tokens)))
            state.img_x = T.add(img_embeds, pos)
        state.kv_cache = [{} for _ in range(cfg.decoder_layers)]
        return state

    def decode_step(self, state: DecodeState) -> int:
        """One greedy step: logs pre/post attention rows of the newest token
        at every (layer, head), retains logits, appends the argmax token."""
        cfg = self.config
        if state.step >= cfg.max_new_tokens:
            raise DecodeError(f"exceeded max_new_tokens={cfg.max_new_tokens}")
        if state.step != len(state.generated):
            raise DecodeError("state.step out of sync with generated tokens")
        with state.tape:
            if state.step == 0:
                x = self._prefill_input(state)
            else:
                x = self._incremental_input(state)
            row_log: dict[tuple[int, int], AttnRows] = {}
            for l in range(cfg.decoder_layers):
                x = T.add(x, self._decoder_attention(x, l, state, row_log))
                x = T.add(x, self._mlp_block(x, f"dec{l}"))
            last = T.row_slice(x, x.shape[0] - 1, x.shape[0]) if x.shape[0] > 1 else x
            logits = T.matmul(T.layer_norm(last), self.weights["w_out"])
        state.attention_log.append(row_log)
        state.logits_log.append(logits)
        token = greedy_select(logits.values[0])
        state.generated.append(token)
        state.halluc_labels.append(None)
        state.step += 1
        return token

    def _prefill_input(self, state: DecodeState) -> T.DiffTensor:
        cfg = self.config
        text_ids = [self.vocab.bos_id] + state.prompt_ids
        positions = [cfg.num_image_tokens + i for i in range(len(text_ids))]
        emb = T.add(T.embedding_lookup(self.weights["tok_emb"], text_ids),
                    T.embedding_lookup(self.weights["dec_pos"], positions))
        return T.concat_rows(state.img_x, emb)

    def _incremental_input(self, state: DecodeState) -> T.DiffTensor:
        cfg = self.config
        tok = state.generated[-1]
        position = cfg.num_image_tokens + state.text_len() - 1
        return T.add(T.embedding_lookup(self.weights["tok_emb"], [tok]),
                     T.embedding_lookup(self.weights["dec_pos"], [position]))

    def _decoder_attention(self, x: T.DiffTensor, layer: int, state: DecodeState,
                           row_log: dict[tuple[int, int], AttnRows]) -> T.DiffTensor:
        cfg = self.config
        prefix = f"dec{layer}"
        h = T.layer_norm(x)
        q = T.matmul(h, self.weights[f"{prefix}.wq"])
        k = T.matmul(h, self.weights[f"{prefix}.wk"])
        v = T.matmul(h, self.weights[f"{prefix}.wv"])
        cache = state.kv_cache[layer]
        if "k" in cache:
            cache["k"] = T.concat_rows(cache["k"], k)
            cache["v"] = T.concat_rows(cache["v"], v)
        else:
            cache["k"], cache["v"] = k, v
        k_all, v_all = cache["k"], cache["v"]
        n_new, n_ctx = x.shape[0], k_all.shape[0]
        mask = None
        if n_new > 1:  # prefill: causal over the joint image+text sequence
            mask = np.tril(np.ones((n_ctx, n_ctx), dtype=bool))
        directive = state.active_directive
        scale = directive.scale if _directive_targets(directive, layer) else None
        dh = cfg.head_dim
        parts = []
        for i in range(cfg.heads):
            qh = T.col_slice(q, i * dh, (i + 1) * dh)
            kh = T.col_slice(k_all, i * dh, (i + 1) * dh)
            vh = T.col_slice(v_all, i * dh, (i + 1) * dh)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(dh))
            attn = T.softmax_rows(scores, mask)
            pre_row = attn.values[-1].copy()
            if scale is not None:
                t0 = time.perf_counter()
                if n_new == 1:
                    attn = _modulated(attn, scale, cfg.num_image_tokens)
                state.add_time("modulation", time.perf_counter() - t0)
            row_log[(layer, i)] = AttnRows(pre=pre_row, post=attn.values[-1].copy())
            parts.append(T.matmul(attn, vh))
        return T.matmul(T.concat_cols(parts), self.weights[f"{prefix}.wo"])

    # --------------------------------------------------------- attribution

    def concept_logit(self, state: DecodeState, concept: Concept) -> T.DiffTensor:
        """Sum (or first-token) of the emitted-token logits over the concept
        span; lives on the decode tape, so backward reaches the vision leaf."""
        a, b = concept.span
        if not (0 <= a < b <= len(state.generated)):
            raise DecodeError(f"concept span {concept.span} outside generated range")
        steps = [a] if self.config.concept_logit_mode == "first_token" else range(a, b)
        with state.tape:
            total = None
            for t in steps:
                logits = state.logits_log[t]
                if not isinstance(logits, T.DiffTensor):
                    raise DecodeError(f"logits for step {t} were not retained")
                piece = T.take(logits, (0, state.generated[t]))
                total = piece if total is None else T.add(total, piece)
        return total

    def gradcam(self, state: DecodeState, concept: Concept) -> SpatialMap:
        """Attribution map for one concept. The tape must be reset between
        concepts; a consumed tape raises."""
        y = self.concept_logit(state, concept)
        T.backward(y)
        grads = state.vision_activations.grad
        if grads is None:
            raise DecodeError("vision activations unreachable from concept logit")
        return gradcam_map(state.vision_activations.values, grads)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(model: ToyVlm, directory: str | Path) -> None:
    """Flat binary of float64 weights plus a JSON shape manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(model.weights)
    blob = np.concatenate([model.weights[n].values.reshape(-1) for n in names])
    (directory / "weights.bin").write_bytes(blob.astype("<f8").tobytes())
    manifest = {
        "dtype": "float64-le",
        "order": "row-major",
        "names": names,
        "shapes": {n: list(model.weights[n].shape) for n in names},
        "config": model.config.to_dict(),
    }
    (directory / "weights.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | Path) -> ToyVlm:
    directory = Path(directory)
    manifest = json.loads((directory / "weights.json").read_text())
    cfg = VlmConfig.from_dict(manifest["config"])
    model = ToyVlm(cfg)
    blob = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f8")
    offset = 0
    for name in manifest["names"]:
        shape = tuple(manifest["shapes"][name])
        size = int(np.prod(shape))
        model.weights[name] = T.DiffTensor(blob[offset:offset + size].reshape(shape).copy())
        offset += size
    if offset != blob.size:
        raise ValueError("checkpoint size mismatch")
    return model
