"""Fusion decoder: consumes fired acoustic vectors one per step and fuses cues.

Step i combines the previous acoustic vector c_{i-1} with the previous token
embedding (concatenation + linear), runs the block stack, adds a linear map of
the current c_i, and projects to vocabulary log-probabilities. Blocks are
role-assigned: initial blocks are plain causal self-attention + FFN; visual
and linguistic fusion blocks insert a cross-attention whose keys/values are
the projected cue rows of that modality. Role placement is pure configuration
over the same parameter set, so fusion layouts can be explored without
renaming parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import (
    add_attention,
    add_layer_norm,
    add_linear,
    attention,
    linear,
    norm,
    sinusoidal_encoding,
    xavier_uniform,
)
from .perception import LINGUISTIC, VISUAL
from .tensor import ParamStore, Tensor

INITIAL = "initial"
ROLES = (INITIAL, VISUAL, LINGUISTIC)


class PlanError(ValueError):
    """Invalid fusion-role assignment."""


@dataclass(frozen=True)
class FusionPlan:
    """Role per decoder block, 1-indexed; initial blocks precede fusion ones."""

    num_blocks: int = 6
    visual_blocks: tuple[int, ...] = (3, 4)
    linguistic_blocks: tuple[int, ...] = (5, 6)

    def __post_init__(self):
        object.__setattr__(self, "visual_blocks", tuple(sorted(self.visual_blocks)))
        object.__setattr__(self, "linguistic_blocks",
                           tuple(sorted(self.linguistic_blocks)))
        fusion = set(self.visual_blocks) | set(self.linguistic_blocks)
        if set(self.visual_blocks) & set(self.linguistic_blocks):
            raise PlanError("a block cannot fuse both modalities")
        for i in fusion:
            if not 1 <= i <= self.num_blocks:
                raise PlanError(f"fusion block {i} outside [1, {self.num_blocks}]")
        # the stack opens with the initial stage; fusion never starts at block 1
        # (plain blocks after fusion are fine: several explored layouts need them)
        if fusion and min(fusion) == 1:
            raise PlanError("initial blocks must precede every fusion block")

    def role(self, block: int) -> str:
        if block in self.visual_blocks:
            return VISUAL
        if block in self.linguistic_blocks:
            return LINGUISTIC
        return INITIAL

    @property
    def assignment(self) -> dict[int, str]:
        return {i: self.role(i) for i in range(1, self.num_blocks + 1)}


def swap_fusion_order(plan: FusionPlan) -> FusionPlan:
    """Exchange the visual and linguistic role assignments.

    With a single modality in play there is nothing to interchange and the
    plan comes back unchanged.
    """
    if not plan.visual_blocks or not plan.linguistic_blocks:
        return plan
    return FusionPlan(num_blocks=plan.num_blocks,
                      visual_blocks=plan.linguistic_blocks,
                      linguistic_blocks=plan.visual_blocks)


@dataclass
class DecoderConfig:
    vocab_size: int = 16
    d_model: int = 64
    d_ffn: int = 256
    heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise PlanError(f"d_model {self.d_model} not divisible by heads "
                            f"{self.heads}")


@dataclass
class ProjectedCues:
    """Cue rows already projected to decoder width (placeholders included)."""

    visual: Tensor
    linguistic: Tensor

    def rows(self, modality: str) -> Tensor:
        return self.visual if modality == VISUAL else self.linguistic


@dataclass
class DecoderState:
    """Decoding history: consumed acoustic vectors and emitted tokens.

    step is the 1-based index of the step about to be decoded; c_history holds
    c_1..c_{step-1} and tokens the step-1 emitted token ids.
    """

    bos_id: int
    tokens: tuple[int, ...] = ()
    c_history: tuple[Tensor, ...] = ()

    @property
    def step(self) -> int:
        return len(self.tokens) + 1

    @property
    def prev_token(self) -> int:
        return self.tokens[-1] if self.tokens else self.bos_id

    def advance(self, token: int, c_i: Tensor) -> "DecoderState":
        return DecoderState(bos_id=self.bos_id, tokens=self.tokens + (int(token),),
                            c_history=self.c_history + (c_i,))


def init_decoder_params(store: ParamStore, cfg: DecoderConfig, num_blocks: int,
                        rng: np.random.Generator) -> None:
    d = cfg.d_model
    store.create("decoder.embed", xavier_uniform(rng, cfg.vocab_size, d))
    add_linear(store, rng, "decoder.combine", 2 * d, d)
    for i in range(1, num_blocks + 1):
        p = f"decoder.block{i}"
        add_layer_norm(store, f"{p}.self.norm", d)
        add_attention(store, rng, f"{p}.self", d)
        add_layer_norm(store, f"{p}.cross.norm", d)
        add_attention(store, rng, f"{p}.cross", d)
        add_layer_norm(store, f"{p}.ffn.norm", d)
        add_linear(store, rng, f"{p}.ffn.in", d, cfg.d_ffn)
        add_linear(store, rng, f"{p}.ffn.out", cfg.d_ffn, d)
    add_layer_norm(store, "decoder.final_norm", d)
    add_linear(store, rng, "decoder.ctx", d, d)
    add_linear(store, rng, "decoder.out", d, cfg.vocab_size)


def _drop(x, cfg, rng, train):
    if train and cfg.dropout > 0 and rng is not None:
        return tn.dropout(x, cfg.dropout, rng)
    return x


def decode_prefix(c_rows: Tensor, prev_tokens: list[int], cues: ProjectedCues,
                  plan: FusionPlan, cfg: DecoderConfig, store: ParamStore,
                  rng=None, train: bool = False, capture_attention: bool = False,
                  keep_heads: bool = False):
    """Forward over a prefix of steps.

    c_rows is (I, d) with c_i in row i-1; prev_tokens[i-1] is the token fed to
    step i (the begin id first). Returns (I x V log-probabilities, attention
    maps dict keyed by modality). Maps are averaged over heads and over the
    blocks assigned to the modality, (I, rows) each; keep_heads returns the
    raw (blocks, heads, I, rows) stacks instead.
    """
    n_steps, d = c_rows.shape
    if len(prev_tokens) != n_steps:
        raise PlanError(f"{n_steps} acoustic steps vs {len(prev_tokens)} input tokens")
    if f"decoder.block{plan.num_blocks}.self.q.w" not in store:
        raise PlanError(f"plan wants {plan.num_blocks} blocks but parameters "
                        f"stop earlier")

    c_prev = tn.concat([Tensor(np.zeros((1, d))), c_rows[:n_steps - 1]], axis=0) \
        if n_steps > 1 else Tensor(np.zeros((1, d)))
    emb = tn.embedding(store["decoder.embed"], prev_tokens)
    x = linear(tn.concat([c_prev, emb], axis=1), store, "decoder.combine")
    x = tn.scale(x, math.sqrt(d)) + Tensor(sinusoidal_encoding(n_steps, d))
    x = _drop(x, cfg, rng, train)

    causal = np.triu(np.full((n_steps, n_steps), -1e9), k=1)
    maps: dict[str, list[np.ndarray]] = {VISUAL: [], LINGUISTIC: []}
    for i in range(1, plan.num_blocks + 1):
        p = f"decoder.block{i}"
        pre = norm(x, store, f"{p}.self.norm")
        x = x + _drop(attention(pre, pre, pre, store, f"{p}.self", cfg.heads,
                                mask=causal), cfg, rng, train)
        role = plan.role(i)
        if role != INITIAL:
            kv = cues.rows(role)
            if capture_attention:
                attn, weights = attention(norm(x, store, f"{p}.cross.norm"), kv, kv,
                                          store, f"{p}.cross", cfg.heads,
                                          return_weights=True)
                maps[role].append(weights)
            else:
                attn = attention(norm(x, store, f"{p}.cross.norm"), kv, kv,
                                 store, f"{p}.cross", cfg.heads)
            x = x + _drop(attn, cfg, rng, train)
        h = tn.swish(linear(norm(x, store, f"{p}.ffn.norm"), store, f"{p}.ffn.in"))
        x = x + _drop(linear(_drop(h, cfg, rng, train), store, f"{p}.ffn.out"),
                      cfg, rng, train)
    x = norm(x, store, "decoder.final_norm")
    logits = linear(x + linear(c_rows, store, "decoder.ctx"), store, "decoder.out")
    logprobs = tn.log_softmax(logits)

    attention_maps = None
    if capture_attention:
        attention_maps = {}
        for mod, ms in maps.items():
            if not ms:
                attention_maps[mod] = None
            elif keep_heads:
                attention_maps[mod] = np.stack(ms)
            else:
                attention_maps[mod] = np.stack(ms).mean(axis=(0, 1))
    return logprobs, attention_maps


def decode_teacher_forced(fired, targets: list[int], cues: ProjectedCues,
                          plan: FusionPlan, cfg: DecoderConfig, store: ParamStore,
                          bos_id: int, rng=None, train: bool = False,
                          capture_attention: bool = False):
    """I x V log-probabilities; row i conditions on targets < i."""
    c_rows = fired.integrated if hasattr(fired, "integrated") else fired
    n_steps = c_rows.shape[0]
    if len(targets) != n_steps:
        raise PlanError(f"fired {n_steps} steps but target has {len(targets)} tokens")
    prev = [bos_id] + list(targets[:-1])
    return decode_prefix(c_rows, prev, cues, plan, cfg, store, rng=rng,
                         train=train, capture_attention=capture_attention)


def decode_step(state: DecoderState, c_i: Tensor, cues: ProjectedCues,
                plan: FusionPlan, cfg: DecoderConfig, store: ParamStore,
                capture_attention: bool = False):
    """Log-probabilities for the next token given the decoding history."""
    rows = list(state.c_history) + [tn.reshape(c_i, (1, -1))]
    c_rows = tn.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    prev = [state.bos_id] + list(state.tokens)
    logprobs, maps = decode_prefix(c_rows, prev, cues, plan, cfg, store,
                                   capture_attention=capture_attention)
    step_maps = None
    if capture_attention:
        step_maps = {mod: (m[-1] if m is not None else None)
                     for mod, m in maps.items()}
    return logprobs[state.step - 1], step_maps
