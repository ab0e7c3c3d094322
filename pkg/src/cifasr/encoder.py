"""Acoustic encoder: 2-D conv front-end, conformer blocks, pooling, CTC head.

The front-end strides 2 over both time and frequency; its channel x frequency
output is flattened and projected to d_model. Blocks follow the macaron
pattern (half FFN, self-attention, depthwise-conv module, half FFN, final
norm) with pre-norm residuals; max-pooling (kernel 2, stride 2, over time) is
applied after the configured block indices. Total time reduction is therefore
conv_stride * 2**len(pool_after_blocks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

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
from .tensor import ParamStore, Tensor


class EncoderError(ValueError):
    """Configuration or input problems (utterance too short, bad config)."""


@dataclass
class EncoderConfig:
    feat_dim: int = 80
    conv_channels: int = 128
    conv_kernel: int = 3
    conv_stride: int = 2
    num_blocks: int = 4
    d_model: int = 64
    d_ffn: int = 256
    heads: int = 4
    depthwise_kernel: int = 7
    pool_after_blocks: tuple[int, ...] = (2,)
    dropout: float = 0.1

    def __post_init__(self):
        self.pool_after_blocks = tuple(sorted(self.pool_after_blocks))
        if self.d_model % self.heads:
            raise EncoderError(f"d_model {self.d_model} not divisible by "
                               f"heads {self.heads}")
        for i in self.pool_after_blocks:
            if not 1 <= i < self.num_blocks:
                raise EncoderError(f"pool index {i} outside [1, {self.num_blocks})")
        if self.depthwise_kernel % 2 == 0:
            raise EncoderError("depthwise_kernel must be odd (same-length conv)")

    @property
    def subsampling_factor(self) -> int:
        return self.conv_stride * 2 ** len(self.pool_after_blocks)


@dataclass
class AcousticStates:
    """U x d_model encoder output plus its time bookkeeping."""

    states: Tensor
    subsampling_factor: int
    num_input_frames: int

    @property
    def num_states(self) -> int:
        return self.states.shape[0]

    def frame_spans(self) -> list[tuple[int, int]]:
        """Half-open spans over the original frames; they partition [0, T)."""
        f = self.subsampling_factor
        t = self.num_input_frames
        u = self.num_states
        spans = []
        for i in range(u):
            start = min(i * f, t)
            end = t if i == u - 1 else min((i + 1) * f, t)
            spans.append((start, end))
        return spans


def subsampled_length(t: int, cfg: EncoderConfig) -> int:
    """U as a function of T: ceil after the strided conv, floor per pool."""
    pad = cfg.conv_kernel // 2
    u = (t + 2 * pad - cfg.conv_kernel) // cfg.conv_stride + 1
    for _ in cfg.pool_after_blocks:
        u = u // 2
    return u


def init_encoder_params(store: ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator, vocab_size: int) -> None:
    k = cfg.conv_kernel
    store.create("encoder.frontend.w",
                 xavier_uniform(rng, k * k, cfg.conv_channels,
                                shape=(cfg.conv_channels, 1, k, k)))
    store.create("encoder.frontend.b", np.zeros(cfg.conv_channels))
    freq = (cfg.feat_dim + 2 * (k // 2) - k) // cfg.conv_stride + 1
    add_linear(store, rng, "encoder.proj", cfg.conv_channels * freq, cfg.d_model)
    for i in range(1, cfg.num_blocks + 1):
        p = f"encoder.block{i}"
        for ffn in ("ffn1", "ffn2"):
            add_layer_norm(store, f"{p}.{ffn}.norm", cfg.d_model)
            add_linear(store, rng, f"{p}.{ffn}.in", cfg.d_model, cfg.d_ffn)
            add_linear(store, rng, f"{p}.{ffn}.out", cfg.d_ffn, cfg.d_model)
        add_layer_norm(store, f"{p}.mhsa.norm", cfg.d_model)
        add_attention(store, rng, f"{p}.mhsa", cfg.d_model)
        add_layer_norm(store, f"{p}.conv.norm", cfg.d_model)
        add_linear(store, rng, f"{p}.conv.pw1", cfg.d_model, 2 * cfg.d_model)
        store.create(f"{p}.conv.dw.w",
                     xavier_uniform(rng, cfg.depthwise_kernel, 1,
                                    shape=(cfg.d_model, cfg.depthwise_kernel)))
        store.create(f"{p}.conv.dw.b", np.zeros(cfg.d_model))
        add_layer_norm(store, f"{p}.conv.mid_norm", cfg.d_model)
        add_linear(store, rng, f"{p}.conv.pw2", cfg.d_model, cfg.d_model)
        add_layer_norm(store, f"{p}.final_norm", cfg.d_model)
    add_linear(store, rng, "encoder.ctc", cfg.d_model, vocab_size + 1)


def _ffn(x: Tensor, store: ParamStore, prefix: str, cfg: EncoderConfig,
         rng, train: bool) -> Tensor:
    h = tn.swish(linear(norm(x, store, f"{prefix}.norm"), store, f"{prefix}.in"))
    h = _drop(h, cfg, rng, train)
    return _drop(linear(h, store, f"{prefix}.out"), cfg, rng, train)


def _drop(x: Tensor, cfg: EncoderConfig, rng, train: bool) -> Tensor:
    if train and cfg.dropout > 0 and rng is not None:
        return tn.dropout(x, cfg.dropout, rng)
    return x


def _conv_module(x: Tensor, store: ParamStore, prefix: str, cfg: EncoderConfig,
                 rng, train: bool) -> Tensor:
    h = linear(norm(x, store, f"{prefix}.norm"), store, f"{prefix}.pw1")
    a, b = h[:, :cfg.d_model], h[:, cfg.d_model:]
    h = a * tn.sigmoid(b)  # gated linear unit
    h = tn.depthwise_conv1d(h, store[f"{prefix}.dw.w"], store[f"{prefix}.dw.b"],
                            padding=cfg.depthwise_kernel // 2)
    h = tn.swish(norm(h, store, f"{prefix}.mid_norm"))
    return _drop(linear(h, store, f"{prefix}.pw2"), cfg, rng, train)


def conformer_block(x: Tensor, store: ParamStore, prefix: str, cfg: EncoderConfig,
                    rng=None, train: bool = False) -> Tensor:
    x = x + tn.scale(_ffn(x, store, f"{prefix}.ffn1", cfg, rng, train), 0.5)
    pre = norm(x, store, f"{prefix}.mhsa.norm")
    attn = attention(pre, pre, pre, store, f"{prefix}.mhsa", cfg.heads)
    x = x + _drop(attn, cfg, rng, train)
    x = x + _conv_module(x, store, f"{prefix}.conv", cfg, rng, train)
    x = x + tn.scale(_ffn(x, store, f"{prefix}.ffn2", cfg, rng, train), 0.5)
    return norm(x, store, f"{prefix}.final_norm")


def encode(feat, cfg: EncoderConfig, store: ParamStore, rng=None,
           train: bool = False) -> AcousticStates:
    """Features (T x F) to low-level states H (U x d_model)."""
    frames = feat.frames if hasattr(feat, "frames") else np.asarray(feat)
    t = frames.shape[0]
    if frames.shape[1] != cfg.feat_dim:
        raise EncoderError(f"feature dim {frames.shape[1]} != configured "
                           f"{cfg.feat_dim}")
    if subsampled_length(t, cfg) < 1:
        raise EncoderError(f"utterance of {t} frames collapses to zero states "
                           f"under {cfg.subsampling_factor}x subsampling")
    x = Tensor(frames[:, :, None])
    x = tn.relu(tn.conv2d(x, store["encoder.frontend.w"], store["encoder.frontend.b"],
                          stride=cfg.conv_stride, padding=cfg.conv_kernel // 2))
    u1 = x.shape[0]
    x = linear(tn.reshape(x, (u1, -1)), store, "encoder.proj")
    x = tn.scale(x, math.sqrt(cfg.d_model)) + Tensor(sinusoidal_encoding(u1, cfg.d_model))
    x = _drop(x, cfg, rng, train)
    for i in range(1, cfg.num_blocks + 1):
        x = conformer_block(x, store, f"encoder.block{i}", cfg, rng, train)
        if i in cfg.pool_after_blocks:
            x = tn.maxpool1d(x, kernel=2, stride=2)
    return AcousticStates(states=x, subsampling_factor=cfg.subsampling_factor,
                          num_input_frames=t)


def ctc_head(states: AcousticStates, store: ParamStore) -> Tensor:
    """U x (V+1) log-probabilities; the blank is the last index."""
    return tn.log_softmax(linear(states.states, store, "encoder.ctc"))
