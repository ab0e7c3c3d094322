"""Shared neural building blocks: init, linear maps, attention, positions."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .tensor import ParamStore, Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def add_linear(store: ParamStore, rng: np.random.Generator, name: str,
               d_in: int, d_out: int) -> None:
    store.create(f"{name}.w", xavier_uniform(rng, d_in, d_out))
    store.create(f"{name}.b", np.zeros(d_out))


def linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return x @ store[f"{name}.w"] + store[f"{name}.b"]


def add_layer_norm(store: ParamStore, name: str, d: int) -> None:
    store.create(f"{name}.g", np.ones(d))
    store.create(f"{name}.b", np.zeros(d))


def norm(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return tn.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def sinusoidal_encoding(n: int, d: int) -> np.ndarray:
    """Absolute sinusoidal position table, (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d, 2, dtype=np.float64) * (-math.log(10000.0) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def add_attention(store: ParamStore, rng: np.random.Generator, name: str,
                  d_model: int) -> None:
    for proj in ("q", "k", "v", "o"):
        add_linear(store, rng, f"{name}.{proj}", d_model, d_model)


def attention(queries: Tensor, keys: Tensor, values: Tensor, store: ParamStore,
              name: str, heads: int, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Multi-head scaled dot-product attention.

    `mask` is an additive (Tq, Tk) array (use -1e9 for disallowed positions).
    With return_weights the per-head weight stack (heads, Tq, Tk) comes back
    alongside the projected output.
    """
    d_model = queries.shape[-1]
    dh = d_model // heads
    q = linear(queries, store, f"{name}.q")
    k = linear(keys, store, f"{name}.k")
    v = linear(values, store, f"{name}.v")
    outs = []
    head_weights = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = tn.scale(q[:, sl] @ tn.transpose(k[:, sl]), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + Tensor(mask)
        w = tn.softmax(scores)
        outs.append(w @ v[:, sl])
        if return_weights:
            head_weights.append(w.data)
    out = linear(tn.concat(outs, axis=1), store, f"{name}.o")
    if return_weights:
        return out, np.stack(head_weights)
    return out
