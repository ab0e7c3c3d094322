"""Visual and linguistic cue providers plus trainable projections.

Providers are frozen feature extractors: they return plain arrays that enter
the graph as constants, so only the per-modality projections train. A missing
modality is always the placeholder, exactly one all-zero vector; the
projection's bias then acts as a learned "no cue" embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .frontend import read_feature_matrix
from .layers import add_linear, linear
from .tensor import ParamStore, Tensor

VISUAL = "visual"
LINGUISTIC = "linguistic"


@dataclass
class CueSequence:
    """Rows of one modality's cue features (M x D or N' x D)."""

    vectors: np.ndarray
    modality: str
    is_placeholder: bool = False

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError(f"cue vectors must be 2-D, got {self.vectors.shape}")
        if self.is_placeholder:
            if self.vectors.shape[0] != 1 or np.any(self.vectors != 0):
                raise ValueError("placeholder must be exactly one all-zero vector")
        elif not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite cue values")


def placeholder(modality: str, dim: int) -> CueSequence:
    return CueSequence(vectors=np.zeros((1, dim), dtype=np.float32),
                       modality=modality, is_placeholder=True)


def _stable_rng(identifier: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{identifier}|{seed}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class VisualProvider:
    """kind="precomputed" loads feature files; kind="stub" hashes the id."""

    def __init__(self, dim: int, kind: str = "precomputed", seed: int = 0,
                 stub_rows: int = 4):
        if kind not in ("precomputed", "stub"):
            raise ValueError(f"unknown provider kind '{kind}'")
        self.dim = dim
        self.kind = kind
        self.seed = seed
        self.stub_rows = stub_rows

    def provide(self, image_ref: str | None) -> CueSequence:
        if not image_ref:
            return placeholder(VISUAL, self.dim)
        if self.kind == "stub":
            rng = _stable_rng(image_ref, self.seed)
            mat = rng.standard_normal((self.stub_rows, self.dim)).astype(np.float32)
            return CueSequence(vectors=mat, modality=VISUAL)
        mat = read_feature_matrix(image_ref)
        if mat.shape[1] != self.dim:
            raise ValueError(f"{image_ref}: cue dim {mat.shape[1]} != configured "
                             f"{self.dim}")
        if mat.shape[0] == 1 and not mat.any():
            return placeholder(VISUAL, self.dim)
        return CueSequence(vectors=mat, modality=VISUAL)


class LinguisticProvider:
    """Deterministic per-token stub embeddings with delimiter rows.

    N input tokens become N+2 rows (leading summary row, trailing end row),
    each the token's hash-seeded base vector plus a position tag.
    """

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _token_vec(self, token: str) -> np.ndarray:
        return _stable_rng(f"tok:{token}", self.seed).standard_normal(self.dim)

    def _pos_vec(self, position: int) -> np.ndarray:
        return _stable_rng(f"pos:{position}", self.seed).standard_normal(self.dim)

    def provide(self, text: str | list[str] | None) -> CueSequence:
        if text is None:
            return placeholder(LINGUISTIC, self.dim)
        tokens = text.split() if isinstance(text, str) else list(text)
        if not tokens:
            return placeholder(LINGUISTIC, self.dim)
        rows = [self._token_vec("<cls>")]
        for i, tok in enumerate(tokens):
            rows.append(0.8 * self._token_vec(tok) + 0.2 * self._pos_vec(i))
        rows.append(self._token_vec("<sep>"))
        mat = np.stack(rows).astype(np.float32)
        return CueSequence(vectors=mat, modality=LINGUISTIC)


def init_projection_params(store: ParamStore, rng: np.random.Generator,
                           visual_dim: int, linguistic_dim: int,
                           d_model: int) -> None:
    add_linear(store, rng, "perception.visual_proj", visual_dim, d_model)
    add_linear(store, rng, "perception.linguistic_proj", linguistic_dim, d_model)


def project(cue: CueSequence, store: ParamStore) -> Tensor:
    """Map cue rows to decoder width; the provider output stays a constant."""
    name = f"perception.{cue.modality}_proj"
    return linear(Tensor(cue.vectors), store, name)
