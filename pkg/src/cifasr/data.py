"""Corpus manifests, the generic/multimodal mixing rule, synthetic corpora.

Manifests are UTF-8 JSON-lines with records
``{id, features, transcript, image_feat?, context_text?}``; feature and cue
paths are resolved relative to the manifest's directory. A record with no cue
field is "generic", one with at least one cue is "multimodal".
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .frontend import write_feature_file

PAD, EOS, BOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ["[PAD]", "[EOS]", "[BOS]", "[UNK]"]


class ManifestError(ValueError):
    """Malformed manifest or vocabulary file."""


class Vocab:
    """Fixed token table; line number = id, ids 0..3 reserved."""

    def __init__(self, tokens: list[str]):
        if tokens[:4] != RESERVED_TOKENS:
            raise ManifestError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ManifestError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, transcript: str) -> list[int]:
        return [self._ids.get(t, UNK) for t in transcript.split()]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


@dataclass
class ManifestRecord:
    id: str
    features: str
    transcript: str
    image_feat: str | None = None
    context_text: str | None = None

    @property
    def is_multimodal(self) -> bool:
        return self.image_feat is not None or self.context_text is not None

    def to_json(self) -> str:
        doc = {"id": self.id, "features": self.features, "transcript": self.transcript}
        if self.image_feat is not None:
            doc["image_feat"] = self.image_feat
        if self.context_text is not None:
            doc["context_text"] = self.context_text
        return json.dumps(doc, ensure_ascii=False)


def load_manifest(path: str, check_files: bool = True) -> list[ManifestRecord]:
    base = os.path.dirname(os.path.abspath(path))
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            for key in ("id", "features", "transcript"):
                if key not in doc:
                    raise ManifestError(f"{path}:{lineno}: missing field '{key}'")
            rec = ManifestRecord(
                id=str(doc["id"]),
                features=os.path.join(base, doc["features"]),
                transcript=doc["transcript"],
                image_feat=(os.path.join(base, doc["image_feat"])
                            if doc.get("image_feat") else None),
                context_text=doc.get("context_text"),
            )
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id '{rec.id}'")
            seen.add(rec.id)
            if check_files:
                if not os.path.isfile(rec.features):
                    raise ManifestError(f"{path}:{lineno}: missing feature file "
                                        f"{rec.features}")
                if rec.image_feat and not os.path.isfile(rec.image_feat):
                    raise ManifestError(f"{path}:{lineno}: missing cue file "
                                        f"{rec.image_feat}")
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    return records


def write_manifest(path: str, records: list[ManifestRecord]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rel = ManifestRecord(
                id=rec.id,
                features=os.path.relpath(rec.features, base),
                transcript=rec.transcript,
                image_feat=(os.path.relpath(rec.image_feat, base)
                            if rec.image_feat else None),
                context_text=rec.context_text,
            )
            fh.write(rel.to_json() + "\n")


# ---------------------------------------------------------------------------
# mixing rule
# ---------------------------------------------------------------------------


def _fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


@dataclass
class MixPlan:
    generic_manifest: str
    multimodal_manifest: str
    seed: int = 0


def mix(plan: MixPlan) -> list[ManifestRecord]:
    """Blend K = min(Ng, Nm) utterances from each side into a 2K listing.

    Sampling is without replacement, the blend is shuffled, and both steps are
    seeded Fisher-Yates so the listing is reproducible. Generic records keep
    their absent cues and train with placeholders.
    """
    generic = load_manifest(plan.generic_manifest)
    multimodal = load_manifest(plan.multimodal_manifest)
    k = min(len(generic), len(multimodal))
    rng = np.random.default_rng(plan.seed)
    pick_g = _fisher_yates(len(generic), rng)[:k]
    pick_m = _fisher_yates(len(multimodal), rng)[:k]
    blended = [generic[i] for i in pick_g] + [multimodal[i] for i in pick_m]
    order = _fisher_yates(2 * k, rng)
    mixed = [blended[i] for i in order]
    ids = [r.id for r in mixed]
    if len(set(ids)) != len(ids):
        raise ManifestError("generic and multimodal manifests share utterance ids")
    return mixed


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTaskSpec:
    """Prototype-block task with acoustically identical token pairs.

    Tokens of an ambiguous pair share one acoustic prototype exactly; the true
    member is recoverable only from the emitted cues (a visual row encoding the
    utterance position and the pair's sign direction, and the member's surface
    form in the context text). With noise_sigma=0 the features alone therefore
    carry zero information about which member was spoken.
    """

    n_tokens: int = 12
    n_ambiguous_pairs: int = 4
    frames_per_token: int = 8
    feat_dim: int = 16
    noise_sigma: float = 0.0
    cue_dim: int = 16
    min_len: int = 3
    max_len: int = 8
    task_seed: int = 1234

    def __post_init__(self):
        if 2 * self.n_ambiguous_pairs > self.n_tokens:
            raise ValueError("more ambiguous-pair members than tokens")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("bad utterance length range")
        if self.cue_dim < self.max_len + self.n_ambiguous_pairs:
            raise ValueError(f"cue_dim must be >= max_len + n_ambiguous_pairs "
                             f"({self.max_len + self.n_ambiguous_pairs})")

    @property
    def surfaces(self) -> list[str]:
        return [f"w{i:02d}" for i in range(self.n_tokens)]

    def vocab(self) -> Vocab:
        return Vocab(RESERVED_TOKENS + self.surfaces)

    def pair_of(self, tok: int) -> int | None:
        """Index of the ambiguous pair containing token `tok`, if any."""
        return tok // 2 if tok < 2 * self.n_ambiguous_pairs else None

    def prototypes(self) -> np.ndarray:
        """(n_groups, frames_per_token, feat_dim); pair members share a group."""
        rng = np.random.default_rng(self.task_seed)
        n_groups = self.n_tokens - self.n_ambiguous_pairs
        return rng.standard_normal(
            (n_groups, self.frames_per_token, self.feat_dim)).astype(np.float32)

    def group_of(self, tok: int) -> int:
        pair = self.pair_of(tok)
        if pair is not None:
            return pair
        return self.n_ambiguous_pairs + (tok - 2 * self.n_ambiguous_pairs)


def cue_row(spec: SyntheticTaskSpec, position: int, pair: int, member: int) -> np.ndarray:
    """One visual cue row: position one-hot plus a signed pair direction."""
    row = np.zeros(spec.cue_dim, dtype=np.float32)
    row[position] = 1.0
    row[spec.max_len + pair] = 1.0 if member == 0 else -1.0
    return row


def generate_synthetic(spec: SyntheticTaskSpec, n_utts: int, seed: int,
                       out_dir: str, kind: str = "multimodal",
                       id_prefix: str = "utt") -> str:
    """Write a synthetic corpus under `out_dir`; returns the manifest path.

    kind="multimodal": sample over all tokens, emit visual cue files and
    context text. kind="generic": sample only unambiguous tokens, no cues.
    Regeneration with identical (spec, seed) is byte-identical.
    """
    if kind not in ("multimodal", "generic"):
        raise ValueError(f"unknown corpus kind '{kind}'")
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    if kind == "multimodal":
        os.makedirs(os.path.join(out_dir, "cues"), exist_ok=True)

    protos = spec.prototypes()
    surfaces = spec.surfaces
    if kind == "generic":
        candidates = list(range(2 * spec.n_ambiguous_pairs, spec.n_tokens))
        if not candidates:
            raise ValueError("generic corpus needs at least one unambiguous token")
    else:
        candidates = list(range(spec.n_tokens))

    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    for u in range(n_utts):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks = [candidates[int(rng.integers(0, len(candidates)))] for _ in range(length)]
        blocks = [protos[spec.group_of(t)] for t in toks]
        frames = np.concatenate(blocks, axis=0)
        if spec.noise_sigma > 0:
            frames = frames + spec.noise_sigma * rng.standard_normal(
                frames.shape).astype(np.float32)
        uid = f"{id_prefix}{u:05d}"
        feat_path = os.path.join(out_dir, "features", f"{uid}.vlsf")
        write_feature_file(feat_path, frames.astype(np.float32))
        transcript = " ".join(surfaces[t] for t in toks)

        image_feat = None
        context_text = None
        if kind == "multimodal":
            rows = []
            context_words = []
            for pos, t in enumerate(toks):
                pair = spec.pair_of(t)
                if pair is None:
                    continue
                rows.append(cue_row(spec, pos, pair, t % 2))
                context_words.append(surfaces[t])
            cue_mat = np.stack(rows) if rows else np.zeros((1, spec.cue_dim),
                                                           dtype=np.float32)
            image_feat = os.path.join(out_dir, "cues", f"{uid}.vlsf")
            write_feature_file(image_feat, cue_mat)
            if context_words:
                context_text = " ".join(context_words)
        records.append(ManifestRecord(id=uid, features=feat_path,
                                      transcript=transcript,
                                      image_feat=image_feat,
                                      context_text=context_text))

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, records)
    spec.vocab().save(os.path.join(out_dir, "vocab.txt"))
    return manifest_path
