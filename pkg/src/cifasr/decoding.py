"""Inference: fixed-length beam search, error rates, alignment extraction.

The CIF firing count fixes every hypothesis's length, so the beam runs a known
number of steps with no stop token; ties break on (score, token id) so results
are platform-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .decoder import decode_prefix
from .tensor import Tensor, no_grad


@dataclass
class Hypothesis:
    tokens: list[int]
    step_logprobs: list[float]
    total_logprob: float
    boundaries: list[tuple[int, int]] = field(default_factory=list)
    subsampling_factor: int = 1
    num_input_frames: int = 0
    visual_attention: np.ndarray | None = None
    linguistic_attention: np.ndarray | None = None
    empty: bool = False


@dataclass
class ErrorReport:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            raise ValueError("empty reference set")
        return self.edits / self.ref_len


def beam_search(model, feat, cues, beam: int = 10,
                capture_attention: bool = False) -> list[Hypothesis]:
    """Ranked hypotheses over the fired step count (descending log-prob).

    `cues` is the (visual, linguistic) CueSequence pair; beam=1 is greedy.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    with no_grad():
        states, weights = model.acoustic_forward(feat, train=False)
        fired = model.fire_inference(states, weights)
        projected = model.project_cues(*cues)
        n_steps = fired.num_steps
        if n_steps == 0:
            return [Hypothesis(tokens=[], step_logprobs=[], total_logprob=0.0,
                               subsampling_factor=states.subsampling_factor,
                               num_input_frames=states.num_input_frames,
                               empty=True)]

        c_rows = fired.integrated
        live: list[tuple[float, list[int], list[float]]] = [(0.0, [], [])]
        for i in range(1, n_steps + 1):
            candidates = []
            for score, toks, lps in live:
                prev = [model.bos_id] + toks
                logp, _ = decode_prefix(c_rows[:i], prev, projected,
                                        model.cfg.plan, model.cfg.decoder,
                                        model.params)
                row = logp.data[i - 1]
                top = np.argsort(-row, kind="stable")[:min(beam, row.size)]
                for tok in top:
                    lp = float(row[tok])
                    candidates.append((score + lp, toks + [int(tok)], lps + [lp]))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            live = candidates[:beam]

        hyps = []
        for score, toks, lps in live:
            maps = {"visual": None, "linguistic": None}
            if capture_attention:
                prev = [model.bos_id] + toks[:-1]
                _, maps = decode_prefix(c_rows, prev, projected, model.cfg.plan,
                                        model.cfg.decoder, model.params,
                                        capture_attention=True)
            hyps.append(Hypothesis(
                tokens=toks, step_logprobs=lps, total_logprob=score,
                boundaries=list(fired.boundaries),
                subsampling_factor=states.subsampling_factor,
                num_input_frames=states.num_input_frames,
                visual_attention=maps["visual"],
                linguistic_attention=maps["linguistic"]))
    return hyps


def greedy_decode(model, feat, cues, capture_attention: bool = False) -> Hypothesis:
    return beam_search(model, feat, cues, beam=1,
                       capture_attention=capture_attention)[0]


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def align_edits(ref: list, hyp: list) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of one minimal-cost alignment."""
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    s = d = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + \
                (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins_count += 1
            j -= 1
    return s, d, ins_count


def error_rate(refs: list[list], hyps: list[list]) -> ErrorReport:
    """Corpus error rate: summed unit-cost edits over summed reference length."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs or all(len(r) == 0 for r in refs):
        raise ValueError("empty reference set")
    total_s = total_d = total_i = total_len = 0
    for ref, hyp in zip(refs, hyps):
        s, d, i = align_edits(ref, hyp)
        total_s += s
        total_d += d
        total_i += i
        total_len += len(ref)
    return ErrorReport(substitutions=total_s, deletions=total_d,
                       insertions=total_i, ref_len=total_len)


def decode_corpus(model, records, vocab, cue_loader, regime: str = "on",
                  beam: int = 10, split_chars: bool = False):
    """Decode every record; returns (refs, hyps) token-id sequences."""
    from .frontend import read_feature_file
    refs, hyps = [], []
    for rec in records:
        feat = read_feature_file(rec.features, source_id=rec.id)
        cues = cue_loader.load(rec, regime)
        hyp = beam_search(model, feat, cues, beam=beam)[0]
        if split_chars:
            refs.append(list(rec.transcript.replace(" ", "")))
            hyps.append(list(vocab.decode(hyp.tokens).replace(" ", "")))
        else:
            refs.append(vocab.encode(rec.transcript))
            hyps.append(hyp.tokens)
    return refs, hyps


# ---------------------------------------------------------------------------
# alignment export
# ---------------------------------------------------------------------------


ALIGNMENT_SCHEMA = {
    "type": "object",
    "required": ["utterance_id", "frame_shift_ms", "subsampling_factor", "tokens"],
    "properties": {
        "utterance_id": {"type": "string"},
        "frame_shift_ms": {"type": "number"},
        "subsampling_factor": {"type": "integer", "minimum": 1},
        "total_logprob": {"type": "number"},
        "tokens": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["token", "token_id", "logprob", "frame_span"],
                "properties": {
                    "token": {"type": "string"},
                    "token_id": {"type": "integer", "minimum": 0},
                    "logprob": {"type": "number"},
                    "frame_span": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0},
                        "minItems": 2, "maxItems": 2,
                    },
                    "visual_attention": {"type": "array"},
                    "linguistic_attention": {"type": "array"},
                },
            },
        },
    },
}


def _top_rows(weights: np.ndarray, k: int) -> list[dict]:
    order = np.argsort(-weights, kind="stable")[:k]
    return [{"row": int(r), "weight": float(weights[r])} for r in order]


def extract_alignment(hyp: Hypothesis, vocab, utterance_id: str = "",
                      frame_shift_ms: float = 10.0, top_k: int = 5) -> dict:
    """Per-token acoustic spans and top-attended cue rows, as a JSON document.

    CIF boundaries (encoder frames) map back through the subsampling factor to
    the original frame grid.
    """
    if hyp.tokens and hyp.visual_attention is None and \
            hyp.linguistic_attention is None:
        raise ValueError("hypothesis was decoded without attention capture")
    f = hyp.subsampling_factor
    tokens = []
    for i, tok in enumerate(hyp.tokens):
        start_u, end_u = hyp.boundaries[i]
        span = [int(start_u * f), int(min(end_u * f, hyp.num_input_frames)
                                      if hyp.num_input_frames else end_u * f)]
        entry = {
            "token": vocab.tokens[tok] if vocab is not None else str(tok),
            "token_id": int(tok),
            "logprob": float(hyp.step_logprobs[i]),
            "frame_span": span,
        }
        if hyp.visual_attention is not None:
            entry["visual_attention"] = _top_rows(hyp.visual_attention[i], top_k)
        if hyp.linguistic_attention is not None:
            entry["linguistic_attention"] = _top_rows(hyp.linguistic_attention[i],
                                                      top_k)
        tokens.append(entry)
    return {
        "utterance_id": utterance_id,
        "frame_shift_ms": frame_shift_ms,
        "subsampling_factor": int(f),
        "total_logprob": float(hyp.total_logprob),
        "tokens": tokens,
    }


def write_attention_pgm(path: str, weights: np.ndarray) -> None:
    """Plain (P2) PGM raster of an attention map, 0..255 grayscale."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got {w.shape}")
    top = w.max() if w.size and w.max() > 0 else 1.0
    pix = np.round(255 * w / top).astype(int)
    lines = ["P2", f"{w.shape[1]} {w.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
