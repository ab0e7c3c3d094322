"""Objective, optimizer, and the two-phase training driver.

The total objective is ce_weight * CE + ctc_weight * CTC + qua_weight * QUA:
label-smoothed cross entropy over the teacher-forced decoder outputs, the CTC
marginal over the encoder's auxiliary head, and the L1 quantity loss tying the
unscaled firing weights to the target token count. Teacher forcing uses the
scaled weights so step counts match the transcript; the quantity loss sees the
raw weights.

Phases: "pretrain" trains on a generic corpus with placeholder cues;
"mixed" initializes the speech encoder and CIF from a pretrain checkpoint,
freshly seeds everything else, and trains on the blended corpus.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .cif import quantity_loss
from .data import ManifestRecord, Vocab
from .frontend import SpecAugmentPolicy, read_feature_file, spec_augment
from .model import CueLoader, Model, ModelConfig
from .tensor import ParamStore, Tensor, backward, custom_op

log = logging.getLogger(__name__)

CTC_SENTINEL = 1e9  # stands in for +inf on infeasible utterances; carries no graph


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    label_smoothing: float = 0.1
    ce_weight: float = 1.0
    ctc_weight: float = 0.5
    qua_weight: float = 1.0
    batch_size: int = 8
    max_epochs: int = 20
    seed: int = 0
    dropout: float = 0.1
    cues: str = "on"
    specaugment: bool = False
    max_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        for w in (self.ce_weight, self.ctc_weight, self.qua_weight):
            if w < 0:
                raise ValueError("loss weights must be >= 0")


@dataclass
class PhasePlan:
    phase: str = "pretrain"
    init_from: str | None = None
    transfer_scope: tuple[str, ...] = ("encoder.", "cif.")
    allow_uninit: bool = False

    def __post_init__(self):
        if self.phase not in ("pretrain", "mixed"):
            raise ValueError(f"unknown phase '{self.phase}'")
        if self.phase == "mixed" and not self.init_from and not self.allow_uninit:
            raise ValueError("mixed phase needs an init checkpoint "
                             "(or an explicit allow_uninit override)")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def ce_label_smoothed(logprobs: Tensor, targets: list[int], eps: float) -> Tensor:
    """Mean over steps of -sum_v q(v) log p(v), q = (1-eps)*onehot + eps/V."""
    n_steps, vocab = logprobs.shape
    if len(targets) != n_steps:
        raise ValueError(f"{n_steps} rows vs {len(targets)} targets")
    q = np.full((n_steps, vocab), eps / vocab)
    q[np.arange(n_steps), targets] += 1.0 - eps
    return tn.scale(tn.sum_(logprobs * Tensor(q)), -1.0 / n_steps)


def _extended_labels(targets: list[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(targets) + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


def min_ctc_frames(targets: list[int]) -> int:
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    return len(targets) + repeats


def ctc_loss(logprobs: Tensor, targets: list[int],
             blank: int | None = None) -> tuple[Tensor, bool]:
    """-log P(targets | logprobs) by the forward DP over blank-augmented labels.

    Returns (loss, feasible). An infeasible utterance (too few frames for the
    label sequence) yields a large constant sentinel with no gradient and
    feasible=False. The gradient of the feasible loss is the standard
    alpha-beta occupancy, computed in log space.
    """
    u, width = logprobs.shape
    blank = width - 1 if blank is None else blank
    for t in targets:
        if not 0 <= t < width or t == blank:
            raise ValueError(f"target id {t} outside vocabulary (blank={blank})")
    if u < min_ctc_frames(targets):
        return Tensor(np.asarray(CTC_SENTINEL)), False

    lp = logprobs.data.astype(np.float64)
    ext = _extended_labels(targets, blank)
    s_len = ext.size
    neg_inf = -np.inf

    # alpha[t, s]: log-prob of prefixes ending in state s at frame t
    alpha = np.full((u, s_len), neg_inf)
    alpha[0, 0] = lp[0, blank]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    with np.errstate(invalid="ignore"):
        for t in range(1, u):
            stay = alpha[t - 1]
            step = np.concatenate(([neg_inf], alpha[t - 1, :-1]))
            skip = np.concatenate(([neg_inf, neg_inf], alpha[t - 1, :-2]))
            skip = np.where(skip_ok, skip, neg_inf)
            alpha[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]
        log_z = np.logaddexp(alpha[u - 1, s_len - 1],
                             alpha[u - 1, s_len - 2] if s_len > 1 else neg_inf)

        # beta[t, s]: log-prob of suffixes starting at state s (emission at t included)
        beta = np.full((u, s_len), neg_inf)
        beta[u - 1, s_len - 1] = lp[u - 1, ext[s_len - 1]]
        if s_len > 1:
            beta[u - 1, s_len - 2] = lp[u - 1, ext[s_len - 2]]
        for t in range(u - 2, -1, -1):
            stay = beta[t + 1]
            step = np.concatenate((beta[t + 1, 1:], [neg_inf]))
            skip = np.concatenate((beta[t + 1, 2:], [neg_inf, neg_inf]))
            skip = np.where(np.concatenate((skip_ok[2:], [False, False])), skip, neg_inf)
            beta[t] = np.logaddexp(np.logaddexp(stay, step), skip) + lp[t, ext]

        occupancy = alpha + beta - lp[:, ext] - log_z  # log P(state s at t | targets)

    def bwd(g):
        grad = np.zeros_like(logprobs.data, dtype=np.float64)
        occ = np.exp(occupancy)
        for s in range(s_len):
            grad[:, ext[s]] -= occ[:, s]
        return (float(g) * grad.astype(logprobs.data.dtype),)

    loss = custom_op("ctc_loss", -log_z, (logprobs,), bwd)
    return loss, True


def total_loss(batch, model: Model, cfg: TrainConfig, rng=None, train: bool = True):
    """Weighted objective over a batch of (features, targets, cue pair) items.

    Returns (scalar Tensor, components dict). Infeasible CTC components are
    dropped from the utterance total and counted in components["ctc_skipped"].
    """
    if not batch:
        raise ValueError("empty batch")
    parts = []
    sums = {"ce": 0.0, "ctc": 0.0, "qua": 0.0}
    skipped = 0
    for feat, targets, (vis, lin) in batch:
        states, weights = model.acoustic_forward(feat, rng=rng, train=train)
        qua = quantity_loss(weights, len(targets))
        fired = model.fire_teacher(states, weights, len(targets))
        cues = model.project_cues(vis, lin)
        logp, _ = model.teacher_logprobs(fired, targets, cues, rng=rng, train=train)
        ce = ce_label_smoothed(logp, targets, cfg.label_smoothing)
        utt = tn.scale(ce, cfg.ce_weight) + tn.scale(qua, cfg.qua_weight)
        if cfg.ctc_weight > 0:
            ctc, feasible = ctc_loss(model.ctc_logprobs(states), targets)
            if feasible:
                utt = utt + tn.scale(ctc, cfg.ctc_weight)
                sums["ctc"] += ctc.item()
            else:
                skipped += 1
                log.warning("CTC infeasible: %d frames for %d labels",
                            states.num_states, len(targets))
        parts.append(utt)
        sums["ce"] += ce.item()
        sums["qua"] += qua.item()
    n = len(batch)
    total = tn.scale(tn.sum_(tn.concat([tn.reshape(p, (1,)) for p in parts])),
                     1.0 / n)
    components = {k: v / n for k, v in sums.items()}
    components["total"] = total.item()
    components["ctc_skipped"] = skipped
    return total, components


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, params: ParamStore, lr: float = 3e-4,
                 weight_decay: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, max_grad_norm: float = 0.0) -> None:
        active = [(n, p) for n, p in self.params.items() if p.grad is not None]
        if not active:
            raise RuntimeError("optimizer step with no gradients populated")
        if max_grad_norm > 0:
            norm = np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in active))
            if norm > max_grad_norm:
                clip = max_grad_norm / norm
                for _, p in active:
                    p.grad = p.grad * clip
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name, p in active:
            g = p.grad.astype(np.float64)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            new = p.data.astype(np.float64) - self.lr * update \
                - self.lr * self.weight_decay * p.data.astype(np.float64)
            p.data = new.astype(tn.default_dtype())

    def zero_grad(self) -> None:
        self.params.zero_grad()


# ---------------------------------------------------------------------------
# phase driver
# ---------------------------------------------------------------------------


def transfer_parameters(model: Model, checkpoint_dir: str,
                        scope: tuple[str, ...]) -> list[str]:
    """Overwrite scope-matching parameters from a checkpoint; others stay fresh.

    Returns the transferred names; raises if the scope does not line up with
    the checkpoint, listing every unmatched name.
    """
    arrays = ParamStore.load_arrays(checkpoint_dir)
    wanted = [n for n in model.params.names()
              if any(n.startswith(pfx) for pfx in scope)]
    missing = [n for n in wanted if n not in arrays]
    mismatched = [n for n in wanted if n in arrays
                  and tuple(arrays[n].shape) != tuple(model.params[n].data.shape)]
    if missing or mismatched:
        raise ValueError(f"transfer scope mismatch: missing from checkpoint="
                         f"{missing}, shape mismatch={mismatched}")
    for n in wanted:
        model.params[n].data = np.ascontiguousarray(arrays[n],
                                                    dtype=tn.default_dtype())
    return wanted


def _batches(records: list[ManifestRecord], lengths: dict[str, int],
             batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed batching with a deterministically shuffled batch order."""
    order = sorted(range(len(records)), key=lambda i: (lengths[records[i].id], i))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def run_phase(plan: PhasePlan, records: list[ManifestRecord], vocab: Vocab,
              model_cfg: ModelConfig, cfg: TrainConfig, out_dir: str,
              cue_loader: CueLoader, dev_records: list[ManifestRecord] | None = None,
              dev_beam: int = 1) -> Model:
    """Train one phase; writes ckpt/last, ckpt/final and logs.jsonl under out_dir.

    An existing logs.jsonl plus ckpt/last resumes, continuing epoch numbering.
    """
    os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
    logs_path = os.path.join(out_dir, "logs.jsonl")
    last_dir = os.path.join(out_dir, "ckpt", "last")
    final_dir = os.path.join(out_dir, "ckpt", "final")

    model = Model.build(model_cfg, vocab, seed=cfg.seed)
    start_epoch = 1
    if os.path.isfile(logs_path) and os.path.isdir(last_dir):
        with open(logs_path, encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if lines:
            start_epoch = lines[-1]["epoch"] + 1
            model.load_weights(last_dir)
            log.info("resuming at epoch %d", start_epoch)
    elif plan.phase == "mixed" and plan.init_from:
        transferred = transfer_parameters(model, plan.init_from, plan.transfer_scope)
        log.info("transferred %d parameters from %s", len(transferred), plan.init_from)

    regime = "off" if plan.phase == "pretrain" else cfg.cues
    optim = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    drop_rng = np.random.default_rng(np.random.PCG64(cfg.seed + 0x5EED))

    feats = {r.id: read_feature_file(r.features, source_id=r.id) for r in records}
    lengths = {rid: f.num_frames for rid, f in feats.items()}
    targets = {r.id: vocab.encode(r.transcript) for r in records}

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng(np.random.PCG64((cfg.seed << 16) + epoch))
        sums = {"ce": 0.0, "ctc": 0.0, "qua": 0.0, "total": 0.0}
        skipped = 0
        n_batches = 0
        for batch_idx in _batches(records, lengths, cfg.batch_size, shuffle_rng):
            batch = []
            for i in batch_idx:
                rec = records[i]
                feat = feats[rec.id]
                if cfg.specaugment:
                    policy = SpecAugmentPolicy(
                        seed=int(shuffle_rng.integers(0, 2 ** 31)))
                    feat = spec_augment(feat, policy)
                batch.append((feat, targets[rec.id], cue_loader.load(rec, regime)))
            loss, comps = total_loss(batch, model, cfg, rng=drop_rng, train=True)
            backward(loss)
            optim.step(max_grad_norm=cfg.max_grad_norm)
            optim.zero_grad()
            for k in sums:
                sums[k] += comps[k]
            skipped += comps["ctc_skipped"]
            n_batches += 1

        dev_err = None
        if dev_records:
            dev_err = _dev_error(model, dev_records, vocab, cue_loader, regime,
                                 dev_beam)
        entry = {"epoch": epoch,
                 **{k: sums[k] / n_batches for k in ("ce", "ctc", "qua", "total")},
                 "ctc_skipped": skipped,
                 "dev_error_rate": dev_err,
                 "wall_ms": int(1000 * (time.perf_counter() - t0))}
        with open(logs_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")
        model.save(last_dir)
        log.info("epoch %d: total %.4f (ce %.4f ctc %.4f qua %.4f)%s",
                 epoch, entry["total"], entry["ce"], entry["ctc"], entry["qua"],
                 f" dev {dev_err:.3f}" if dev_err is not None else "")

    if os.path.isdir(final_dir):
        shutil.rmtree(final_dir)
    model.save(final_dir)
    return model


def _dev_error(model, records, vocab, cue_loader, regime, beam):
    from .decoding import decode_corpus, error_rate
    refs, hyps = decode_corpus(model, records, vocab, cue_loader, regime, beam=beam)
    return error_rate(refs, hyps).rate
