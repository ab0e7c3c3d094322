"""Full model assembly: speech encoder + CIF + cue projections + decoder.

The Model owns the parameter store and the structural forward paths; loss
computation and the optimizer live in the training module, search in the
decoding module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .cif import (
    CifConfig,
    FiredSequence,
    FiringWeights,
    init_cif_params,
    integrate_and_fire,
    predict_weights,
    scale_weights,
)
from .data import BOS, ManifestRecord, Vocab
from .decoder import (
    DecoderConfig,
    FusionPlan,
    ProjectedCues,
    decode_teacher_forced,
    init_decoder_params,
)
from .encoder import AcousticStates, EncoderConfig, ctc_head, encode, init_encoder_params
from .perception import (
    CueSequence,
    LinguisticProvider,
    VisualProvider,
    init_projection_params,
    placeholder,
    project,
)
from .tensor import ParamStore, Tensor

CUE_REGIMES = ("on", "off", "visual", "linguistic")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cif: CifConfig = field(default_factory=CifConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    plan: FusionPlan = field(default_factory=FusionPlan)
    visual_dim: int = 16
    linguistic_dim: int = 16

    def __post_init__(self):
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError(f"encoder d_model {self.encoder.d_model} must equal "
                             f"decoder d_model {self.decoder.d_model} (the fired "
                             f"vectors feed the decoder directly)")


class Model:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, params: ParamStore):
        self.cfg = cfg
        self.vocab = vocab
        self.params = params
        self.bos_id = BOS

    @classmethod
    def build(cls, cfg: ModelConfig, vocab: Vocab, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_encoder_params(store, cfg.encoder, rng, vocab_size=len(vocab))
        init_cif_params(store, cfg.cif, cfg.encoder.d_model, rng)
        init_projection_params(store, rng, cfg.visual_dim, cfg.linguistic_dim,
                               cfg.decoder.d_model)
        init_decoder_params(store, cfg.decoder, cfg.plan.num_blocks, rng)
        return cls(cfg, vocab, store)

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def acoustic_forward(self, feat, rng=None, train: bool = False
                         ) -> tuple[AcousticStates, FiringWeights]:
        states = encode(feat, self.cfg.encoder, self.params, rng=rng, train=train)
        weights = predict_weights(states, self.params, self.cfg.cif)
        return states, weights

    def fire_teacher(self, states: AcousticStates, weights: FiringWeights,
                     target_len: int) -> FiredSequence:
        """Teacher-forced firing: weights scaled so exactly target_len steps fire."""
        scaled = scale_weights(weights, target_len)
        return integrate_and_fire(states, scaled.alpha_scaled,
                                  threshold=self.cfg.cif.threshold,
                                  tail_threshold=self.cfg.cif.tail_threshold,
                                  firing_cap=self.cfg.cif.cap_factor
                                  * states.num_states)

    def fire_inference(self, states: AcousticStates,
                       weights: FiringWeights) -> FiredSequence:
        """Inference firing on the raw weights; the count is the model's own."""
        return integrate_and_fire(states, weights.alpha,
                                  threshold=self.cfg.cif.threshold,
                                  tail_threshold=self.cfg.cif.tail_threshold,
                                  firing_cap=self.cfg.cif.cap_factor
                                  * states.num_states)

    def project_cues(self, visual: CueSequence, linguistic: CueSequence
                     ) -> ProjectedCues:
        return ProjectedCues(visual=project(visual, self.params),
                             linguistic=project(linguistic, self.params))

    def teacher_logprobs(self, fired: FiredSequence, targets: list[int],
                         cues: ProjectedCues, rng=None, train: bool = False,
                         capture_attention: bool = False):
        return decode_teacher_forced(fired, targets, cues, self.cfg.plan,
                                     self.cfg.decoder, self.params,
                                     bos_id=self.bos_id, rng=rng, train=train,
                                     capture_attention=capture_attention)

    def ctc_logprobs(self, states: AcousticStates) -> Tensor:
        return ctc_head(states, self.params)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, directory: str) -> None:
        self.params.save(directory)

    def load_weights(self, directory: str) -> None:
        arrays = ParamStore.load_arrays(directory)
        mine = set(self.params.names())
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ValueError(f"checkpoint does not match model: "
                             f"missing={missing[:8]} extra={extra[:8]}")
        for name, arr in arrays.items():
            p = self.params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model "
                                 f"{p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=tn.default_dtype())


def mask_cues(visual: CueSequence, linguistic: CueSequence, regime: str,
              visual_dim: int, linguistic_dim: int
              ) -> tuple[CueSequence, CueSequence]:
    """Apply a cue regime by substituting placeholders for masked modalities."""
    if regime not in CUE_REGIMES:
        raise ValueError(f"unknown cue regime '{regime}' (use one of {CUE_REGIMES})")
    if regime in ("off", "linguistic"):
        visual = placeholder("visual", visual_dim)
    if regime in ("off", "visual"):
        linguistic = placeholder("linguistic", linguistic_dim)
    return visual, linguistic


class CueLoader:
    """Materializes a record's cues through the configured providers."""

    def __init__(self, visual: VisualProvider, linguistic: LinguisticProvider):
        self.visual = visual
        self.linguistic = linguistic

    def load(self, record: ManifestRecord, regime: str = "on"
             ) -> tuple[CueSequence, CueSequence]:
        vis = self.visual.provide(record.image_feat)
        lin = self.linguistic.provide(record.context_text)
        return mask_cues(vis, lin, regime, self.visual.dim, self.linguistic.dim)
