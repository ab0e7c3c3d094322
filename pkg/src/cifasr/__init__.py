"""Multimodal ASR with a continuous integrate-and-fire speech encoder.

Speech goes through a conformer-style acoustic encoder and a CIF module that
fires one integrated vector per output token; a fusion decoder consumes those
vectors one-by-one while cross-attending to optional visual and linguistic cue
sequences. Training combines label-smoothed cross entropy, an auxiliary CTC
loss, and a quantity loss on the CIF weights.
"""

__version__ = "0.1.0"
