"""Continuous integrate-and-fire: weight head, firing recurrence, quantity loss.

Per-frame weights are accumulated left to right; whenever the accumulator
reaches the threshold, the step "fires": the portion of the current frame's
weight that closes the step contributes there and the remainder carries into
the next step, so a boundary frame is shared by both neighbours. Equivalently,
laying the weights end to end on a line, step i owns the interval
[(i-1)*beta, i*beta] and frame u the interval [W_{u-1}, W_u] of cumulative
weight; each fired vector is the overlap-weighted sum of frames. The
implementation uses that interval form (a cumsum and a clipped min/max), which
is value- and gradient-identical to the recurrence away from the firing
discontinuities and differentiable in both the states and the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import add_linear, linear, xavier_uniform
from .tensor import ParamStore, Tensor


class FiringCapError(RuntimeError):
    """Runaway weights fired more steps than the configured cap."""


@dataclass
class CifConfig:
    conv_channels: int = 256
    conv_kernel: int = 3
    threshold: float = 1.0
    tail_threshold: float = 0.5
    cap_factor: int = 4  # firing cap = cap_factor * U


@dataclass
class FiringWeights:
    """Sigmoid weights per encoder frame, optionally scaled to a target sum."""

    alpha: Tensor
    threshold: float = 1.0
    alpha_scaled: Tensor | None = None


@dataclass
class FiredSequence:
    """Integrated vectors C plus who fired when.

    boundaries[i] is the half-open frame interval of step i over [0, U);
    attributions[i] lists (frame, weight_used) with the weights summing to the
    threshold for every non-tail step.
    """

    integrated: Tensor
    boundaries: list[tuple[int, int]]
    attributions: list[list[tuple[int, float]]]

    @property
    def num_steps(self) -> int:
        return self.integrated.shape[0]


def init_cif_params(store: ParamStore, cfg: CifConfig, d_model: int,
                    rng: np.random.Generator) -> None:
    k = cfg.conv_kernel
    store.create("cif.conv.w", xavier_uniform(rng, k * d_model, cfg.conv_channels,
                                              shape=(cfg.conv_channels, d_model, k)))
    store.create("cif.conv.b", np.zeros(cfg.conv_channels))
    add_linear(store, rng, "cif.fc", cfg.conv_channels, 1)


def predict_weights(states, store: ParamStore, cfg: CifConfig) -> FiringWeights:
    """Length-U weight vector in (0, 1): conv over time, FC, sigmoid."""
    h = states.states if hasattr(states, "states") else states
    x = tn.relu(tn.conv1d(h, store["cif.conv.w"], store["cif.conv.b"],
                          stride=1, padding=cfg.conv_kernel // 2))
    alpha = tn.sigmoid(tn.reshape(linear(x, store, "cif.fc"), (-1,)))
    return FiringWeights(alpha=alpha, threshold=cfg.threshold)


def scale_weights(weights: FiringWeights, target_len: int) -> FiringWeights:
    """Rescale so the weights sum to target_len (teacher-forced step count)."""
    if target_len < 1:
        raise ValueError(f"target length must be >= 1, got {target_len}")
    total = tn.sum_(weights.alpha)
    if total.item() <= 0.0:
        raise ValueError("cannot scale weights with zero sum")
    scaled = (weights.alpha * float(target_len)) / total
    return FiringWeights(alpha=weights.alpha, threshold=weights.threshold,
                         alpha_scaled=scaled)


def quantity_loss(weights: FiringWeights, target_len: int) -> Tensor:
    """|sum(alpha) - target_len| on the unscaled weights."""
    return tn.abs_(tn.sum_(weights.alpha) - float(target_len))


def integrate_and_fire(states, weights: Tensor, threshold: float = 1.0,
                       tail_threshold: float = 0.5,
                       firing_cap: int | None = None) -> FiredSequence:
    """Run the firing recurrence; returns one integrated vector per step.

    `weights` may exceed 1 per frame (scaled training weights), in which case
    a frame can close several steps. After the last frame a residual
    accumulation >= tail_threshold fires one final step from the remainder.
    """
    h = states.states if hasattr(states, "states") else states
    u = h.shape[0]
    if weights.shape != (u,):
        raise ValueError(f"weights shape {weights.shape} vs {u} frames")
    if np.any(weights.data < 0):
        raise ValueError("weights must be non-negative")
    cap = firing_cap if firing_cap is not None else 4 * u

    cum = tn.cumsum(weights)
    total = float(cum.data[-1])
    full = int(np.floor(total / threshold + 1e-9))
    residual = total - full * threshold
    tail = residual >= tail_threshold and residual > 0
    n_steps = full + (1 if tail else 0)
    if n_steps > cap:
        raise FiringCapError(f"{n_steps} firings exceed cap {cap} "
                             f"(total weight {total:.3f})")
    if n_steps == 0:
        return FiredSequence(integrated=Tensor(np.zeros((0, h.shape[1]))),
                             boundaries=[], attributions=[])

    # step i owns [lo_i, hi_i] of cumulative weight; the last bound is the
    # tensor total so tail/rounding remainders keep their gradient path
    lo_vals = threshold * np.arange(n_steps, dtype=np.float64)
    lo = Tensor(lo_vals[:, None])
    if tail or total < full * threshold:
        hi = tn.concat([Tensor(threshold * np.arange(1, n_steps, dtype=np.float64)),
                        cum[u - 1:u]], axis=0)
    else:
        hi = Tensor(threshold * np.arange(1, n_steps + 1, dtype=np.float64))
    hi = tn.reshape(hi, (n_steps, 1))

    cum_prev = tn.concat([Tensor([0.0]), cum[:u - 1]], axis=0)
    upper = tn.minimum(tn.reshape(cum, (1, u)), hi)
    lower = tn.maximum(tn.reshape(cum_prev, (1, u)), lo)
    contrib = tn.relu(upper - lower)  # (n_steps, U) weight attribution
    integrated = contrib @ h

    boundaries: list[tuple[int, int]] = []
    attributions: list[list[tuple[int, float]]] = []
    eps = 1e-9
    for i in range(n_steps):
        row = contrib.data[i]
        nz = np.where(row > eps)[0]
        if nz.size == 0:  # zero-weight frames inside an empty span
            prev_end = boundaries[-1][1] if boundaries else 0
            boundaries.append((prev_end, prev_end))
            attributions.append([])
            continue
        boundaries.append((int(nz[0]), int(nz[-1]) + 1))
        attributions.append([(int(j), float(row[j])) for j in nz])
    return FiredSequence(integrated=integrated, boundaries=boundaries,
                         attributions=attributions)
