"""Importance scoring for pretrained weights and fine-tuning gradients.

Two per-parameter scores on a common (0, 1) scale:

* generalization importance -- sigmoid(zscore(|pretrained weight|)); large
  magnitude means the parameter carries more of the pretrained behavior.
* specialization importance -- sigmoid(zscore(accumulated |gradient|));
  large accumulated gradient means the parameter matters for the new task.

Single-sample gradients are too noisy to rank parameters, so the gradient
side is an exponential moving accumulator of absolute gradients, updated
once per training step.

The module also computes the importance-profile divergence diagnostic:
cos(|w_pre|, |g|) ** -2 over the concatenated trainable set (or per tensor).
Parallel magnitude profiles give 1; the more the profiles diverge, the
larger the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UninitializedError
from .tensors import FlatTensor, TensorMap, cosine_similarity, sigmoid_array, zscore_map

GENERALIZATION = "generalization"
SPECIALIZATION = "specialization"

# cos of two nonnegative vectors is >= 0 but can be exactly 0; the clamp
# keeps the inverse-square diagnostic finite (0 maps to 1e12).
PID_COS_FLOOR = 1e-6


@dataclass
class ImportanceScores:
    """Per-parameter scores in (0, 1), aligned with the trainable set."""

    scores: TensorMap
    kind: str

    def __post_init__(self):
        if self.kind not in (GENERALIZATION, SPECIALIZATION):
            raise ValueError(f"unknown importance kind {self.kind!r}")


@dataclass
class GradAccumulator:
    """Exponential moving accumulator of absolute gradients.

    First observation seeds the accumulator with |grad| directly (no decay
    toward zero), so masks are meaningful from the first iteration on.
    """

    acc: TensorMap
    beta: float
    initialized: bool = False

    @classmethod
    def empty(cls, like: TensorMap, beta: float = 0.9) -> "GradAccumulator":
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {beta}")
        zeros = like.map_data(np.zeros_like)
        return cls(acc=zeros, beta=beta, initialized=False)


def accumulate_gradient(state: GradAccumulator, grad: TensorMap) -> GradAccumulator:
    """Fold one gradient observation into the accumulator (in place)."""
    state.acc.require_aligned(grad, "accumulate_gradient")
    b = state.beta
    for acc_t, grad_t in zip(state.acc, grad):
        if not state.initialized:
            np.copyto(acc_t.data, np.abs(grad_t.data))
        else:
            np.copyto(acc_t.data, b * acc_t.data + (1.0 - b) * np.abs(grad_t.data))
    state.initialized = True
    return state


def generalization_importance(
    pretrained: TensorMap, scope: str = "per_tensor"
) -> ImportanceScores:
    """sigmoid(zscore(|w_pre|)) per tensor (or with global stats)."""
    magnitudes = pretrained.map_data(np.abs)
    normalized = zscore_map(magnitudes, scope)
    return ImportanceScores(normalized.map_data(sigmoid_array), GENERALIZATION)


def specialization_importance(
    state: GradAccumulator, scope: str = "per_tensor"
) -> ImportanceScores:
    """sigmoid(zscore(acc)); the abs is already folded into accumulation."""
    if not state.initialized:
        raise UninitializedError(
            "specialization importance requested before any gradient was accumulated"
        )
    normalized = zscore_map(state.acc, scope)
    return ImportanceScores(normalized.map_data(sigmoid_array), SPECIALIZATION)


def _pid_from_cos(c: float) -> float:
    return max(c, PID_COS_FLOOR) ** -2


def pid(pretrained: TensorMap, grad: TensorMap) -> float:
    """Importance-profile divergence over the concatenated trainable set."""
    pretrained.require_aligned(grad, "pid")
    w = FlatTensor.of("weight_magnitude", np.abs(pretrained.concat()))
    g = FlatTensor.of("gradient_magnitude", np.abs(grad.concat()))
    return _pid_from_cos(cosine_similarity(w, g))


def pid_per_tensor(pretrained: TensorMap, grad: TensorMap) -> dict[str, float]:
    """Same diagnostic, one value per named tensor."""
    pretrained.require_aligned(grad, "pid")
    out: dict[str, float] = {}
    for wt, gt in zip(pretrained, grad):
        w = wt.with_data(np.abs(wt.data))
        g = gt.with_data(np.abs(gt.data))
        out[wt.name] = _pid_from_cos(cosine_similarity(w, g))
    return out
