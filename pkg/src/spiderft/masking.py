"""Update-mask construction and weight merging.

The selection rule is the importance comparison G > I (strict; ties keep
the pretrained value).  Selected entries either get a hard 1 (binary), the
discrepancy weight G / (G + I) (weighted), or that weight rescaled by the
mean of the selected entries and capped at 1 (rescaled).  After every
optimizer step the model is pulled back toward the pretrained weights:

    w  <-  w * M + w_pre * (1 - M)

Random baselines live here too: the half-block mask (a fresh random half
of the named tensors each iteration) and the drop-and-rescale transform on
delta parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .importance import GENERALIZATION, SPECIALIZATION, ImportanceScores
from .tensors import FlatTensor, TensorMap, masked_mean

logger = logging.getLogger(__name__)

MASK_VARIANTS = ("binary", "weighted", "rescaled", "random_half", "random_dare")


@dataclass
class UpdateMask:
    """Per-tensor update weights in [0, 1]."""

    mask: TensorMap
    variant: str
    empty_selection: bool = False

    def __post_init__(self):
        if self.variant not in MASK_VARIANTS:
            raise ValueError(f"unknown mask variant {self.variant!r}")

    @property
    def density(self) -> float:
        """Fraction of nonzero entries across all tensors."""
        total = self.mask.total_size
        if total == 0:
            return 0.0
        nonzero = sum(int(np.count_nonzero(t.data)) for t in self.mask)
        return nonzero / total


def _check_kinds(g: ImportanceScores, i: ImportanceScores) -> None:
    if g.kind != SPECIALIZATION or i.kind != GENERALIZATION:
        raise ValueError(
            f"mask expects (specialization, generalization) scores, "
            f"got ({g.kind!r}, {i.kind!r})"
        )


def binary_mask(g: ImportanceScores, i: ImportanceScores) -> UpdateMask:
    """1 where G > I (strict), else 0."""
    _check_kinds(g, i)
    mask = g.scores.zip_data(
        i.scores, lambda gv, iv: (gv > iv).astype(np.float64), "binary_mask"
    )
    return UpdateMask(mask, "binary")


def weighted_mask(g: ImportanceScores, i: ImportanceScores) -> UpdateMask:
    """G / (G + I) where G > I, else 0; nonzero entries land in (0.5, 1)."""
    _check_kinds(g, i)
    mask = g.scores.zip_data(
        i.scores,
        lambda gv, iv: np.where(gv > iv, gv / (gv + iv), 0.0),
        "weighted_mask",
    )
    return UpdateMask(mask, "weighted")


def rescale_mask(m: UpdateMask, scope: str = "per_tensor") -> UpdateMask:
    """Divide selected entries by their mean and cap at 1.

    The mean is taken over the nonzero entries, per tensor by default or
    over the whole map with scope="global".  A mask with no selected
    entries is returned unchanged (flagged, and logged as a warning).
    """
    if m.variant != "weighted":
        raise ValueError(f"rescale_mask expects a weighted mask, got {m.variant!r}")

    if scope == "global":
        mean, empty = masked_mean(FlatTensor.of("mask_concat", m.mask.concat()))
        if empty:
            logger.warning("rescale_mask: empty selection, mask left all-zero")
            return UpdateMask(m.mask.copy(), "rescaled", empty_selection=True)
        rescaled = m.mask.map_data(
            lambda d: np.where(d != 0.0, np.minimum(1.0, d / mean), 0.0)
        )
        return UpdateMask(rescaled, "rescaled")

    if scope != "per_tensor":
        raise ValueError(f"unknown normalization scope {scope!r}")

    out = []
    any_selected = False
    for t in m.mask:
        mean, empty = masked_mean(t)
        if empty:
            out.append(t.copy())
            continue
        any_selected = True
        out.append(t.with_data(np.where(t.data != 0.0, np.minimum(1.0, t.data / mean), 0.0)))
    if not any_selected:
        logger.warning("rescale_mask: empty selection, mask left all-zero")
    return UpdateMask(TensorMap.from_tensors(out), "rescaled", empty_selection=not any_selected)


def merge(current: TensorMap, pretrained: TensorMap, m: UpdateMask) -> TensorMap:
    """w * M + w_pre * (1 - M), elementwise."""
    current.require_aligned(pretrained, "merge")
    current.require_aligned(m.mask, "merge")
    merged = []
    for w, w_pre, mt in zip(current, pretrained, m.mask):
        merged.append(w.with_data(w.data * mt.data + w_pre.data * (1.0 - mt.data)))
    return TensorMap.from_tensors(merged)


def random_half_mask(shape_of: TensorMap, rng_seed: int) -> UpdateMask:
    """All-ones masks on a uniformly random floor(B/2) of the B named tensors.

    Each named tensor is one selectable block (the toy-scale analog of the
    per-layer parameter blocks that half fine-tuning draws from).
    """
    rng = np.random.default_rng(rng_seed)
    names = shape_of.names
    chosen = set(rng.choice(len(names), size=len(names) // 2, replace=False).tolist())
    tensors = [
        t.with_data(np.ones(t.size) if idx in chosen else np.zeros(t.size))
        for idx, t in enumerate(shape_of)
    ]
    return UpdateMask(TensorMap.from_tensors(tensors), "random_half")


def dare_mask_and_rescale(delta: TensorMap, drop_p: float, rng_seed: int) -> TensorMap:
    """Drop each delta entry with probability drop_p, rescale survivors.

    Survivors are multiplied by 1 / (1 - drop_p), keeping the expected
    delta unchanged.  drop_p = 0 returns the delta untouched.
    """
    if not 0.0 <= drop_p < 1.0:
        raise ValueError(f"drop_p must be in [0, 1), got {drop_p}")
    if drop_p == 0.0:
        return delta.copy()
    rng = np.random.default_rng(rng_seed)
    keep = UpdateMask(
        delta.map_data(lambda d: (rng.random(d.size) >= drop_p).astype(np.float64)),
        "random_dare",
    )
    scale = 1.0 / (1.0 - drop_p)
    return delta.zip_data(keep.mask, lambda d, k: d * k * scale, "dare_mask_and_rescale")
