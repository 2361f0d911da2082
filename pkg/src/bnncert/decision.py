"""Terminal value construction: what the DP should take an expectation of.

Regression reads the network output directly, so the terminal value is the
final layer's posterior-mean map.  Classification boxes the class scores
through an interval softmax, and additionally offers a cheap sufficient
logit test that can settle a pairwise comparison without running the full
backward recursion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .dp import LayerPartition, ValueRelaxation
from .layerprop import MomentFunctions
from .relaxcore import (
    AffineRelaxation,
    Box,
    Interval,
    PwaRelaxation,
    neg_part,
    pos_part,
)


@dataclass(frozen=True)
class TerminalSpec:
    """What to certify at the output: the task plus, for classification,
    the target class and the set it must beat (None means every other)."""

    task: str
    n_out: int
    target_class: Optional[int] = None
    against: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_out < 1:
            raise ValueError("n_out must be positive")
        for idx in self.class_indices():
            if not 0 <= idx < self.n_out:
                raise ValueError(f"class index {idx} out of range for {self.n_out} outputs")

    def class_indices(self):
        out = []
        if self.target_class is not None:
            out.append(int(self.target_class))
        if self.against is not None:
            out.extend(int(j) for j in self.against)
        return out

    def comparison_classes(self):
        if self.target_class is None:
            raise ValueError("no target class set")
        if self.against is not None:
            return tuple(j for j in self.against if j != self.target_class)
        return tuple(j for j in range(self.n_out) if j != self.target_class)


def terminal_regression(model) -> ValueRelaxation:
    """Exact affine terminal: the output layer's posterior mean map, on a
    single whole-space piece with no complement."""
    layer = model.layers[model.depth]
    mf = MomentFunctions.from_layer(layer)
    space = Box.full_space(layer.in_dim)
    part = LayerPartition(model.depth, space, (space,), has_complement=False)
    rel = mf.mean_affine()
    # on the nonnegative orthant the mean is squeezed by its signed parts
    tail = AffineRelaxation(neg_part(mf.mean_w), mf.mean_b, pos_part(mf.mean_w), mf.mean_b)
    return ValueRelaxation(part, PwaRelaxation(((space, rel),), None), tail, layer.out_dim)


def _softmax_bounds(lo, hi) -> Interval:
    """Interval softmax for score vectors in [lo, hi], evaluated in log
    domain: each class is pitted against the adversarial corner of the box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = lo.shape[0]
    if n == 1:
        return Interval(np.ones(1), np.ones(1))
    b_lo = np.empty(n)
    b_hi = np.empty(n)
    for i in range(n):
        rest_hi = logsumexp(np.delete(hi, i))
        rest_lo = logsumexp(np.delete(lo, i))
        b_lo[i] = expit(lo[i] - rest_hi)
        b_hi[i] = expit(hi[i] - rest_lo)
    return Interval(b_lo, b_hi)


def ibp_softmax(pieces) -> list:
    """Per-piece softmax intervals; None marks the complement piece, which
    gets the trivial [0, 1] per class."""
    out = []
    n_class = None
    for piece in pieces:
        if piece is not None:
            n_class = piece.dim
            break
    if n_class is None:
        raise ValueError("at least one box piece is required")
    for piece in pieces:
        if piece is None:
            out.append(Interval(np.zeros(n_class), np.ones(n_class)))
        else:
            out.append(_softmax_bounds(piece.lo, piece.hi))
    return out


def terminal_classification(model, partition: LayerPartition) -> ValueRelaxation:
    """Constant-valued terminal over the output pre-activation partition:
    each piece carries its interval softmax, the complement carries [0, 1]."""
    if model.task != "classification":
        raise ValueError("classification terminal requires a classification model")
    if partition.layer != model.depth + 1:
        raise ValueError("terminal partition must live at the output stage")
    n = model.output_dim
    markers = list(partition.pieces) + ([None] if partition.has_complement else [])
    ivs = ibp_softmax(markers)
    zero = np.zeros((n, n))
    rels = [AffineRelaxation(zero, iv.lo, zero, iv.hi) for iv in ivs[: len(partition.pieces)]]
    comp = ivs[-1] if partition.has_complement else None
    tail = AffineRelaxation(zero, np.zeros(n), zero, np.ones(n))
    pwa = PwaRelaxation(tuple(zip(partition.pieces, rels)), comp)
    return ValueRelaxation(partition, pwa, tail, n)


def logit_margin_check(box: Box, p_lo: float, i: int, j: int) -> bool:
    """Sufficient condition for E[softmax_j] <= E[softmax_i] from a score
    box holding at least p_lo of the mass.

    The test asks whether the target's worst score still dominates the
    competitor's best plus the slack (1/p_lo - 1) * sum of best exponentials;
    everything stays in log domain so huge logits cannot overflow.
    """
    if not 0.0 < p_lo <= 1.0:
        raise ValueError("p_lo must lie in (0, 1]")
    if not box.bounded:
        raise ValueError("score box must be bounded")
    if i == j:
        raise ValueError("classes must differ")
    z_lo, z_hi = box.lo, box.hi
    if p_lo == 1.0:
        return bool(z_hi[j] <= z_lo[i])
    slack = np.log(1.0 / p_lo - 1.0) + logsumexp(z_hi)
    rhs = np.logaddexp(z_hi[j], slack)
    return bool(z_lo[i] >= rhs)
