"""Label fusion: majority voting and locally weighted voting.

Both reduce to a per-voxel argmax over label scores, with ties resolved
towards the lowest label value.
"""
from __future__ import annotations

import numpy as np

from .volume import LabelMap


def _check_stack(labels, weights=None):
    if len(labels) == 0:
        raise ValueError("fusion needs at least one atlas")
    dims = {tuple(lab.dims) for lab in labels}
    if weights is not None:
        if len(weights) != len(labels):
            raise ValueError(f"{len(labels)} labels but {len(weights)} weight maps")
        dims |= {tuple(np.shape(getattr(w, "data", w))) for w in weights}
    if len(dims) != 1:
        raise ValueError(f"dims differ: {sorted(dims)}")


def _label_set(labels):
    out = set()
    for lab in labels:
        out |= set(lab.label_set)
    return tuple(sorted(out))


def _fuse(labels, weights):
    label_set = _label_set(labels)
    # canonical atlas order makes the floating-point sums permutation invariant
    order = sorted(range(len(labels)), key=lambda i: (labels[i].data.tobytes(), weights[i].tobytes()))
    best = np.full(labels[0].dims, label_set[0], dtype=np.int64)
    best_score = np.full(labels[0].dims, -np.inf)
    for lab in label_set:
        score = np.zeros(labels[0].dims)
        for i in order:
            score += np.where(labels[i].data == lab, weights[i], 0.0)
        # strict > keeps the lower label on ties since labels ascend
        better = score > best_score
        best[better] = lab
        best_score[better] = score[better]
    ref = labels[0]
    return LabelMap(best, ref.spacing, ref.origin, label_set)


def lwf_fuse(labels, weights) -> LabelMap:
    """``argmax_l sum_i W_i(x) [L_i(x) = l]`` with ties to the lowest label."""
    _check_stack(labels, weights)
    ws = [np.asarray(getattr(w, "data", w), dtype=np.float64) for w in weights]
    for w in ws:
        if not np.all((w >= 0.0) & (w <= 1.0)):
            raise ValueError("weights must lie in [0, 1]")
    return _fuse(list(labels), ws)


def majority_vote(labels) -> LabelMap:
    """Per-voxel mode with ties to the lowest label."""
    _check_stack(labels)
    return _fuse(list(labels), [np.ones(labels[0].dims)] * len(labels))
