"""Segmentation metrics: Dice score (%), average symmetric surface distance
(mm), Hausdorff distance (mm) and volume difference (mL).

Surfaces are foreground voxels with at least one 6-connected background
neighbour; voxels outside the grid count as background. Distances are
Euclidean in mm between surface voxel centres.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EmptyRegionError

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _masks(a, b, label):
    if tuple(a.dims) != tuple(b.dims):
        raise ValueError(f"dims differ: {tuple(a.dims)} vs {tuple(b.dims)}")
    return a.data == label, b.data == label


def dice_score(a, b, label) -> float:
    ma, mb = _masks(a, b, label)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(ma, mb).sum()) / total


def volume_difference(a, b, label) -> float:
    ma, mb = _masks(a, b, label)
    voxel_mm3 = float(np.prod(a.spacing))
    return abs(int(ma.sum()) - int(mb.sum())) * voxel_mm3 / 1000.0


def surface(mask):
    """Foreground voxels touching background (or the grid border) through a face."""
    inner = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~inner


def _surface_distances(a, b, label):
    ma, mb = _masks(a, b, label)
    if not ma.any() or not mb.any():
        raise EmptyRegionError(f"label {label} is empty in at least one mask")
    sa, sb = surface(ma), surface(mb)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=a.spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=a.spacing)
    return dist_to_b[sa], dist_to_a[sb]


def asd(a, b, label) -> float:
    d_ab, d_ba = _surface_distances(a, b, label)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def hausdorff(a, b, label) -> float:
    d_ab, d_ba = _surface_distances(a, b, label)
    return float(max(d_ab.max(), d_ba.max()))


@dataclass
class MetricReport:
    """One row per (case, label): DS in %, ASD and HD in mm, VD in mL."""

    rows: list = field(default_factory=list)

    FIELDS = ("case", "label", "ds", "asd", "hd", "vd")

    def add(self, case, label, ds, asd_mm, hd_mm, vd_ml):
        self.rows.append({"case": case, "label": int(label), "ds": ds, "asd": asd_mm, "hd": hd_mm, "vd": vd_ml})

    def mean(self, key, label=None):
        vals = [r[key] for r in self.rows if (label is None or r["label"] == label) and r[key] is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_json(self):
        return json.dumps({"rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if row[k] is None else (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]))
                             for k in self.FIELDS})
        return buf.getvalue()

    def as_dict(self):
        return asdict(self)


def evaluate_segmentation(pred, gold, labels=None, case="", report=None) -> MetricReport:
    """DS/ASD/HD/VD for every foreground label of ``gold`` (or ``labels``).

    ASD and HD are left empty when either mask of a label is empty.
    """
    report = report or MetricReport()
    if labels is None:
        labels = [lab for lab in gold.label_set if lab != 0]
    for label in labels:
        try:
            asd_mm, hd_mm = asd(pred, gold, label), hausdorff(pred, gold, label)
        except EmptyRegionError:
            asd_mm = hd_mm = None
        report.add(case, label, dice_score(pred, gold, label), asd_mm, hd_mm,
                   volume_difference(pred, gold, label))
    return report
