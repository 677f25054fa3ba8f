"""Segmentation quality metrics: Dice coefficient and 95th-percentile
Hausdorff distance, per class, with foreground averaging.

Conventions (shared with the brute-force test oracles):
  * Boundary pixels are mask pixels with at least one 4-neighbor outside the
    mask; pixels beyond the image edge count as outside.
  * Distances are Euclidean between spacing-scaled pixel centers; each
    coordinate is scaled by its spacing before subtraction.
  * The directed distance percentile uses linear interpolation between order
    statistics; HD95 is the max of the two directed 95th percentiles.
  * Empty-mask handling: both masks empty -> 0; exactly one empty -> the
    image-diagonal length sqrt((H*sy)^2 + (W*sx)^2) as a penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class MetricReport:
    """Per-class scores; averages cover foreground classes (id > 0) only."""

    per_class_dsc: dict[int, float] = field(default_factory=dict)
    per_class_hd95: dict[int, float] = field(default_factory=dict)

    @property
    def foreground_classes(self) -> list[int]:
        return sorted(c for c in self.per_class_dsc if c != 0)

    @property
    def dsc_avg(self) -> float:
        fg = self.foreground_classes
        return float(np.mean([self.per_class_dsc[c] for c in fg])) if fg else float("nan")

    @property
    def hd95_avg(self) -> float:
        fg = self.foreground_classes
        return float(np.mean([self.per_class_hd95[c] for c in fg])) if fg else float("nan")

    def to_flat_dict(self) -> dict[str, float]:
        out = {}
        for c in sorted(self.per_class_dsc):
            out[f"dsc.class_{c}"] = self.per_class_dsc[c]
        out["dsc.avg"] = self.dsc_avg
        for c in sorted(self.per_class_hd95):
            out[f"hd95.class_{c}"] = self.per_class_hd95[c]
        out["hd95.avg"] = self.hd95_avg
        return out


def dsc(pred, gt, cls) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) for the given class; 1 if both empty."""
    a = np.asarray(pred) == cls
    b = np.asarray(gt) == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary_pixels(mask) -> np.ndarray:
    """(N, 2) row/col coordinates of boundary pixels (4-neighborhood)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return np.argwhere(mask & ~inner)


def hd95(pred, gt, cls, spacing=(1.0, 1.0)) -> float:
    """95th percentile of symmetric boundary-to-boundary distances, in mm."""
    sy, sx = float(spacing[0]), float(spacing[1])
    if sy <= 0 or sx <= 0:
        raise ConfigError(f"pixel spacing must be positive, got {spacing}")
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    a = boundary_pixels(pred == cls)
    b = boundary_pixels(gt == cls)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        h, w = pred.shape
        return math.sqrt((h * sy) ** 2 + (w * sx) ** 2)
    scale = np.array([sy, sx])
    pa = a * scale
    pb = b * scale
    dy = pa[:, None, 0] - pb[None, :, 0]
    dx = pa[:, None, 1] - pb[None, :, 1]
    d = np.sqrt(dy * dy + dx * dx)
    forward = np.percentile(d.min(axis=1), 95)
    backward = np.percentile(d.min(axis=0), 95)
    return float(max(forward, backward))


def compute_report(pred, gt, num_classes, spacing=(1.0, 1.0)) -> MetricReport:
    """Per-class DSC and HD95 for one label-map pair."""
    report = MetricReport()
    for c in range(num_classes):
        report.per_class_dsc[c] = dsc(pred, gt, c)
        report.per_class_hd95[c] = hd95(pred, gt, c, spacing)
    return report


def aggregate(reports) -> MetricReport:
    """Arithmetic mean of per-class scores across reports."""
    reports = list(reports)
    if not reports:
        raise ConfigError("cannot aggregate an empty list of reports")
    classes = sorted(reports[0].per_class_dsc)
    out = MetricReport()
    for c in classes:
        out.per_class_dsc[c] = float(np.mean([r.per_class_dsc[c] for r in reports]))
        out.per_class_hd95[c] = float(np.mean([r.per_class_hd95[c] for r in reports]))
    return out
