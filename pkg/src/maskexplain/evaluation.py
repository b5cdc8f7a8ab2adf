"""Heatmap evaluation: thresholding, boxes, IOU, pointing, deletion curves."""

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .blackbox import BlackBox
from .core import blur, normalize_heatmap
from .perturb import Perturber, PerturbSpec

VALUE_ALPHAS = tuple(round(0.05 * i, 2) for i in range(20))  # 0:0.05:0.95
ENERGY_ALPHAS = VALUE_ALPHAS
MEAN_ALPHAS = tuple(round(0.5 * i, 1) for i in range(21))  # 0:0.5:10
DELETION_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(11))  # 0:0.1:1
SUPPRESSION_LEVELS = (0.80, 0.90, 0.95, 0.99)


class Box(NamedTuple):
    """Pixel box; (x0, y0) inclusive, (x1, y1) exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def to_mask(self, height, width) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        out[self.y0 : self.y1, self.x0 : self.x1] = True
        return out


def normalized_score(p: float, p0: float, pb: float) -> float:
    if abs(p0 - pb) < 1e-12:
        return 0.0
    return (p - p0) / (p0 - pb)


def value_threshold(h, alpha: float) -> np.ndarray:
    return normalize_heatmap(h) > alpha


def energy_threshold(h, alpha: float) -> np.ndarray:
    """Smallest top-valued pixel set holding at least alpha of the total mass."""
    h = np.asarray(h, dtype=np.float64)
    flat = h.ravel()
    # stable sort on -value keeps row-major order among ties
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    k = int(np.searchsorted(csum, alpha * csum[-1], side="left")) + 1
    k = min(max(k, 1), flat.size)
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:k]] = True
    return keep.reshape(h.shape)


def mean_threshold(h, alpha: float) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return h > alpha * h.mean()


SCHEMES = {"value": value_threshold, "energy": energy_threshold, "mean": mean_threshold}
SCHEME_ALPHAS = {"value": VALUE_ALPHAS, "energy": ENERGY_ALPHAS, "mean": MEAN_ALPHAS}


def tightest_box(binary) -> Box | None:
    b = np.asarray(binary, dtype=bool)
    if not b.any():
        return None
    rows = np.flatnonzero(b.any(axis=1))
    cols = np.flatnonzero(b.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def is_localized(pred: Box | None, gt: Box) -> bool:
    return pred is not None and iou(pred, gt) > 0.5


def localization_error(pairs) -> float:
    """Fraction of (predicted box or None, ground-truth box) pairs with IOU <= 0.5."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no records")
    return sum(not is_localized(p, g) for p, g in pairs) / len(pairs)


def heatmap_box(h, scheme: str, alpha: float) -> Box | None:
    return tightest_box(SCHEMES[scheme](h, alpha))


def localization_sweep(heatmaps, gt_boxes, scheme: str, alphas=None) -> dict:
    """Localization error for each alpha of a thresholding scheme."""
    alphas = SCHEME_ALPHAS[scheme] if alphas is None else alphas
    gts = [Box(*map(int, g)) for g in gt_boxes]
    return {a: localization_error((heatmap_box(h, scheme, a), g) for h, g in zip(heatmaps, gts))
            for a in alphas}


def best_alpha(errors: dict):
    """(alpha*, error) minimizing the error; ties go to the smallest alpha."""
    a = min(errors, key=lambda k: (errors[k], k))
    return a, errors[a]


def pointing(h, gt_region, tolerance: int = 15) -> bool:
    """Whether the first row-major heatmap maximum lies within Chebyshev
    distance ``tolerance`` of a ground-truth pixel."""
    h = np.asarray(h, dtype=np.float64)
    gt = np.asarray(gt_region, dtype=bool)
    if not gt.any():
        return False
    y, x = np.unravel_index(int(np.argmax(h)), h.shape)
    gy, gx = np.nonzero(gt)
    return bool(np.min(np.maximum(np.abs(gy - y), np.abs(gx - x))) <= tolerance)


def pointing_precision(heatmaps, regions, tolerance: int = 15, subset=None) -> float:
    """Hit rate over images; ``subset(i)`` optionally selects which images count."""
    hits = [pointing(h, r, tolerance) for i, (h, r) in enumerate(zip(heatmaps, regions))
            if subset is None or subset(i)]
    if not hits:
        raise ValueError("empty evaluation subset")
    return sum(hits) / len(hits)


@dataclass
class DeletionPoint:
    alpha: float
    box: Box | None
    pprime: float | None


def deletion_curve(model: BlackBox, spec: PerturbSpec, x0, c, h, thresholds=DELETION_THRESHOLDS,
                   levels=SUPPRESSION_LEVELS):
    """Perturb the tightest box of each value-thresholded heatmap.

    Returns (points, smallest) where ``smallest`` maps each suppression level
    to the smallest box area whose normalized score is <= -level (or None).
    """
    x0 = model.check_input(x0)
    classes = model.check_class(c)
    hgt, wid = x0.shape[:2]
    pert = Perturber(spec, x0)

    def score(img):
        s = model.scores(img)
        return float(sum(s[k] for k in classes))

    p0 = score(x0)
    pb = score(pert.fully_perturbed())
    points = []
    for a in thresholds:
        box = tightest_box(value_threshold(h, a)) if np.ptp(h) > 0 else None
        if box is None:
            points.append(DeletionPoint(a, None, None))
            continue
        m = 1.0 - box.to_mask(hgt, wid)
        points.append(DeletionPoint(a, box, normalized_score(score(pert.apply(m)), p0, pb)))
    smallest = {}
    for level in levels:
        areas = [pt.box.area for pt in points if pt.box is not None and pt.pprime <= -level]
        smallest[level] = min(areas) if areas else None
    return points, smallest


def slice_masks(m, extra_blur_sigma: float, alphas=VALUE_ALPHAS) -> list:
    """Binary masks (1 keep, 0 perturb) deleting where blurred 1-m exceeds alpha."""
    deleted = blur(1.0 - np.asarray(m, dtype=np.float64), extra_blur_sigma)
    return [np.where(deleted > a, 0.0, 1.0) for a in alphas]


RESULT_COLUMNS = ("image_id", "method", "scheme", "alpha", "x0", "y0", "x1", "y1", "iou", "hit", "pprime")


@dataclass
class EvalRecord:
    image_id: int
    method: str
    scheme: str
    alpha: float
    box: Box | None
    iou: float
    hit: bool
    pprime: float | None = None

    def row(self) -> list:
        b = self.box if self.box is not None else ("", "", "", "")
        return [self.image_id, self.method, self.scheme, repr(float(self.alpha)), *b,
                repr(float(self.iou)), int(self.hit), "" if self.pprime is None else repr(float(self.pprime))]


def write_records(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow(r.row())
