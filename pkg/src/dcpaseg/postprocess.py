"""Mask cleanup (largest component, hole filling) and segmentation metrics."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

_EIGHT = np.ones((3, 3), dtype=bool)


def largest_component(mask):
    """Keep the largest 8-connected foreground component.

    Among equally large components the one whose first pixel comes earliest
    in row-major order wins. An empty mask is returned unchanged.
    """
    mask = np.asarray(mask) != 0
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return mask.astype(np.uint8)
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    sizes = np.bincount(flat, minlength=count + 1)
    keep = ids[ids > 0]
    keep_first = first[ids > 0]
    best = max(zip(keep, keep_first), key=lambda kf: (sizes[kf[0]], -kf[1]))[0]
    return (labels == best).astype(np.uint8)


def fill_holes(mask):
    """Turn background not 4-connected to the border into foreground."""
    return ndimage.binary_fill_holes(np.asarray(mask) != 0).astype(np.uint8)


def postprocess(mask):
    return fill_holes(largest_component(mask))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    overlap: float
    degenerate: tuple = ()  # names of metrics whose ratio was 0/0

    def as_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "overlap": self.overlap}


def confusion(pred, truth):
    pred, truth = np.asarray(pred) != 0, np.asarray(truth) != 0
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics(c):
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio("precision", c.tp, c.tp + c.fp)
    recall = ratio("recall", c.tp, c.tp + c.fn)
    f1 = ratio("f1", 2 * precision * recall, precision + recall)
    overlap = ratio("overlap", c.tp, c.tp + c.fn + c.fp)
    return MetricsReport(precision, recall, f1, overlap, tuple(degenerate))


def mean_report(reports):
    """Per-dataset summary: the mean of per-image metrics."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    keys = ("precision", "recall", "f1", "overlap")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return MetricsReport(**means)
