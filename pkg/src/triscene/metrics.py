"""Scene evaluation: completion IoU, segmentation mIoU, and a class-histogram
divergence used as a desk-scale fidelity surrogate for image-space metrics."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scenes import SemanticGrid


def confusion_table(pred: SemanticGrid, gt: SemanticGrid, n_classes: int | None = None) -> np.ndarray:
    """(N, N) counts, rows = ground truth, columns = prediction."""
    if pred.dims != gt.dims:
        raise ValueError(f"shape mismatch: pred {pred.dims} vs gt {gt.dims}")
    n = n_classes or max(pred.n_classes, gt.n_classes)
    idx = gt.labels.ravel().astype(np.int64) * n + pred.labels.ravel().astype(np.int64)
    return np.bincount(idx, minlength=n * n).reshape(n, n)


def completion_iou(pred: SemanticGrid, gt: SemanticGrid) -> float:
    """IoU of occupied (label != 0) voxels; 1.0 when both grids are empty."""
    if pred.dims != gt.dims:
        raise ValueError(f"shape mismatch: pred {pred.dims} vs gt {gt.dims}")
    p, g = pred.occupancy(), gt.occupancy()
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g) / union)


def miou(pred: SemanticGrid, gt: SemanticGrid, n_classes: int | None = None) -> float:
    """Mean per-class IoU over nonzero classes present in gt or pred; classes
    absent from both are skipped."""
    n = n_classes or max(pred.n_classes, gt.n_classes)
    table = confusion_table(pred, gt, n)
    tp = np.diag(table).astype(np.float64)
    fp = table.sum(axis=0) - tp
    fn = table.sum(axis=1) - tp
    denom = tp + fp + fn
    included = denom > 0
    included[0] = False  # the empty class is covered by completion IoU
    if not included.any():
        return 0.0
    return float(np.mean(tp[included] / denom[included]))


def _mean_class_fractions(scenes: list[SemanticGrid], n_classes: int) -> np.ndarray:
    fracs = np.zeros(n_classes, dtype=np.float64)
    for g in scenes:
        counts = np.bincount(g.labels.ravel(), minlength=n_classes)[:n_classes]
        fracs += counts / g.labels.size
    return fracs / len(scenes)


def class_histogram_divergence(set_a: list[SemanticGrid], set_b: list[SemanticGrid]) -> float:
    """Jensen-Shannon divergence (natural log, so in [0, ln 2]) between the two
    sets' mean per-class voxel-fraction distributions."""
    if not set_a or not set_b:
        raise ValueError("both scene sets must be non-empty")
    n = max(max(g.n_classes for g in set_a), max(g.n_classes for g in set_b))
    p = _mean_class_fractions(set_a, n)
    q = _mean_class_fractions(set_b, n)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def write_metric_report(path, records: list[dict]) -> None:
    """Line-delimited JSON records: {"metric", "value", "scene_id"}."""
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metric_report(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
