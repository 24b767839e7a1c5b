"""Section-level metrics and the F-beta threshold grid search."""

import csv
from dataclasses import dataclass

import numpy as np

from .inference import ThresholdPair, binarize_and_label, predict_heatmap
from .sampler import downscale_rgb

# reverse-engineered granularity: published selections are multiples of
# 0.05 probability and 1280 um^2
DEFAULT_PRED_GRID = tuple(round(0.05 * j, 2) for j in range(1, 20))
DEFAULT_AREA_GRID = tuple(1280.0 * j for j in range(11))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def confusion_from_labels(pairs):
    """pairs: iterable of (truth, predicted) section labels, Tumor positive."""
    tp = fp = tn = fn = 0
    for truth, pred in pairs:
        if truth == "Tumor":
            if pred == "Tumor":
                tp += 1
            else:
                fn += 1
        else:
            if pred == "Tumor":
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def metrics(c):
    """Accuracy, sensitivity, specificity, precision, recall.  Ratios with
    a zero denominator are reported as None, not 0."""
    if c.total == 0:
        raise ValueError("no sections evaluated")

    def ratio(num, den):
        return num / den if den > 0 else None

    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "sensitivity": ratio(c.tp, c.tp + c.fn),
        "specificity": ratio(c.tn, c.tn + c.fp),
        "precision": ratio(c.tp, c.tp + c.fp),
        "recall": ratio(c.tp, c.tp + c.fn),
    }


def f_beta(precision, recall, beta):
    """(1 + b^2) * p * r / (b^2 * p + r); defined as 0 when both are 0."""
    if precision is None or recall is None:
        return 0.0
    if precision == 0 and recall == 0:
        return 0.0
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


def iou(pred_mask, target_mask):
    """Intersection over union of boolean masks; empty union counts as 1."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    target_mask = np.asarray(target_mask, dtype=bool)
    if pred_mask.shape != target_mask.shape:
        raise ValueError(
            f"mask shapes differ: {pred_mask.shape} vs {target_mask.shape}")
    union = (pred_mask | target_mask).sum()
    if union == 0:
        return 1.0
    return float((pred_mask & target_mask).sum() / union)


def section_region_areas(heatmaps, pred_grid):
    """Per-section, per-threshold region areas (um^2); computed once and
    reused across every grid cell."""
    table = []
    for heatmap, truth in heatmaps:
        per_t = {}
        for pred_t in pred_grid:
            regions = binarize_and_label(heatmap, pred_t, with_runs=False)
            per_t[pred_t] = np.array([r.area_um2 for r in regions])
        table.append((per_t, truth))
    return table


def grid_search_from_heatmaps(heatmaps, pred_grid=DEFAULT_PRED_GRID,
                              area_grid=DEFAULT_AREA_GRID, beta=1.5):
    """Exhaustive threshold search over cached heatmaps.

    heatmaps: list of (Heatmap, truth_label).  Returns (best ThresholdPair,
    score table rows).  Ties break toward higher sensitivity, then lower
    area threshold, then lower prediction threshold.
    """
    if not pred_grid or not area_grid:
        raise ValueError("grids must be non-empty")
    cache = section_region_areas(heatmaps, pred_grid)
    rows = []
    best = None
    best_key = None
    for pred_t in pred_grid:
        for area_t in area_grid:
            pairs = []
            for per_t, truth in cache:
                areas = per_t[pred_t]
                pred = "Tumor" if (areas >= area_t).any() else "Normal"
                pairs.append((truth, pred))
            c = confusion_from_labels(pairs)
            m = metrics(c)
            score = f_beta(m["precision"], m["recall"], beta)
            sens = m["sensitivity"] if m["sensitivity"] is not None else -1.0
            rows.append({
                "pred_t": pred_t, "area_t": area_t,
                "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
                "f_beta": score,
            })
            key = (score, sens, -area_t, -pred_t)
            if best_key is None or key > best_key:
                best_key = key
                best = ThresholdPair(pred_t=pred_t, area_t=area_t)
    return best, rows


def grid_search(model, val_sections, pred_grid=DEFAULT_PRED_GRID,
                area_grid=DEFAULT_AREA_GRID, beta=1.5, mag_divisor=1,
                min_overlap=None, batch_size=16):
    """Compute each section's heatmap once, then search the threshold grid.

    val_sections: list of (bundle, SectionRecord-with-truth).
    """
    scaled_cache = {}
    heatmaps = []
    for bundle, section in val_sections:
        scaled = scaled_cache.get(bundle.slide_id)
        if scaled is None:
            small = downscale_rgb(bundle.image, mag_divisor)
            scaled = np.ascontiguousarray(
                (small.astype(np.float32) / 255.0).transpose(2, 0, 1))
            scaled_cache[bundle.slide_id] = scaled
        hm = predict_heatmap(model, bundle, section, min_overlap=min_overlap,
                             mag_divisor=mag_divisor, batch_size=batch_size,
                             scaled_image=scaled)
        heatmaps.append((hm, section.truth_label))
    return grid_search_from_heatmaps(heatmaps, pred_grid, area_grid, beta)


def write_score_table(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pred_t", "area_t", "tp", "fp", "tn", "fn", "f_beta"])
        for r in rows:
            writer.writerow([r["pred_t"], r["area_t"], r["tp"], r["fp"],
                             r["tn"], r["fn"], f"{r['f_beta']:.6f}"])
