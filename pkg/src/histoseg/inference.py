"""Tiled section inference: overlapping patches stitched into a tumor
probability heatmap, thresholded, filtered by physical region area, and
classified.  Supports the truncated-decoder fast path (evaluate blocks
0..L only and upsample that block's probability map)."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels as K
from . import nn
from .sampler import downscale_rgb


@dataclass
class Heatmap:
    probs: np.ndarray   # (H, W) float32 tumor probability over the section bbox
    mpp_eff: float      # microns per pixel at inference magnification
    counts: np.ndarray  # (H, W) int32, contributing patches per pixel


@dataclass(frozen=True)
class ThresholdPair:
    pred_t: float   # probability threshold
    area_t: float   # tumor-area threshold, square microns

    def validate(self):
        if not 0 < self.pred_t < 1:
            raise ValueError(f"pred_t must be in (0,1), got {self.pred_t}")
        if self.area_t < 0:
            raise ValueError(f"area_t must be >= 0, got {self.area_t}")
        return self


@dataclass
class Region:
    area_px: int
    area_um2: float
    runs: list | None = None  # [(y, x0, x1)] half-open row runs


def _axis_positions(size, patch, min_overlap):
    if size <= patch:
        return [0]
    stride = patch - min_overlap
    positions = list(range(0, size - patch + 1, stride))
    if positions[-1] != size - patch:
        positions.append(size - patch)
    return positions


def tile_positions(bbox, patch, min_overlap):
    """Patch origins covering a (x0, y0, x1, y1) box: a stride-(P - overlap)
    grid with a final edge-aligned position per axis."""
    if min_overlap < patch // 2:
        raise ValueError(f"min_overlap must be >= patch/2, got {min_overlap}")
    x0, y0, x1, y1 = bbox
    xs = _axis_positions(x1 - x0, patch, min_overlap)
    ys = _axis_positions(y1 - y0, patch, min_overlap)
    return [(x0 + x, y0 + y) for y in ys for x in xs]


def _scaled_section_crop(image_scaled, section, mag_divisor):
    x0, y0, x1, y1 = section.bbox
    sx0, sy0 = x0 // mag_divisor, y0 // mag_divisor
    sx1 = max(sx0 + 1, -(-x1 // mag_divisor))
    sy1 = max(sy0 + 1, -(-y1 // mag_divisor))
    sy1 = min(sy1, image_scaled.shape[1])
    sx1 = min(sx1, image_scaled.shape[2])
    return image_scaled[:, sy0:sy1, sx0:sx1]


def predict_heatmap(model, bundle, section, min_overlap=None, mag_divisor=1,
                    truncate_at=None, batch_size=16, scaled_image=None):
    """Stitch per-patch tumor probabilities over a section into a heatmap.

    Overlapping predictions are averaged (sum / coverage count).  Sections
    smaller than the patch are reflection-padded for prediction; the
    returned heatmap has the section's own dims.
    """
    p = model.cfg.patch_size
    if min_overlap is None:
        min_overlap = p // 2
    if scaled_image is None:
        small = downscale_rgb(bundle.image, mag_divisor)
        scaled_image = np.ascontiguousarray(
            (small.astype(np.float32) / 255.0).transpose(2, 0, 1))
    crop = _scaled_section_crop(scaled_image, section, mag_divisor)
    h, w = crop.shape[1], crop.shape[2]
    pad_y, pad_x = max(0, p - h), max(0, p - w)
    if pad_y or pad_x:
        crop = np.pad(crop, ((0, 0), (0, pad_y), (0, pad_x)), mode="reflect")
    ph, pw = crop.shape[1], crop.shape[2]
    positions = tile_positions((0, 0, pw, ph), p, min_overlap)
    acc = np.zeros((ph, pw), dtype=np.float64)
    counts = np.zeros((ph, pw), dtype=np.int32)
    for start in range(0, len(positions), batch_size):
        chunk = positions[start:start + batch_size]
        batch = np.stack([crop[:, y:y + p, x:x + p] for x, y in chunk])
        out = model.forward(batch, training=False, truncate_at=truncate_at)
        if truncate_at is None:
            probs = out.final.data[:, 0]
        else:
            pm = out.prob_maps[truncate_at]
            probs = nn.bilinear_upsample(pm, (p, p)).data[:, 0]
        for i, (x, y) in enumerate(chunk):
            acc[y:y + p, x:x + p] += probs[i]
            counts[y:y + p, x:x + p] += 1
    heat = (acc / counts).astype(np.float32)[:h, :w]
    return Heatmap(probs=heat, mpp_eff=bundle.mpp * mag_divisor,
                   counts=counts[:h, :w])


def _region_runs(labels, n):
    runs = [[] for _ in range(n + 1)]
    for y in range(labels.shape[0]):
        row = labels[y]
        boundaries = np.flatnonzero(np.diff(row) != 0) + 1
        edges = np.concatenate([[0], boundaries, [len(row)]])
        for x0, x1 in zip(edges[:-1], edges[1:]):
            lab = int(row[x0])
            if lab:
                runs[lab].append((y, int(x0), int(x1)))
    return runs


def binarize_and_label(heatmap, pred_t, with_runs=True):
    """Threshold at prob >= pred_t and label 8-connected regions with pixel
    and physical (square-micron) areas."""
    if not 0 < pred_t < 1:
        raise ValueError(f"pred_t must be in (0,1), got {pred_t}")
    mask = heatmap.probs >= pred_t
    labels, n = K.label_regions(mask)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    runs = _region_runs(labels, n) if with_runs else [None] * (n + 1)
    um2 = heatmap.mpp_eff ** 2
    return [
        Region(area_px=int(areas[lab]), area_um2=float(areas[lab]) * um2,
               runs=runs[lab])
        for lab in range(1, n + 1)
    ]


def classify_section(labeling, area_t):
    """Drop regions below the physical area threshold; Tumor iff any
    region of area >= area_t survives."""
    survivors = [r for r in labeling if r.area_um2 >= area_t]
    return ("Tumor" if survivors else "Normal"), survivors


# ---------------------------------------------------------------------------
# heatmap files: 8-bit grayscale PNG + JSON sidecar


def save_heatmap(heatmap, out_dir, section_id, model_id="", truncate_at=None,
                 bbox=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = np.rint(np.clip(heatmap.probs, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(png, mode="L").save(out_dir / f"heatmap_{section_id}.png")
    sidecar = {
        "section_id": section_id,
        "mpp_eff": heatmap.mpp_eff,
        "bbox": list(bbox) if bbox is not None else None,
        "model_id": model_id,
        "truncate_at": truncate_at,
    }
    (out_dir / f"heatmap_{section_id}.json").write_text(json.dumps(sidecar, indent=1))
    return out_dir / f"heatmap_{section_id}.png"


def load_heatmap(directory, section_id):
    directory = Path(directory)
    png_path = directory / f"heatmap_{section_id}.png"
    meta_path = directory / f"heatmap_{section_id}.json"
    with Image.open(png_path) as im:
        probs = np.asarray(im, dtype=np.float32) / 255.0
    meta = json.loads(meta_path.read_text())
    counts = np.ones(probs.shape, dtype=np.int32)
    return Heatmap(probs=probs, mpp_eff=float(meta["mpp_eff"]), counts=counts), meta
