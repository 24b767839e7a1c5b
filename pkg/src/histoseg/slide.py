"""Slide bundles: image + resolution metadata + polygon annotations +
section records, stored as a directory (image.png, meta.json,
annotations.json, sections.json)."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels as K

ANNOTATION_CLASSES = ("Tumornest", "Stroma", "Normal")
SECTION_LABELS = ("Tumor", "Normal")


class SlideLoadError(Exception):
    """A bundle file is missing or unreadable."""


class SlideValidationError(ValueError):
    """A bundle field violates an invariant."""


@dataclass(frozen=True)
class Annotation:
    cls: str
    polygon: np.ndarray  # (V, 2) float, pixel coordinates, V >= 3

    def __post_init__(self):
        object.__setattr__(self, "polygon", np.asarray(self.polygon, dtype=np.float64))


@dataclass
class SectionRecord:
    section_id: str
    bbox: tuple  # (x0, y0, x1, y1), half-open
    truth_label: str | None = None
    predicted_label: str | None = None
    corrected_label: str | None = None

    @property
    def effective_label(self):
        return self.corrected_label if self.corrected_label is not None else self.predicted_label


@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray  # (H, W) bool
    coverage: float


@dataclass
class SlideBundle:
    slide_id: str
    image: np.ndarray  # (H, W, 3) uint8
    mpp: float  # microns per pixel at native resolution
    magnification: float
    annotations: list = field(default_factory=list)
    sections: list = field(default_factory=list)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


def _segments_properly_cross(a, b, c, d):
    def orient(p, q, r):
        v = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def validate_bundle(bundle):
    """Raise SlideValidationError naming the offending field."""
    h, w = bundle.image.shape[:2]
    if bundle.image.ndim != 3 or bundle.image.shape[2] != 3 or bundle.image.dtype != np.uint8:
        raise SlideValidationError("image: expected 8-bit RGB raster (HxWx3)")
    if h < 64 or w < 64:
        raise SlideValidationError(f"image: must be at least 64x64, got {h}x{w}")
    if not (bundle.mpp > 0):
        raise SlideValidationError(f"mpp: must be positive, got {bundle.mpp}")
    for i, ann in enumerate(bundle.annotations):
        if ann.cls not in ANNOTATION_CLASSES:
            raise SlideValidationError(f"annotations[{i}].class: unknown class {ann.cls!r}")
        poly = ann.polygon
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise SlideValidationError(
                f"annotations[{i}].polygon: need at least 3 (x,y) vertices")
        if (poly[:, 0] < 0).any() or (poly[:, 0] >= w).any() \
                or (poly[:, 1] < 0).any() or (poly[:, 1] >= h).any():
            raise SlideValidationError(
                f"annotations[{i}].polygon: vertex outside [0,{w})x[0,{h})")
        n = len(poly)
        for e1 in range(n):
            a, b = poly[e1], poly[(e1 + 1) % n]
            for e2 in range(e1 + 2, n):
                if e1 == 0 and e2 == n - 1:
                    continue  # adjacent through the wrap-around
                c, d = poly[e2], poly[(e2 + 1) % n]
                if _segments_properly_cross(a, b, c, d):
                    raise SlideValidationError(
                        f"annotations[{i}].polygon: self-intersecting (edges {e1},{e2})")
    for i, sec in enumerate(bundle.sections):
        x0, y0, x1, y1 = sec.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise SlideValidationError(
                f"sections[{i}].bbox: {sec.bbox} not a positive-area box inside {w}x{h}")
        for fld in ("truth_label", "predicted_label", "corrected_label"):
            v = getattr(sec, fld)
            if v is not None and v not in SECTION_LABELS:
                raise SlideValidationError(f"sections[{i}].{fld}: invalid label {v!r}")
    return bundle


def _read_json(path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise SlideLoadError(f"missing file: {path}") from e
    except json.JSONDecodeError as e:
        raise SlideLoadError(f"corrupt JSON in {path}: {e}") from e


def load_slide_bundle(path):
    """Load and validate a bundle directory."""
    path = Path(path)
    img_path = path / "image.png"
    try:
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as e:
        raise SlideLoadError(f"missing file: {img_path}") from e
    except OSError as e:
        raise SlideLoadError(f"corrupt image {img_path}: {e}") from e

    meta = _read_json(path / "meta.json")
    for key in ("slide_id", "mpp", "magnification"):
        if key not in meta:
            raise SlideValidationError(f"meta.{key}: missing")

    annotations = []
    ann_path = path / "annotations.json"
    if ann_path.exists():
        for entry in _read_json(ann_path):
            annotations.append(Annotation(cls=entry["class"], polygon=entry["polygon"]))

    sections = []
    sec_path = path / "sections.json"
    if sec_path.exists():
        for entry in _read_json(sec_path):
            sections.append(SectionRecord(
                section_id=entry["section_id"],
                bbox=tuple(entry["bbox"]),
                truth_label=entry.get("truth_label"),
                predicted_label=entry.get("predicted_label"),
                corrected_label=entry.get("corrected_label"),
            ))

    bundle = SlideBundle(
        slide_id=meta["slide_id"],
        image=image,
        mpp=float(meta["mpp"]),
        magnification=float(meta["magnification"]),
        annotations=annotations,
        sections=sections,
    )
    return validate_bundle(bundle)


def save_slide_bundle(bundle, path):
    """Write the bundle directory; inverse of load_slide_bundle."""
    validate_bundle(bundle)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(bundle.image, mode="RGB").save(path / "image.png")
    (path / "meta.json").write_text(json.dumps({
        "slide_id": bundle.slide_id,
        "mpp": bundle.mpp,
        "magnification": bundle.magnification,
    }, indent=1))
    if bundle.annotations:
        (path / "annotations.json").write_text(json.dumps([
            {"class": a.cls, "polygon": [[int(x), int(y)] for x, y in a.polygon]}
            for a in bundle.annotations
        ]))
    if bundle.sections:
        (path / "sections.json").write_text(json.dumps([
            {
                "section_id": s.section_id,
                "bbox": [int(v) for v in s.bbox],
                "truth_label": s.truth_label,
                "predicted_label": s.predicted_label,
                "corrected_label": s.corrected_label,
            }
            for s in bundle.sections
        ], indent=1))
    return path


def detect_tissue(image, background_threshold=240):
    """Tissue = any pixel whose darkest channel is below the threshold
    (white scanner background is excluded)."""
    mask = image.min(axis=2) < background_threshold
    return TissueMask(mask=mask, coverage=float(mask.mean()))


def detect_sections(tissue, min_section_area_px):
    """One record per 8-connected tissue region with area >= the minimum,
    tight bboxes, sorted by (top, left)."""
    labels, n = K.label_regions(tissue.mask)
    records = []
    if n == 0:
        return records
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    ys, xs = np.nonzero(labels)
    lab_at = labels[ys, xs]
    h, w = tissue.mask.shape
    ymin = np.full(n + 1, h); ymax = np.full(n + 1, -1)
    xmin = np.full(n + 1, w); xmax = np.full(n + 1, -1)
    np.minimum.at(ymin, lab_at, ys)
    np.maximum.at(ymax, lab_at, ys)
    np.minimum.at(xmin, lab_at, xs)
    np.maximum.at(xmax, lab_at, xs)
    boxes = [
        (int(ymin[lab]), int(xmin[lab]), int(xmax[lab]) + 1, int(ymax[lab]) + 1)
        for lab in range(1, n + 1) if areas[lab] >= min_section_area_px
    ]
    boxes.sort()
    for i, (y0, x0, x1, y1) in enumerate(boxes):
        records.append(SectionRecord(section_id=f"sec{i:03d}", bbox=(x0, y0, x1, y1)))
    return records


def _points_in_polygon(px, py, polygon):
    """Even-odd rule (crossing number) for arrays of query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        if not crosses.any():
            continue
        t = (py - y1) / (y2 - y1)
        inside ^= crosses & (px < x1 + t * (x2 - x1))
    return inside


def rasterize_annotations(annotations, window, scale):
    """Point-in-polygon rasterization of annotations over a window.

    window: (x0, y0, x1, y1) in native pixel coordinates, half-open.
    scale:  output pixels per native pixel (>0); output dims are the
            window dims times scale, rounded.

    Returns a (3, H, W) boolean raster with channels in ANNOTATION_CLASSES
    order (Tumornest, Stroma, Normal).  Channels record raw membership;
    the hierarchy (Tumornest over Stroma over Normal) is applied by
    single_label_view().
    """
    if not (scale > 0):
        raise ValueError(f"scale must be positive, got {scale}")
    x0, y0, x1, y1 = window
    out_h = max(int(round((y1 - y0) * scale)), 0)
    out_w = max(int(round((x1 - x0) * scale)), 0)
    raster = np.zeros((3, out_h, out_w), dtype=bool)
    if out_h == 0 or out_w == 0 or not annotations:
        return raster
    # pixel centers in native coordinates
    px = x0 + (np.arange(out_w) + 0.5) / scale
    py = y0 + (np.arange(out_h) + 0.5) / scale
    pxg, pyg = np.meshgrid(px, py)
    channel = {c: i for i, c in enumerate(ANNOTATION_CLASSES)}
    for ann in annotations:
        poly = ann.polygon
        if poly[:, 0].max() < x0 or poly[:, 0].min() > x1 \
                or poly[:, 1].max() < y0 or poly[:, 1].min() > y1:
            continue
        raster[channel[ann.cls]] |= _points_in_polygon(pxg, pyg, poly)
    return raster


def single_label_view(raster):
    """Collapse a (3, H, W) membership raster to one label per pixel:
    0 = background, 1 = Tumornest, 2 = Stroma, 3 = Normal, with Tumornest
    beating Stroma beating Normal on overlap."""
    t, s, n = raster
    out = np.zeros(t.shape, dtype=np.uint8)
    out[n] = 3
    out[s] = 2
    out[t] = 1
    return out
