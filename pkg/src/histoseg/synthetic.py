"""Seeded synthetic slides with exact ground truth.

Slides carry a grid of tissue sections; tumor sections contain star-convex
blobs with a dense dark-nuclei stipple, normal tissue is smooth pink, and
distractor blobs (hair-follicle stand-ins) reuse the tumor palette without
the dense stipple, so per-pixel color alone cannot separate them.  Every
tumor blob is annotated with the exact polygon that painted it; distractors
are annotated as Normal and a scaled ring around each tumor as Stroma.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .slide import (
    Annotation,
    SectionRecord,
    SlideBundle,
    rasterize_annotations,
    save_slide_bundle,
)

# palette (RGB): tumor dots must be the darkest structure so the stipple
# density is the discriminative feature
_BG_LOW, _BG_HIGH = 246, 255
_NORMAL_BASE = (225, 172, 196)
_NORMAL_DOT = (204, 150, 176)
_TUMOR_BASE = (168, 130, 182)
_TUMOR_DOT = (82, 58, 114)
_DISTRACTOR_BASE = (146, 112, 165)
_STROMA_BASE = (214, 158, 192)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    slide_width: int = 768
    slide_height: int = 768
    sections_x: int = 2
    sections_y: int = 2
    section_margin: int = 32
    tumor_prevalence: float = 0.5
    tumor_blob_count: tuple = (1, 2)      # inclusive range per tumor section
    tumor_radius: tuple = (26.0, 52.0)    # native px
    tumor_dot_density: float = 0.25
    distractor_blob_count: tuple = (0, 2)
    distractor_radius: tuple = (16.0, 34.0)
    distractor_dot_density: float = 0.03
    noise: float = 5.0
    mpp: float = 1.0
    magnification: float = 20.0

    def validate(self):
        if not 0.0 <= self.tumor_prevalence <= 1.0:
            raise ValueError("tumor_prevalence must be in [0, 1]")
        if self.slide_width < 128 or self.slide_height < 128:
            raise ValueError("slide dims must be at least 128")
        return self


def _star_polygon(rng, cx, cy, radius, n_vertices=12):
    angles = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    angles = angles + rng.uniform(-0.15, 0.15, n_vertices)
    radii = radius * rng.uniform(0.7, 1.0, n_vertices)
    xs = cx + radii * np.cos(angles)
    ys = cy + radii * np.sin(angles)
    return np.stack([xs, ys], axis=1)


def _clamp_polygon(poly, rect):
    x0, y0, x1, y1 = rect
    out = poly.copy()
    out[:, 0] = np.clip(out[:, 0], x0, x1 - 1)
    out[:, 1] = np.clip(out[:, 1], y0, y1 - 1)
    return out


def _polygon_mask(polygon, shape):
    """Exact membership mask of a polygon over the full slide, evaluated
    only inside its bounding box for speed."""
    h, w = shape
    x0 = max(int(np.floor(polygon[:, 0].min())) - 1, 0)
    y0 = max(int(np.floor(polygon[:, 1].min())) - 1, 0)
    x1 = min(int(np.ceil(polygon[:, 0].max())) + 1, w)
    y1 = min(int(np.ceil(polygon[:, 1].max())) + 1, h)
    mask = np.zeros(shape, dtype=bool)
    window = rasterize_annotations(
        [Annotation("Tumornest", polygon)], (x0, y0, x1, y1), 1.0)[0]
    mask[y0:y1, x0:x1] = window
    return mask


def _dot_lattice(rng, shape, density):
    """2x2-aligned stipple mask: dots survive a 2x block-mean downscale as
    single dark pixels."""
    h, w = shape
    coarse = rng.random(((h + 1) // 2, (w + 1) // 2)) < density
    return np.kron(coarse, np.ones((2, 2), dtype=bool))[:h, :w]


def _paint(image, mask, color, rng, noise):
    n = int(mask.sum())
    if n == 0:
        return
    vals = np.asarray(color, dtype=np.float64) + rng.normal(0.0, noise, (n, 3))
    image[mask] = np.clip(vals, 0, 255).astype(np.uint8)


def generate_slide(cfg, slide_id=None):
    """Deterministic synthetic slide bundle with exhaustive tumor
    annotations and section truth labels."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.slide_height, cfg.slide_width
    if slide_id is None:
        slide_id = f"slide{cfg.seed:04d}"

    image = rng.integers(_BG_LOW, _BG_HIGH, (h, w, 3), endpoint=True).astype(np.uint8)

    # section grid
    m = cfg.section_margin
    cell_w = (w - m * (cfg.sections_x + 1)) // cfg.sections_x
    cell_h = (h - m * (cfg.sections_y + 1)) // cfg.sections_y
    rects = []
    for gy in range(cfg.sections_y):
        for gx in range(cfg.sections_x):
            x0 = m + gx * (cell_w + m) + int(rng.integers(0, m // 4 + 1))
            y0 = m + gy * (cell_h + m) + int(rng.integers(0, m // 4 + 1))
            x1 = x0 + cell_w - int(rng.integers(0, m // 4 + 1))
            y1 = y0 + cell_h - int(rng.integers(0, m // 4 + 1))
            rects.append((x0, y0, x1, y1))

    n_sections = len(rects)
    n_tumor = int(round(cfg.tumor_prevalence * n_sections))
    tumor_flags = np.zeros(n_sections, dtype=bool)
    tumor_flags[rng.permutation(n_sections)[:n_tumor]] = True

    annotations = []
    sections = []
    order = sorted(range(n_sections), key=lambda i: (rects[i][1], rects[i][0]))
    for rank, idx in enumerate(order):
        x0, y0, x1, y1 = rects[idx]
        rect_mask = np.zeros((h, w), dtype=bool)
        rect_mask[y0:y1, x0:x1] = True
        _paint(image, rect_mask, _NORMAL_BASE, rng, cfg.noise)
        dots = _dot_lattice(rng, (h, w), 0.02) & rect_mask
        _paint(image, dots, _NORMAL_DOT, rng, cfg.noise)

        # distractors first so tumors paint over any overlap
        for _ in range(int(rng.integers(cfg.distractor_blob_count[0],
                                        cfg.distractor_blob_count[1] + 1))):
            radius = rng.uniform(*cfg.distractor_radius)
            radius = min(radius, (x1 - x0) / 2.0 - 6, (y1 - y0) / 2.0 - 6)
            if radius < 6:
                continue
            cx = rng.uniform(x0 + radius + 2, x1 - radius - 2)
            cy = rng.uniform(y0 + radius + 2, y1 - radius - 2)
            poly = _clamp_polygon(_star_polygon(rng, cx, cy, radius), (x0, y0, x1, y1))
            blob = _polygon_mask(poly, (h, w))
            _paint(image, blob, _DISTRACTOR_BASE, rng, cfg.noise)
            sparse = _dot_lattice(rng, (h, w), cfg.distractor_dot_density) & blob
            _paint(image, sparse, _TUMOR_DOT, rng, cfg.noise)
            annotations.append(Annotation("Normal", poly))

        n_blobs = 0
        if tumor_flags[idx]:
            n_blobs = int(rng.integers(cfg.tumor_blob_count[0],
                                       cfg.tumor_blob_count[1] + 1))
            n_blobs = max(n_blobs, 1)
        for _ in range(n_blobs):
            radius = rng.uniform(*cfg.tumor_radius)
            radius = min(radius, (x1 - x0) / 2.0 - 6, (y1 - y0) / 2.0 - 6)
            cx = rng.uniform(x0 + radius + 2, x1 - radius - 2)
            cy = rng.uniform(y0 + radius + 2, y1 - radius - 2)
            poly = _clamp_polygon(_star_polygon(rng, cx, cy, radius), (x0, y0, x1, y1))
            stroma = _clamp_polygon(
                (poly - [cx, cy]) * 1.4 + [cx, cy], (x0, y0, x1, y1))
            blob = _polygon_mask(poly, (h, w))
            ring = _polygon_mask(stroma, (h, w)) & ~blob
            _paint(image, ring, _STROMA_BASE, rng, cfg.noise)
            _paint(image, blob, _TUMOR_BASE, rng, cfg.noise)
            dense = _dot_lattice(rng, (h, w), cfg.tumor_dot_density) & blob
            _paint(image, dense, _TUMOR_DOT, rng, cfg.noise)
            annotations.append(Annotation("Tumornest", poly))
            annotations.append(Annotation("Stroma", stroma))

        sections.append(SectionRecord(
            section_id=f"sec{rank:03d}",
            bbox=(x0, y0, x1, y1),
            truth_label="Tumor" if n_blobs else "Normal",
        ))

    sections.sort(key=lambda s: (s.bbox[1], s.bbox[0]))
    return SlideBundle(
        slide_id=slide_id, image=image, mpp=cfg.mpp,
        magnification=cfg.magnification,
        annotations=annotations, sections=sections,
    )


def generate_dataset(cfg, out_dir, count, prefix="slide"):
    """Write `count` bundles (seeds cfg.seed, cfg.seed+1, ...) plus a
    manifest of section truth labels.  Returns the bundle paths."""
    from dataclasses import replace

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    manifest = {}
    for i in range(count):
        sub_cfg = replace(cfg, seed=cfg.seed + i)
        slide_id = f"{prefix}{cfg.seed + i:04d}"
        bundle = generate_slide(sub_cfg, slide_id=slide_id)
        path = out_dir / slide_id
        save_slide_bundle(bundle, path)
        manifest[slide_id] = {s.section_id: s.truth_label for s in bundle.sections}
        paths.append(path)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return paths
