"""Training patch extraction, category-based re-sampling, and augmentation.

Patches are P x P crops taken at a reduced magnification (the native image
downscaled by an integer divisor, e.g. 20x scans sampled at 10x).  Patches
are categorized by their annotation pixel fractions and re-sampled with
per-category multipliers to fight the tumor-pixel unbalance; the default
multipliers reproduce the published balancing table.
"""

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .slide import detect_tissue, rasterize_annotations

# balancing-table rows: patch counts before and after re-sampling
TABLE2_ROWS = ("T<0.05%", "T>=0.05%", "T>=10%", "S>=0.05%", "N>=0.05%")
TABLE2_BEFORE = {
    "T<0.05%": 175771, "T>=0.05%": 9537, "T>=10%": 5528,
    "S>=0.05%": 9096, "N>=0.05%": 9458,
}
TABLE2_AFTER = {
    "T<0.05%": 175771, "T>=0.05%": 30000, "T>=10%": 10000,
    "S>=0.05%": 20000, "N>=0.05%": 20000,
}
DEFAULT_MULTIPLIERS = {
    row: Fraction(TABLE2_AFTER[row], TABLE2_BEFORE[row]) for row in TABLE2_ROWS
}

FRACTION_EPS = 0.0005  # the "0.05%" rule, as a fraction of patch pixels
HIGH_TUMOR = 0.10


@dataclass(frozen=True)
class PatchSpec:
    """One patch position at sampling magnification with its annotation
    pixel fractions (raw membership; classes may overlap)."""
    slide_id: str
    x: int
    y: int
    size: int
    t: float
    s: float
    n: float


@dataclass
class ResamplePlan:
    specs: list
    repetitions: np.ndarray  # int64, aligned with specs
    seed: int

    @property
    def total(self):
        return int(self.repetitions.sum())

    def expanded_indices(self):
        """Patch indices repeated per the plan, in spec order."""
        return np.repeat(np.arange(len(self.specs)), self.repetitions)


def categorize(spec):
    """The set of balancing-table rows a patch matches (rows overlap: high
    tumor density matches both tumor rows)."""
    rows = set()
    if spec.t < FRACTION_EPS:
        rows.add("T<0.05%")
    else:
        rows.add("T>=0.05%")
        if spec.t >= HIGH_TUMOR:
            rows.add("T>=10%")
    if spec.s >= FRACTION_EPS:
        rows.add("S>=0.05%")
    if spec.n >= FRACTION_EPS:
        rows.add("N>=0.05%")
    return frozenset(rows)


def downscale_rgb(image, divisor):
    """Block-mean downscale of an HxWx3 uint8 image by an integer factor
    (trailing rows/cols beyond a full block are dropped)."""
    if divisor == 1:
        return image
    h, w = image.shape[:2]
    hd, wd = h // divisor, w // divisor
    blocks = image[:hd * divisor, :wd * divisor].reshape(
        hd, divisor, wd, divisor, 3)
    return (blocks.astype(np.float32).mean(axis=(1, 3)) + 0.5).astype(np.uint8)


def annotation_raster(bundle, divisor):
    """Full-slide class-membership raster (3, Hd, Wd) at the sampling
    magnification."""
    hd = bundle.height // divisor
    wd = bundle.width // divisor
    return rasterize_annotations(
        bundle.annotations, (0, 0, wd * divisor, hd * divisor), 1.0 / divisor)


def extract_patch_grid(bundle, patch_size, stride, mag_divisor,
                       background_threshold=240):
    """Grid positions over the downscaled slide that intersect tissue, with
    annotation fractions attached.  Returns [] when the patch does not fit."""
    if stride > patch_size:
        raise ValueError("stride must not exceed patch size")
    if mag_divisor < 1:
        raise ValueError("mag_divisor must be >= 1")
    small = downscale_rgb(bundle.image, mag_divisor)
    hd, wd = small.shape[:2]
    if patch_size > hd or patch_size > wd:
        return []
    tissue = detect_tissue(small, background_threshold).mask
    raster = annotation_raster(bundle, mag_divisor)
    specs = []
    for y in range(0, hd - patch_size + 1, stride):
        for x in range(0, wd - patch_size + 1, stride):
            if not tissue[y:y + patch_size, x:x + patch_size].any():
                continue
            window = raster[:, y:y + patch_size, x:x + patch_size]
            specs.append(PatchSpec(
                slide_id=bundle.slide_id, x=x, y=y, size=patch_size,
                t=float(window[0].mean()),
                s=float(window[1].mean()),
                n=float(window[2].mean()),
            ))
    return specs


def build_resample_plan(specs, multipliers=None, seed=0):
    """Repetition count per patch = product over matched rows of the row
    multiplier, each stochastically rounded (floor/ceil with probability =
    fractional part, seeded)."""
    if multipliers is None:
        multipliers = DEFAULT_MULTIPLIERS
    rng = np.random.default_rng(seed)
    reps = np.zeros(len(specs), dtype=np.int64)
    for i, spec in enumerate(specs):
        rows = categorize(spec)
        rep = 1
        for row in TABLE2_ROWS:  # fixed order keeps the draws reproducible
            if row not in rows or row not in multipliers:
                continue
            m = multipliers[row]
            if m < 0:
                raise ValueError(f"negative multiplier for {row}")
            base = int(m)
            frac = float(m - base)
            rep *= base + (1 if frac > 0 and rng.random() < frac else 0)
        reps[i] = rep
    return ResamplePlan(specs=list(specs), repetitions=reps, seed=seed)


def pixel_unbalance(specs, repetitions=None):
    """Ratio of tumor-free to tumor pixels over the (repeated) patch set."""
    if repetitions is None:
        repetitions = np.ones(len(specs), dtype=np.int64)
    t = np.array([s.t for s in specs])
    free = float((repetitions * (1.0 - t)).sum())
    tumor = float((repetitions * t).sum())
    if tumor == 0:
        raise ValueError("no tumor pixels in the patch set; unbalance undefined")
    return free / tumor


def resampled_row_totals(row_counts, multipliers=None):
    """Exact rational per-row totals of count * multiplier (for checking the
    balancing-table arithmetic)."""
    if multipliers is None:
        multipliers = DEFAULT_MULTIPLIERS
    totals = {}
    for row, count in row_counts.items():
        v = Fraction(count) * Fraction(multipliers[row])
        totals[row] = int(v) if v.denominator == 1 else float(v)
    return totals


def write_plan_csv(plan, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "x", "y", "t", "s", "n", "repetitions"])
        for spec, rep in zip(plan.specs, plan.repetitions):
            writer.writerow([spec.slide_id, spec.x, spec.y,
                             f"{spec.t:.6f}", f"{spec.s:.6f}", f"{spec.n:.6f}",
                             int(rep)])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotation_degrees: tuple = (-180.0, 180.0)
    scale_range: tuple = (0.9, 1.1)
    blur_sigma: tuple = (0.0, 1.5)
    brightness_jitter: float = 0.1
    saturation_jitter: float = 0.1
    elastic_grid: int = 64       # coarse displacement grid spacing, px
    elastic_sigma: float = 2.0   # displacement std dev, px
    probability: float = 0.5     # per-transform apply probability


def _gaussian_blur(img, sigma):
    """Separable gaussian blur of a (C, H, W) float image, reflect padded."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    out = img
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for j, kv in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(j, j + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def _bilinear_sample(img, sy, sx):
    """Sample a (C, H, W) image at float coords (edge clamped)."""
    c, h, w = img.shape
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0).astype(img.dtype)
    fx = (sx - x0).astype(img.dtype)
    top = img[:, y0, x0] * (1 - fx) + img[:, y0, x1] * fx
    bot = img[:, y1, x0] * (1 - fx) + img[:, y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _nearest_sample(img, sy, sx):
    c, h, w = img.shape
    iy = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
    ix = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
    return img[:, iy, ix]


def _upsample_field(coarse, out_hw):
    """Bilinear upscale of a small 2-D field (for elastic displacement)."""
    from .nn.tensor import _resize_matrix
    rh = _resize_matrix(coarse.shape[0], out_hw[0], coarse.dtype)
    rw = _resize_matrix(coarse.shape[1], out_hw[1], coarse.dtype)
    return rh @ coarse @ rw.T


def augment(image, target, cfg, seed):
    """Jointly augment a (3, P, P) float image and its (2, P, P) one-hot
    target.  Geometric transforms hit both (nearest-neighbor for the
    target); color jitter and blur hit the image only.  Deterministic for a
    given seed.  Exact right-angle rotations use index permutation, so they
    conserve target pixel counts exactly.
    """
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float32)
    tgt = np.asarray(target, dtype=np.float32)
    p = img.shape[1]

    angle = rng.uniform(*cfg.rotation_degrees) if rng.random() < cfg.probability else 0.0
    scale = rng.uniform(*cfg.scale_range) if rng.random() < cfg.probability else 1.0
    elastic = rng.random() < cfg.probability and cfg.elastic_sigma > 0

    quarter_turns = int(round(angle / 90.0)) % 4
    if abs(angle - round(angle / 90.0) * 90.0) < 1e-9 and scale == 1.0 and not elastic:
        if quarter_turns:
            img = np.ascontiguousarray(np.rot90(img, quarter_turns, axes=(1, 2)))
            tgt = np.ascontiguousarray(np.rot90(tgt, quarter_turns, axes=(1, 2)))
    else:
        center = (p - 1) / 2.0
        jj, ii = np.meshgrid(np.arange(p) - center, np.arange(p) - center)
        rad = np.deg2rad(angle)
        cs, sn = np.cos(rad), np.sin(rad)
        # inverse map: rotate by -angle, scale by 1/scale
        sx = (cs * jj + sn * ii) / scale + center
        sy = (-sn * jj + cs * ii) / scale + center
        if elastic:
            nodes = max(2, p // cfg.elastic_grid + 1)
            dx = rng.normal(0.0, cfg.elastic_sigma, (nodes, nodes))
            dy = rng.normal(0.0, cfg.elastic_sigma, (nodes, nodes))
            sx = sx + _upsample_field(dx, (p, p))
            sy = sy + _upsample_field(dy, (p, p))
        img = _bilinear_sample(img, sy, sx)
        tgt = _nearest_sample(tgt, sy, sx)

    if rng.random() < cfg.probability and cfg.blur_sigma[1] > 0:
        sigma = rng.uniform(*cfg.blur_sigma)
        if sigma > 1e-3:
            img = _gaussian_blur(img, sigma)
    if rng.random() < cfg.probability and cfg.brightness_jitter > 0:
        img = img * (1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter))
    if rng.random() < cfg.probability and cfg.saturation_jitter > 0:
        f = 1.0 + rng.uniform(-cfg.saturation_jitter, cfg.saturation_jitter)
        gray = img.mean(axis=0, keepdims=True)
        img = gray + (img - gray) * f
    return np.clip(img, 0.0, 1.0).astype(np.float32), tgt.astype(np.float32)


class PatchDataset:
    """Pixel/target access for PatchSpecs: caches the downscaled image (as
    [0,1] floats) and the tumor target raster per slide."""

    def __init__(self, bundles, mag_divisor):
        self.mag_divisor = mag_divisor
        self.bundles = {b.slide_id: b for b in bundles}
        self._cache = {}

    def _slide_arrays(self, slide_id):
        entry = self._cache.get(slide_id)
        if entry is None:
            bundle = self.bundles[slide_id]
            small = downscale_rgb(bundle.image, self.mag_divisor)
            img = (small.astype(np.float32) / 255.0).transpose(2, 0, 1)
            tumor = annotation_raster(bundle, self.mag_divisor)[0]
            target = np.stack([tumor, ~tumor]).astype(np.float32)
            entry = (np.ascontiguousarray(img), target)
            self._cache[slide_id] = entry
        return entry

    def load(self, spec):
        """(image (3,P,P) float32 in [0,1], one-hot target (2,P,P))."""
        img, target = self._slide_arrays(spec.slide_id)
        sl = (slice(spec.y, spec.y + spec.size), slice(spec.x, spec.x + spec.size))
        return img[(slice(None),) + sl].copy(), target[(slice(None),) + sl].copy()
