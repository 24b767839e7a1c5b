import numpy as np

from histoseg.slide import detect_tissue, rasterize_annotations, save_slide_bundle
from histoseg.synthetic import SynthConfig, generate_dataset, generate_slide


def small_cfg(**kw):
    base = dict(seed=3, slide_width=384, slide_height=384, sections_x=2,
                sections_y=2, section_margin=24)
    base.update(kw)
    return SynthConfig(**base)


class TestGenerateSlide:
    def test_prevalence_zero(self):
        bundle = generate_slide(small_cfg(tumor_prevalence=0.0))
        assert all(s.truth_label == "Normal" for s in bundle.sections)
        assert not any(a.cls == "Tumornest" for a in bundle.annotations)

    def test_prevalence_one(self):
        bundle = generate_slide(small_cfg(tumor_prevalence=1.0))
        assert len(bundle.sections) == 4
        assert all(s.truth_label == "Tumor" for s in bundle.sections)
        assert sum(a.cls == "Tumornest" for a in bundle.annotations) >= 4

    def test_deterministic_bytes(self, tmp_path):
        cfg = small_cfg(tumor_prevalence=0.5)
        save_slide_bundle(generate_slide(cfg), tmp_path / "a")
        save_slide_bundle(generate_slide(cfg), tmp_path / "b")
        assert (tmp_path / "a" / "image.png").read_bytes() == \
               (tmp_path / "b" / "image.png").read_bytes()

    def test_sections_are_detectable_tissue(self):
        bundle = generate_slide(small_cfg())
        tissue = detect_tissue(bundle.image, 240)
        for s in bundle.sections:
            x0, y0, x1, y1 = s.bbox
            assert tissue.mask[y0:y1, x0:x1].mean() > 0.9
        # background between sections stays white
        assert tissue.mask[:8].sum() == 0

    def test_truth_matches_annotations(self):
        bundle = generate_slide(small_cfg(seed=11, tumor_prevalence=0.5))
        for s in bundle.sections:
            x0, y0, x1, y1 = s.bbox
            inside = [
                a for a in bundle.annotations if a.cls == "Tumornest"
                and (a.polygon[:, 0] >= x0).all() and (a.polygon[:, 0] < x1).all()
                and (a.polygon[:, 1] >= y0).all() and (a.polygon[:, 1] < y1).all()
            ]
            assert (s.truth_label == "Tumor") == (len(inside) > 0)

    def test_tumor_texture_is_darker_inside_annotation(self):
        bundle = generate_slide(small_cfg(seed=4, tumor_prevalence=1.0))
        raster = rasterize_annotations(
            [a for a in bundle.annotations if a.cls == "Tumornest"],
            (0, 0, bundle.width, bundle.height), 1.0)
        tumor_mask = raster[0]
        assert tumor_mask.any()
        brightness = bundle.image.mean(axis=2)
        tissue = detect_tissue(bundle.image, 240).mask
        assert brightness[tumor_mask].mean() < brightness[tissue & ~tumor_mask].mean() - 20

    def test_validates(self):
        # generated bundles satisfy every bundle invariant (save validates)
        bundle = generate_slide(small_cfg(seed=7))
        assert bundle.height == 384


class TestGenerateDataset:
    def test_writes_bundles_and_manifest(self, tmp_path):
        cfg = small_cfg(tumor_prevalence=0.5)
        paths = generate_dataset(cfg, tmp_path / "data", 3)
        assert len(paths) == 3
        import json
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert set(manifest) == {"slide0003", "slide0004", "slide0005"}
        assert all(len(v) == 4 for v in manifest.values())

    def test_distinct_seeds_distinct_slides(self, tmp_path):
        generate_dataset(small_cfg(), tmp_path / "d", 2)
        a = (tmp_path / "d" / "slide0003" / "image.png").read_bytes()
        b = (tmp_path / "d" / "slide0004" / "image.png").read_bytes()
        assert a != b
