import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histoseg.evaluation import (
    DEFAULT_AREA_GRID,
    DEFAULT_PRED_GRID,
    ConfusionCounts,
    confusion_from_labels,
    f_beta,
    grid_search_from_heatmaps,
    iou,
    metrics,
    write_score_table,
)
from histoseg.inference import Heatmap
from oracles import flood_fill_regions


def heatmap(probs, mpp=1.0):
    probs = np.asarray(probs, dtype=np.float32)
    return Heatmap(probs=probs, mpp_eff=mpp,
                   counts=np.ones(probs.shape, dtype=np.int32))


class TestMetrics:
    def test_worked_example(self):
        m = metrics(ConfusionCounts(tp=9, fn=1, tn=8, fp=2))
        assert m["sensitivity"] == 0.9
        assert m["specificity"] == 0.8
        assert m["accuracy"] == 0.85

    def test_absent_sensitivity(self):
        m = metrics(ConfusionCounts(tp=0, fn=0, tn=5, fp=1))
        assert m["sensitivity"] is None

    def test_perfect(self):
        m = metrics(ConfusionCounts(tp=4, tn=6))
        assert all(v == 1.0 for v in m.values())

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no sections"):
            metrics(ConfusionCounts())

    def test_confusion_from_labels(self):
        pairs = [("Tumor", "Tumor"), ("Tumor", "Normal"),
                 ("Normal", "Tumor"), ("Normal", "Normal")]
        c = confusion_from_labels(pairs)
        assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)


class TestFBeta:
    def test_perfect(self):
        assert f_beta(1.0, 1.0, 1.5) == 1.0

    def test_worked_example(self):
        assert abs(f_beta(0.5, 1.0, 1.5) - 0.7647) < 1e-4

    def test_beta_one_harmonic(self):
        assert abs(f_beta(0.8, 0.8, 1.0) - 0.8) < 1e-12

    def test_zero_case(self):
        assert f_beta(0.0, 0.0, 1.5) == 0.0
        assert f_beta(None, 0.0, 1.5) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.floats(0.0, 0.99))
    def test_monotone_in_precision_and_recall(self, p, r, delta):
        beta = 1.5
        assert f_beta(min(p + delta, 1.0), r, beta) >= f_beta(p, r, beta) - 1e-12
        assert f_beta(p, min(r + delta, 1.0), beta) >= f_beta(p, r, beta) - 1e-12


class TestIoU:
    def test_identical(self):
        m = np.random.default_rng(0).random((8, 8)) < 0.5
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert iou(a, b) == 0.0

    def test_third(self):
        a = np.zeros(4, dtype=bool)
        b = np.zeros(4, dtype=bool)
        a[:2] = True
        b[1:3] = True
        assert abs(iou(a, b) - 1 / 3) < 1e-12

    def test_empty_union_defined_one(self):
        z = np.zeros((3, 3), dtype=bool)
        assert iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))


def synthetic_heatmaps(n=20, seed=4, size=32, mpp=2.0):
    """Random blob heatmaps with truth labels."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        probs = rng.uniform(0.0, 0.35, (size, size)).astype(np.float32)
        truth = "Tumor" if rng.random() < 0.5 else "Normal"
        if truth == "Tumor":
            r = int(rng.integers(3, 8))
            cy, cx = rng.integers(r, size - r, 2)
            yy, xx = np.ogrid[:size, :size]
            blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            probs[blob] = rng.uniform(0.7, 0.95)
        if rng.random() < 0.3:  # small distractor blip
            y, x = rng.integers(0, size - 2, 2)
            probs[y:y + 2, x:x + 2] = 0.8
        out.append((heatmap(probs, mpp), truth))
    return out


def oracle_grid_search(heatmaps, pred_grid, area_grid, beta):
    """Independent nested-loop reimplementation: flood-fill labeling, direct
    confusion counting, explicit tie-breaking."""
    rows = []
    best_pair, best_key = None, None
    for pt in pred_grid:
        for at in area_grid:
            tp = fp = tn = fn = 0
            for hm, truth in heatmaps:
                mask = hm.probs >= pt
                regions = flood_fill_regions(mask)
                survives = any(len(reg) * hm.mpp_eff ** 2 >= at for reg in regions)
                pred = "Tumor" if survives else "Normal"
                if truth == "Tumor":
                    tp, fn = tp + (pred == "Tumor"), fn + (pred == "Normal")
                else:
                    fp, tn = fp + (pred == "Tumor"), tn + (pred == "Normal")
            prec = tp / (tp + fp) if tp + fp else None
            rec = tp / (tp + fn) if tp + fn else None
            if prec is None or rec is None or (prec == 0 and rec == 0):
                score = 0.0
            else:
                score = (1 + beta ** 2) * prec * rec / (beta ** 2 * prec + rec)
            rows.append({"pred_t": pt, "area_t": at, "tp": tp, "fp": fp,
                         "tn": tn, "fn": fn, "f_beta": score})
            sens = rec if rec is not None else -1.0
            key = (score, sens, -at, -pt)
            if best_key is None or key > best_key:
                best_key, best_pair = key, (pt, at)
    return best_pair, rows


class TestGridSearch:
    def test_degenerate_grid(self):
        hms = synthetic_heatmaps(4)
        best, rows = grid_search_from_heatmaps(hms, pred_grid=[0.5],
                                               area_grid=[100.0])
        assert (best.pred_t, best.area_t) == (0.5, 100.0)
        assert len(rows) == 1

    def test_perfect_heatmaps_reach_one(self):
        hms = []
        for i in range(6):
            probs = np.zeros((16, 16), dtype=np.float32)
            truth = "Normal"
            if i % 2 == 0:
                probs[4:12, 4:12] = 0.95
                truth = "Tumor"
            hms.append((heatmap(probs), truth))
        best, rows = grid_search_from_heatmaps(hms)
        assert max(r["f_beta"] for r in rows) == 1.0

    def test_matches_oracle_exactly(self):
        hms = synthetic_heatmaps(20)
        pred_grid = [0.2, 0.35, 0.5, 0.65, 0.8]
        area_grid = [0.0, 32.0, 128.0, 512.0, 2048.0]
        best, rows = grid_search_from_heatmaps(hms, pred_grid, area_grid, beta=1.5)
        obest, orows = oracle_grid_search(hms, pred_grid, area_grid, beta=1.5)
        assert (best.pred_t, best.area_t) == obest
        assert len(rows) == len(orows)
        for a, b in zip(sorted(rows, key=lambda r: (r["pred_t"], r["area_t"])),
                        sorted(orows, key=lambda r: (r["pred_t"], r["area_t"]))):
            assert a["pred_t"] == b["pred_t"] and a["area_t"] == b["area_t"]
            assert (a["tp"], a["fp"], a["tn"], a["fn"]) == \
                   (b["tp"], b["fp"], b["tn"], b["fn"])
            assert abs(a["f_beta"] - b["f_beta"]) < 1e-12

    def test_grid_permutation_invariant(self):
        hms = synthetic_heatmaps(10, seed=9)
        pred_grid = [0.3, 0.5, 0.7]
        area_grid = [0.0, 64.0, 256.0]
        best1, _ = grid_search_from_heatmaps(hms, pred_grid, area_grid)
        best2, _ = grid_search_from_heatmaps(hms, pred_grid[::-1], area_grid[::-1])
        assert best1 == best2

    def test_default_grids_bracket_published_selections(self):
        for v in (0.45, 0.60, 0.65):
            assert any(abs(v - g) < 1e-9 for g in DEFAULT_PRED_GRID)
        for v in (2560.0, 3840.0, 5120.0, 8960.0):
            assert any(abs(v - g) < 1e-9 for g in DEFAULT_AREA_GRID)

    def test_score_table_csv(self, tmp_path):
        hms = synthetic_heatmaps(4)
        _, rows = grid_search_from_heatmaps(hms, pred_grid=[0.5],
                                            area_grid=[0.0, 128.0])
        write_score_table(rows, tmp_path / "scores.csv")
        lines = (tmp_path / "scores.csv").read_text().strip().splitlines()
        assert lines[0] == "pred_t,area_t,tp,fp,tn,fn,f_beta"
        assert len(lines) == 3
