"""Metric tests against brute-force oracles: Dice by hand counting,
boundary by explicit neighbor loops, EDT by nearest-point search, HD95 by
all-pairs boundary distances with the same nearest-rank percentile."""

import math

import numpy as np
import pytest

from segnet.metrics import (MetricsReport, dice, edt, evaluate_regions,
                            extract_boundary, hd95)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def brute_boundary(mask):
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w) or not mask[ni, nj]:
                    out.append((i, j))
                    break
    return out


def brute_edt(points, shape):
    h, w = shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = min(math.hypot(i - p, j - q) for p, q in points)
    return out


def nearest_rank_p95(values):
    values = sorted(values)
    n = len(values)
    idx = -((-19 * n) // 20)  # ceil(0.95 * n) in exact integer arithmetic
    return values[idx - 1]


def brute_hd95(p, g, method="directed_max"):
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        return math.hypot(*p.shape)
    bp = brute_boundary(p)
    bg = brute_boundary(g)
    d_pg = [min(math.hypot(a - c, b - d) for c, d in bg) for a, b in bp]
    d_gp = [min(math.hypot(a - c, b - d) for c, d in bp) for a, b in bg]
    if method == "union":
        return nearest_rank_p95(d_pg + d_gp)
    return max(nearest_rank_p95(d_pg), nearest_rank_p95(d_gp))


def random_blob(rng, size=32):
    """Random mask built from a few filled rectangles (sometimes empty)."""
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(0, 4)):
        y0, x0 = rng.integers(0, size - 4, size=2)
        dy, dx = rng.integers(2, 10, size=2)
        mask[y0:y0 + dy, x0:x0 + dx] = 1
    return mask


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

class TestDice:
    def test_perfect_overlap(self, rng):
        m = (rng.random((8, 8)) > 0.4).astype(np.uint8)
        m[0, 0] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        p = np.zeros((4, 4), dtype=np.uint8)
        g = np.zeros((4, 4), dtype=np.uint8)
        p[0, 0] = 1
        g[3, 3] = 1
        assert dice(p, g) == 0.0

    def test_hand_enumeration(self):
        p = np.zeros((2, 2), dtype=np.uint8)
        g = np.zeros((2, 2), dtype=np.uint8)
        p[0, 0] = p[0, 1] = 1
        g[0, 1] = g[1, 1] = 1
        assert dice(p, g) == pytest.approx(0.5, abs=0)

    def test_symmetry_exact(self, rng):
        for _ in range(20):
            p = random_blob(rng)
            g = random_blob(rng)
            assert dice(p, g) == dice(g, p)

    def test_both_empty_convention(self):
        z = np.zeros((5, 5), dtype=np.uint8)
        assert dice(z, z) == 1.0

    def test_one_empty(self):
        z = np.zeros((5, 5), dtype=np.uint8)
        g = z.copy()
        g[2, 2] = 1
        assert dice(z, g) == 0.0

    def test_matches_formula_on_random_pairs(self, rng):
        for _ in range(100):
            p = random_blob(rng)
            g = random_blob(rng)
            np_, ng = int(p.sum()), int(g.sum())
            if np_ == 0 and ng == 0:
                expected = 1.0
            else:
                expected = 2.0 * int((p & g).sum()) / (np_ + ng)
            assert abs(dice(p, g) - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dice(np.zeros((3, 3), dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8))

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            dice(np.full((3, 3), 2, dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))

    def test_dilation_toward_gt_never_decreases(self):
        # convex target disk; growing P one 4-connected dilation at a time
        size = 33
        yy, xx = np.mgrid[0:size, 0:size]
        g = ((yy - 16) ** 2 + (xx - 16) ** 2 <= 100).astype(np.uint8)
        p = ((yy - 16) ** 2 + (xx - 16) ** 2 <= 4).astype(np.uint8)

        def dilate(m):
            out = m.copy()
            out[1:, :] |= m[:-1, :]
            out[:-1, :] |= m[1:, :]
            out[:, 1:] |= m[:, :-1]
            out[:, :-1] |= m[:, 1:]
            return out

        prev = dice(p, g)
        for _ in range(8):
            p = dilate(p) & g | p  # step toward G without overshooting
            cur = dice(p, g)
            assert cur >= prev
            prev = cur


# ---------------------------------------------------------------------------
# Boundary extraction
# ---------------------------------------------------------------------------

class TestBoundary:
    def test_single_pixel(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[2, 3] = 1
        assert set(map(tuple, extract_boundary(m))) == {(2, 3)}

    def test_filled_square_perimeter(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:6, 2:6] = 1
        boundary = set(map(tuple, extract_boundary(m)))
        expected = {(i, j) for i in range(2, 6) for j in range(2, 6)
                    if i in (2, 5) or j in (2, 5)}
        assert len(expected) == 12
        assert boundary == expected

    def test_empty_mask(self):
        assert extract_boundary(np.zeros((4, 4), dtype=np.uint8)).shape == (0, 2)

    def test_border_foreground_is_boundary(self):
        m = np.ones((4, 4), dtype=np.uint8)
        boundary = set(map(tuple, extract_boundary(m)))
        expected = {(i, j) for i in range(4) for j in range(4)
                    if i in (0, 3) or j in (0, 3)}
        assert boundary == expected

    def test_matches_loop_oracle(self, rng):
        for _ in range(25):
            m = random_blob(rng, 16)
            got = set(map(tuple, extract_boundary(m)))
            assert got == set(brute_boundary(m))


# ---------------------------------------------------------------------------
# Euclidean distance transform
# ---------------------------------------------------------------------------

class TestEdt:
    def test_pythagorean_distance(self):
        d = edt(np.array([[0, 0]]), (8, 8))
        assert d[3, 4] == pytest.approx(5.0, abs=1e-12)

    def test_zero_at_points(self, rng):
        pts = rng.integers(0, 16, size=(6, 2))
        d = edt(pts, (16, 16))
        for p, q in pts:
            assert d[p, q] == 0.0

    @pytest.mark.parametrize("seed,size", [(0, 32), (1, 32), (2, 32), (3, 48),
                                           (4, 64)])
    def test_matches_brute_force(self, seed, size):
        rng = np.random.default_rng(seed)
        npts = int(rng.integers(1, 40))
        pts = np.unique(rng.integers(0, size, size=(npts, 2)), axis=0)
        got = edt(pts, (size, size))
        want = brute_edt([tuple(p) for p in pts], (size, size))
        np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)

    def test_empty_point_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            edt(np.empty((0, 2), dtype=int), (4, 4))


# ---------------------------------------------------------------------------
# HD95
# ---------------------------------------------------------------------------

class TestHd95:
    def test_identical_masks(self, rng):
        m = random_blob(rng)
        m[4:8, 4:8] = 1
        assert hd95(m, m) == 0.0

    def test_single_pixels(self):
        p = np.zeros((8, 8), dtype=np.uint8)
        g = np.zeros((8, 8), dtype=np.uint8)
        p[0, 0] = 1
        g[3, 4] = 1
        assert hd95(p, g) == pytest.approx(5.0, abs=0)

    def test_both_empty(self):
        z = np.zeros((6, 6), dtype=np.uint8)
        assert hd95(z, z) == 0.0

    def test_one_empty_diagonal_penalty(self):
        z = np.zeros((6, 8), dtype=np.uint8)
        g = z.copy()
        g[2, 2] = 1
        assert hd95(z, g) == pytest.approx(math.hypot(6, 8), abs=0)
        assert hd95(g, z) == pytest.approx(math.hypot(6, 8), abs=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            hd95(np.zeros((3, 3), dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8))

    @pytest.mark.parametrize("method", ["directed_max", "union"])
    def test_matches_brute_force(self, method, rng):
        for _ in range(25):
            p = random_blob(rng)
            g = random_blob(rng)
            assert hd95(p, g, method=method) == brute_hd95(p, g, method=method)

    def test_symmetry(self, rng):
        for _ in range(15):
            p = random_blob(rng)
            g = random_blob(rng)
            assert hd95(p, g) == hd95(g, p)

    def test_translation_invariance(self, rng):
        p = np.zeros((32, 32), dtype=np.uint8)
        g = np.zeros((32, 32), dtype=np.uint8)
        p[4:10, 5:12] = 1
        g[6:13, 4:9] = 1
        base = hd95(p, g)
        for dy, dx in ((3, 0), (0, 7), (5, 5)):
            assert hd95(np.roll(p, (dy, dx), (0, 1)),
                        np.roll(g, (dy, dx), (0, 1))) == base

    def test_unknown_method(self):
        m = np.ones((4, 4), dtype=np.uint8)
        with pytest.raises(ValueError, match="method"):
            hd95(m, m, method="mean")


# ---------------------------------------------------------------------------
# Region evaluation and report
# ---------------------------------------------------------------------------

def _gt_masks(size=16):
    wt = np.zeros((size, size), dtype=np.uint8)
    wt[3:12, 3:12] = 1
    tc = np.zeros_like(wt)
    tc[5:10, 5:10] = 1
    et = np.zeros_like(wt)
    et[6:9, 6:9] = 1
    return np.stack([wt, tc, et], axis=-1)


class TestEvaluateRegions:
    def test_thresholding_recovers_gt(self):
        gt = _gt_masks()
        pred = np.where(gt > 0, 0.9, 0.1)
        scores = evaluate_regions(pred, gt)
        for region in ("WT", "TC", "ET"):
            assert scores[region]["dsc"] == 1.0
            assert scores[region]["hd95"] == 0.0

    def test_sub_threshold_prediction_is_empty(self):
        gt = _gt_masks()
        pred = np.full(gt.shape, 0.5 - 1e-6)
        scores = evaluate_regions(pred, gt)
        for region in ("WT", "TC", "ET"):
            assert scores[region]["dsc"] == 0.0
            assert scores[region]["hd95"] == pytest.approx(math.hypot(16, 16))

    def test_boundary_perturbation_hand_formula(self):
        gt = _gt_masks()
        pred = np.where(gt > 0, 1.0, 0.0)
        # knock out 3 boundary pixels of WT
        for px in ((3, 3), (3, 4), (3, 5)):
            pred[px[0], px[1], 0] = 0.0
        scores = evaluate_regions(pred, gt)
        area = 81
        assert scores["WT"]["dsc"] == pytest.approx(
            2 * (area - 3) / (area + area - 3), abs=1e-12)

    def test_threshold_validation(self):
        gt = _gt_masks()
        with pytest.raises(ValueError, match="threshold"):
            evaluate_regions(np.zeros(gt.shape), gt, threshold=1.5)

    def test_shape_mismatch(self):
        gt = _gt_masks()
        with pytest.raises(ValueError, match="mismatch"):
            evaluate_regions(np.zeros((8, 8, 3)), gt)


class TestMetricsReport:
    def test_aggregates_are_means(self):
        rep = MetricsReport()
        gt = _gt_masks()
        for k, shift in enumerate((0.9, 0.1)):
            pred = np.where(gt > 0, shift, 1 - shift)
            rep.add_sample(f"s{k}", evaluate_regions(pred, gt))
        agg = rep.aggregates()
        for region in ("WT", "TC", "ET"):
            rows = [r["dsc"] for r in rep.records if r["region"] == region]
            assert agg[region]["dsc_mean"] == pytest.approx(np.mean(rows))
            assert agg[region]["n"] == 2

    def test_json_stable_and_round_trip(self):
        rep = MetricsReport()
        gt = _gt_masks()
        rep.add_sample("a", evaluate_regions(np.where(gt > 0, 0.8, 0.2), gt))
        assert rep.to_json() == rep.to_json()
        restored = MetricsReport.from_dict(
            __import__("json").loads(rep.to_json()))
        assert restored.records == rep.records

    def test_degenerate_counting(self):
        rep = MetricsReport()
        gt = np.zeros((8, 8, 3), dtype=np.uint8)
        gt[2:5, 2:5, 0] = 1  # WT nonempty, TC/ET empty
        pred_hard = np.zeros((8, 8, 3), dtype=bool)
        scores = evaluate_regions(np.zeros(gt.shape) + 0.1, gt)
        rep.add_sample("s", scores, pred_hard=pred_hard, gt=gt.astype(bool))
        assert rep.degenerate == {"both_empty": 2, "pred_empty": 1, "gt_empty": 0}
