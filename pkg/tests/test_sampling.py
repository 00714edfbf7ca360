import numpy as np
import pytest

from ctxfeat.homography import Homography, warp_points
from ctxfeat.sampling import (
    DEFAULT_GRID,
    DEFAULT_N_POINTS,
    DEFAULT_NMS_RADIUS,
    SamplingError,
    compound_heatmap,
    greedy_nms,
    grid_cell_argmax,
    sample_correspondences,
)
from ctxfeat.synth import TeacherHeatmaps, TrainingPair, compute_valid_mask


def _pair(shape, h):
    image = np.zeros(shape, dtype=np.float32)
    return TrainingPair(
        image_a=image,
        image_b=image.copy(),
        homography=h,
        valid_mask=compute_valid_mask(h, shape),
    )


def _teacher(m1, m2):
    return TeacherHeatmaps(m1=m1.astype(np.float32), m2=m2.astype(np.float32))


class TestDefaults:
    def test_paper_settings(self):
        assert DEFAULT_GRID == (40, 40)
        assert DEFAULT_N_POINTS == 400
        assert DEFAULT_NMS_RADIUS == 4


class TestCompoundHeatmap:
    def test_identity_adds_maps(self):
        rng = np.random.default_rng(0)
        m1 = rng.random((32, 32), dtype=np.float32)
        m2 = rng.random((32, 32), dtype=np.float32)
        filled = compound_heatmap(_teacher(m1, m2), Homography.identity())
        np.testing.assert_allclose(filled.m1_warp, m2, atol=1e-6)
        np.testing.assert_allclose(filled.compound, m1 + m2, atol=1e-6)

    def test_translation_pulls_peak_back(self):
        # h maps a->b with x+10, so a peak of m2 at x=20 shows up in a's
        # frame at x=10
        m1 = np.zeros((16, 48), dtype=np.float32)
        m2 = np.zeros((16, 48), dtype=np.float32)
        m2[8, 20] = 1.0
        filled = compound_heatmap(_teacher(m1, m2), Homography.translation(10.0, 0.0))
        assert filled.m1_warp[8, 10] == pytest.approx(1.0)
        assert filled.m1_warp.sum() == pytest.approx(1.0)

    def test_outside_pixels_contribute_zero(self):
        m1 = np.zeros((16, 16), dtype=np.float32)
        m2 = np.ones((16, 16), dtype=np.float32)
        filled = compound_heatmap(_teacher(m1, m2), Homography.translation(12.0, 0.0))
        # columns >= 4 warp past the right edge of m2
        assert filled.m1_warp[:, 8:].max() == 0.0

    def test_compound_within_bound(self):
        rng = np.random.default_rng(1)
        m1 = rng.random((24, 24), dtype=np.float32)
        m2 = rng.random((24, 24), dtype=np.float32)
        filled = compound_heatmap(_teacher(m1, m2), Homography.translation(1.5, -0.5))
        assert filled.compound.min() >= 0.0
        assert filled.compound.max() <= 2.0


class TestGridCellArgmax:
    def test_matches_bruteforce_cells(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            height = int(rng.integers(13, 97))
            width = int(rng.integers(13, 97))
            heatmap = rng.random((height, width))
            coords, scores = grid_cell_argmax(heatmap, grid=(8, 8))
            expected = []
            r_edges = [(i * height) // 8 for i in range(9)]
            c_edges = [(j * width) // 8 for j in range(9)]
            for i in range(8):
                for j in range(8):
                    cell = heatmap[r_edges[i] : r_edges[i + 1], c_edges[j] : c_edges[j + 1]]
                    if cell.size == 0:
                        continue
                    r, c = np.unravel_index(np.argmax(cell), cell.shape)
                    expected.append((c_edges[j] + c, r_edges[i] + r, cell[r, c]))
            assert len(coords) == len(expected)
            for (x, y), s, (ex, ey, es) in zip(coords, scores, expected):
                assert (x, y) == (ex, ey)
                assert s == es

    def test_full_candidate_count_at_paper_scale(self):
        heatmap = np.random.default_rng(3).random((400, 400))
        coords, _ = grid_cell_argmax(heatmap, grid=(40, 40))
        assert len(coords) == 1600

    def test_uniform_ties_go_topleft(self):
        coords, scores = grid_cell_argmax(np.ones((20, 20)), grid=(4, 4))
        expected = [(c, r) for r in range(0, 20, 5) for c in range(0, 20, 5)]
        assert [tuple(p) for p in coords] == expected
        assert (scores == 1.0).all()

    def test_map_smaller_than_grid_skips_empty_cells(self):
        coords, _ = grid_cell_argmax(np.ones((5, 5)), grid=(8, 8))
        # floor(i*5/8) collapses three row and three column cells
        assert len(coords) == 25


def _nms_oracle(points, scores, radius):
    order = sorted(
        range(len(points)),
        key=lambda i: (-scores[i], points[i][1], points[i][0]),
    )
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if max(
                abs(points[i][0] - points[j][0]), abs(points[i][1] - points[j][1])
            ) <= radius:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


class TestGreedyNms:
    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(200):
            n = int(rng.integers(1, 60))
            pts = rng.integers(0, 40, size=(n, 2))
            scores = rng.random(n)
            radius = int(rng.integers(0, 8))
            got = greedy_nms(pts, scores, radius)
            assert got.tolist() == _nms_oracle(pts.tolist(), scores.tolist(), radius)

    def test_kept_points_are_separated(self):
        rng = np.random.default_rng(5)
        pts = rng.integers(0, 64, size=(300, 2))
        scores = rng.random(300)
        keep = greedy_nms(pts, scores, 4)
        kept = pts[keep].astype(float)
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert np.abs(kept[i] - kept[j]).max() > 4

    def test_radius_boundary_is_strict(self):
        pts = np.array([[10, 10], [14, 10], [15, 10]])
        scores = np.array([0.9, 0.8, 0.7])
        keep = greedy_nms(pts, scores, 4)
        # Chebyshev 4 from the winner is suppressed, 5 survives
        assert keep.tolist() == [0, 2]

    def test_equal_scores_prefer_smallest_yx(self):
        pts = np.array([[5, 0], [0, 0], [0, 5]])
        scores = np.ones(3)
        keep = greedy_nms(pts, scores, 3)
        assert keep.tolist() == [1, 0, 2]

    def test_visit_order_is_descending_score(self):
        rng = np.random.default_rng(6)
        pts = rng.integers(0, 100, size=(80, 2))
        scores = rng.random(80)
        keep = greedy_nms(pts, scores, 2)
        kept_scores = scores[keep]
        assert (np.diff(kept_scores) <= 1e-12).all()


class TestSampleCorrespondences:
    def test_uniform_heatmap_full_protocol(self):
        pair = _pair((400, 400), Homography.identity())
        uniform = np.full((400, 400), 0.5, dtype=np.float32)
        corr = sample_correspondences(pair, _teacher(uniform, uniform))
        assert len(corr) == 400
        # one candidate per grid cell
        cells = {(x // 10, y // 10) for x, y in corr.points_a}
        assert len(cells) == 400
        # pairwise separation respects the NMS radius
        pts = corr.points_a.astype(float)
        for i in range(len(pts)):
            d = np.abs(pts - pts[i]).max(axis=1)
            d[i] = np.inf
            assert d.min() > 4
        np.testing.assert_allclose(corr.points_b, corr.points_a, atol=1e-6)

    def test_warp_consistency_nontrivial_homography(self):
        h = Homography(
            np.array(
                [[0.98, -0.05, 6.0], [0.04, 1.01, -3.0], [1e-5, -2e-5, 1.0]]
            )
        )
        pair = _pair((160, 160), h)
        rng = np.random.default_rng(7)
        m = rng.random((160, 160), dtype=np.float32)
        corr = sample_correspondences(pair, _teacher(m, m), n_points=50, grid=(16, 16))
        assert len(corr) == 50
        np.testing.assert_allclose(
            corr.points_b, warp_points(corr.points_a.astype(float), h), atol=1e-6
        )
        # every source point was co-visible
        assert pair.valid_mask[corr.points_a[:, 1], corr.points_a[:, 0]].all()

    def test_top_n_ranking_oracle_isolated_peaks(self):
        # M2 zero, M1 with 500 isolated peaks: the sampler must return
        # exactly the 400 best peaks
        m1 = np.zeros((400, 400), dtype=np.float32)
        rng = np.random.default_rng(8)
        lattice = [(x, y) for y in range(2, 398, 12) for x in range(2, 398, 12)]
        peaks = lattice[:500]
        scores = 0.1 + 0.9 * rng.permutation(len(peaks)) / len(peaks)
        for (x, y), s in zip(peaks, scores):
            m1[y, x] = s
        pair = _pair((400, 400), Homography.identity())
        corr = sample_correspondences(pair, _teacher(m1, np.zeros_like(m1)))
        best = sorted(zip(scores, peaks), reverse=True)[:400]
        expected = {p for _, p in best}
        assert {tuple(p) for p in corr.points_a} == expected

    def test_too_few_survivors_raise(self):
        h = Homography.translation(9.0, 9.0)  # one co-visible pixel
        pair = _pair((10, 10), h)
        uniform = np.full((10, 10), 0.8, dtype=np.float32)
        with pytest.raises(SamplingError):
            sample_correspondences(pair, _teacher(uniform, uniform))

    def test_truncation_keeps_best(self):
        pair = _pair((80, 80), Homography.identity())
        rng = np.random.default_rng(9)
        m = rng.random((80, 80), dtype=np.float32)
        full = sample_correspondences(pair, _teacher(m, m), n_points=400, grid=(8, 8))
        short = sample_correspondences(pair, _teacher(m, m), n_points=10, grid=(8, 8))
        assert len(short) == 10
        np.testing.assert_array_equal(short.points_a, full.points_a[:10])

    def test_deterministic(self):
        pair = _pair((96, 96), Homography.translation(3.0, -2.0))
        rng = np.random.default_rng(10)
        m1 = rng.random((96, 96), dtype=np.float32)
        m2 = rng.random((96, 96), dtype=np.float32)
        c1 = sample_correspondences(pair, _teacher(m1, m2), n_points=64, grid=(12, 12))
        c2 = sample_correspondences(pair, _teacher(m1, m2), n_points=64, grid=(12, 12))
        np.testing.assert_array_equal(c1.points_a, c2.points_a)
        np.testing.assert_array_equal(c1.points_b, c2.points_b)
        np.testing.assert_array_equal(c1.scores, c2.scores)
