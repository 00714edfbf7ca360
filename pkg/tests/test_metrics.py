"""Tests for MMA, matching score and homography accuracy."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ctxfeat.features import KeypointSet, MatchSet, match as mnn
from ctxfeat.homography import (
    Homography,
    HomographyParams,
    random_homography,
    warp_points,
)
from ctxfeat.metrics import (
    EmptySharedViewError,
    MetricReport,
    PairMetrics,
    estimate_homography,
    evaluate_pair,
    fit_homography_dlt,
    homography_accuracy,
    matching_score,
    mma,
    save_mma_curve,
)


def _paired_sets(coords_a, coords_b, weights=None):
    """Two keypoint sets whose i-th points match each other by descriptor."""
    n = len(coords_a)
    desc = np.eye(max(n, 2))[:n]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    set_a = KeypointSet(
        coords=np.asarray(coords_a, dtype=np.float64),
        scores=np.ones(n),
        descriptors=desc,
        weights=w,
    )
    set_b = KeypointSet(
        coords=np.asarray(coords_b, dtype=np.float64),
        scores=np.ones(n),
        descriptors=desc,
        weights=w,
    )
    return set_a, set_b


def _grid_coords(n_side=5, step=20, origin=10):
    xs, ys = np.meshgrid(*(origin + step * np.arange(n_side),) * 2)
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


class TestMma:
    def test_perfect_matches_score_one(self):
        coords = _grid_coords()
        set_a, set_b = _paired_sets(coords, coords)
        matches = mnn(set_a, set_b)
        result = mma(set_a, set_b, matches, Homography.identity())
        assert all(v == 1.0 for v in result.values())

    def test_known_error_split(self):
        # half the matches land 2 px off, half 5 px off
        coords = _grid_coords(4, 20, 15)
        offsets = np.zeros_like(coords)
        offsets[:8, 0] = 2.0
        offsets[8:, 0] = 5.0
        set_a, set_b = _paired_sets(coords, coords + offsets)
        matches = mnn(set_a, set_b)
        result = mma(set_a, set_b, matches, Homography.identity())
        assert result[1] == 0.0
        assert result[2] == 0.5
        assert result[4] == 0.5
        assert result[5] == 1.0

    def test_no_matches_scores_zero(self):
        coords = _grid_coords(2)
        set_a, _ = _paired_sets(coords, coords)
        empty = MatchSet(
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0),
            "plain",
        )
        result = mma(set_a, set_a, empty, Homography.identity())
        assert all(v == 0.0 for v in result.values())


class TestMatchingScore:
    def test_self_pair_is_one(self):
        coords = _grid_coords()
        set_a, set_b = _paired_sets(coords, coords)
        matches = mnn(set_a, set_b)
        ms = matching_score(set_a, set_b, matches, Homography.identity(), (128, 128))
        assert ms == 1.0

    def test_half_shared_denominator(self):
        # 4 points matched correctly; a has 4 extra keypoints that warp
        # outside the image, baseline stays; b has 4 extra inside
        inside = np.array([[10.0, 10.0], [30.0, 10.0], [10.0, 30.0], [30.0, 30.0]])
        n = 4
        desc = np.eye(8)
        set_a = KeypointSet(
            coords=np.vstack([inside, inside + [200.0, 0.0]]),
            scores=np.ones(8),
            descriptors=desc,
            weights=np.ones(8),
        )
        set_b = KeypointSet(
            coords=np.vstack([inside, inside + [20.0, 0.0]]),
            scores=np.ones(8),
            descriptors=np.vstack([desc[:4], np.roll(desc[4:], 1, axis=1)]),
            weights=np.ones(8),
        )
        # shift a's far points outside a 64x64 image under identity
        matches = mnn(set_a, set_b)
        ms = matching_score(set_a, set_b, matches, Homography.identity(), (64, 64))
        # correct = 4; shared_a = 4 (others left the frame); shared_b = 8
        assert_allclose(ms, 0.5 * (4 / 4 + 4 / 8))

    def test_empty_shared_view_raises(self):
        coords = np.array([[10.0, 10.0], [20.0, 20.0], [30.0, 10.0], [15.0, 25.0]])
        set_a, set_b = _paired_sets(coords, coords)
        h = Homography.translation(500.0, 0.0)
        matches = mnn(set_a, set_b)
        with pytest.raises(EmptySharedViewError):
            matching_score(set_a, set_b, matches, h, (64, 64))


class TestDlt:
    def test_exact_recovery_random_homographies(self):
        rng = np.random.default_rng(0)
        for trial in range(50):
            h = random_homography((240, 320), seed=int(rng.integers(1 << 30)))
            pts = rng.uniform(20, 280, size=(int(rng.integers(4, 30)), 2))
            proj = warp_points(pts, h)
            est = fit_homography_dlt(pts, proj)
            max_err = np.abs(warp_points(pts, est) - proj).max()
            assert max_err < 1e-6, f"trial {trial}: {max_err}"

    def test_collinear_points_rejected(self):
        pts = np.array([[0.0, 0.0], [10.0, 10.0], [20.0, 20.0], [30.0, 30.0]])
        from ctxfeat.homography import DegenerateHomographyError

        with pytest.raises((DegenerateHomographyError, np.linalg.LinAlgError, ValueError)):
            h = fit_homography_dlt(pts, pts)
            # a rank-deficient system may still produce a matrix; it must
            # then fail to reproduce a generic 5th point
            probe = np.array([[5.0, 17.0]])
            err = np.abs(warp_points(probe, h) - probe).max()
            if err > 1e-3:
                raise ValueError("degenerate fit")

    def test_too_few_points(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValueError):
            fit_homography_dlt(pts, pts)


class TestRansac:
    def test_noise_free_exact(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            h = random_homography((200, 200), seed=trial)
            pts = rng.uniform(10, 190, size=(40, 2))
            proj = warp_points(pts, h)
            est = estimate_homography(pts, proj, seed=trial)
            assert est is not None
            err = np.abs(warp_points(pts, est) - proj).max()
            assert err < 1e-6, f"trial {trial}: {err}"

    def test_robust_to_one_third_outliers(self):
        rng = np.random.default_rng(2)
        h = random_homography((200, 200), seed=5)
        pts = rng.uniform(10, 190, size=(60, 2))
        proj = warp_points(pts, h)
        n_out = 20
        proj[:n_out] += rng.uniform(15, 60, size=(n_out, 2))
        est = estimate_homography(pts, proj, seed=0)
        assert est is not None
        corners = np.array([[0.0, 0.0], [199.0, 0.0], [199.0, 199.0], [0.0, 199.0]])
        corner_err = np.linalg.norm(
            warp_points(corners, est) - warp_points(corners, h), axis=1
        ).mean()
        assert corner_err < 1.0

    def test_too_few_matches_returns_none(self):
        pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        assert estimate_homography(pts, pts) is None

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 100, size=(30, 2))
        proj = warp_points(pts, Homography.translation(3.0, -2.0))
        proj[:10] += rng.normal(0, 8, size=(10, 2))
        a = estimate_homography(pts, proj, seed=7)
        b = estimate_homography(pts, proj, seed=7)
        assert a is not None and b is not None
        np.testing.assert_array_equal(a.matrix, b.matrix)


class TestHomographyAccuracy:
    def test_exact_estimate_passes_all(self):
        h = random_homography((100, 100), seed=0)
        flags = homography_accuracy(h, h, (100, 100))
        assert all(flags.values())

    def test_known_corner_error_thresholds(self):
        gt = Homography.identity()
        est = Homography.translation(3.5, 0.0)  # every corner off by 3.5
        flags = homography_accuracy(est, gt, (64, 64))
        assert not flags[3]
        assert flags[4]

    def test_failed_estimate_fails_all(self):
        flags = homography_accuracy(None, Homography.identity(), (64, 64))
        assert not any(flags.values())


class TestEvaluatePair:
    def test_self_pair_perfect(self):
        coords = _grid_coords(5, 12, 8)
        set_a, set_b = _paired_sets(coords, coords)
        pm = evaluate_pair(set_a, set_b, Homography.identity(), (72, 72))
        assert all(v == 1.0 for v in pm.mma_per_threshold.values())
        assert pm.matching_score == 1.0
        assert all(pm.ha_per_threshold.values())
        assert pm.n_matches == len(coords)
        assert pm.n_correct == len(coords)

    def test_count_invariants_enforced(self):
        with pytest.raises(ValueError):
            PairMetrics(
                mma_per_threshold={3: 0.5},
                matching_score=0.5,
                ha_per_threshold={3: True},
                n_keypoints_a=2,
                n_keypoints_b=2,
                n_matches=5,  # more matches than keypoints
                n_correct=1,
            )


class TestMetricReport:
    def _pair(self, mma3, ms, ha3):
        return PairMetrics(
            mma_per_threshold={3: mma3},
            matching_score=ms,
            ha_per_threshold={3: ha3},
            n_keypoints_a=10,
            n_keypoints_b=10,
            n_matches=4,
            n_correct=2,
        )

    def test_aggregate_means(self):
        pairs = [self._pair(1.0, 0.5, True), self._pair(0.0, 0.25, False)]
        report = MetricReport.aggregate(pairs)
        assert report.mma_per_threshold[3] == 0.5
        assert report.matching_score == 0.375
        assert report.ha_per_threshold[3] == 0.5
        assert report.n_pairs == 2
        assert report.n_skipped_ms == 0
        assert report.counts == {"keypoints": 40, "matches": 8, "correct": 4}

    def test_skipped_ms_excluded_from_mean(self):
        pairs = [self._pair(1.0, 0.8, True), self._pair(1.0, None, True)]
        report = MetricReport.aggregate(pairs)
        assert report.matching_score == 0.8
        assert report.n_skipped_ms == 1

    def test_empty_aggregate_rejected(self):
        with pytest.raises(ValueError):
            MetricReport.aggregate([])

    def test_rates_validated(self):
        with pytest.raises(ValueError):
            MetricReport(
                mma_per_threshold={3: 1.5},
                matching_score=0.5,
                ha_per_threshold={3: 0.5},
                n_pairs=1,
            )

    def test_json_round_trip(self):
        report = MetricReport.aggregate([self._pair(0.75, 0.5, True)])
        payload = json.loads(report.to_json())
        assert payload["mma"]["3"] == 0.75
        assert payload["matching_score"] == 0.5
        assert payload["n_pairs"] == 1

    def test_table_mentions_all_metrics(self):
        report = MetricReport.aggregate([self._pair(0.75, 0.5, True)])
        table = report.to_table()
        assert "MMA" in table
        assert "HA" in table
        assert "M.S." in table

    def test_curve_file_written(self, tmp_path):
        report = MetricReport.aggregate(
            [self._pair(0.75, 0.5, True), self._pair(0.5, 0.4, False)]
        )
        out = tmp_path / "curve.png"
        save_mma_curve(report, str(out))
        assert out.exists()
        assert out.stat().st_size > 0
