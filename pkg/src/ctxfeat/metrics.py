"""Image-matching evaluation: MMA, matching score, homography accuracy.

A match is correct at threshold t when the ground-truth warp of its
reference point lands within t pixels of its target point. Matching score
divides correct matches by the keypoints visible in the shared view,
averaged over both directions. Homography accuracy compares the corner
reprojections of a robustly estimated homography against ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import KeypointSet, MatchSet, match
from .homography import DegenerateHomographyError, Homography, warp_points

DEFAULT_THRESHOLDS = tuple(range(1, 11))
RANSAC_THRESHOLD = 3.0
RANSAC_ITERATIONS = 1000
MS_THRESHOLD = 3


class EmptySharedViewError(ValueError):
    """Raised when no keypoints fall in the co-visible region."""


def _match_errors(
    set_a: KeypointSet, set_b: KeypointSet, matches: MatchSet, gt_h: Homography
) -> np.ndarray:
    """Reprojection error of every match under the ground-truth warp."""
    if len(matches) == 0:
        return np.empty(0)
    pa = set_a.coords[matches.indices_a]
    pb = set_b.coords[matches.indices_b]
    proj = warp_points(pa, gt_h)
    err = np.linalg.norm(proj - pb, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def mma(
    set_a: KeypointSet,
    set_b: KeypointSet,
    matches: MatchSet,
    gt_h: Homography,
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
) -> dict[int, float]:
    """Fraction of correct matches per threshold; 0 when there are none."""
    err = _match_errors(set_a, set_b, matches, gt_h)
    if len(err) == 0:
        return {t: 0.0 for t in thresholds}
    return {t: float((err <= t).mean()) for t in thresholds}


def _inside(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return (
        np.isfinite(points).all(axis=1)
        & (points[:, 0] >= 0.0)
        & (points[:, 0] <= w - 1.0)
        & (points[:, 1] >= 0.0)
        & (points[:, 1] <= h - 1.0)
    )


def matching_score(
    set_a: KeypointSet,
    set_b: KeypointSet,
    matches: MatchSet,
    gt_h: Homography,
    image_shape: tuple[int, int],
    threshold: float = MS_THRESHOLD,
) -> float:
    """Correct matches over shared-view keypoints, averaged both ways.

    The shared view of each side is the set of its keypoints whose
    ground-truth warp lands inside the other image (0-px border margin).
    Raises EmptySharedViewError when either denominator is zero.
    """
    err = _match_errors(set_a, set_b, matches, gt_h)
    correct = int((err <= threshold).sum()) if len(err) else 0
    shared_a = int(_inside(warp_points(set_a.coords, gt_h), image_shape).sum())
    shared_b = int(
        _inside(warp_points(set_b.coords, gt_h.inverse()), image_shape).sum()
    )
    if shared_a == 0 or shared_b == 0:
        raise EmptySharedViewError(
            f"shared view holds {shared_a}/{shared_b} keypoints (a/b)"
        )
    return 0.5 * (correct / shared_a + correct / shared_b)


# ---------------------------------------------------------------------------
# Robust homography estimation
# ---------------------------------------------------------------------------


def _normalization(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.linalg.norm(points - centroid, axis=1).mean()
    scale = math.sqrt(2.0) / dist if dist > 1e-12 else 1.0
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return (points - centroid) * scale, t


def fit_homography_dlt(points_a: np.ndarray, points_b: np.ndarray) -> Homography:
    """Least-squares homography via the normalized direct linear transform.

    Exact for noise-free correspondences in general position; raises
    DegenerateHomographyError on rank-deficient configurations.
    """
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    if pa.shape != pb.shape or pa.ndim != 2 or pa.shape[0] < 4 or pa.shape[1] != 2:
        raise ValueError(f"need matching (N>=4, 2) arrays, got {pa.shape}/{pb.shape}")
    na, ta = _normalization(pa)
    nb, tb = _normalization(pb)
    rows = []
    for (x, y), (u, v) in zip(na, nb):
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_norm = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(tb) @ h_norm @ ta
    return Homography(matrix)  # raises DegenerateHomographyError if singular


def _degenerate_sample(points: np.ndarray) -> bool:
    """Any 3 of the 4 points collinear (within a relative tolerance)."""
    span = max(np.ptp(points, axis=0).max(), 1.0)
    for skip in range(4):
        tri = np.delete(points, skip, axis=0)
        cross = (tri[1] - tri[0])[0] * (tri[2] - tri[0])[1] - (tri[1] - tri[0])[1] * (
            tri[2] - tri[0]
        )[0]
        if abs(cross) < 1e-9 * span * span:
            return True
    return False


def estimate_homography(
    points_a: np.ndarray,
    points_b: np.ndarray,
    seed: int = 0,
    threshold: float = RANSAC_THRESHOLD,
    iterations: int = RANSAC_ITERATIONS,
) -> Homography | None:
    """RANSAC over 4-point hypotheses with a final inlier refit.

    The error is the forward transfer distance ||h(p) - p'||. Returns None
    (estimation failed) on < 4 matches or when no valid model is found.
    Deterministic per seed.
    """
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    n = len(pa)
    if n < 4:
        return None
    rng = np.random.default_rng(seed)
    best_inliers: np.ndarray | None = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        if _degenerate_sample(pa[idx]) or _degenerate_sample(pb[idx]):
            continue
        try:
            h = fit_homography_dlt(pa[idx], pb[idx])
        except DegenerateHomographyError:
            continue
        err = np.linalg.norm(warp_points(pa, h) - pb, axis=1)
        err = np.where(np.isfinite(err), err, np.inf)
        inliers = err <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            if count == n:
                break
    if best_inliers is None or best_count < 4:
        return None
    try:
        return fit_homography_dlt(pa[best_inliers], pb[best_inliers])
    except DegenerateHomographyError:
        return None


def homography_accuracy(
    est_h: Homography | None,
    gt_h: Homography,
    image_shape: tuple[int, int],
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
) -> dict[int, bool]:
    """Success flags per threshold from mean corner reprojection error."""
    if est_h is None:
        return {t: False for t in thresholds}
    h, w = image_shape
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]]
    )
    est = warp_points(corners, est_h)
    gt = warp_points(corners, gt_h)
    if not (np.isfinite(est).all() and np.isfinite(gt).all()):
        return {t: False for t in thresholds}
    mean_err = float(np.linalg.norm(est - gt, axis=1).mean())
    return {t: mean_err <= t for t in thresholds}


# ---------------------------------------------------------------------------
# Per-pair evaluation and aggregation
# ---------------------------------------------------------------------------


@dataclass
class PairMetrics:
    """Metrics of one evaluated image pair."""

    mma_per_threshold: dict[int, float]
    matching_score: float | None  # None when the shared view was empty
    ha_per_threshold: dict[int, bool]
    n_keypoints_a: int
    n_keypoints_b: int
    n_matches: int
    n_correct: int  # at the matching-score threshold

    def __post_init__(self):
        if not (
            self.n_correct
            <= self.n_matches
            <= max(min(self.n_keypoints_a, self.n_keypoints_b), 0)
        ):
            raise ValueError(
                f"inconsistent counts: correct {self.n_correct} <= matches "
                f"{self.n_matches} <= min keypoints "
                f"{min(self.n_keypoints_a, self.n_keypoints_b)} violated"
            )


def evaluate_pair(
    set_a: KeypointSet,
    set_b: KeypointSet,
    gt_h: Homography,
    image_shape: tuple[int, int],
    mode: str = "plain",
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS,
    ransac_seed: int = 0,
) -> PairMetrics:
    """Match two keypoint sets and compute all per-pair metrics."""
    matches = match(set_a, set_b, mode)
    err = _match_errors(set_a, set_b, matches, gt_h)
    try:
        ms = matching_score(set_a, set_b, matches, gt_h, image_shape)
    except EmptySharedViewError:
        ms = None
    if len(matches) >= 4:
        est = estimate_homography(
            set_a.coords[matches.indices_a],
            set_b.coords[matches.indices_b],
            seed=ransac_seed,
        )
    else:
        est = None
    return PairMetrics(
        mma_per_threshold=mma(set_a, set_b, matches, gt_h, thresholds),
        matching_score=ms,
        ha_per_threshold=homography_accuracy(est, gt_h, image_shape, thresholds),
        n_keypoints_a=len(set_a),
        n_keypoints_b=len(set_b),
        n_matches=len(matches),
        n_correct=int((err <= MS_THRESHOLD).sum()) if len(err) else 0,
    )


@dataclass
class MetricReport:
    """Dataset-level aggregate of per-pair metrics."""

    mma_per_threshold: dict[int, float]
    matching_score: float
    ha_per_threshold: dict[int, float]
    n_pairs: int
    n_skipped_ms: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        rates = [
            *self.mma_per_threshold.values(),
            self.matching_score,
            *self.ha_per_threshold.values(),
        ]
        if any(not (0.0 <= r <= 1.0) for r in rates):
            raise ValueError("all aggregate rates must lie in [0, 1]")

    @classmethod
    def aggregate(cls, pairs: list[PairMetrics]) -> "MetricReport":
        """Mean MMA/HA over all pairs; M.S. over pairs with a shared view.

        Pairs with zero matches already contribute 0 to MMA by
        construction, so silent failures drag the average down.
        """
        if not pairs:
            raise ValueError("no pairs to aggregate")
        thresholds = list(pairs[0].mma_per_threshold)
        mma_avg = {
            t: float(np.mean([p.mma_per_threshold[t] for p in pairs]))
            for t in thresholds
        }
        ha_avg = {
            t: float(np.mean([float(p.ha_per_threshold[t]) for p in pairs]))
            for t in thresholds
        }
        scored = [p.matching_score for p in pairs if p.matching_score is not None]
        return cls(
            mma_per_threshold=mma_avg,
            matching_score=float(np.mean(scored)) if scored else 0.0,
            ha_per_threshold=ha_avg,
            n_pairs=len(pairs),
            n_skipped_ms=len(pairs) - len(scored),
            counts={
                "keypoints": int(sum(p.n_keypoints_a + p.n_keypoints_b for p in pairs)),
                "matches": int(sum(p.n_matches for p in pairs)),
                "correct": int(sum(p.n_correct for p in pairs)),
            },
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "mma": {str(t): v for t, v in self.mma_per_threshold.items()},
                "matching_score": self.matching_score,
                "ha": {str(t): v for t, v in self.ha_per_threshold.items()},
                "n_pairs": self.n_pairs,
                "n_skipped_ms": self.n_skipped_ms,
                "counts": self.counts,
            },
            indent=2,
        )

    def to_table(self) -> str:
        lines = [f"{'t':>4} {'MMA@t':>8} {'HA@t':>8}"]
        for t in self.mma_per_threshold:
            lines.append(
                f"{t:>4} {self.mma_per_threshold[t]:>8.4f} "
                f"{self.ha_per_threshold[t]:>8.4f}"
            )
        lines.append(f"M.S. = {self.matching_score:.4f}  over {self.n_pairs} pairs")
        if self.n_skipped_ms:
            lines.append(f"({self.n_skipped_ms} pairs skipped for M.S.: empty shared view)")
        return "\n".join(lines)


def save_mma_curve(report: MetricReport, path: str):
    """Write an MMA-vs-threshold curve as an image file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = sorted(report.mma_per_threshold)
    values = [report.mma_per_threshold[t] for t in ts]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(ts, values, marker="o")
    ax.set_xlabel("threshold [px]")
    ax.set_ylabel("MMA")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
