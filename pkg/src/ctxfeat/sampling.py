"""Keypoint-guided correspondence sampling for descriptor training.

The teacher's two probability maps are fused into a compound heatmap in
the reference frame, the heatmap is divided into a fixed grid of cells
whose per-cell maxima form the candidate set, non-maximum suppression
thins the candidates, and the top-scoring survivors with a co-visible
warp target become the training correspondences (P, P').

All steps are deterministic: equal scores are broken by smallest
row-major pixel index, and no randomness is involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .homography import Homography, warp_points
from .synth import TeacherHeatmaps, TrainingPair

DEFAULT_GRID = (40, 40)
DEFAULT_NMS_RADIUS = 4
DEFAULT_N_POINTS = 400


class SamplingError(ValueError):
    """Raised when a pair yields too few correspondences to train on."""


@dataclass
class SampledCorrespondences:
    """Pixel correspondences (P, P') with their compound-heatmap scores."""

    points_a: np.ndarray  # (N, 2) int (x, y) in image_a
    points_b: np.ndarray  # (N, 2) float (x, y) = warp(points_a)
    scores: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.points_a)


def compound_heatmap(teacher: TeacherHeatmaps, h: Homography) -> TeacherHeatmaps:
    """Fill in m1_warp (m2 pulled into image_a's frame) and m1 + m1_warp.

    m1_warp(p) = m2(h(p)); pixels warping outside m2 contribute 0.
    """
    height, width = teacher.m1.shape
    m1_warp = cv2.warpPerspective(
        teacher.m2,
        h.matrix,
        (width, height),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0.0,
    )
    m1_warp = np.clip(m1_warp, 0.0, 1.0)
    return TeacherHeatmaps(
        m1=teacher.m1,
        m2=teacher.m2,
        m1_warp=m1_warp,
        compound=teacher.m1 + m1_warp,
    )


def grid_cell_argmax(
    heatmap: np.ndarray, grid: tuple[int, int] = DEFAULT_GRID
) -> tuple[np.ndarray, np.ndarray]:
    """Best-scoring pixel of every grid cell.

    The map is divided into grid[0] x grid[1] cells with boundaries
    floor(i * size / grid); empty cells (possible when the map is smaller
    than the grid) are skipped. Within a cell, ties go to the smallest
    row-major index. Returns (coords (K, 2) int (x, y), scores (K,)).
    """
    height, width = heatmap.shape
    rows, cols = grid
    r_edges = [(i * height) // rows for i in range(rows + 1)]
    c_edges = [(j * width) // cols for j in range(cols + 1)]
    coords = []
    scores = []
    for i in range(rows):
        r0, r1 = r_edges[i], r_edges[i + 1]
        if r0 == r1:
            continue
        for j in range(cols):
            c0, c1 = c_edges[j], c_edges[j + 1]
            if c0 == c1:
                continue
            cell = heatmap[r0:r1, c0:c1]
            flat = int(np.argmax(cell))  # first occurrence = row-major tie-break
            dr, dc = divmod(flat, c1 - c0)
            coords.append((c0 + dc, r0 + dr))
            scores.append(cell[dr, dc])
    return (
        np.array(coords, dtype=np.int64).reshape(-1, 2),
        np.array(scores, dtype=np.float64),
    )


def greedy_nms(
    points_xy: np.ndarray, scores: np.ndarray, radius: int = DEFAULT_NMS_RADIUS
) -> np.ndarray:
    """Greedy non-maximum suppression under the Chebyshev metric.

    Candidates are visited in descending score order (ties by smallest
    (y, x)); a candidate is kept iff its Chebyshev distance to every
    already-kept point exceeds radius. Returns indices into the input
    arrays, in visit order.
    """
    points_xy = np.asarray(points_xy)
    scores = np.asarray(scores, dtype=np.float64)
    if len(points_xy) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((points_xy[:, 0], points_xy[:, 1], -scores))
    kept: list[int] = []
    kept_pts = np.empty((0, 2), dtype=np.float64)
    for idx in order:
        p = points_xy[idx].astype(np.float64)
        if len(kept):
            cheb = np.abs(kept_pts - p).max(axis=1)
            if cheb.min() <= radius:
                continue
        kept.append(int(idx))
        kept_pts = np.vstack([kept_pts, p[None]])
    return np.array(kept, dtype=np.int64)


def sample_correspondences(
    pair: TrainingPair,
    teacher: TeacherHeatmaps,
    n_points: int = DEFAULT_N_POINTS,
    grid: tuple[int, int] = DEFAULT_GRID,
    nms_radius: int = DEFAULT_NMS_RADIUS,
) -> SampledCorrespondences:
    """Run the full sampling pipeline on one training pair.

    Compound heatmap -> per-cell argmax -> NMS -> top n_points among
    candidates whose warp target is co-visible; P' = warp(P, H).
    Raises SamplingError when fewer than 2 points survive.
    """
    filled = compound_heatmap(teacher, pair.homography)
    coords, scores = grid_cell_argmax(filled.compound, grid)
    keep = greedy_nms(coords, scores, nms_radius)
    coords, scores = coords[keep], scores[keep]

    valid = pair.valid_mask[coords[:, 1], coords[:, 0]]
    coords, scores = coords[valid], scores[valid]
    coords, scores = coords[:n_points], scores[:n_points]
    if len(coords) < 2:
        raise SamplingError(
            f"only {len(coords)} correspondences survived sampling; "
            "pair rejected for training"
        )
    points_b = warp_points(coords.astype(np.float64), pair.homography)
    return SampledCorrespondences(
        points_a=coords, points_b=points_b, scores=scores
    )
