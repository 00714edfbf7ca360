"""Keypoint extraction, descriptor sampling at keypoints, and matching.

Keypoints are thresholded heatmap pixels thinned by the same greedy
Chebyshev NMS used during training-time sampling, kept at integer pixel
positions. Descriptors and attention weights live at 1/4 resolution and
are read out by bilinear interpolation at coords/4. Matching is mutual
nearest neighbor, either on raw unit descriptors or on attention-weighted
ones (w_i d_i), which shrinks the effective matching space of weakly
attended points.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .sampling import greedy_nms

DEFAULT_ALPHA = 0.9
DEFAULT_NMS_RADIUS = 4
DEFAULT_MAX_KEYPOINTS = 2000
DESCRIPTOR_SCALE = 4  # descriptor/attention fields live at 1/4 resolution
UNIT_NORM_TOL = 1e-4

MATCH_MODES = ("plain", "attention_weighted")


@dataclass
class KeypointSet:
    """Extracted keypoints with sampled descriptors and attention weights."""

    coords: np.ndarray  # (M, 2) float (x, y), integer-valued positions
    scores: np.ndarray  # (M,) heatmap responses
    descriptors: np.ndarray  # (M, D) unit rows
    weights: np.ndarray  # (M,) positive attention scores

    def __post_init__(self):
        m = len(self.coords)
        if self.scores.shape != (m,) or self.weights.shape != (m,):
            raise ValueError("scores/weights must be (M,)")
        if self.descriptors.shape[0] != m:
            raise ValueError("descriptor count must match coordinate count")
        if m:
            norms = np.linalg.norm(self.descriptors, axis=1)
            worst = np.abs(norms - 1.0).max()
            if worst > UNIT_NORM_TOL:
                raise ValueError(
                    f"descriptors must be unit norm within {UNIT_NORM_TOL}; "
                    f"worst deviation {worst:.2e}"
                )
            if self.weights.min() <= 0:
                raise ValueError("attention weights must be strictly positive")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class MatchSet:
    """Mutual-nearest-neighbor matches between two keypoint sets."""

    indices_a: np.ndarray
    indices_b: np.ndarray
    distances: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in MATCH_MODES:
            raise ValueError(f"mode must be one of {MATCH_MODES}, got {self.mode!r}")
        if len(set(self.indices_a.tolist())) != len(self.indices_a):
            raise ValueError("duplicate indices on side a")
        if len(set(self.indices_b.tolist())) != len(self.indices_b):
            raise ValueError("duplicate indices on side b")

    def __len__(self) -> int:
        return len(self.indices_a)


def extract_keypoints(
    heatmap: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    nms_radius: int = DEFAULT_NMS_RADIUS,
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS,
) -> tuple[np.ndarray, np.ndarray]:
    """Threshold a probability heatmap and thin it with greedy NMS.

    Pixels with heatmap >= alpha are candidates; suppression and ordering
    follow greedy_nms (descending score, ties by smallest row-major
    index); at most max_keypoints survive. Returns (coords (M, 2) int
    (x, y), scores (M,)); both empty when nothing clears the threshold.
    """
    heatmap = np.asarray(heatmap)
    if heatmap.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    rows, cols = np.nonzero(heatmap >= alpha)
    if len(rows) == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    coords = np.stack([cols, rows], axis=1).astype(np.int64)
    scores = heatmap[rows, cols].astype(np.float64)
    keep = greedy_nms(coords, scores, nms_radius)[:max_keypoints]
    return coords[keep], scores[keep]


def sample_at_keypoints(
    descriptor_field: np.ndarray,
    attention_field: np.ndarray,
    coords: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample descriptors and attention at full-res coords.

    descriptor_field is (D, h/4, w/4), attention_field (h/4, w/4); coords
    are (M, 2) (x, y) in the full-resolution frame and are divided by 4,
    clamped to the field border, then interpolated. Sampled descriptors
    are re-normalized to unit length.
    """
    desc = np.asarray(descriptor_field, dtype=np.float64)
    att = np.asarray(attention_field, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"expected (M, 2) coords, got {coords.shape}")
    h4, w4 = att.shape
    full_w, full_h = w4 * DESCRIPTOR_SCALE, h4 * DESCRIPTOR_SCALE
    out_x = (coords[:, 0] < 0) | (coords[:, 0] > full_w - 1)
    out_y = (coords[:, 1] < 0) | (coords[:, 1] > full_h - 1)
    if (out_x | out_y).any():
        bad = coords[out_x | out_y][0]
        raise ValueError(f"coordinate {tuple(bad)} outside image bounds")

    u = np.clip(coords[:, 0] / DESCRIPTOR_SCALE, 0.0, w4 - 1.0)
    v = np.clip(coords[:, 1] / DESCRIPTOR_SCALE, 0.0, h4 - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w4 - 1)
    v1 = np.minimum(v0 + 1, h4 - 1)
    fu = u - u0
    fv = v - v0

    def lerp(field):
        top = field[..., v0, u0] * (1 - fu) + field[..., v0, u1] * fu
        bot = field[..., v1, u0] * (1 - fu) + field[..., v1, u1] * fu
        return top * (1 - fv) + bot * fv

    descriptors = lerp(desc).T  # (M, D)
    norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
    descriptors = descriptors / np.maximum(norms, 1e-12)
    return descriptors, lerp(att)


def sample_descriptors_torch(
    descriptor_field: torch.Tensor,
    attention_field: torch.Tensor,
    coords: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable counterpart of sample_at_keypoints for training.

    Same convention (coords / 4 in field index space, border clamping,
    renormalized descriptors); descriptor_field is (1, D, h/4, w/4),
    attention_field (1, h/4, w/4), coords (M, 2) full-res (x, y).
    """
    _, _, h4, w4 = descriptor_field.shape
    coords = coords.to(descriptor_field.dtype)
    u = coords[:, 0] / DESCRIPTOR_SCALE
    v = coords[:, 1] / DESCRIPTOR_SCALE
    # align_corners=True maps [-1, 1] onto [0, size-1] index space
    gx = 2.0 * u / max(w4 - 1, 1) - 1.0
    gy = 2.0 * v / max(h4 - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=1).reshape(1, 1, -1, 2)
    desc = F.grid_sample(
        descriptor_field, grid, mode="bilinear", padding_mode="border",
        align_corners=True,
    )[0, :, 0].T
    att = F.grid_sample(
        attention_field.unsqueeze(1), grid, mode="bilinear",
        padding_mode="border", align_corners=True,
    )[0, 0, 0]
    return F.normalize(desc, p=2, dim=1), att


def extract_features(
    model,
    image: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    nms_radius: int = DEFAULT_NMS_RADIUS,
    max_keypoints: int = DEFAULT_MAX_KEYPOINTS,
) -> KeypointSet:
    """Run the full single-image pipeline and return a KeypointSet.

    model is anything whose call maps a [0,1] grayscale image tensor to a
    (descriptors, attention, heatmaps) triple; image is a 2-D numpy
    array. The fused heatmap is thresholded and thinned, then descriptors
    and attention weights are read out at the surviving keypoints.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got {image.shape}")
    with torch.no_grad():
        desc_field, att_field, heatmaps = model(torch.from_numpy(image))
        heatmap = heatmaps.fused.squeeze(0).numpy()
        dense_d = desc_field.d.squeeze(0).double().numpy()
        dense_w = att_field.w.squeeze(0).double().numpy()
    coords, scores = extract_keypoints(heatmap, alpha, nms_radius, max_keypoints)
    if len(coords) == 0:
        dim = dense_d.shape[0]
        return KeypointSet(
            coords=coords,
            scores=scores,
            descriptors=np.empty((0, dim)),
            weights=np.empty(0),
        )
    descriptors, weights = sample_at_keypoints(dense_d, dense_w, coords)
    return KeypointSet(
        coords=coords, scores=scores, descriptors=descriptors, weights=weights
    )


def _distance_matrix(set_a: KeypointSet, set_b: KeypointSet, mode: str) -> np.ndarray:
    da = set_a.descriptors
    db = set_b.descriptors
    if mode == "attention_weighted":
        da = set_a.weights[:, None] * da
        db = set_b.weights[:, None] * db
    diff = da[:, None, :] - db[None, :, :]
    return np.sqrt(np.square(diff).sum(axis=2))


def match(set_a: KeypointSet, set_b: KeypointSet, mode: str = "plain") -> MatchSet:
    """Mutual-nearest-neighbor matching in the chosen descriptor space.

    Distance ties resolve to the lowest index on each side, so the result
    is deterministic. Either side being empty yields an empty MatchSet.
    """
    if mode not in MATCH_MODES:
        raise ValueError(f"mode must be one of {MATCH_MODES}, got {mode!r}")
    if len(set_a) == 0 or len(set_b) == 0:
        empty = np.empty(0, dtype=np.int64)
        return MatchSet(empty, empty.copy(), np.empty(0), mode)
    dist = _distance_matrix(set_a, set_b, mode)
    nn_ab = dist.argmin(axis=1)  # ties -> lowest j
    nn_ba = dist.argmin(axis=0)  # ties -> lowest i
    ia = np.nonzero(nn_ba[nn_ab] == np.arange(len(set_a)))[0]
    ib = nn_ab[ia]
    return MatchSet(
        indices_a=ia.astype(np.int64),
        indices_b=ib.astype(np.int64),
        distances=dist[ia, ib],
        mode=mode,
    )


# ---------------------------------------------------------------------------
# Feature export files
# ---------------------------------------------------------------------------


def write_features(
    path: str | Path, image_path: str, image_shape: tuple[int, int], kp: KeypointSet
):
    """Write one keypoint set in the text export format.

    Header line: image path, height, width, count. Then one line per
    keypoint: x y score weight d0..dD-1, space-delimited, 9 significant
    digits.
    """
    h, w = image_shape
    with open(path, "w") as f:
        f.write(f"{image_path} {h} {w} {len(kp)}\n")
        for i in range(len(kp)):
            fields = [
                kp.coords[i, 0], kp.coords[i, 1], kp.scores[i], kp.weights[i],
                *kp.descriptors[i],
            ]
            f.write(" ".join(f"{v:.9g}" for v in fields) + "\n")


def read_features(path: str | Path) -> tuple[str, tuple[int, int], KeypointSet]:
    """Read a feature export file, validating count and descriptor norms."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) < 4:
            raise ValueError(f"{path}: malformed header")
        image_path = " ".join(header[:-3])
        h, w, count = (int(x) for x in header[-3:])
        rows = [line.split() for line in f if line.strip()]
    if len(rows) != count:
        raise ValueError(f"{path}: header promises {count} keypoints, found {len(rows)}")
    if count == 0:
        kp = KeypointSet(
            np.empty((0, 2)), np.empty(0), np.empty((0, 0)), np.empty(0)
        )
        return image_path, (h, w), kp
    data = np.array(rows, dtype=np.float64)
    kp = KeypointSet(
        coords=data[:, 0:2],
        scores=data[:, 2],
        descriptors=data[:, 4:],
        weights=data[:, 3],
    )
    return image_path, (h, w), kp
