"""Planar homographies: construction, random sampling and point warping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Third homogeneous coordinate below this magnitude maps a point to infinity.
W_EPS = 1e-10
DET_EPS = 1e-8


class DegenerateHomographyError(ValueError):
    """Raised when a sampled or supplied matrix is numerically non-invertible."""


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform, stored row-major and normalized so m[2, 2] = 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DegenerateHomographyError("homography contains non-finite entries")
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise DegenerateHomographyError(
                f"homography is singular (|det| = {abs(np.linalg.det(m)):.3e})"
            )
        if abs(m[2, 2]) <= W_EPS:
            raise DegenerateHomographyError("cannot normalize: m[2][2] is ~0")
        m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        """Matrix product; (a @ b) warps points by b first, then a."""
        return Homography(self.matrix @ other.matrix)


def warp_points(points: np.ndarray, h: Homography) -> np.ndarray:
    """Apply a homography to an array of (x, y) points.

    Returns an (N, 2) float64 array. Points whose third homogeneous
    coordinate falls below ``W_EPS`` (mapped to infinity) come back as NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 2:
        raise ValueError(f"expected (N, 2) points, got {pts.shape}")
    ones = np.ones((pts.shape[0], 1))
    proj = np.hstack([pts, ones]) @ h.matrix.T
    w = proj[:, 2]
    bad = np.abs(w) < W_EPS
    out = np.empty_like(pts)
    safe_w = np.where(bad, 1.0, w)
    out[:, 0] = proj[:, 0] / safe_w
    out[:, 1] = proj[:, 1] / safe_w
    out[bad] = np.nan
    return out[0] if squeeze else out


@dataclass(frozen=True)
class HomographyParams:
    """Sampling ranges for random view synthesis.

    rotation_deg: rotation about the image center, uniform in +/- range.
    scale: isotropic scale range about the center.
    perspective: perspective coefficients, uniform in +/- range; a value p
        tilts the projective plane so depth varies by roughly +/- p/2 across
        the image.
    translation: shift as a fraction of the image side, uniform in +/- range.
    """

    rotation_deg: float = 25.0
    scale: tuple[float, float] = (0.8, 1.2)
    perspective: float = 0.1
    translation: float = 0.1

    def __post_init__(self):
        if self.rotation_deg < 0 or self.perspective < 0 or self.translation < 0:
            raise ValueError("ranges must be non-negative")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError(f"bad scale range {self.scale}")


def _corners(width: int, height: int) -> np.ndarray:
    return np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )


def _convex_positive_area(quad: np.ndarray) -> bool:
    if not np.all(np.isfinite(quad)):
        return False
    cross = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        cross.append(a[0] * b[1] - a[1] * b[0])
    cross = np.array(cross)
    return bool(np.all(cross > 1e-6) or np.all(cross < -1e-6))


def random_homography(
    image_size: tuple[int, int],
    params: HomographyParams = HomographyParams(),
    seed: int = 0,
    max_retries: int = 16,
) -> Homography:
    """Sample a random invertible homography in pixel coordinates.

    image_size is (height, width). Transform order about the image center:
    perspective, scale, rotation, translation. Deterministic per seed.
    Degenerate draws (collapsing corner quad) are resampled up to
    ``max_retries`` times.
    """
    height, width = image_size
    rng = np.random.default_rng(seed)
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    to_center = Homography.translation(-center[0], -center[1])
    from_center = Homography.translation(center[0], center[1])

    for _ in range(max_retries):
        theta = np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg))
        s = rng.uniform(params.scale[0], params.scale[1])
        px = rng.uniform(-params.perspective, params.perspective) / max(width, 1)
        py = rng.uniform(-params.perspective, params.perspective) / max(height, 1)
        tx = rng.uniform(-params.translation, params.translation) * width
        ty = rng.uniform(-params.translation, params.translation) * height

        persp = np.eye(3)
        persp[2, 0] = px
        persp[2, 1] = py
        rot_scale = np.array(
            [
                [s * np.cos(theta), -s * np.sin(theta), 0.0],
                [s * np.sin(theta), s * np.cos(theta), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        trans = np.eye(3)
        trans[0, 2] = tx
        trans[1, 2] = ty

        try:
            core = Homography(trans @ rot_scale @ persp)
            h = from_center @ core @ to_center
        except DegenerateHomographyError:
            continue
        warped = warp_points(_corners(width, height), h)
        if _convex_positive_area(warped):
            return h
    raise DegenerateHomographyError(
        f"no valid homography after {max_retries} draws (seed {seed})"
    )
