"""Synthetic training data: warped image pairs and corner pseudo-labels.

Training pairs are built by warping an image with a random homography and
jittering photometry, so dense ground-truth correspondence is known
exactly. Keypoint supervision comes either from imported teacher heatmaps
(documented binary format below) or from a built-in synthetic-shapes
renderer whose corner locations are known analytically.

Heatmap file format: 16-byte header (magic ``CFHM``, uint32 version,
uint32 height, uint32 width, all little-endian) followed by height*width
row-major float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .homography import Homography, HomographyParams, random_homography, warp_points

HEATMAP_MAGIC = b"CFHM"
HEATMAP_VERSION = 1
MAX_LABEL_FRACTION = 0.05


@dataclass
class TrainingPair:
    """Two views of the same scene related by a known homography a->b."""

    image_a: np.ndarray
    image_b: np.ndarray
    homography: Homography
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise ValueError("pair images must have equal shapes")
        if self.valid_mask.shape != self.image_a.shape:
            raise ValueError("valid_mask shape must match the images")
        if not self.valid_mask.any():
            raise ValueError("valid_mask is empty: no co-visible pixels")


@dataclass
class PseudoLabelMap:
    """Binary keypoint supervision map G."""

    g: np.ndarray

    def __post_init__(self):
        values = np.unique(self.g)
        if not np.isin(values, (0, 1)).all():
            raise ValueError("label map must be binary")
        fraction = float(self.g.mean())
        if fraction >= MAX_LABEL_FRACTION:
            raise ValueError(
                f"positive fraction {fraction:.3f} too dense for the "
                f"weighted-BCE regime (limit {MAX_LABEL_FRACTION})"
            )


@dataclass
class TeacherHeatmaps:
    """Keypoint probability maps for both views of a pair.

    m1_warp (m2 resampled into image_a's frame) and the compound map
    m1 + m1_warp are filled in by the correspondence sampler.
    """

    m1: np.ndarray
    m2: np.ndarray
    m1_warp: np.ndarray | None = None
    compound: np.ndarray | None = None

    def __post_init__(self):
        for name in ("m1", "m2"):
            _check_probability_map(getattr(self, name), name)
        if self.compound is not None:
            if self.compound.min() < 0 or self.compound.max() > 2:
                raise ValueError("compound heatmap must lie in [0, 2]")


def _check_probability_map(arr: np.ndarray, name: str):
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    bad = (arr < 0.0) | (arr > 1.0) | ~np.isfinite(arr)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(
            f"{name} value {arr[r, c]!r} at pixel ({r}, {c}) outside [0, 1]"
        )


# ---------------------------------------------------------------------------
# Heatmap file IO
# ---------------------------------------------------------------------------


def write_heatmap(path: str | Path, arr: np.ndarray):
    """Write a 2-D float map in the documented binary heatmap format."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", HEATMAP_MAGIC, HEATMAP_VERSION, h, w))
        f.write(arr.astype("<f4").tobytes())


def read_heatmap(path: str | Path) -> np.ndarray:
    """Read a heatmap file; validates header and payload size."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    magic, version, h, w = struct.unpack("<4sIII", raw[:16])
    if magic != HEATMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != HEATMAP_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    payload = raw[16:]
    if len(payload) != 4 * h * w:
        raise ValueError(
            f"{path}: expected {4 * h * w} payload bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()


def import_teacher_heatmaps(path_m1: str | Path, path_m2: str | Path) -> TeacherHeatmaps:
    """Load and validate a pair of teacher probability maps.

    Rejects out-of-range values, naming the first offending pixel.
    """
    maps = {}
    for name, path in (("m1", path_m1), ("m2", path_m2)):
        arr = read_heatmap(path)
        try:
            _check_probability_map(arr, name)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None
        maps[name] = arr
    return TeacherHeatmaps(**maps)


# ---------------------------------------------------------------------------
# Pair synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhotometricParams:
    """Jitter ranges applied to the warped view.

    brightness: additive shift, uniform in +/- range.
    contrast: multiplicative scale about mid-gray.
    blur_sigma: Gaussian blur standard deviation range, 0 disables.
    """

    brightness: float = 0.1
    contrast: tuple[float, float] = (0.85, 1.18)
    blur_sigma: tuple[float, float] = (0.0, 0.6)

    def __post_init__(self):
        if self.brightness < 0:
            raise ValueError("brightness range must be non-negative")
        if not (0 < self.contrast[0] <= self.contrast[1]):
            raise ValueError(f"bad contrast range {self.contrast}")
        if not (0 <= self.blur_sigma[0] <= self.blur_sigma[1]):
            raise ValueError(f"bad blur range {self.blur_sigma}")

    @classmethod
    def none(cls) -> "PhotometricParams":
        return cls(brightness=0.0, contrast=(1.0, 1.0), blur_sigma=(0.0, 0.0))


def to_gray_unit(image: np.ndarray) -> np.ndarray:
    """Convert an 8-bit or float, gray or color image to float32 [0,1] h x w."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    img = img.astype(np.float32)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("float images must already be scaled to [0, 1]")
    return img


def compute_valid_mask(h: Homography, shape: tuple[int, int]) -> np.ndarray:
    """Boolean map of image_a pixels whose warp lands inside image_b."""
    height, width = shape
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    warped = warp_points(pts, h)
    inside = (
        np.isfinite(warped).all(axis=1)
        & (warped[:, 0] >= 0.0)
        & (warped[:, 0] <= width - 1.0)
        & (warped[:, 1] >= 0.0)
        & (warped[:, 1] <= height - 1.0)
    )
    return inside.reshape(height, width)


def _apply_photometric(
    image: np.ndarray, params: PhotometricParams, rng: np.random.Generator
) -> np.ndarray:
    contrast = rng.uniform(params.contrast[0], params.contrast[1])
    shift = rng.uniform(-params.brightness, params.brightness)
    sigma = rng.uniform(params.blur_sigma[0], params.blur_sigma[1])
    out = image
    if contrast != 1.0 or shift != 0.0:
        out = (image - 0.5) * contrast + 0.5 + shift
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
    if sigma > 0:
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma)
    return out


def synthesize_pair(
    image: np.ndarray,
    seed: int = 0,
    h_params: HomographyParams = HomographyParams(),
    p_params: PhotometricParams = PhotometricParams(),
    crop_size: int | None = None,
) -> TrainingPair:
    """Build a warped + jittered training pair from one source image.

    With crop_size set, a random crop_size x crop_size block is cut first
    (the source must be at least that large). image_b is image_a resampled
    through a random homography, then photometrically jittered; the
    ground-truth homography and co-visibility mask come along.
    """
    rng = np.random.default_rng(seed)
    img = to_gray_unit(image)
    if crop_size is not None:
        height, width = img.shape
        if height < crop_size or width < crop_size:
            raise ValueError(
                f"image {height}x{width} smaller than crop {crop_size}"
            )
        top = int(rng.integers(0, height - crop_size + 1))
        left = int(rng.integers(0, width - crop_size + 1))
        img = img[top : top + crop_size, left : left + crop_size]

    height, width = img.shape
    h = random_homography((height, width), h_params, seed=int(rng.integers(1 << 31)))
    image_b = cv2.warpPerspective(
        img, h.matrix, (width, height), flags=cv2.INTER_LINEAR
    )
    image_b = _apply_photometric(image_b, p_params, rng)
    return TrainingPair(
        image_a=img,
        image_b=image_b,
        homography=h,
        valid_mask=compute_valid_mask(h, (height, width)),
    )


# ---------------------------------------------------------------------------
# Synthetic corner scenes (analytic stand-in for a keypoint teacher)
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    """A rendered scene with its analytically known corner locations."""

    image: np.ndarray
    labels: PseudoLabelMap
    vertices: np.ndarray  # (K, 2) float (x, y)


def render_shapes(
    canvas_size: tuple[int, int],
    shapes: list[tuple],
    background: float = 0.5,
    noise: float = 0.0,
    shading: float = 0.0,
    rng: np.random.Generator | None = None,
    min_label_contrast: float = 0.1,
) -> SyntheticScene:
    """Draw shapes on a flat canvas and record their corner vertices.

    Shapes are ("polygon", (K,2) vertices, intensity),
    ("line", (2,2) endpoints, intensity) or
    ("ellipse", (cx, cy), (ax, ay), angle_deg, intensity); polygon corners
    and line endpoints become positive label pixels, ellipses contribute
    none (they are cornerless distractors). Vertices later painted over by
    other shapes stop being visual corners, so a vertex only becomes a
    label if its 3x3 neighborhood still spans at least min_label_contrast
    in intensity. shading adds a smooth low-frequency intensity field of
    the given amplitude on top of the painted scene, so flat regions keep
    some large-scale structure after downsampling.
    """
    height, width = canvas_size
    img = np.full((height, width), background, dtype=np.float32)
    vertices: list[tuple[float, float]] = []
    for shape in shapes:
        kind = shape[0]
        if kind == "polygon":
            _, pts, intensity = shape
            pts = np.asarray(pts, dtype=np.float64)
            cv2.fillPoly(img, [np.round(pts).astype(np.int32)], float(intensity))
            vertices.extend(map(tuple, pts))
        elif kind == "line":
            _, pts, intensity = shape
            pts = np.asarray(pts, dtype=np.float64)
            a = tuple(np.round(pts[0]).astype(int))
            b = tuple(np.round(pts[1]).astype(int))
            cv2.line(img, a, b, float(intensity), 1)
            vertices.extend(map(tuple, pts))
        elif kind == "ellipse":
            _, center, axes, angle, intensity = shape
            cv2.ellipse(
                img,
                tuple(np.round(center).astype(int)),
                tuple(np.round(axes).astype(int)),
                float(angle),
                0,
                360,
                float(intensity),
                -1,
            )
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
    painted = img  # pre-noise image, used for the visibility check
    if shading > 0 and rng is not None:
        field = rng.normal(0.0, 1.0, img.shape).astype(np.float32)
        field = cv2.GaussianBlur(field, (0, 0), sigmaX=min(height, width) / 8.0)
        field -= field.mean()
        field /= max(float(np.abs(field).max()), 1e-6)
        img = np.clip(img + shading * field, 0.0, 1.0).astype(np.float32)
    if noise > 0 and rng is not None:
        img = np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)
        img = img.astype(np.float32)

    g = np.zeros((height, width), dtype=np.float32)
    kept = []
    for x, y in vertices:
        c, r = int(round(x)), int(round(y))
        if not (0 <= r < height and 0 <= c < width):
            continue
        window = painted[
            max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2
        ]
        if window.max() - window.min() < min_label_contrast:
            continue
        g[r, c] = 1.0
        kept.append((x, y))
    return SyntheticScene(
        image=img,
        labels=PseudoLabelMap(g),
        vertices=np.array(kept, dtype=np.float64).reshape(-1, 2),
    )


def synthetic_corner_labels(
    canvas_size: tuple[int, int] = (256, 256),
    seed: int = 0,
    n_shapes: tuple[int, int] | None = None,
) -> SyntheticScene:
    """Render a random scene of polygons, lines and ellipses.

    Deterministic per seed. Corner/endpoint pixels of polygons and lines
    are the positive labels; intensities contrast with the background.
    The default shape count scales with canvas area so that corner
    supervision stays dense enough for the sparse-label detector loss at
    any training resolution.
    """
    rng = np.random.default_rng(seed)
    height, width = canvas_size
    if n_shapes is None:
        area = height * width
        n_shapes = (max(4, area // 4096), max(9, area // 1638))
    background = float(rng.uniform(0.25, 0.75))
    margin = 8

    def _point():
        return np.array(
            [rng.uniform(margin, width - 1 - margin), rng.uniform(margin, height - 1 - margin)]
        )

    def _intensity():
        # keep at least 0.15 contrast against the background
        lo, hi = (0.0, background - 0.15) if rng.random() < 0.5 else (background + 0.15, 1.0)
        return float(rng.uniform(lo, hi))

    shapes: list[tuple] = []
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1]))):
        kind = rng.choice(["polygon", "polygon", "line", "ellipse", "checker"])
        if kind == "checker":
            # checkerboard patch: k*k alternating squares, (k+1)^2 corners
            k = int(rng.integers(2, 5))
            cell = float(rng.uniform(8.0, 18.0))
            cell = min(
                cell, (width - 1 - 2 * margin) / k, (height - 1 - 2 * margin) / k
            )
            x0 = float(rng.uniform(margin, width - 1 - margin - k * cell))
            y0 = float(rng.uniform(margin, height - 1 - margin - k * cell))
            dark = float(rng.uniform(0.0, 0.27))
            light = float(rng.uniform(0.73, 1.0))
            for i in range(k):
                for j in range(k):
                    quad = np.array(
                        [
                            [x0 + j * cell, y0 + i * cell],
                            [x0 + (j + 1) * cell, y0 + i * cell],
                            [x0 + (j + 1) * cell, y0 + (i + 1) * cell],
                            [x0 + j * cell, y0 + (i + 1) * cell],
                        ]
                    )
                    # per-cell shade jitter: with exactly identical cells,
                    # every cell's hardest negative is an indistinguishable
                    # duplicate and its triplet margin can never be satisfied
                    shade = dark if (i + j) % 2 == 0 else light
                    shade = float(np.clip(shade + rng.uniform(-0.08, 0.08), 0, 1))
                    shapes.append(("polygon", quad, shade))
        elif kind == "polygon":
            center = _point()
            k = int(rng.integers(3, 6))
            angles = np.sort(rng.uniform(0, 2 * np.pi, k))
            radii = rng.uniform(10, min(height, width) / 5.0, k)
            pts = center + np.stack(
                [radii * np.cos(angles), radii * np.sin(angles)], axis=1
            )
            pts = np.clip(pts, margin, [width - 1 - margin, height - 1 - margin])
            shapes.append(("polygon", pts, _intensity()))
        elif kind == "line":
            shapes.append(("line", np.stack([_point(), _point()]), _intensity()))
        else:
            shapes.append(
                (
                    "ellipse",
                    _point(),
                    rng.uniform(6, min(height, width) / 6.0, 2),
                    float(rng.uniform(0, 180)),
                    _intensity(),
                )
            )
    return render_shapes(
        canvas_size, shapes, background=background, noise=0.02, shading=0.12, rng=rng
    )


def warp_label_points(
    vertices: np.ndarray, h: Homography, shape: tuple[int, int]
) -> PseudoLabelMap:
    """Warp analytic vertices into the other view and rasterize to labels."""
    height, width = shape
    g = np.zeros((height, width), dtype=np.float32)
    if len(vertices):
        warped = warp_points(vertices, h)
        for x, y in warped:
            if not np.isfinite((x, y)).all():
                continue
            c, r = int(round(x)), int(round(y))
            if 0 <= r < height and 0 <= c < width:
                g[r, c] = 1.0
    return PseudoLabelMap(g)


# ---------------------------------------------------------------------------
# Dataset building and loading
# ---------------------------------------------------------------------------

LABEL_BLUR_SIGMA = 2.0


def teacher_from_labels(labels: PseudoLabelMap) -> np.ndarray:
    """Turn binary labels into a peaky probability map for the sampler."""
    m = cv2.GaussianBlur(labels.g, (0, 0), sigmaX=LABEL_BLUR_SIGMA)
    peak = m.max()
    if peak > 0:
        m = m / peak
    return np.clip(m, 0.0, 1.0).astype(np.float32)


@dataclass
class PairRecord:
    """One manifest row: everything needed to reload a generated pair."""

    pair_dir: str
    seed: int
    homography: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"pair_dir": self.pair_dir, "seed": self.seed, "homography": self.homography}
        )

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        obj = json.loads(line)
        return cls(
            pair_dir=obj["pair_dir"], seed=obj["seed"], homography=obj["homography"]
        )


@dataclass
class TrainingExample:
    """A fully loaded training item: pair, teacher maps and labels."""

    pair: TrainingPair
    teacher: TeacherHeatmaps
    labels_a: PseudoLabelMap
    labels_b: PseudoLabelMap


def build_synthetic_dataset(
    out_dir: str | Path,
    count: int,
    canvas_size: tuple[int, int] = (256, 256),
    seed: int = 0,
    h_params: HomographyParams = HomographyParams(),
    p_params: PhotometricParams = PhotometricParams(),
) -> dict:
    """Generate corner-scene pairs with labels, teacher maps and manifest.

    Writes count pair directories plus manifest.jsonl and summary.json
    under out_dir; returns the summary dict. Deterministic per seed, and
    each pair depends only on (seed, index), so regeneration of any subset
    is reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    coverages = []
    for idx in range(count):
        item_seed = seed * 1_000_003 + idx
        scene = synthetic_corner_labels(canvas_size, seed=item_seed)
        pair = synthesize_pair(
            scene.image, seed=item_seed + 1, h_params=h_params, p_params=p_params
        )
        labels_a = scene.labels
        labels_b = warp_label_points(scene.vertices, pair.homography, canvas_size)

        pair_dir = out / "pairs" / f"pair_{idx:05d}"
        pair_dir.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(pair_dir / "a.png"), np.round(pair.image_a * 255).astype(np.uint8))
        cv2.imwrite(str(pair_dir / "b.png"), np.round(pair.image_b * 255).astype(np.uint8))
        write_heatmap(pair_dir / "m1.hm", teacher_from_labels(labels_a))
        write_heatmap(pair_dir / "m2.hm", teacher_from_labels(labels_b))
        write_heatmap(pair_dir / "ga.hm", labels_a.g)
        write_heatmap(pair_dir / "gb.hm", labels_b.g)

        coverages.append(float(pair.valid_mask.mean()))
        records.append(
            PairRecord(
                pair_dir=str(pair_dir.relative_to(out)),
                seed=item_seed,
                homography=[float(v) for v in pair.homography.matrix.ravel()],
            )
        )

    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    summary = {
        "count": count,
        "canvas_size": list(canvas_size),
        "seed": seed,
        "mean_valid_mask_coverage": float(np.mean(coverages)) if coverages else 0.0,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return summary


CORPUS_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")
CORPUS_LABEL_THRESHOLD = 0.5


def build_corpus_dataset(
    out_dir: str | Path,
    corpus_dir: str | Path,
    count: int,
    crop_size: int = 400,
    seed: int = 0,
    h_params: HomographyParams = HomographyParams(),
    p_params: PhotometricParams = PhotometricParams(),
    label_threshold: float = CORPUS_LABEL_THRESHOLD,
) -> dict:
    """Training pairs from an image corpus with teacher-heatmap sidecars.

    Every corpus image <name>.<ext> must sit next to its keypoint
    probability map <name>.hm (the output of a homographic-adaptation
    teacher, imported rather than recomputed here). Pairs cycle through
    the sorted corpus; each takes a seeded random crop and warp, the
    teacher map is cropped and warped alongside, and binary supervision
    comes from thresholding the teacher at label_threshold. The resulting
    dataset layout is identical to the built-in generator's.
    """
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise ValueError(f"corpus directory not readable: {corpus_dir}")
    corpus = sorted(
        p for p in corpus_dir.iterdir() if p.suffix.lower() in CORPUS_EXTENSIONS
    )
    if not corpus:
        raise ValueError(f"no corpus images under {corpus_dir}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, coverages = [], []
    for idx in range(count):
        item_seed = seed * 1_000_003 + idx
        rng = np.random.default_rng(item_seed)
        src = corpus[idx % len(corpus)]
        raw = cv2.imread(str(src), cv2.IMREAD_GRAYSCALE)
        if raw is None:
            raise ValueError(f"unreadable corpus image: {src}")
        sidecar = src.with_suffix(".hm")
        if not sidecar.exists():
            raise ValueError(f"missing teacher heatmap sidecar: {sidecar}")
        teacher = read_heatmap(sidecar)
        if teacher.shape != raw.shape:
            raise ValueError(
                f"{sidecar}: teacher shape {teacher.shape} != image {raw.shape}"
            )
        height, width = raw.shape
        if height < crop_size or width < crop_size:
            raise ValueError(
                f"{src}: image {height}x{width} smaller than crop {crop_size}"
            )
        top = int(rng.integers(0, height - crop_size + 1))
        left = int(rng.integers(0, width - crop_size + 1))
        image = to_gray_unit(raw)[top : top + crop_size, left : left + crop_size]
        m1 = np.clip(teacher[top : top + crop_size, left : left + crop_size], 0, 1)

        pair = synthesize_pair(
            image, seed=item_seed + 1, h_params=h_params, p_params=p_params
        )
        m2 = np.clip(
            cv2.warpPerspective(
                m1,
                pair.homography.matrix,
                (crop_size, crop_size),
                flags=cv2.INTER_LINEAR,
                borderMode=cv2.BORDER_CONSTANT,
                borderValue=0.0,
            ),
            0,
            1,
        )
        labels_a = PseudoLabelMap((m1 >= label_threshold).astype(np.float32))
        labels_b = PseudoLabelMap((m2 >= label_threshold).astype(np.float32))

        pair_dir = out / "pairs" / f"pair_{idx:05d}"
        pair_dir.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(pair_dir / "a.png"), np.round(pair.image_a * 255).astype(np.uint8))
        cv2.imwrite(str(pair_dir / "b.png"), np.round(pair.image_b * 255).astype(np.uint8))
        write_heatmap(pair_dir / "m1.hm", m1)
        write_heatmap(pair_dir / "m2.hm", m2)
        write_heatmap(pair_dir / "ga.hm", labels_a.g)
        write_heatmap(pair_dir / "gb.hm", labels_b.g)

        coverages.append(float(pair.valid_mask.mean()))
        records.append(
            PairRecord(
                pair_dir=str(pair_dir.relative_to(out)),
                seed=item_seed,
                homography=[float(v) for v in pair.homography.matrix.ravel()],
            )
        )

    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")
    summary = {
        "count": count,
        "corpus": str(corpus_dir),
        "crop_size": crop_size,
        "seed": seed,
        "mean_valid_mask_coverage": float(np.mean(coverages)) if coverages else 0.0,
    }
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def read_manifest(dataset_dir: str | Path) -> list[PairRecord]:
    path = Path(dataset_dir) / "manifest.jsonl"
    with open(path) as f:
        return [PairRecord.from_json(line) for line in f if line.strip()]


def load_training_example(dataset_dir: str | Path, record: PairRecord) -> TrainingExample:
    """Reload one generated pair from disk, recomputing the valid mask."""
    pair_dir = Path(dataset_dir) / record.pair_dir
    image_a = to_gray_unit(cv2.imread(str(pair_dir / "a.png"), cv2.IMREAD_GRAYSCALE))
    image_b = to_gray_unit(cv2.imread(str(pair_dir / "b.png"), cv2.IMREAD_GRAYSCALE))
    h = Homography(np.array(record.homography, dtype=np.float64).reshape(3, 3))
    pair = TrainingPair(
        image_a=image_a,
        image_b=image_b,
        homography=h,
        valid_mask=compute_valid_mask(h, image_a.shape),
    )
    teacher = import_teacher_heatmaps(pair_dir / "m1.hm", pair_dir / "m2.hm")
    labels_a = PseudoLabelMap(read_heatmap(pair_dir / "ga.hm"))
    labels_b = PseudoLabelMap(read_heatmap(pair_dir / "gb.hm"))
    return TrainingExample(pair=pair, teacher=teacher, labels_a=labels_a, labels_b=labels_b)
