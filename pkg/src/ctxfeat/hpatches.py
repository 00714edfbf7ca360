"""Reader for HPatches-style sequence folders.

Each sequence directory holds images 1..6 (the first is the reference)
and plain-text files H_1_k with 9 whitespace-separated reals, row-major,
mapping image 1 onto image k. Directory names starting with ``i_`` are
illumination sequences, ``v_`` viewpoint sequences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .homography import DegenerateHomographyError, Homography
from .synth import to_gray_unit

IMAGE_EXTENSIONS = (".ppm", ".png", ".jpg", ".jpeg", ".pgm", ".bmp")


@dataclass
class SequencePair:
    """Reference image, target image and their ground-truth homography."""

    sequence: str
    pair_name: str
    ref_image: np.ndarray
    tgt_image: np.ndarray
    gt_homography: Homography
    sequence_kind: str  # "illumination" | "viewpoint" | "unknown"


def _find_image(seq_dir: Path, index: int) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        candidate = seq_dir / f"{index}{ext}"
        if candidate.exists():
            return candidate
    return None


def _read_h_file(path: Path) -> Homography:
    values = np.array(path.read_text().split(), dtype=np.float64)
    if values.size != 9:
        raise ValueError(f"{path}: expected 9 values, found {values.size}")
    return Homography(values.reshape(3, 3))


def _kind(name: str) -> str:
    if name.startswith("i_"):
        return "illumination"
    if name.startswith("v_"):
        return "viewpoint"
    return "unknown"


def load_sequence_list(path: str | Path) -> list[str]:
    """Read an explicit list of sequence directory names, one per line."""
    names = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            names.append(line)
    return names


def read_hpatches_layout(
    root: str | Path, sequence_list: str | Path | None = None
) -> tuple[list[SequencePair], list[str]]:
    """Load all (1, k) pairs from an HPatches-layout directory tree.

    With sequence_list given, only the named sequences are read (the
    published protocol excludes some sequences without listing a rule, so
    the selection is always explicit). Sequences with missing images or
    malformed H files are skipped and reported in the second return
    value as "name: reason" strings.
    """
    root = Path(root)
    if sequence_list is not None:
        names = load_sequence_list(sequence_list)
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    pairs: list[SequencePair] = []
    skipped: list[str] = []
    for name in names:
        seq_dir = root / name
        if not seq_dir.is_dir():
            skipped.append(f"{name}: directory missing")
            continue
        ref_path = _find_image(seq_dir, 1)
        if ref_path is None:
            skipped.append(f"{name}: reference image 1 missing")
            continue
        ref = to_gray_unit(cv2.imread(str(ref_path), cv2.IMREAD_GRAYSCALE))
        seq_pairs = []
        try:
            for k in range(2, 7):
                tgt_path = _find_image(seq_dir, k)
                h_path = seq_dir / f"H_1_{k}"
                if tgt_path is None or not h_path.exists():
                    raise ValueError(f"image {k} or H_1_{k} missing")
                tgt = to_gray_unit(cv2.imread(str(tgt_path), cv2.IMREAD_GRAYSCALE))
                seq_pairs.append(
                    SequencePair(
                        sequence=name,
                        pair_name=f"1-{k}",
                        ref_image=ref,
                        tgt_image=tgt,
                        gt_homography=_read_h_file(h_path),
                        sequence_kind=_kind(name),
                    )
                )
        except (ValueError, DegenerateHomographyError) as exc:
            skipped.append(f"{name}: {exc}")
            continue
        pairs.extend(seq_pairs)
    return pairs, skipped
