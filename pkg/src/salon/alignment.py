"""Keypoint-driven 2D similarity alignment between the two source images.

The face width and center formulas come straight from the jaw contour:
width is x(k16) - x(k0); the x-center is the midpoint of k0 and k16, and the
y-center averages that midpoint with the chin point k8.  Alignment applies
uniform scale plus translation only; rotation is left to an external 3D
pose aligner, which plugs in behind the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CanvasError, InvalidKeypointsError, UnsupportedBackendError
from .semantics import Region, SemanticMap, validate_keypoints


@dataclass(frozen=True)
class AlignedImage:
    """An RGB image with its semantics and keypoints on a shared canvas."""

    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    sem: SemanticMap
    kp: np.ndarray      # (68, 2) float64

    def __post_init__(self):
        object.__setattr__(self, "kp", validate_keypoints(self.kp))
        if self.pixels.shape[:2] != self.sem.resolution:
            raise CanvasError(
                f"pixels {self.pixels.shape[:2]} and semantics {self.sem.resolution} disagree"
            )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


def face_width(kp: np.ndarray) -> float:
    kp = validate_keypoints(kp)
    width = float(kp[16, 0] - kp[0, 0])
    if width <= 0:
        raise InvalidKeypointsError(f"non-positive face width {width}")
    return width


def face_center(kp: np.ndarray) -> tuple[float, float]:
    kp = validate_keypoints(kp)
    mid = (kp[0] + kp[16]) / 2.0
    cx = float(mid[0])
    cy = float((mid[1] + kp[8, 1]) / 2.0)
    return cx, cy


def similarity_params(source_kp: np.ndarray, target_kp: np.ndarray):
    """Scale about the source center, then translate onto the target center.

    Returns (s, cs, ct) such that a source point p maps to (p - cs) * s + ct.
    """
    s = face_width(target_kp) / face_width(source_kp)
    cs = np.array(face_center(source_kp))
    ct = np.array(face_center(target_kp))
    return s, cs, ct


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)[..., None]
    fy = np.clip(ys - y0, 0.0, 1.0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def align_to(source: AlignedImage, target_kp: np.ndarray) -> AlignedImage:
    """Resample ``source`` onto the target canvas through the similarity
    transform.  RGB is sampled bilinearly, labels and validity nearest;
    uncovered canvas gets label=background, valid=0, black pixels."""
    target_kp = validate_keypoints(target_kp)
    s, cs, ct = similarity_params(source.kp, target_kp)
    h, w = source.resolution

    kp_out = (source.kp - cs) * s + ct

    if s == 1.0 and np.all(cs == ct):
        # Identity transform: pass content through untouched.
        return AlignedImage(source.pixels.copy(), SemanticMap(source.sem.labels.copy(), source.sem.valid.copy()), kp_out)

    # Inverse map each output pixel into source coordinates.
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_x = (xx - ct[0]) / s + cs[0]
    src_y = (yy - ct[1]) / s + cs[1]

    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    nx = np.clip(np.round(src_x), 0, w - 1).astype(int)
    ny = np.clip(np.round(src_y), 0, h - 1).astype(int)

    pixels = np.where(inside[..., None], _bilinear(source.pixels, src_y, src_x), 0.0)
    labels = np.where(inside, source.sem.labels[ny, nx], np.uint8(Region.BACKGROUND))
    valid = inside & source.sem.valid[ny, nx]
    labels = np.where(valid, labels, np.uint8(Region.BACKGROUND)).astype(np.uint8)

    return AlignedImage(pixels, SemanticMap(labels, valid), kp_out)


@dataclass(frozen=True)
class PoseAligner:
    """Contract for bringing one source into the other's viewpoint.

    ``similarity2d`` is the built-in scale-and-translate path.  ``external3d``
    reserves the slot for a 3D re-rendering aligner; the pipeline treats any
    aligner output identically, so swapping one in needs no pipeline change.
    """

    kind: str = "similarity2d"

    def align(self, source: AlignedImage, target_kp: np.ndarray) -> AlignedImage:
        if self.kind == "similarity2d":
            return align_to(source, target_kp)
        if self.kind == "external3d":
            raise UnsupportedBackendError(
                "external3d pose alignment is a contract slot; no implementation is bundled"
            )
        raise ValueError(f"unknown aligner kind {self.kind!r}")
