"""Semantic label maps, facial keypoints, and binary mask construction.

Every mask consumed by the loss functions is built here from two aligned
semantic maps (one for the face source, one for the hair source) plus the
face keypoints.  All operations are pure functions over immutable grids.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CanvasError, InputError, InvalidKeypointsError

# Reference canvas size for pixel-count parameters quoted at full scale.
CANONICAL_RESOLUTION = 256

KEYPOINT_COUNT = 68
CONTOUR_IDS = range(0, 17)
EYEBROW_IDS = range(17, 27)

# 3x3 full neighborhood, applied once per iteration.
_STRUCTURE = np.ones((3, 3), dtype=bool)


class Region(enum.IntEnum):
    """Pixel labels. Values match the on-disk label image encoding."""

    BACKGROUND = 0
    FACE = 1
    EAR = 2
    NOSE = 3
    NECK = 4
    HAIR = 5
    HAT = 6


# Mapping from the common 19-class face-parsing convention to our labels.
# Index order of the 19 classes: background, skin, left/right brow, left/right
# eye, eyeglasses, left/right ear, earring, nose, mouth, upper/lower lip,
# neck, necklace, cloth, hair, hat.
NINETEEN_CLASS_TO_REGION = {
    0: Region.BACKGROUND,
    1: Region.FACE,
    2: Region.FACE,
    3: Region.FACE,
    4: Region.FACE,
    5: Region.FACE,
    6: Region.FACE,
    7: Region.EAR,
    8: Region.EAR,
    9: Region.EAR,
    10: Region.NOSE,
    11: Region.FACE,
    12: Region.FACE,
    13: Region.FACE,
    14: Region.NECK,
    15: Region.NECK,
    16: Region.BACKGROUND,
    17: Region.HAIR,
    18: Region.HAT,
}


@dataclass(frozen=True)
class SemanticMap:
    """Per-pixel region labels plus the footprint actually covered by source
    content.  ``valid`` is all ones for an unwarped source image; alignment
    clears it outside the transformed source rectangle."""

    labels: np.ndarray  # (H, W) uint8, values from Region
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        valid = np.asarray(self.valid, dtype=bool)
        if labels.shape != valid.shape or labels.ndim != 2:
            raise CanvasError(
                f"labels {labels.shape} and valid {valid.shape} must be equal 2D shapes"
            )
        if labels.max(initial=0) > max(Region):
            raise InputError("label image contains values outside the known regions")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.labels.shape

    def region(self, region: Region) -> np.ndarray:
        return self.labels == int(region)

    @classmethod
    def full(cls, labels: np.ndarray) -> "SemanticMap":
        """Wrap a label grid from an unwarped source (valid everywhere)."""
        labels = np.asarray(labels, dtype=np.uint8)
        return cls(labels, np.ones_like(labels, dtype=bool))


def load_semantic_map(path) -> SemanticMap:
    """Read a label image: single-channel 8-bit labels, or LA where the
    alpha channel marks validity."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"semantic map file not found: {path}")
    with Image.open(path) as im:
        if im.mode == "LA":
            arr = np.asarray(im)
            return SemanticMap(arr[..., 0], arr[..., 1] > 0)
        return SemanticMap.full(np.asarray(im.convert("L")))


def save_semantic_map(sem: SemanticMap, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if sem.valid.all():
        Image.fromarray(sem.labels, mode="L").save(path)
    else:
        la = np.stack([sem.labels, np.where(sem.valid, 255, 0).astype(np.uint8)], axis=-1)
        Image.fromarray(la, mode="LA").save(path)


def validate_keypoints(kp: np.ndarray) -> np.ndarray:
    kp = np.asarray(kp, dtype=np.float64)
    if kp.shape != (KEYPOINT_COUNT, 2):
        raise InvalidKeypointsError(f"expected (68, 2) keypoints, got {kp.shape}")
    if not np.isfinite(kp).all():
        raise InvalidKeypointsError("keypoints contain non-finite coordinates")
    return kp


def load_keypoints(path) -> np.ndarray:
    """Read 68 'x y' pairs, one per line, in pixel coordinates."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"keypoint file not found: {path}")
    rows = []
    for line in path.read_text().split("\n"):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"malformed keypoint line in {path}: {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if len(rows) != KEYPOINT_COUNT:
        raise InputError(f"{path} has {len(rows)} keypoints, expected {KEYPOINT_COUNT}")
    return validate_keypoints(np.array(rows))


def save_keypoints(kp: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{float(x)!r} {float(y)!r}" for x, y in np.asarray(kp, dtype=np.float64)]
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class MaskSet:
    """The named per-viewpoint binary masks used by the losses."""

    m_f: np.ndarray       # trusted face region (ROI of the face loss)
    m_h: np.ndarray       # trusted hair region (ROI of the hair loss)
    m_bg: np.ndarray      # trusted background region (ROI of the bg loss)
    m_roni_f: np.ndarray  # face pixels to hallucinate (pre-mask of the face loss)
    m_roni_h: np.ndarray  # hair pixels to hallucinate (pre-mask of the hair loss)
    m_out: np.ndarray     # canvas not covered by the warped-in source

    def __post_init__(self):
        shapes = {m.shape for m in self.grids()}
        if len(shapes) != 1:
            raise CanvasError(f"mask set grids disagree on resolution: {shapes}")

    def grids(self):
        return (self.m_f, self.m_h, self.m_bg, self.m_roni_f, self.m_roni_h, self.m_out)


def erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Iterated binary erosion with a full 3x3 element; out-of-frame is 0."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if iterations == 0:
        return mask.copy()
    return ndimage.binary_erosion(
        mask, structure=_STRUCTURE, iterations=iterations, border_value=0
    )


def dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Iterated binary dilation with a full 3x3 element."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if iterations == 0:
        return mask.copy()
    return ndimage.binary_dilation(
        mask, structure=_STRUCTURE, iterations=iterations, border_value=0
    )


def face_area_from_keypoints(kp: np.ndarray, resolution: int) -> np.ndarray:
    """Columns spanned by the jaw contour, marked from the top row down to the
    piecewise-linear contour through keypoints 0..16 (inclusive)."""
    kp = validate_keypoints(kp)
    contour = kp[list(CONTOUR_IDS)]
    x0, x16 = contour[0, 0], contour[-1, 0]
    if x0 >= x16:
        raise InvalidKeypointsError(
            f"degenerate jaw contour: x(k0)={x0} must be left of x(k16)={x16}"
        )
    order = np.argsort(contour[:, 0], kind="stable")
    xs = contour[order, 0]
    ys = contour[order, 1]
    cols = np.arange(resolution, dtype=np.float64)
    jaw = np.interp(cols, xs, ys, left=np.nan, right=np.nan)
    rows = np.arange(resolution, dtype=np.float64)[:, None]
    with np.errstate(invalid="ignore"):
        area = rows <= jaw[None, :]
    area &= (cols >= x0) & (cols <= x16)
    return area


def build_mask_set(
    face_sem: SemanticMap,
    hair_sem: SemanticMap,
    face_kp: np.ndarray,
    viewpoint: str,
) -> MaskSet:
    """Construct every loss mask for one viewpoint.

    Both maps must already live on the viewpoint's canvas; ``hair_sem.valid``
    is the footprint of the hair source on that canvas, and its complement is
    the out-of-frame band.
    """
    if viewpoint not in ("face", "hair"):
        raise ValueError(f"viewpoint must be 'face' or 'hair', got {viewpoint!r}")
    if face_sem.resolution != hair_sem.resolution:
        raise CanvasError(
            f"semantic maps disagree: {face_sem.resolution} vs {hair_sem.resolution}"
        )
    h, w = face_sem.resolution
    if h != w:
        raise CanvasError("mask construction expects a square canvas")
    face_kp = validate_keypoints(face_kp)

    f_face = face_sem.region(Region.FACE)
    f_bg = face_sem.region(Region.BACKGROUND)
    h_hair = hair_sem.region(Region.HAIR)
    h_hat = hair_sem.region(Region.HAT)
    h_ear = hair_sem.region(Region.EAR)
    h_face = hair_sem.region(Region.FACE)
    h_neck = hair_sem.region(Region.NECK)
    m_out = ~hair_sem.valid

    # Trusted face: segmented face minus incoming hair and hat, with the band
    # above the eyebrows eroded so loose hair roots do not count as face.
    m_f = f_face & ~h_hair & ~h_hat
    brow_top = float(np.min(face_kp[list(EYEBROW_IDS), 1]))
    offset = 5.0 * w / CANONICAL_RESOLUTION
    threshold = brow_top - offset
    above = np.arange(h, dtype=np.float64)[:, None] < threshold
    m_f = np.where(above, erode(m_f, 5), m_f)

    m_h = erode(h_hair, 5)

    if viewpoint == "face":
        m_bg = f_bg & ~dilate(h_hair | m_out, 5)
    else:
        # No trustworthy background exists in the hair viewpoint.
        m_bg = np.zeros((h, w), dtype=bool)

    f_face_k = face_area_from_keypoints(face_kp, w)
    m_roni_f = (f_face_k | h_ear) & ~m_f
    m_roni_h = h_hat | h_face | h_neck | m_out

    return MaskSet(m_f, m_h, m_bg, m_roni_f, m_roni_h, m_out)


def build_mc(mask_set: MaskSet, o1_bg: np.ndarray, f_bg: np.ndarray) -> np.ndarray:
    """Region of the guide that was copy-pasted (including warped pixels):
    the face and hair masks plus background confirmed by the first-stage
    output, eroded 5 iterations."""
    o1_bg = np.asarray(o1_bg, dtype=bool)
    f_bg = np.asarray(f_bg, dtype=bool)
    return erode(mask_set.m_f | mask_set.m_h | (f_bg & o1_bg), 5)


def build_mraw(mask_set: MaskSet, viewpoint: str) -> np.ndarray:
    """Region of the guide holding original, unpainted source pixels."""
    if viewpoint == "face":
        return erode(mask_set.m_bg | mask_set.m_f, 10)
    if viewpoint == "hair":
        return erode(mask_set.m_h, 5)
    raise ValueError(f"viewpoint must be 'face' or 'hair', got {viewpoint!r}")
