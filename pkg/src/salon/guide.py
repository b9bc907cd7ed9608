"""Guide image construction.

A guide is a rough cut-and-paste composite showing how the transferred hair
should sit on the face, built per viewpoint on a temporary canvas:

  1. previous hair not covered by the new hair is painted with the mean
     background color,
  2. the face area above the jaw contour is painted with the skin color so
     bangs disappear,
  3. where the hair source's face or neck pokes out beyond the face area,
     rows are painted with that row's mean hair color so the face keeps its
     own width,
  4. ears visible in the hair source are painted with the skin color.

The composite does not need to be realistic; it only anchors the losses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .alignment import AlignedImage, PoseAligner
from .errors import CanvasError, EmptyRegionError, FallbackWarning
from .semantics import MaskSet, Region, SemanticMap, build_mask_set, face_area_from_keypoints

MID_GRAY = np.array([0.5, 0.5, 0.5])


def average_color(img: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Channelwise mean color over a nonempty region."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyRegionError("cannot average colors over an empty region")
    return img[region].mean(axis=0)


def _color_or_fallback(img, region, fallbacks, what):
    """First nonempty region wins; the final fallback is a constant color."""
    for candidate in (region, *fallbacks):
        if isinstance(candidate, np.ndarray):
            if candidate.any():
                return average_color(img, candidate)
        else:
            warnings.warn(f"empty {what} region, using constant fallback", FallbackWarning)
            return candidate
    raise AssertionError("fallback chain must end with a constant color")


@dataclass(frozen=True)
class GuideView:
    """One viewpoint's composited guide with its masks and aligned sources.

    ``m_c`` is filled by the stage-2 target update: the copy-pasted region
    that kept the original guide content."""

    guide: np.ndarray
    masks: MaskSet
    face: AlignedImage
    hair: AlignedImage
    m_c: np.ndarray | None = None


@dataclass(frozen=True)
class GuidePair:
    face_view: GuideView
    hair_view: GuideView

    @property
    def guide_face(self) -> np.ndarray:
        return self.face_view.guide

    @property
    def guide_hair(self) -> np.ndarray:
        return self.hair_view.guide

    @property
    def masks_face(self) -> MaskSet:
        return self.face_view.masks

    @property
    def masks_hair(self) -> MaskSet:
        return self.hair_view.masks

    @property
    def kp_face(self) -> np.ndarray:
        return self.face_view.face.kp

    @property
    def kp_hair(self) -> np.ndarray:
        return self.hair_view.hair.kp

    def view(self, viewpoint: str) -> GuideView:
        if viewpoint == "face":
            return self.face_view
        if viewpoint == "hair":
            return self.hair_view
        raise ValueError(f"viewpoint must be 'face' or 'hair', got {viewpoint!r}")

    def with_guides(self, guide_face: np.ndarray, guide_hair: np.ndarray) -> "GuidePair":
        return GuidePair(
            replace(self.face_view, guide=guide_face),
            replace(self.hair_view, guide=guide_hair),
        )


def build_guide(face: AlignedImage, hair: AlignedImage, viewpoint: str) -> tuple[np.ndarray, MaskSet]:
    """Composite one guide image and build its mask set.

    Both inputs must share the viewpoint's canvas.  Pixels inside the raw
    mask are copied verbatim from the sources and never repainted.
    """
    if face.resolution != hair.resolution:
        raise CanvasError(f"canvases disagree: {face.resolution} vs {hair.resolution}")
    res = face.resolution[0]
    masks = build_mask_set(face.sem, hair.sem, face.kp, viewpoint)

    f_hair = face.sem.region(Region.HAIR)
    f_bg = face.sem.region(Region.BACKGROUND) & face.sem.valid
    f_nose = face.sem.region(Region.NOSE) & face.sem.valid
    f_face = face.sem.region(Region.FACE) & face.sem.valid
    h_hair = hair.sem.region(Region.HAIR)
    h_ear = hair.sem.region(Region.EAR)
    h_face_neck = hair.sem.region(Region.FACE) | hair.sem.region(Region.NECK)

    bg_color = _color_or_fallback(face.pixels, f_bg, (MID_GRAY,), "background")
    skin_color = _color_or_fallback(face.pixels, f_nose, (f_face, MID_GRAY), "nose")

    tmp = face.pixels.copy()
    tmp[f_hair] = bg_color
    tmp[h_hair] = hair.pixels[h_hair]
    if h_ear.any():
        tmp[h_ear] = skin_color
    f_face_k = face_area_from_keypoints(face.kp, res)
    tmp[f_face_k] = skin_color
    tmp[f_face_k & h_face_neck] = skin_color

    side = h_face_neck & ~f_face_k
    if side.any():
        _fill_rows_with_hair_color(tmp, side, hair.pixels, h_hair, bg_color)

    guide = face.pixels.copy()
    guide[f_hair] = tmp[f_hair]
    h_hair_clipped = h_hair & f_face_k
    guide[h_hair_clipped] = hair.pixels[h_hair_clipped]
    return guide, masks


def _fill_rows_with_hair_color(canvas, target, hair_pixels, h_hair, last_resort):
    """Paint target pixels row by row with that row's mean hair color."""
    if h_hair.any():
        global_mean = hair_pixels[h_hair].mean(axis=0)
    else:
        warnings.warn("hair source has no hair pixels for row fill", FallbackWarning)
        global_mean = last_resort
    empty_rows = 0
    for r in np.flatnonzero(target.any(axis=1)):
        row_hair = h_hair[r]
        if row_hair.any():
            color = hair_pixels[r][row_hair].mean(axis=0)
        else:
            color = global_mean
            empty_rows += 1
        canvas[r][target[r]] = color
    if empty_rows:
        warnings.warn(
            f"{empty_rows} fill rows had no hair pixels, used the global hair mean",
            FallbackWarning,
        )


def build_guide_pair(
    face_img: np.ndarray,
    face_sem: SemanticMap,
    face_kp: np.ndarray,
    hair_img: np.ndarray,
    hair_sem: SemanticMap,
    hair_kp: np.ndarray,
    aligner: PoseAligner | None = None,
) -> GuidePair:
    """Align each source into the other's viewpoint and composite both guides."""
    aligner = aligner or PoseAligner()
    face_native = AlignedImage(face_img, face_sem, face_kp)
    hair_native = AlignedImage(hair_img, hair_sem, hair_kp)

    hair_on_face = aligner.align(hair_native, face_native.kp)
    face_on_hair = aligner.align(face_native, hair_native.kp)

    guide_face, masks_face = build_guide(face_native, hair_on_face, "face")
    guide_hair, masks_hair = build_guide(face_on_hair, hair_native, "hair")

    return GuidePair(
        GuideView(guide_face, masks_face, face_native, hair_on_face),
        GuideView(guide_hair, masks_hair, face_on_hair, hair_native),
    )
