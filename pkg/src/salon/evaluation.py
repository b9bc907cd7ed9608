"""Reconstruction metrics, face-shape preservation, and the scenario
classifier used to break batch results down by difficulty."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import EmptyRegionError, InvalidKeypointsError
from .losses import masked_perceptual
from .images import to_tensor
from .semantics import Region, SemanticMap, face_area_from_keypoints, validate_keypoints

import torch

PSNR_CAP = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 1.0

POSE_BANDS = (("aligned", 0.0, 15.0), ("mis15", 15.0, 30.0), ("mis30", 30.0, 45.0))


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    lpips_like: float
    face_rmse: float = math.nan


@dataclass(frozen=True)
class ScenarioLabel:
    pose_band: str  # aligned | mis15 | mis30 | beyond
    needs_face_inpaint: bool
    needs_bg_inpaint: bool
    has_hat: bool
    skipped_small_hair: bool


def face_shape_rmse(kp_in: np.ndarray, kp_out: np.ndarray) -> float:
    """Root mean square distance over the jaw contour points 0..16."""
    kp_in = validate_keypoints(kp_in)
    kp_out = validate_keypoints(kp_out)
    d = kp_in[:17] - kp_out[:17]
    return float(np.sqrt((d ** 2).sum(axis=1).mean()))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = DYNAMIC_RANGE) -> float:
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return 20.0 * math.log10(data_range / math.sqrt(mse))


def _ssim_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DYNAMIC_RANGE) -> float:
    """Mean local structural similarity over valid 11x11 Gaussian windows,
    averaged over channels."""
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on a side")
    k = _ssim_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch].astype(np.float64)
        y = b[..., ch].astype(np.float64)
        mx = convolve2d(x, k, mode="valid")
        my = convolve2d(y, k, mode="valid")
        mxx = convolve2d(x * x, k, mode="valid")
        myy = convolve2d(y * y, k, mode="valid")
        mxy = convolve2d(x * y, k, mode="valid")
        vx = mxx - mx ** 2
        vy = myy - my ** 2
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def hair_region_metrics(output: np.ndarray, reference: np.ndarray, hair_mask: np.ndarray, extractor) -> MetricReport:
    """Blend the output's hair region back onto the reference so score
    differences come from the hair alone, then compare."""
    hair_mask = np.asarray(hair_mask, dtype=bool)
    if not hair_mask.any():
        raise EmptyRegionError("hair mask is empty")
    if output.shape != reference.shape:
        raise ValueError(f"shapes differ: {output.shape} vs {reference.shape}")
    blended = np.where(hair_mask[..., None], output, reference)
    ones = torch.ones(hair_mask.shape, dtype=torch.float64)
    lpips_like = float(
        masked_perceptual(
            to_tensor(blended), to_tensor(reference), m_roi=ones, m_roni=torch.zeros_like(ones), extractor=extractor
        )
    )
    return MetricReport(
        psnr=psnr(blended, reference),
        ssim=ssim(blended, reference),
        lpips_like=lpips_like,
    )


def masked_psnr(output: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> float:
    """PSNR restricted to the masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyRegionError("mask is empty")
    mse = float(((output - reference) ** 2)[mask].mean())
    if mse == 0.0:
        return PSNR_CAP
    return 20.0 * math.log10(DYNAMIC_RANGE / math.sqrt(mse))


def classify_scenario(
    face_sem: SemanticMap,
    hair_sem: SemanticMap,
    face_kp: np.ndarray,
    hair_kp: np.ndarray,
    yaw_face: float,
    yaw_hair: float,
) -> ScenarioLabel:
    """Difficulty flags from pixel-count thresholds on the aligned maps.

    All thresholds are strict: a region exactly at a percentage boundary does
    not raise its flag.
    """
    validate_keypoints(hair_kp)
    total = face_sem.labels.size
    resolution = face_sem.labels.shape[1]

    hair_count = int(hair_sem.region(Region.HAIR).sum())
    skipped = hair_count < 0.05 * total

    diff = abs(float(yaw_face) - float(yaw_hair))
    band = "beyond"
    for name, lo, hi in POSE_BANDS:
        if lo <= diff < hi:
            band = name
            break

    f_face_k = face_area_from_keypoints(face_kp, resolution)
    face_missing = int((hair_sem.region(Region.FACE) & ~f_face_k).sum())
    bg_missing = int((hair_sem.region(Region.HAIR) & ~face_sem.region(Region.HAIR)).sum())
    hat_count = int(hair_sem.region(Region.HAT).sum())

    return ScenarioLabel(
        pose_band=band,
        needs_face_inpaint=face_missing > 0.10 * total,
        needs_bg_inpaint=bg_missing > 0.15 * total,
        has_hat=hat_count > 0.05 * total,
        skipped_small_hair=skipped,
    )


# The twelve difficulty configurations of the breakdown table, keyed by
# (pose_band, needs_face_inpaint, needs_bg_inpaint, has_hat).
SCENARIO_CONFIGS = {
    ("aligned", False, False, False): 1,
    ("mis15", False, False, False): 2,
    ("aligned", True, False, False): 3,
    ("aligned", False, True, False): 4,
    ("aligned", False, False, True): 5,
    ("mis30", False, False, False): 6,
    ("mis15", True, False, False): 7,
    ("mis15", False, True, False): 8,
    ("mis15", False, False, True): 9,
    ("aligned", True, True, False): 10,
    ("aligned", True, False, True): 11,
    ("aligned", False, True, True): 12,
}


def scenario_config_id(label: ScenarioLabel) -> int | None:
    key = (label.pose_band, label.needs_face_inpaint, label.needs_bg_inpaint, label.has_hat)
    return SCENARIO_CONFIGS.get(key)


# Bilateral mirror permutation of the standard 68-landmark layout.
def _mirror_permutation() -> np.ndarray:
    perm = np.arange(68)
    pairs = []
    pairs += [(i, 16 - i) for i in range(8)]            # jaw
    pairs += [(17 + i, 26 - i) for i in range(5)]       # brows
    pairs += [(31, 35), (32, 34)]                       # nostrils
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]  # eyes
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]            # outer mouth
    pairs += [(60, 64), (61, 63), (65, 67)]             # inner mouth
    for i, j in pairs:
        perm[i], perm[j] = j, i
    return perm


MIRROR_68 = _mirror_permutation()


def mirror_keypoints(kp: np.ndarray, width: float) -> np.ndarray:
    """Flip a keypoint set across the vertical axis of a width-wide canvas,
    swapping left and right landmark identities."""
    kp = validate_keypoints(kp)
    out = kp.copy()
    out[:, 0] = width - 1 - kp[:, 0]
    return out[MIRROR_68]


def canonical_landmarks_3d() -> np.ndarray:
    """A stylized, exactly bilaterally symmetric 68-landmark head.

    Axes: x right, y down, z toward the camera, in arbitrary face units.
    """
    pts = np.zeros((68, 3))
    t = np.linspace(0.0, np.pi, 17)
    pts[0:17, 0] = -np.cos(t)
    pts[0:17, 1] = 0.15 + 0.85 * np.sin(t)
    pts[0:17, 2] = -0.35 + 0.30 * np.sin(t)

    bx = np.linspace(-0.62, -0.18, 5)
    arch = 0.06 * np.sin(np.linspace(0.0, np.pi, 5))
    pts[17:22, 0] = bx
    pts[17:22, 1] = -0.40 - arch
    pts[17:22, 2] = 0.10

    pts[27:31, 1] = np.linspace(-0.30, 0.15, 4)
    pts[27:31, 2] = np.linspace(0.18, 0.50, 4)
    pts[31:36, 0] = np.linspace(-0.16, 0.16, 5)
    pts[31:36, 1] = 0.28
    pts[31:36, 2] = 0.30

    eye_angles = np.array([180.0, 120.0, 60.0, 0.0, -60.0, -120.0]) * np.pi / 180.0
    pts[36:42, 0] = -0.38 + 0.12 * np.cos(eye_angles)
    pts[36:42, 1] = -0.18 - 0.05 * np.sin(eye_angles)
    pts[36:42, 2] = 0.12

    outer = np.pi - 2 * np.pi * np.arange(12) / 12.0
    pts[48:60, 0] = 0.28 * np.cos(outer)
    pts[48:60, 1] = 0.55 - 0.12 * np.sin(outer)
    pts[48:60, 2] = 0.18
    inner = np.pi - 2 * np.pi * np.arange(8) / 8.0
    pts[60:68, 0] = 0.18 * np.cos(inner)
    pts[60:68, 1] = 0.55 - 0.05 * np.sin(inner)
    pts[60:68, 2] = 0.15

    mirrored = pts[MIRROR_68].copy()
    mirrored[:, 0] = -mirrored[:, 0]
    return (pts + mirrored) / 2.0


def project_landmarks(points3d: np.ndarray, yaw_deg: float, scale: float = 100.0, offset=(128.0, 128.0)) -> np.ndarray:
    """Weak-perspective projection of a 3D landmark set after a yaw rotation.
    Convenience for building synthetic keypoint fixtures."""
    th = math.radians(yaw_deg)
    rot = np.array(
        [
            [math.cos(th), 0.0, math.sin(th)],
            [0.0, 1.0, 0.0],
            [-math.sin(th), 0.0, math.cos(th)],
        ]
    )
    cam = points3d @ rot.T
    return cam[:, :2] * scale + np.asarray(offset)


def yaw_from_keypoints(kp: np.ndarray) -> float:
    """Head yaw in degrees from a weak-perspective rigid fit of the 68
    detected points against the canonical landmark template."""
    kp = validate_keypoints(kp)
    template = canonical_landmarks_3d()
    xc = template - template.mean(axis=0)
    pc = kp - kp.mean(axis=0)

    sol, *_ = np.linalg.lstsq(xc, pc, rcond=None)
    m = sol.T  # rows: image-x and image-y directions in model space
    n1 = np.linalg.norm(m[0])
    if n1 < 1e-9:
        raise InvalidKeypointsError("degenerate keypoint configuration")
    r1 = m[0] / n1
    r2 = m[1] - (m[1] @ r1) * r1
    n2 = np.linalg.norm(r2)
    if n2 < 1e-9:
        raise InvalidKeypointsError("degenerate keypoint configuration")
    r2 = r2 / n2
    r3 = np.cross(r1, r2)
    return math.degrees(math.atan2(r1[2], r3[2]))


def write_metric_rows(path, rows: list[dict]) -> None:
    """Write metric rows as CSV with stable column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fieldnames = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def summarize_by_scenario(rows: list[dict]) -> list[dict]:
    """Group scored rows into the twelve-configuration breakdown."""
    groups: dict[str, list[dict]] = {}
    for row in rows:
        key = row.get("config", "other")
        groups.setdefault(str(key), []).append(row)
    summary = []
    for key in sorted(groups, key=lambda k: (len(k), k)):
        members = groups[key]
        entry = {"config": key, "count": len(members)}
        for metric in ("psnr", "ssim", "lpips_like", "face_rmse"):
            vals = [float(m[metric]) for m in members if metric in m and _finite(m[metric])]
            entry[f"mean_{metric}"] = float(np.mean(vals)) if vals else math.nan
        summary.append(entry)
    return summary


def _finite(v) -> bool:
    try:
        return math.isfinite(float(v))
    except (TypeError, ValueError):
        return False
