"""Shared fixtures: toy backends, the test extractor, and synthetic
face/hair inputs small enough for fast runs."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from salon.evaluation import canonical_landmarks_3d, project_landmarks
from salon.generator import ToyGenerator
from salon.perceptual import PyramidExtractor
from salon.semantics import Region, SemanticMap


@pytest.fixture(scope="session")
def extractor():
    return PyramidExtractor()


@pytest.fixture(scope="session")
def toy64():
    """float64 backend for gradient checks."""
    return ToyGenerator(layer_count=8, output_resolution=64, channels=32, seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def toy16():
    """Small, fast float64 backend."""
    return ToyGenerator(layer_count=4, output_resolution=16, channels=8, seed=3, dtype=torch.float64)


def make_keypoints(resolution: int, yaw: float = 0.0, scale_frac: float = 0.18, center_frac=(0.5, 0.45)):
    """Project the bundled landmark template onto a canvas."""
    template = canonical_landmarks_3d()
    scale = scale_frac * resolution
    offset = (center_frac[0] * resolution, center_frac[1] * resolution)
    return project_landmarks(template, yaw, scale=scale, offset=offset)


def _ellipse(res, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:res, 0:res]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def make_face_semantics(
    resolution: int,
    kp: np.ndarray,
    hair_thickness_frac: float = 0.22,
    hair_width_frac: float = 0.30,
    with_hat: bool = False,
    with_ears: bool = True,
    hair_offset_frac: float = 0.0,
) -> SemanticMap:
    """Paint a stylized head: face ellipse around the keypoints, a hair cap
    above the brows, nose and neck patches, optional ears and hat."""
    res = resolution
    labels = np.zeros((res, res), dtype=np.uint8)

    cx = float((kp[0, 0] + kp[16, 0]) / 2)
    jaw_y = float(kp[8, 1])
    brow_y = float(kp[17:27, 1].min())
    half_w = float(kp[16, 0] - kp[0, 0]) / 2

    face = _ellipse(res, (jaw_y + brow_y) / 2 - res * 0.02, cx, (jaw_y - brow_y) * 0.72, half_w)
    labels[face] = Region.FACE

    # Neck: a band under the chin.
    neck_top = int(round(jaw_y - res * 0.02))
    neck = np.zeros_like(face)
    neck[neck_top : min(res, neck_top + int(res * 0.18)), int(cx - half_w * 0.45) : int(cx + half_w * 0.45)] = True
    labels[neck & ~face] = Region.NECK

    if with_ears:
        ear_y = (jaw_y + brow_y) / 2
        for ex in (cx - half_w * 1.08, cx + half_w * 1.08):
            ear = _ellipse(res, ear_y, ex, res * 0.055, res * 0.035)
            labels[ear & (labels == 0)] = Region.EAR

    # Hair cap: a thick crescent hugging the top of the face.
    hair_cy = brow_y - res * hair_offset_frac
    outer = _ellipse(res, hair_cy, cx, res * hair_thickness_frac + (jaw_y - brow_y) * 0.55, half_w + res * hair_width_frac * 0.35)
    hair = outer & (np.mgrid[0:res, 0:res][0] < hair_cy + res * 0.06) & ~face
    labels[hair & ((labels == 0) | (labels == Region.NECK))] = Region.HAIR

    if with_hat:
        hat_top = max(0, int(hair_cy - res * hair_thickness_frac - res * 0.10))
        hat = np.zeros_like(face)
        hat[hat_top : hat_top + int(res * 0.12), int(cx - half_w * 1.2) : int(cx + half_w * 1.2)] = True
        labels[hat] = Region.HAT

    # Nose: small patch around the nostril keypoints.
    nose_c = kp[27:36].mean(axis=0)
    nose = _ellipse(res, nose_c[1], nose_c[0], res * 0.06, res * 0.045)
    labels[nose & face] = Region.NOSE

    return SemanticMap.full(labels)


@pytest.fixture()
def small_pair():
    """A 64x64 face/hair fixture pair with identical pose."""
    res = 64
    kp = make_keypoints(res)
    face_sem = make_face_semantics(res, kp)
    hair_sem = make_face_semantics(res, kp, hair_thickness_frac=0.26, hair_width_frac=0.36)
    rng = np.random.default_rng(11)
    face_img = np.clip(rng.random((res, res, 3)) * 0.2 + 0.4, 0, 1)
    hair_img = np.clip(rng.random((res, res, 3)) * 0.2 + 0.3, 0, 1)
    return face_img, face_sem, kp.copy(), hair_img, hair_sem, kp.copy()
