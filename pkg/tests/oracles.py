"""Independent reference implementations used to check the package.

Everything here recomputes results straight from definitions (shift stacks,
scanlines, per-pixel loops, explicit block means) without calling the code
under test or the libraries it delegates to.
"""

from __future__ import annotations

import numpy as np

from salon.semantics import CANONICAL_RESOLUTION, EYEBROW_IDS


def erode_oracle(mask: np.ndarray, iterations: int) -> np.ndarray:
    """3x3-full erosion by direct min over the 9 shifted copies, zeros
    outside the frame. Works on (H, W) or batched (N, H, W) grids."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(1, 1), (1, 1)], constant_values=False)
        h, w = out.shape[-2:]
        stack = [
            padded[..., di : di + h, dj : dj + w]
            for di in range(3)
            for dj in range(3)
        ]
        out = np.logical_and.reduce(stack)
    return out


def dilate_oracle(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(1, 1), (1, 1)], constant_values=False)
        h, w = out.shape[-2:]
        stack = [
            padded[..., di : di + h, dj : dj + w]
            for di in range(3)
            for dj in range(3)
        ]
        out = np.logical_or.reduce(stack)
    return out


def erode_pixel_loop(mask: np.ndarray, iterations: int) -> np.ndarray:
    """Slowest possible erosion, for validating the oracle itself."""
    out = np.asarray(mask, dtype=bool)
    h, w = out.shape
    for _ in range(iterations):
        nxt = np.zeros_like(out)
        for i in range(h):
            for j in range(w):
                keep = True
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        ii, jj = i + di, j + dj
                        if not (0 <= ii < h and 0 <= jj < w) or not out[ii, jj]:
                            keep = False
                            break
                    if not keep:
                        break
                nxt[i, j] = keep
        out = nxt
    return out


def face_area_scanline(kp: np.ndarray, resolution: int) -> np.ndarray:
    """Column-by-column scanline of the jaw polyline, marking rows from the
    top down to the interpolated contour."""
    contour = np.asarray(kp, dtype=np.float64)[:17]
    order = np.argsort(contour[:, 0], kind="stable")
    xs, ys = contour[order, 0], contour[order, 1]
    x0, x16 = contour[0, 0], contour[16, 0]
    area = np.zeros((resolution, resolution), dtype=bool)
    for col in range(resolution):
        if col < x0 or col > x16:
            continue
        y = None
        for k in range(len(xs) - 1):
            a, b = xs[k], xs[k + 1]
            if a <= col <= b:
                y = ys[k] if a == b else ys[k] + (ys[k + 1] - ys[k]) * (col - a) / (b - a)
                break
        if y is None:
            y = ys[0] if col <= xs[0] else ys[-1]
        for row in range(resolution):
            if row <= y:
                area[row, col] = True
    return area


def mask_set_oracle(face_sem, hair_sem, face_kp, viewpoint: str) -> dict[str, np.ndarray]:
    """Recompute every named mask with plain set algebra and the shift-stack
    morphology above."""
    labels_f, valid_f = face_sem.labels, face_sem.valid
    labels_h, valid_h = hair_sem.labels, hair_sem.valid
    res = labels_f.shape[1]

    f_face = labels_f == 1
    f_bg = labels_f == 0
    h_hair = labels_h == 5
    h_hat = labels_h == 6
    h_ear = labels_h == 2
    h_face = labels_h == 1
    h_neck = labels_h == 4
    m_out = ~valid_h

    m_f_base = f_face & ~h_hair & ~h_hat
    threshold = float(np.min(np.asarray(face_kp)[list(EYEBROW_IDS), 1])) - 5.0 * res / CANONICAL_RESOLUTION
    eroded = erode_oracle(m_f_base, 5)
    m_f = np.array(
        [eroded[r] if r < threshold else m_f_base[r] for r in range(res)], dtype=bool
    )

    m_h = erode_oracle(h_hair, 5)
    if viewpoint == "face":
        m_bg = f_bg & ~dilate_oracle(h_hair | m_out, 5)
    else:
        m_bg = np.zeros_like(f_bg)

    f_face_k = face_area_scanline(face_kp, res)
    return {
        "m_f": m_f,
        "m_h": m_h,
        "m_bg": m_bg,
        "m_roni_f": (f_face_k | h_ear) & ~m_f,
        "m_roni_h": h_hat | h_face | h_neck | m_out,
        "m_out": m_out,
    }


def mc_oracle(masks: dict, o1_bg: np.ndarray, f_bg: np.ndarray) -> np.ndarray:
    return erode_oracle(masks["m_f"] | masks["m_h"] | (f_bg & o1_bg), 5)


def mraw_oracle(masks: dict, viewpoint: str) -> np.ndarray:
    if viewpoint == "face":
        return erode_oracle(masks["m_bg"] | masks["m_f"], 10)
    return erode_oracle(masks["m_h"], 5)


def downsample_block_mean(img: np.ndarray, out: int) -> np.ndarray:
    """Exact block-mean downsample for divisible sizes; channels last or 2D."""
    h = img.shape[0]
    assert h % out == 0
    f = h // out
    if img.ndim == 2:
        return img.reshape(out, f, out, f).mean(axis=(1, 3))
    return img.reshape(out, f, out, f, -1).mean(axis=(1, 3))


def directional_derivative(fn, x: np.ndarray, direction: np.ndarray, step: float = 1e-3) -> float:
    """Central finite difference of a scalar function along one direction."""
    return (fn(x + step * direction) - fn(x - step * direction)) / (2.0 * step)


def relative_error(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
