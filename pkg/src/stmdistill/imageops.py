"""Pixel-level image transforms, batched over [N, C, H, W] float arrays.

Everything here is deterministic given its arguments; the seeded augmentation
pipeline lives in teacher.py and only draws the random parameters.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _check_nchw(images) -> np.ndarray:
    a = np.asarray(images)
    if a.ndim != 4:
        raise ShapeError(f"expected [N, C, H, W] images, got shape {a.shape}")
    return a


def hflip(images) -> np.ndarray:
    a = _check_nchw(images)
    return a[:, :, :, ::-1].copy()


def crop_shift(images, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by `pad` and crop back at offset (dy, dx), 0 <= dy,dx <= 2*pad."""
    a = _check_nchw(images)
    if not (0 <= dy <= 2 * pad and 0 <= dx <= 2 * pad):
        raise ShapeError(f"crop offset ({dy}, {dx}) outside [0, {2 * pad}]")
    n, c, h, w = a.shape
    padded = np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return padded[:, :, dy:dy + h, dx:dx + w].copy()


def cutout(images, cy: int, cx: int, size: int) -> np.ndarray:
    """Zero a size x size square whose top-left corner is (cy, cx), clipped."""
    a = _check_nchw(images).copy()
    n, c, h, w = a.shape
    y0, x0 = max(cy, 0), max(cx, 0)
    y1, x1 = min(cy + size, h), min(cx + size, w)
    if y1 > y0 and x1 > x0:
        a[:, :, y0:y1, x0:x1] = 0.0
    return a


def rotate(images, degrees, fill=None) -> np.ndarray:
    """Bilinear rotation about the image centre, batched.

    degrees: scalar or per-image array (counter-clockwise).
    fill: per-image scalar for samples falling outside the source; defaults
    to the per-image median of the four corner pixels, which matches the
    sky background of centred objects.
    """
    a = _check_nchw(images)
    n, c, h, w = a.shape
    deg = np.broadcast_to(np.asarray(degrees, dtype=np.float64), (n,))
    if fill is None:
        corners = a[:, :, [0, 0, -1, -1], [0, -1, 0, -1]]  # [n, c, 4]
        fillv = np.median(corners, axis=2)                 # [n, c]
    else:
        fillv = np.broadcast_to(np.asarray(fill, dtype=np.float64), (n,))[:, None]
        fillv = np.broadcast_to(fillv, (n, c))

    theta = np.deg2rad(deg)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # sample the source at the inverse rotation of each output pixel
    sy = cy + (cos[:, None, None] * dy - sin[:, None, None] * dx)
    sx = cx + (sin[:, None, None] * dy + cos[:, None, None] * dx)

    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0

    out = np.zeros_like(a, dtype=np.float64)
    total_w = np.zeros((n, h, w), dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = y0 + oy
        xi = x0 + ox
        inside = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        wv = np.where(inside, wgt, 0.0)                    # [n, h, w]
        ni = np.arange(n)[:, None, None]
        src = a[ni[..., None], np.arange(c)[None, None, None, :],
                yc[..., None], xc[..., None]]              # [n, h, w, c]
        out += np.moveaxis(src * wv[..., None], 3, 1)
        total_w += wv
    # fill whatever weight fell outside with the background value
    out += fillv[:, :, None, None] * (1.0 - total_w)[:, None, :, :]
    return out.astype(a.dtype)
