"""Image standardization, CLAHE and seeded augmentation.

Raster images are ``uint8`` numpy arrays shaped ``(H, W)`` for grayscale or
``(H, W, 3)`` for RGB. Float tensors are the same shapes in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class ClaheConfig:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise PreprocessError("tile grid must be at least 1x1")
        if not self.clip_limit >= 1.0:
            raise PreprocessError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bins != 256:
            raise PreprocessError("only 256-bin histograms are supported")


@dataclass(frozen=True)
class AugSpec:
    hflip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    saturation_jitter: float = 0.2
    gamma_range: tuple[float, float] = (0.8, 1.25)
    apply_clahe: bool = False
    clahe: ClaheConfig = ClaheConfig()

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise PreprocessError("hflip_prob must lie in [0, 1]")
        if self.max_rotation_deg < 0:
            raise PreprocessError("max_rotation_deg must be non-negative")
        for name in ("brightness_jitter", "contrast_jitter", "saturation_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise PreprocessError(f"{name} must lie in [0, 1), got {v}")
        lo, hi = self.gamma_range
        if not (0 < lo <= hi):
            raise PreprocessError(f"gamma_range must satisfy 0 < lo <= hi, got {self.gamma_range}")

    @classmethod
    def identity(cls) -> "AugSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, (1.0, 1.0), False)


def _round_u8(x: np.ndarray) -> np.ndarray:
    # round half up, then clamp; np.rint would round half to even
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise PreprocessError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "1"):
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.ascontiguousarray(img)).save(path, format="PNG")


def _check_raster(img: np.ndarray) -> None:
    if img.dtype != np.uint8:
        raise PreprocessError(f"expected uint8 raster, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] not in (1, 3) or img.ndim not in (2, 3):
        raise PreprocessError(f"unsupported raster shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise PreprocessError("empty image")


# --- resize / normalize -----------------------------------------------------

def _bilinear_axis(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-centred sampling."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    _check_raster(img)
    if out_w < 1 or out_h < 1:
        raise PreprocessError(f"target size must be positive, got {out_w}x{out_h}")
    h, w = img.shape[:2]
    if (w, h) == (out_w, out_h):
        return img.copy()
    y0, y1, wy = _bilinear_axis(h, out_h)
    x0, x1, wx = _bilinear_axis(w, out_w)
    src = img.astype(np.float64)
    if src.ndim == 3:
        wx = wx[None, :, None]
        wy = wy[:, None, None]
    else:
        wx = wx[None, :]
        wy = wy[:, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return _round_u8(top * (1 - wy) + bot * wy)


def normalize(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def denormalize(t: np.ndarray) -> np.ndarray:
    return _round_u8(np.asarray(t, dtype=np.float64) * 255.0)


# --- colour space -------------------------------------------------------------

def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """BT.601 full-range; returns float planes (Y, Cb, Cr)."""
    rgb = img.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return _round_u8(np.stack([r, g, b], axis=-1))


# --- CLAHE --------------------------------------------------------------------

def tile_edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundaries ``floor(i * n / tiles)`` for i = 0..tiles."""
    return (np.arange(tiles + 1) * n) // tiles


def clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    """Clip at ``limit`` and hand the excess back out, mass-preserving.

    The excess is split evenly over all bins; the leftover ``excess % nbins``
    counts go one each to the lowest bins.
    """
    hist = np.asarray(hist, dtype=np.int64)
    excess = int(np.maximum(hist - limit, 0).sum())
    out = np.minimum(hist, limit)
    per_bin, rem = divmod(excess, hist.size)
    out += per_bin
    out[:rem] += 1
    return out


def tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry lookup table for one tile."""
    n = tile.size
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
    limit = int(np.floor(clip_limit * -(-n // 256)))
    clipped = clip_histogram(hist, max(limit, 1))
    cdf = np.cumsum(clipped)
    # round(255 * cdf / n), half up, in exact integer arithmetic
    return ((510 * cdf + n) // (2 * n)).astype(np.float64)


def _interp_axis(n: int, edges: np.ndarray):
    """Neighbouring tile indices and weight for every pixel along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    t = len(centers)
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(hi - 1, 0, t - 1)
    i1 = np.clip(hi, 0, t - 1)
    span = centers[i1] - centers[i0]
    w = np.where(span > 0, (pos - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, w


def clahe_gray(plane: np.ndarray, cfg: ClaheConfig) -> np.ndarray:
    h, w = plane.shape
    if w < cfg.tiles_x or h < cfg.tiles_y:
        raise PreprocessError(f"image {w}x{h} smaller than tile grid {cfg.tiles_x}x{cfg.tiles_y}")
    ye = tile_edges(h, cfg.tiles_y)
    xe = tile_edges(w, cfg.tiles_x)
    maps = np.empty((cfg.tiles_y, cfg.tiles_x, 256))
    for ty in range(cfg.tiles_y):
        for tx in range(cfg.tiles_x):
            maps[ty, tx] = tile_mapping(plane[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]], cfg.clip_limit)

    ry0, ry1, wy = _interp_axis(h, ye)
    rx0, rx1, wx = _interp_axis(w, xe)
    wy = wy[:, None]
    wx = wx[None, :]
    v = plane.astype(np.intp)
    m00 = maps[ry0[:, None], rx0[None, :], v]
    m01 = maps[ry0[:, None], rx1[None, :], v]
    m10 = maps[ry1[:, None], rx0[None, :], v]
    m11 = maps[ry1[:, None], rx1[None, :], v]
    out = (1 - wy) * ((1 - wx) * m00 + wx * m01) + wy * ((1 - wx) * m10 + wx * m11)
    return _round_u8(out)


def clahe(img: np.ndarray, cfg: ClaheConfig = ClaheConfig()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    RGB input is equalized on the luma plane only; chroma planes pass through
    untouched until the final conversion back to RGB.
    """
    if img.ndim == 3 and img.shape[2] == 1:
        return clahe_gray(img[..., 0], cfg)[..., None]
    if img.ndim == 2:
        _check_raster(img)
        return clahe_gray(img, cfg)
    if img.ndim == 3 and img.shape[2] == 3:
        _check_raster(img)
        ycc = rgb_to_ycbcr(img)
        y = _round_u8(ycc[..., 0])
        ycc[..., 0] = clahe_gray(y, cfg)
        return ycbcr_to_rgb(ycc)
    raise PreprocessError(f"unsupported channel layout {img.shape}")


# --- augmentation -------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre, black outside the source."""
    return _round_u8(_rotate_float(img.astype(np.float64), degrees))


def _rotate_float(src: np.ndarray, degrees: float) -> np.ndarray:
    h, w = src.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse map: output pixel -> source coordinate
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    if src.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    out = np.zeros_like(src)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        mask = valid[..., None] if src.ndim == 3 else valid
        out += np.where(mask, vals, 0.0) * wgt
    return out


def _gray(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def augment(img: np.ndarray, spec: AugSpec, rng_seed: int) -> np.ndarray:
    """Seeded augmentation of an RGB raster.

    Parameters are always drawn in the order hflip, rotation, brightness,
    contrast, saturation, gamma (even when an op ends up a no-op) so a seed
    maps to the same draws regardless of which ops are enabled. CLAHE runs
    last and is deterministic.
    """
    _check_raster(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PreprocessError("augment expects an RGB image")
    rng = np.random.default_rng(rng_seed)
    flip = rng.random() < spec.hflip_prob
    angle = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
    bright = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    contrast = 1.0 + rng.uniform(-spec.contrast_jitter, spec.contrast_jitter)
    sat = 1.0 + rng.uniform(-spec.saturation_jitter, spec.saturation_jitter)
    lo, hi = spec.gamma_range
    gamma = rng.uniform(lo, hi)

    out = img[:, ::-1] if flip else img
    x = out.astype(np.float64)
    touched = False
    if angle != 0.0:
        x = _rotate_float(x, angle)
        touched = True
    if bright != 1.0:
        x = np.clip(x * bright, 0, 255)
        touched = True
    if contrast != 1.0:
        mean = _gray(x).mean()
        x = np.clip((x - mean) * contrast + mean, 0, 255)
        touched = True
    if sat != 1.0:
        g = _gray(x)[..., None]
        x = np.clip((x - g) * sat + g, 0, 255)
        touched = True
    if gamma != 1.0:
        x = 255.0 * (x / 255.0) ** gamma
        touched = True
    out = _round_u8(x) if touched else np.ascontiguousarray(out)
    if spec.apply_clahe:
        out = clahe(out, spec.clahe)
    return out
