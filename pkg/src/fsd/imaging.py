"""Image decoding, grayscale conversion, dyadic downsampling and JPEG round trips.

Gray images are plain 2-D ``float64`` arrays with values in [0, 1].
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CodecFailure, DegenerateOutput, TooSmall, UnreadableFile

LUMA_BT601 = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class PreprocessOptions:
    """Preprocessing applied by :func:`load_grayscale`.

    ``max_side`` caps both sides by center cropping (``None`` disables);
    ``filter_size`` is the predictive-filter side M, so images smaller than
    2M+1 on either side are refused.
    """

    max_side: Optional[int] = 512
    filter_size: int = 11


def to_gray(arr: np.ndarray) -> np.ndarray:
    """Convert a decoded uint8/uint16 array (H, W[, C]) to luminance in [0, 1]."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        full_scale = 255.0
    elif arr.dtype == np.uint16:
        full_scale = 65535.0
    else:
        arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
        full_scale = 1.0
    x = arr.astype(np.float64)
    if x.ndim == 3 and x.shape[2] >= 3:
        # integer per-mille weights keep white at exactly 1.0
        x = 299.0 * x[..., 0] + 587.0 * x[..., 1] + 114.0 * x[..., 2]
        full_scale *= 1000.0
    elif x.ndim == 3 and x.shape[2] in (1, 2):
        x = x[..., 0]
    elif x.ndim != 2:
        raise UnreadableFile(f"unsupported image array shape {arr.shape}")
    return np.clip(x / full_scale, 0.0, 1.0)


def center_crop(img: np.ndarray, max_side: Optional[int]) -> np.ndarray:
    if max_side is None:
        return img
    h, w = img.shape
    ch, cw = min(h, max_side), min(w, max_side)
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[top:top + ch, left:left + cw]


def _decode(img: Image.Image) -> np.ndarray:
    if img.mode in ("RGB", "L", "I;16", "LA"):
        return np.asarray(img)
    if img.mode == "I":
        return np.asarray(img).astype(np.uint16)
    return np.asarray(img.convert("RGB"))


def load_grayscale(path, options: PreprocessOptions = PreprocessOptions()) -> np.ndarray:
    """Load a PNG/JPEG file as a [0, 1] luminance field.

    Color inputs use the BT.601 luma weights. Raises :class:`UnreadableFile`
    on I/O or decode errors and :class:`TooSmall` if either side is below
    ``2 * options.filter_size + 1`` after cropping.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            arr = _decode(im)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise UnreadableFile(f"{path}: {exc}") from exc
    gray = center_crop(to_gray(arr), options.max_side)
    min_side = 2 * options.filter_size + 1
    if min(gray.shape) < min_side:
        raise TooSmall(f"{path}: {gray.shape[1]}x{gray.shape[0]} is below {min_side} px")
    return np.ascontiguousarray(gray, dtype=np.float64)


def halve(img: np.ndarray) -> np.ndarray:
    """One factor-2 step: drop a trailing odd row/column, average 2x2 blocks."""
    h, w = img.shape[-2:]
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DegenerateOutput(f"cannot halve a {h}x{w} field")
    core = img[..., : 2 * h2, : 2 * w2]
    return 0.25 * (
        core[..., 0::2, 0::2] + core[..., 0::2, 1::2] + core[..., 1::2, 0::2] + core[..., 1::2, 1::2]
    )


def downsample_dyadic(img: np.ndarray, factor: int) -> np.ndarray:
    """Reduce resolution by a power-of-two ``factor`` with repeated 2x2 block means.

    Works on any array whose last two axes are spatial.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    out = img
    while factor > 1:
        out = halve(out)
        factor //= 2
    return out


def jpeg_recompress(img: np.ndarray, quality: int) -> np.ndarray:
    """Encode as baseline grayscale JPEG at ``quality`` and decode back."""
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise CodecFailure(f"JPEG quality must be an integer in 1..100, got {quality!r}")
    u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    try:
        Image.fromarray(u8).save(buf, format="JPEG", quality=int(quality), subsampling=0)
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise CodecFailure(str(exc)) from exc
    if out.shape != u8.shape:
        raise CodecFailure(f"codec changed shape {u8.shape} -> {out.shape}")
    return out


def save_png(img: np.ndarray, path) -> None:
    u8 = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")
