"""Image containers, bilinear sampling, cropping, gradients and augmentation.

Images are ``float64`` numpy arrays of shape (H, W, C) in row-major
(row, col, channel) order. Pixel centers sit at integer coordinates; ``x``
indexes columns and ``y`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .warp import Box


@dataclass
class Patch:
    """Square S x S crop plus the image-space box it was sampled from."""

    data: np.ndarray
    box: Box | None = None

    def __post_init__(self):
        self.data = as_image(self.data)
        if self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"patch must be square, got {self.data.shape[:2]}")

    @property
    def size(self) -> int:
        return self.data.shape[0]


def as_image(data, min_side: int = 1) -> np.ndarray:
    """Coerce to a float (H, W, C) array, adding a channel axis if needed."""
    arr = np.asarray(data, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {arr.shape}")
    if min(arr.shape[:2]) < min_side or arr.shape[2] < 1:
        raise ValueError(f"image too small: {arr.shape}")
    return arr


def _data(patch) -> np.ndarray:
    return patch.data if isinstance(patch, Patch) else as_image(patch)


def sample_bilinear_grid(img: np.ndarray, xs, ys) -> np.ndarray:
    """Bilinear samples at arrays of coordinates, clamped to the border.

    Returns an array of shape ``xs.shape + (C,)``.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=float), 0.0, w - 1.0)
    ys = np.clip(np.asarray(ys, dtype=float), 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def sample_bilinear(img: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample all channels at the continuous point (x, y)."""
    return sample_bilinear_grid(img, np.array(x), np.array(y))


def patch_coords(size: int) -> np.ndarray:
    """Normalized coordinates of the pixel centers of a ``size``-wide patch.

    Pixel ``i`` covers the cell [-1 + 2i/size, -1 + 2(i+1)/size], so its
    center is at ``(2i + 1)/size - 1``. One patch pixel is 2/size units.
    """
    return (2.0 * np.arange(size) + 1.0) / size - 1.0


def crop_resize(img: np.ndarray, box: Box, context: float = 2.0, out_size: int = 64) -> Patch:
    """Resample the region of half-extent ``context * (w/2, h/2)`` around the
    box center onto an ``out_size`` square grid."""
    if not (box.w > 0 and box.h > 0):
        raise ValueError("box dimensions must be positive")
    if out_size < 8:
        raise ValueError(f"out_size must be >= 8, got {out_size}")
    u = patch_coords(out_size)
    xs = box.cx + u * (context * box.w / 2.0)
    ys = box.cy + u * (context * box.h / 2.0)
    gx, gy = np.meshgrid(xs, ys)
    crop_box = Box(box.cx, box.cy, context * box.w, context * box.h)
    return Patch(sample_bilinear_grid(img, gx, gy), crop_box)


def image_gradients(grid) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel finite differences along x (columns) and y (rows).

    Central differences inside, one-sided differences on the border rows and
    columns. Output has the (H, W, C) shape of the input.
    """
    f = _data(grid)
    if min(f.shape[:2]) < 3:
        raise ValueError(f"gradients need a side of at least 3, got {f.shape[:2]}")
    gx = np.empty_like(f)
    gy = np.empty_like(f)
    gx[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / 2.0
    gx[:, 0] = f[:, 1] - f[:, 0]
    gx[:, -1] = f[:, -1] - f[:, -2]
    gy[1:-1] = (f[2:] - f[:-2]) / 2.0
    gy[0] = f[1] - f[0]
    gy[-1] = f[-1] - f[-2]
    return gx, gy


def _diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    # transpose of the 1-D stencil used in image_gradients, applied along axis
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    out[2:] += g[1:-1] / 2.0
    out[:-2] -= g[1:-1] / 2.0
    out[1] += g[0]
    out[0] -= g[0]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def image_gradients_adjoint(gx_bar: np.ndarray, gy_bar: np.ndarray) -> np.ndarray:
    """Transpose of :func:`image_gradients`: maps gradient-space
    sensitivities back onto the input grid."""
    return _diff_adjoint(gx_bar, 1) + _diff_adjoint(gy_bar, 0)


def photometric_augment(patch, rng: np.random.Generator, brightness_range: float = 0.0,
                        contrast_range: float = 0.0, saturation_range: float = 0.0,
                        *, gain: float | None = None, bias: float | None = None):
    """Random affine intensity change ``clip(gain * patch + bias, 0, 1)``.

    ``gain ~ U(1 - contrast_range, 1 + contrast_range)`` and
    ``bias ~ U(-brightness_range, brightness_range)``. For 3-channel input a
    per-channel gain jitter of width ``saturation_range`` is added.
    ``gain``/``bias`` override the random draws.
    """
    if min(brightness_range, contrast_range, saturation_range) < 0:
        raise ValueError("augmentation ranges must be non-negative")
    data = _data(patch)
    if (brightness_range == contrast_range == saturation_range == 0.0
            and gain is None and bias is None):
        out = data.copy()
    else:
        g = rng.uniform(1.0 - contrast_range, 1.0 + contrast_range)
        c = rng.uniform(-brightness_range, brightness_range)
        g = g if gain is None else gain
        c = c if bias is None else bias
        scale = np.full(data.shape[2], g)
        if data.shape[2] == 3 and saturation_range > 0:
            scale = scale * rng.uniform(1.0 - saturation_range, 1.0 + saturation_range, size=3)
        out = np.clip(data * scale + c, 0.0, 1.0)
    if isinstance(patch, Patch):
        return Patch(out, patch.box)
    return out


def to_gray(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    return (img[..., :3] @ np.array([0.299, 0.587, 0.114]))[..., None]


def load_image(path) -> np.ndarray:
    """Read an 8-bit gray or RGB PNG/PNM file, scaled to [0, 1]."""
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=float) / 255.0
    img = as_image(arr)
    if min(img.shape[:2]) < 3:
        raise ValueError(f"{path}: image must be at least 3x3")
    return img


def save_image(path, img: np.ndarray) -> None:
    """Write an image quantized to 8 bits (PNG or PNM by extension)."""
    from PIL import Image as PILImage

    img = as_image(img)
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    q = q[..., 0] if q.shape[2] == 1 else q
    PILImage.fromarray(q).save(Path(path))
