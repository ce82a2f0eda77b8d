"""Sequences, synthetic data, success metrics, cost curves and result files.

Sequence directory layout::

    <dir>/frames/00000.png ...   zero-padded, lexicographic order
    <dir>/groundtruth.txt        one "x,y,w,h" line per frame (top-left corner)
    <dir>/fps.txt                optional, a single number (default 30)
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .features import FeatureParams, feature_forward
from .imaging import as_image, crop_resize, load_image, sample_bilinear_grid, save_image
from .warp import Box

FRAME_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


class DataError(ValueError):
    """Malformed sequence or results data."""


@dataclass
class Sequence:
    """Frames (in memory or as paths) with optional ground-truth boxes."""

    frame_paths: list[Path] = field(default_factory=list)
    gt_boxes: list[Box] | None = None
    fps: float = 30.0
    name: str = "sequence"
    frames: list[np.ndarray] | None = None

    def __post_init__(self):
        n = len(self)
        if self.gt_boxes is not None and len(self.gt_boxes) != n:
            raise DataError(f"{self.name}: {len(self.gt_boxes)} gt boxes for {n} frames")

    def __len__(self) -> int:
        return len(self.frames) if self.frames is not None else len(self.frame_paths)

    def frame(self, i: int) -> np.ndarray:
        if self.frames is not None:
            return self.frames[i]
        return load_image(self.frame_paths[i])

    def load(self) -> "Sequence":
        """Return a copy with every frame decoded into memory."""
        if self.frames is not None:
            return self
        return Sequence(list(self.frame_paths), self.gt_boxes, self.fps, self.name,
                        [load_image(p) for p in self.frame_paths])


# --------------------------------------------------------------------------
# metrics

def iou(a: Box, b: Box) -> float:
    if a == b:
        return 1.0
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.w * a.h + b.w * b.h - inter
    # rounding can push near-identical boxes past 1
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


THRESHOLDS = np.round(np.arange(101) * 0.01, 2)


@dataclass
class SuccessCurve:
    thresholds: np.ndarray
    success: np.ndarray
    auc: float
    success_50: float
    ious: np.ndarray

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious.size else 0.0


def success_curve(pred: list[Box], gt: list[Box]) -> SuccessCurve:
    """Fraction of frames with IoU strictly above each threshold in 0..1."""
    if len(pred) != len(gt):
        raise DataError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = np.array([iou(p, g) for p, g in zip(pred, gt)])
    if ious.size == 0:
        success = np.zeros_like(THRESHOLDS)
    else:
        success = (ious[None, :] > THRESHOLDS[:, None]).mean(axis=1)
    s50 = float((ious > 0.5).mean()) if ious.size else 0.0
    return SuccessCurve(THRESHOLDS.copy(), success, float(success.mean()), s50, ious)


# --------------------------------------------------------------------------
# synthetic sequences

@dataclass
class SynthConfig:
    seed: int = 0
    frames: int = 100
    width: int = 192
    height: int = 192
    box_w: float = 32.0
    box_h: float = 32.0
    b_x: float = 0.06
    b_s: float = 1.0 / 30.0
    truncation: float = 0.3
    brightness_drift: float = 0.0
    fg_sigma: float = 2.0
    fg_contrast: float = 0.18
    bg_sigma: float = 6.0
    bg_contrast: float = 0.06
    min_scale: float = 0.6
    max_scale: float = 1.6
    margin: float = 2.0
    fps: float = 30.0


def blurred_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian-blurred white noise."""
    pad = int(np.ceil(4 * sigma))
    n = gaussian_filter(rng.standard_normal((shape[0] + 2 * pad, shape[1] + 2 * pad)), sigma)
    n = n[pad:pad + shape[0], pad:pad + shape[1]]
    return (n - n.mean()) / n.std()


def _laplace(rng, b, trunc):
    if b <= 0:
        return 0.0
    u = rng.uniform(-0.5, 0.5)
    x = -b * np.sign(u) * np.log1p(-2.0 * abs(u))
    return float(np.clip(x, -trunc, trunc))


def render_frame(background: np.ndarray, texture: np.ndarray, box: Box, base_w: float,
                 base_h: float, offset: float = 0.0) -> np.ndarray:
    """Composite the object texture, scaled to ``box``, over the background."""
    frame = background.copy()
    h, w = frame.shape
    x0 = max(int(np.floor(box.cx - box.w / 2)), 0)
    x1 = min(int(np.ceil(box.cx + box.w / 2)) + 1, w)
    y0 = max(int(np.floor(box.cy - box.h / 2)), 0)
    y1 = min(int(np.ceil(box.cy + box.h / 2)) + 1, h)
    xs, ys = np.meshgrid(np.arange(x0, x1, dtype=float), np.arange(y0, y1, dtype=float))
    inside = (np.abs(xs - box.cx) < box.w / 2) & (np.abs(ys - box.cy) < box.h / 2)
    pad_y = (texture.shape[0] - base_h) / 2.0
    pad_x = (texture.shape[1] - base_w) / 2.0
    # object coordinates in texture pixels; the object's extent [0, base] maps to the box
    ox = (xs - (box.cx - box.w / 2)) * (base_w / box.w) - 0.5 + pad_x
    oy = (ys - (box.cy - box.h / 2)) * (base_h / box.h) - 0.5 + pad_y
    vals = sample_bilinear_grid(texture, ox, oy)[..., 0]
    region = frame[y0:y1, x0:x1]
    region[inside] = vals[inside]
    return np.clip(frame + offset, 0.0, 1.0)


def synth_sequence(cfg: SynthConfig, rng: np.random.Generator | None = None) -> Sequence:
    """Render a textured object moving with Laplace-distributed steps.

    Translation steps are Laplace(b_x) in units of the current box size and
    log-scale steps Laplace(b_s), each clipped to ``truncation``; the box is
    kept inside the frame. All randomness comes from ``rng`` (or
    ``cfg.seed``), so the output is reproducible.
    """
    if cfg.frames < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    background = 0.5 + cfg.bg_contrast * blurred_noise(rng, (cfg.height, cfg.width), cfg.bg_sigma)
    tex_shape = (int(np.ceil(cfg.box_h)) + 8, int(np.ceil(cfg.box_w)) + 8)
    texture = 0.5 + cfg.fg_contrast * blurred_noise(rng, tex_shape, cfg.fg_sigma)

    scale = 1.0
    cx, cy = cfg.width / 2.0, cfg.height / 2.0
    boxes, frames = [], []
    for t in range(cfg.frames):
        if t > 0:
            w, h = cfg.box_w * scale, cfg.box_h * scale
            cx += _laplace(rng, cfg.b_x, cfg.truncation) * w
            cy += _laplace(rng, cfg.b_x, cfg.truncation) * h
            scale = float(np.clip(scale * np.exp(_laplace(rng, cfg.b_s, cfg.truncation)),
                                  cfg.min_scale, cfg.max_scale))
        w, h = cfg.box_w * scale, cfg.box_h * scale
        cx = float(np.clip(cx, w / 2 + cfg.margin, cfg.width - w / 2 - cfg.margin))
        cy = float(np.clip(cy, h / 2 + cfg.margin, cfg.height - h / 2 - cfg.margin))
        box = Box(cx, cy, w, h)
        offset = cfg.brightness_drift * t / (cfg.frames - 1)
        frames.append(render_frame(background, texture, box, cfg.box_w, cfg.box_h,
                                   offset)[:, :, None])
        boxes.append(box)
    return Sequence([], boxes, cfg.fps, f"synth_{cfg.seed}", frames)


def periodic_texture(shape, period: float, rng: np.random.Generator, amplitude: float = 0.25,
                     noise_sigma: float = 2.0, noise_amplitude: float = 0.05) -> np.ndarray:
    """Vertical grating of the given period (px) plus weak blurred noise."""
    xs = np.arange(shape[1], dtype=float)
    grating = amplitude * np.sin(2 * np.pi * xs / period)[None, :]
    noise = noise_amplitude * blurred_noise(rng, shape, noise_sigma)
    return np.clip(0.5 + grating + noise, 0.0, 1.0)[:, :, None]


# --------------------------------------------------------------------------
# cost curves

def cost_curve(theta: FeatureParams, template_patch, source_image: np.ndarray, box: Box,
               shifts, *, context: float = 2.0) -> np.ndarray:
    """Feature-space SSD between the template and crops of the source at
    horizontally shifted copies of ``box``. Returns an (n, 2) table."""
    data = template_patch.data if hasattr(template_patch, "data") else as_image(template_patch)
    size = data.shape[0]
    phi_T, _ = feature_forward(theta, data)
    rows = []
    for s in shifts:
        shifted = Box(box.cx + float(s), box.cy, box.w, box.h)
        phi, _ = feature_forward(theta, crop_resize(source_image, shifted, context, size))
        rows.append((float(s), float(np.sum((phi - phi_T) ** 2))))
    return np.array(rows)


def count_local_minima(values) -> int:
    """Interior samples strictly below both neighbours."""
    v = np.asarray(values, dtype=float)
    return int(np.sum((v[1:-1] < v[:-2]) & (v[1:-1] < v[2:])))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v
                             for v in row])


def write_success_csv(path, curve: SuccessCurve) -> None:
    write_csv(path, ["threshold", "success"], zip(curve.thresholds, curve.success))


# --------------------------------------------------------------------------
# file IO

_SPLIT = re.compile(r"[,\s]+")


def parse_box_line(line: str, where: str = "") -> tuple[float, ...]:
    parts = [p for p in _SPLIT.split(line.strip()) if p]
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise DataError(f"{where}: cannot parse {line.strip()!r}") from None


def read_groundtruth(path) -> list[Box]:
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = parse_box_line(line, f"{path}:{lineno}")
            if len(vals) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 values, got {len(vals)}")
            try:
                boxes.append(Box.from_xywh(*vals))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return boxes


def load_sequence(directory) -> Sequence:
    directory = Path(directory)
    frame_dir = directory / "frames"
    if not frame_dir.is_dir():
        raise DataError(f"{directory}: missing frames/ directory")
    paths = sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        raise DataError(f"{frame_dir}: no frame images")
    gt = None
    gt_path = directory / "groundtruth.txt"
    if gt_path.exists():
        gt = read_groundtruth(gt_path)
        if len(gt) != len(paths):
            raise DataError(f"{directory}: {len(paths)} frames but {len(gt)} ground-truth lines")
    fps = 30.0
    fps_path = directory / "fps.txt"
    if fps_path.exists():
        try:
            fps = float(fps_path.read_text().strip())
        except ValueError:
            raise DataError(f"{fps_path}: not a number") from None
    return Sequence(paths, gt, fps, directory.name)


def _fmt_box(b: Box) -> str:
    return ",".join(f"{v:.6f}" for v in b.to_xywh())


def write_sequence(directory, seq: Sequence) -> Sequence:
    """Write frames as PNG plus groundtruth.txt and fps.txt."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(seq)):
        p = directory / "frames" / f"{i:05d}.png"
        save_image(p, seq.frame(i))
        paths.append(p)
    if seq.gt_boxes is not None:
        (directory / "groundtruth.txt").write_text(
            "".join(_fmt_box(b) + "\n" for b in seq.gt_boxes), encoding="utf-8")
    (directory / "fps.txt").write_text(f"{seq.fps:g}\n", encoding="utf-8")
    return Sequence(paths, seq.gt_boxes, seq.fps, directory.name)


def write_results(path, boxes: list[Box], flags=None) -> None:
    """One ``x,y,w,h,flag`` line per frame (flag 1 marks a failed frame)."""
    flags = [0] * len(boxes) if flags is None else list(flags)
    if len(flags) != len(boxes):
        raise DataError("flags and boxes differ in length")
    with open(path, "w", encoding="utf-8") as fh:
        for b, f in zip(boxes, flags):
            fh.write(f"{_fmt_box(b)},{int(bool(f))}\n")


def load_results(path) -> tuple[list[Box], list[int]]:
    boxes, flags = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = parse_box_line(line, f"{path}:{lineno}")
            if len(vals) not in (4, 5):
                raise DataError(f"{path}:{lineno}: expected 4 or 5 values, got {len(vals)}")
            try:
                boxes.append(Box.from_xywh(*vals[:4]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            flags.append(int(vals[4]) if len(vals) == 5 else 0)
    return boxes, flags
