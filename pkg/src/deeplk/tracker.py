"""Online Deep-LK tracker with translation-then-scale alignment and
exponential template-feature adaptation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureParams, feature_forward
from .iclk import (DEFAULT_DAMPING_REL, SingularTemplateError, TemplateModel, align,
                   build_template_model)
from .imaging import crop_resize
from .warp import Box, Family, WarpParams, warp_to_box

# tuned adaptation rates; other frame rates scale proportionally
ALPHA_BY_FPS = {30.0: 0.03, 240.0: 0.0037}


def default_alpha(fps: float = 30.0) -> float:
    if fps in ALPHA_BY_FPS:
        return ALPHA_BY_FPS[fps]
    return 0.03 * 30.0 / fps


@dataclass
class TrackerConfig:
    size: int = 64
    context: float = 2.0
    damping: float | None = None
    rel_damping: float = DEFAULT_DAMPING_REL
    iters_translation: int = 10
    iters_scale: int = 10
    tol: float = 1e-3
    min_box: float = 4.0


@dataclass
class TrackState:
    ref_box: Box
    adapted_phi: np.ndarray
    model_t: TemplateModel
    model_ts: TemplateModel
    alpha: float
    theta: FeatureParams
    cfg: TrackerConfig
    frame_index: int = 0
    iterations: list[int] = field(default_factory=list)
    failures: list[bool] = field(default_factory=list)


def _models(phi, cfg: TrackerConfig):
    return (build_template_model(phi, Family.TRANSLATION, cfg.damping, rel_damping=cfg.rel_damping),
            build_template_model(phi, Family.TRANSLATION_SCALE, cfg.damping,
                                 rel_damping=cfg.rel_damping))


def tracker_init(frame0: np.ndarray, box0: Box, theta: FeatureParams, alpha: float = 0.03,
                 cfg: TrackerConfig | None = None) -> TrackState:
    cfg = TrackerConfig() if cfg is None else cfg
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    h, w = frame0.shape[:2]
    if not (0 <= box0.cx < w and 0 <= box0.cy < h):
        raise ValueError(f"initial box center outside the {w}x{h} frame")
    phi, _ = feature_forward(theta, crop_resize(frame0, box0, cfg.context, cfg.size))
    model_t, model_ts = _models(phi, cfg)
    return TrackState(box0, phi, model_t, model_ts, alpha, theta, cfg,
                      iterations=[0], failures=[False])


def adapt(state: TrackState, phi_new: np.ndarray) -> None:
    """Exponential template update, then rebuild the regressors."""
    if state.alpha == 0.0:
        return
    if state.alpha == 1.0:
        phi = np.array(phi_new, dtype=float)
    else:
        phi = (1.0 - state.alpha) * state.adapted_phi + state.alpha * phi_new
    try:
        model_t, model_ts = _models(phi, state.cfg)
    except SingularTemplateError:
        return
    state.adapted_phi, state.model_t, state.model_ts = phi, model_t, model_ts


def track_frame(state: TrackState, frame: np.ndarray) -> Box:
    """Align the next frame, adapt the template and return the new box.

    On failure (no valid iterate, or a box that would collapse) the previous
    box is repeated and the frame is flagged.
    """
    cfg = state.cfg
    ref = state.ref_box
    first = align(state.model_t, frame, ref, None, features=state.theta, context=cfg.context,
                  max_iters=cfg.iters_translation, tol=cfg.tol)
    second = align(state.model_ts, frame, ref, first.p_final.as_family(Family.TRANSLATION_SCALE),
                   features=state.theta, context=cfg.context, max_iters=cfg.iters_scale,
                   tol=cfg.tol)
    # phase 2 re-evaluates phase 1's answer first, so it never fits worse
    best = second if second.phi_final is not None else first
    state.iterations.append(first.iterations + second.iterations)
    state.frame_index += 1

    failed = best.phi_final is None
    if not failed:
        new_box = warp_to_box(best.p_final, ref, cfg.context)
        h, w = frame.shape[:2]
        failed = (new_box.w < cfg.min_box or new_box.h < cfg.min_box
                  or new_box.w > 2 * w or new_box.h > 2 * h)
    state.failures.append(failed)
    if failed:
        return ref
    state.ref_box = new_box
    adapt(state, best.phi_final)
    return new_box


@dataclass
class TrackResult:
    boxes: list[Box]
    failures: list[bool]
    iterations: list[int]


def track_sequence(seq, theta: FeatureParams, alpha: float | None = None,
                   cfg: TrackerConfig | None = None, init_box: Box | None = None) -> TrackResult:
    """Track every frame of ``seq`` starting from its first ground-truth box."""
    if init_box is None:
        if not seq.gt_boxes:
            raise ValueError("sequence has no ground truth; pass init_box")
        init_box = seq.gt_boxes[0]
    alpha = default_alpha(seq.fps) if alpha is None else alpha
    state = tracker_init(seq.frame(0), init_box, theta, alpha, cfg)
    boxes = [init_box]
    for i in range(1, len(seq)):
        boxes.append(track_frame(state, seq.frame(i)))
    return TrackResult(boxes, list(state.failures), list(state.iterations))
