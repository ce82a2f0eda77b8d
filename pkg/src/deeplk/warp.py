"""Warp families, their Jacobians and inverse composition.

Warps act on normalized template coordinates, where a cropped patch spans
[-1, 1] along both axes. A warp ``p`` maps a template point ``u`` to the
point ``W(u; p)`` of the reference crop frame; ``warp_to_box`` turns that
into an image-space box.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Family(enum.Enum):
    TRANSLATION = "translation"
    TRANSLATION_SCALE = "translation_scale"

    @property
    def dof(self) -> int:
        return 2 if self is Family.TRANSLATION else 3


class DegenerateWarpError(ValueError):
    """Raised when a scale update would make the warp non-invertible."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in image pixels, stored by center and size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        """Build from a top-left corner plus size."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)


@dataclass(frozen=True)
class WarpParams:
    family: Family
    params: tuple[float, ...]

    def __post_init__(self):
        params = tuple(float(v) for v in np.ravel(self.params))
        object.__setattr__(self, "params", params)
        if len(params) != self.family.dof:
            raise ValueError(
                f"{self.family.name} expects {self.family.dof} params, got {len(params)}")

    def check(self) -> "WarpParams":
        """Raise DegenerateWarpError unless 1 + s > 0."""
        if not 1.0 + self.scale > 0:
            raise DegenerateWarpError(f"scale factor 1 + s must be positive, got s={self.scale}")
        return self

    @classmethod
    def identity(cls, family: Family) -> "WarpParams":
        return cls(family, (0.0,) * family.dof)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.params, dtype=float)

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.params[:2], dtype=float)

    @property
    def scale(self) -> float:
        """Additive scale s; the warp multiplies coordinates by 1 + s."""
        return self.params[2] if self.family is Family.TRANSLATION_SCALE else 0.0

    def as_family(self, family: Family) -> "WarpParams":
        """Re-express in another family. Dropping scale requires s == 0."""
        if family is self.family:
            return self
        if family is Family.TRANSLATION_SCALE:
            return WarpParams(family, self.params + (0.0,))
        if self.scale != 0.0:
            raise ValueError("cannot drop a non-zero scale component")
        return WarpParams(family, self.params[:2])


def apply_warp(p: WarpParams, x) -> np.ndarray:
    """Map point(s) ``x`` (shape (2,) or (n, 2)) through ``W(x; p)``."""
    x = np.asarray(x, dtype=float)
    return (1.0 + p.scale) * x + p.translation


def inverse_warp(p: WarpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (x - p.translation) / (1.0 + p.scale)


def warp_jacobian(family: Family, x) -> np.ndarray:
    """dW/dp at p = 0. Returns (2, dof) for one point or (n, 2, dof) for many."""
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    jac = np.zeros((pts.shape[0], 2, family.dof))
    jac[:, 0, 0] = 1.0
    jac[:, 1, 1] = 1.0
    if family is Family.TRANSLATION_SCALE:
        jac[:, 0, 2] = pts[:, 0]
        jac[:, 1, 2] = pts[:, 1]
    return jac[0] if x.ndim == 1 else jac


def inverse_compose(p: WarpParams, dp: WarpParams) -> WarpParams:
    """Return p' with W(x; p') = W(W^-1(x; dp); p) for every x."""
    if p.family is not dp.family:
        raise ValueError(f"family mismatch: {p.family.name} vs {dp.family.name}")
    if p.family is Family.TRANSLATION:
        return WarpParams(p.family, p.translation - dp.translation)
    p.check()
    if not 1.0 + dp.scale > 0:
        raise DegenerateWarpError(f"degenerate scale update ds={dp.scale}")
    factor = (1.0 + p.scale) / (1.0 + dp.scale)
    t = p.translation - factor * dp.translation
    return WarpParams(p.family, (t[0], t[1], factor - 1.0))


def invert_warp(p: WarpParams) -> WarpParams:
    """Parameters of W^-1(.; p)."""
    if p.family is Family.TRANSLATION:
        return WarpParams(p.family, -p.translation)
    k = 1.0 / (1.0 + p.check().scale)
    t = -k * p.translation
    return WarpParams(p.family, (t[0], t[1], k - 1.0))


def warp_to_box(p: WarpParams, ref_box: Box, context: float) -> Box:
    """Image-space box whose crop equals the reference crop warped by ``p``."""
    hx = context * ref_box.w / 2.0
    hy = context * ref_box.h / 2.0
    tx, ty = p.params[0], p.params[1]
    k = 1.0 + p.check().scale
    return Box(ref_box.cx + tx * hx, ref_box.cy + ty * hy, k * ref_box.w, k * ref_box.h)


def box_to_warp(box: Box, ref_box: Box, context: float,
                family: Family = Family.TRANSLATION_SCALE) -> WarpParams:
    """Inverse of :func:`warp_to_box`.

    Scale is isotropic, so it is read from the width ratio; for
    ``TRANSLATION`` the scale is ignored.
    """
    hx = context * ref_box.w / 2.0
    hy = context * ref_box.h / 2.0
    t = ((box.cx - ref_box.cx) / hx, (box.cy - ref_box.cy) / hy)
    if family is Family.TRANSLATION:
        return WarpParams(family, t)
    return WarpParams(family, t + (box.w / ref_box.w - 1.0,))
