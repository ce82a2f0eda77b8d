"""Inverse-compositional Lucas-Kanade as a template-conditioned linear regressor.

The template feature map fixes a Jacobian ``W`` (feature gradients times
the warp Jacobian), a regression matrix ``R = (W^T W + lam I)^-1 W^T`` and a
bias ``b = -R phi_T``, so one alignment step is ``dp = R phi_I + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureParams, feature_forward
from .imaging import crop_resize, image_gradients, image_gradients_adjoint, patch_coords
from .warp import (Box, DegenerateWarpError, Family, WarpParams, inverse_compose,
                   warp_to_box)

DEFAULT_DAMPING_REL = 1e-4


class SingularTemplateError(ValueError):
    """The damped normal matrix W^T W + lam I is not positive definite."""


@dataclass
class TemplateModel:
    phi_T: np.ndarray
    W: np.ndarray
    R: np.ndarray
    b: np.ndarray
    family: Family
    damping: float
    damping_rel: float
    A_inv: np.ndarray
    mask: np.ndarray | None = None

    @property
    def dof(self) -> int:
        return self.family.dof


def _grid_coords(shape):
    u = patch_coords(shape[1])
    v = patch_coords(shape[0])
    ux, uy = np.meshgrid(u, v)
    return ux[..., None], uy[..., None]


def template_jacobian(phi: np.ndarray, family: Family, mask=None) -> np.ndarray:
    """Rows ``grad phi_j . dW(x_j; 0)/dp`` for every feature entry, shape (N, dof).

    Gradients are converted to normalized units; one pixel is 2/S.
    """
    gx, gy = image_gradients(phi)
    sx, sy = phi.shape[1] / 2.0, phi.shape[0] / 2.0
    gx, gy = gx * sx, gy * sy
    cols = [gx, gy]
    if family is Family.TRANSLATION_SCALE:
        ux, uy = _grid_coords(phi.shape)
        cols.append(gx * ux + gy * uy)
    W = np.stack(cols, axis=-1)
    if mask is not None:
        W = W * np.asarray(mask, dtype=float)[:, :, None, None]
    return W.reshape(-1, family.dof)


def template_jacobian_adjoint(G: np.ndarray, family: Family, shape, mask=None) -> np.ndarray:
    """Transpose of :func:`template_jacobian` as a linear map of ``phi``."""
    G = G.reshape(tuple(shape) + (family.dof,))
    if mask is not None:
        G = G * np.asarray(mask, dtype=float)[:, :, None, None]
    gx_bar = G[..., 0].copy()
    gy_bar = G[..., 1].copy()
    if family is Family.TRANSLATION_SCALE:
        ux, uy = _grid_coords(shape)
        gx_bar += G[..., 2] * ux
        gy_bar += G[..., 2] * uy
    return image_gradients_adjoint(gx_bar * (shape[1] / 2.0), gy_bar * (shape[0] / 2.0))


def build_template_model(phi_T: np.ndarray, family: Family = Family.TRANSLATION,
                         damping: float | None = None, mask=None,
                         rel_damping: float = DEFAULT_DAMPING_REL) -> TemplateModel:
    """Form (W, R, b) from template features.

    ``damping`` is an absolute lambda. When it is None, lambda is
    ``rel_damping * trace(W^T W) / dof``.
    """
    phi_T = np.asarray(phi_T, dtype=float)
    if phi_T.ndim == 2:
        phi_T = phi_T[:, :, None]
    if min(phi_T.shape[:2]) < 3:
        raise ValueError("feature map side must be at least 3")
    W = template_jacobian(phi_T, family, mask)
    H = W.T @ W
    if damping is None:
        rel = float(rel_damping)
        lam = rel * np.trace(H) / family.dof
    else:
        rel = 0.0
        lam = float(damping)
    if lam < 0:
        raise ValueError("damping must be non-negative")
    A = H + lam * np.eye(family.dof)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularTemplateError("normal matrix is singular; increase damping") from exc
    eig = np.linalg.eigvalsh(A)
    if eig[0] <= 1e-13 * max(eig[-1], 1e-300):
        raise SingularTemplateError(f"normal matrix is ill-conditioned (eigenvalues {eig})")
    Linv = np.linalg.inv(L)
    A_inv = Linv.T @ Linv
    R = A_inv @ W.T
    b = -R @ phi_T.ravel()
    return TemplateModel(phi_T, W, R, b, family, lam, rel, A_inv,
                         None if mask is None else np.asarray(mask, dtype=bool))


def regression_step(model: TemplateModel, phi_I: np.ndarray) -> WarpParams:
    """One linear-regression update ``dp = R vec(phi_I) + b``."""
    phi_I = np.asarray(phi_I, dtype=float)
    if phi_I.size != model.phi_T.size:
        raise ValueError(f"feature shape {phi_I.shape} does not match template {model.phi_T.shape}")
    return WarpParams(model.family, model.R @ phi_I.ravel() + model.b)


def siamese_weights(model: TemplateModel) -> np.ndarray:
    """The equivalent weight matrix [R, -R] acting on [phi_I; phi_T]."""
    return np.hstack([model.R, -model.R])


@dataclass
class AlignResult:
    p_final: WarpParams
    iterations: int
    ssd_trace: list[float] = field(default_factory=list)
    stopped_early: bool = False
    converged: bool = False
    p_trace: list[WarpParams] = field(default_factory=list)
    phi_final: np.ndarray | None = None


def _residual_ssd(model: TemplateModel, phi: np.ndarray) -> float:
    r = phi - model.phi_T
    if model.mask is not None:
        r = r[model.mask]
    return float(np.sum(r * r))


def align(model: TemplateModel, source: np.ndarray, ref_box: Box, p_init: WarpParams | None = None,
          *, features: FeatureParams, context: float = 2.0, max_iters: int = 20,
          tol: float = 1e-3) -> AlignResult:
    """Iterate crop -> features -> regression -> inverse composition.

    Stops when the update's max-norm drops below ``tol``, after ``max_iters``
    evaluations, or as soon as the feature-space SSD grows. The returned warp
    is always the evaluated iterate with the smallest SSD.
    """
    size = model.phi_T.shape[0]
    p = WarpParams.identity(model.family) if p_init is None else p_init.as_family(model.family).check()
    result = AlignResult(p, 0)
    best = None
    for _ in range(max_iters):
        patch = crop_resize(source, warp_to_box(p, ref_box, context), context, size)
        phi, _ = feature_forward(features, patch)
        ssd = _residual_ssd(model, phi)
        result.iterations += 1
        if result.ssd_trace and ssd > result.ssd_trace[-1]:
            result.ssd_trace.append(ssd)
            result.p_trace.append(p)
            result.stopped_early = True
            break
        result.ssd_trace.append(ssd)
        result.p_trace.append(p)
        if best is None or ssd < best[0]:
            best = (ssd, p, phi)
        dp = regression_step(model, phi)
        if np.max(np.abs(dp.vector)) < tol:
            result.converged = True
            break
        try:
            p = inverse_compose(p, dp)
        except DegenerateWarpError:
            result.stopped_early = True
            break
    if best is not None:
        result.p_final, result.phi_final = best[1], best[2]
    return result
