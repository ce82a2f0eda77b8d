"""Conditional LK loss: Huber penalty on the one-step regression error, and
its analytic gradient with respect to the feature extractor parameters.

For one sample, with ``d = vec(phi_I) - vec(phi_T)``, ``A = W^T W + lam I``
and ``R = A^-1 W^T``::

    e = R d - dp_target,        L = huber(e)

``R d`` is the inverse-compositional increment, so ``dp_target`` is the
inverse of the warp that alignment should return (see :class:`LossSample`).
The gradient flows into ``phi_I`` through ``R d`` and into ``phi_T`` both
through ``d`` and through ``R``'s dependence on ``W(phi_T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureCache, FeatureParams, feature_backward, feature_forward
from .iclk import (DEFAULT_DAMPING_REL, SingularTemplateError, TemplateModel,
                   build_template_model, template_jacobian_adjoint)
from .imaging import Patch
from .warp import Family, WarpParams, invert_warp


class LossError(ValueError):
    pass


def huber(e) -> float:
    """Sum over dimensions of x^2/2 (|x| <= 1) or |x| - 1/2."""
    a = np.abs(np.asarray(e, dtype=float))
    return float(np.sum(np.where(a <= 1.0, 0.5 * a * a, a - 0.5)))


def huber_grad(e) -> np.ndarray:
    return np.clip(np.asarray(e, dtype=float), -1.0, 1.0)


@dataclass
class LossSample:
    """Template/source crop pair plus the warp ``dp_gt`` that alignment
    should return when started from the source crop (p = 0).

    The regressor predicts the inverse-compositional increment, so the loss
    targets ``invert_warp(dp_gt)``; for pure translation that is ``-dp_gt``.
    """

    template: Patch
    source: Patch
    dp_gt: WarpParams
    sample_id: str = ""

    def __post_init__(self):
        if self.template.data.shape != self.source.data.shape:
            raise ValueError(
                f"template {self.template.data.shape} and source {self.source.data.shape} differ")


@dataclass
class LossCache:
    model: TemplateModel
    phi_I: np.ndarray
    d: np.ndarray
    prediction: np.ndarray
    e: np.ndarray
    value: float
    cache_T: FeatureCache
    cache_I: FeatureCache


@dataclass
class LossGrad:
    value: float
    grad_theta: FeatureParams
    residual: np.ndarray
    grad_phi_T: np.ndarray
    grad_phi_I: np.ndarray


def conditional_lk_forward(theta: FeatureParams, sample: LossSample,
                           family: Family = Family.TRANSLATION, damping: float | None = None,
                           rel_damping: float = DEFAULT_DAMPING_REL):
    phi_T, cache_T = feature_forward(theta, sample.template)
    phi_I, cache_I = feature_forward(theta, sample.source)
    try:
        model = build_template_model(phi_T, family, damping, rel_damping=rel_damping)
    except SingularTemplateError as exc:
        raise LossError(f"sample {sample.sample_id!r}: {exc}") from exc
    d = (phi_I - phi_T).ravel()
    pred = model.R @ d
    e = pred - invert_warp(sample.dp_gt.as_family(family)).vector
    value = huber(e)
    return value, LossCache(model, phi_I, d, pred, e, value, cache_T, cache_I)


def template_feature_grad(model: TemplateModel, d: np.ndarray, u: np.ndarray) -> np.ndarray:
    """d(u^T R d)/d phi_T holding ``d`` fixed: the part of the template
    gradient that flows through the regression matrix."""
    W, q = model.W, model.R @ d
    v = model.A_inv @ u
    G = np.outer(d - W @ q, v) - np.outer(W @ v, q)
    if model.damping_rel:
        # lam = c tr(W^T W)/dof also moves with W
        G -= (2.0 * model.damping_rel / model.dof) * (v @ q) * W
    return template_jacobian_adjoint(G, model.family, model.phi_T.shape, model.mask)


def conditional_lk_backward(theta: FeatureParams, cache: LossCache) -> LossGrad:
    model = cache.model
    u = huber_grad(cache.e)
    g_I = (model.R.T @ u).reshape(model.phi_T.shape)
    g_T = -g_I + template_feature_grad(model, cache.d, u)
    grads_T, _ = feature_backward(theta, cache.cache_T, g_T)
    grads_I, _ = feature_backward(theta, cache.cache_I, g_I)
    grad = theta.with_tensors([a + b for a, b in zip(grads_T.tensors(), grads_I.tensors())])
    return LossGrad(cache.value, grad, cache.e.copy(), g_T, g_I)


def loss_and_grad(theta, sample, family=Family.TRANSLATION, damping=None,
                  rel_damping=DEFAULT_DAMPING_REL) -> LossGrad:
    _, cache = conditional_lk_forward(theta, sample, family, damping, rel_damping)
    return conditional_lk_backward(theta, cache)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple | None
    passed: bool
    n_checked: int

    def format(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} "
                f"worst={self.worst_coordinate} checked={self.n_checked}")


def gradient_check(theta: FeatureParams, sample: LossSample, family=Family.TRANSLATION,
                   damping: float | None = None, epsilon: float = 1e-5, tolerance: float = 1e-4,
                   *, max_coords: int | None = None, seed: int = 0,
                   rel_damping: float = DEFAULT_DAMPING_REL) -> GradCheckReport:
    """Compare the analytic parameter gradient with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. When
    ``max_coords`` is set and smaller than the parameter count, a seeded
    random subset of coordinates is checked.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tensors = theta.tensors()
    coords = [(ti, j) for ti, t in enumerate(tensors) for j in range(t.size)]
    if not coords:
        return GradCheckReport(0.0, None, True, 0)
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    analytic = loss_and_grad(theta, sample, family, damping, rel_damping).grad_theta.tensors()

    def loss_at(ti, j, delta):
        moved = [t.copy() for t in tensors]
        moved[ti].flat[j] += delta
        value, _ = conditional_lk_forward(theta.with_tensors(moved), sample, family, damping,
                                          rel_damping)
        return value

    worst, worst_err = None, -1.0
    for ti, j in coords:
        numeric = (loss_at(ti, j, epsilon) - loss_at(ti, j, -epsilon)) / (2.0 * epsilon)
        a = analytic[ti].flat[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > worst_err:
            worst, worst_err = (ti, j), err
    return GradCheckReport(worst_err, worst, worst_err < tolerance, len(coords))
