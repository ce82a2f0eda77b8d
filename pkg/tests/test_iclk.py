import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeplk.evalkit import blurred_noise
from deeplk.features import FeatureParams
from deeplk.iclk import (SingularTemplateError, align, build_template_model, regression_step,
                         siamese_weights, template_jacobian, template_jacobian_adjoint)
from deeplk.imaging import crop_resize, patch_coords
from deeplk.warp import Box, Family, WarpParams, warp_to_box

IDENT = FeatureParams()


def ramp(size, a=1.0, c=0.0, shift=(0.0, 0.0)):
    u = patch_coords(size)
    ux, uy = np.meshgrid(u, u)
    return (a * (ux + shift[0]) + c * (uy + shift[1]) + 0.3)[..., None]


def interior(size, border=1):
    m = np.zeros((size, size), dtype=bool)
    m[border:-border, border:-border] = True
    return m


def test_constant_map():
    model = build_template_model(np.full((8, 8, 1), 0.7), Family.TRANSLATION, damping=1e-3)
    assert not model.W.any() and not model.R.any() and not model.b.any()


def test_constant_map_without_damping_is_singular():
    with pytest.raises(SingularTemplateError):
        build_template_model(np.full((8, 8, 1), 0.7), Family.TRANSLATION)


def test_ramp_jacobian_and_averaging():
    phi = ramp(8, a=2.0)
    W = template_jacobian(phi, Family.TRANSLATION)
    np.testing.assert_allclose(W[:, 0], 2.0, atol=1e-12)
    np.testing.assert_allclose(W[:, 1], 0.0, atol=1e-12)
    model = build_template_model(phi, Family.TRANSLATION, damping=1e-9)
    # rank-1 design: R's x row is the averaging operator scaled by 1/slope
    np.testing.assert_allclose(model.R[0], 1.0 / (2.0 * 64), rtol=1e-6)
    np.testing.assert_allclose(model.R[1], 0.0, atol=1e-12)


def test_left_inverse(rng):
    phi = rng.random((8, 8, 2))
    model = build_template_model(phi, Family.TRANSLATION_SCALE, damping=1e-6)
    assert np.abs(model.R @ model.W - np.eye(3)).max() < 1e-6


def test_left_inverse_tightens_as_damping_vanishes(rng):
    phi = rng.random((8, 8, 2))
    errs = [np.abs(build_template_model(phi, Family.TRANSLATION_SCALE, damping=lam).R
                   @ build_template_model(phi, Family.TRANSLATION_SCALE, damping=lam).W
                   - np.eye(3)).max() for lam in (1e-1, 1e-3, 1e-5)]
    assert errs[0] > errs[1] > errs[2]


def test_model_invariants(rng):
    phi = rng.random((10, 10, 3))
    for family in Family:
        model = build_template_model(phi, family)
        np.testing.assert_allclose(model.b, -model.R @ phi.ravel(), atol=1e-10)
        W = model.W
        ref = np.linalg.solve(W.T @ W + model.damping * np.eye(family.dof), W.T)
        np.testing.assert_allclose(model.R, ref, atol=1e-8)
        # relative damping default
        assert model.damping == pytest.approx(1e-4 * np.trace(W.T @ W) / family.dof)


def test_jacobian_adjoint(rng):
    phi = rng.normal(size=(7, 9, 2))
    mask = rng.random((7, 9)) > 0.3
    for family in Family:
        G = rng.normal(size=(phi.size, family.dof))
        lhs = np.sum(template_jacobian(phi, family, mask) * G)
        rhs = np.sum(phi * template_jacobian_adjoint(G, family, phi.shape, mask))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_small_map_rejected():
    with pytest.raises(ValueError):
        build_template_model(np.zeros((2, 5, 1)))


def test_step_zero_residual(rng):
    phi = rng.random((8, 8, 2))
    model = build_template_model(phi, Family.TRANSLATION_SCALE)
    assert np.abs(regression_step(model, phi).vector).max() < 1e-10


def test_step_shape_mismatch(rng):
    model = build_template_model(rng.random((8, 8, 1)))
    with pytest.raises(ValueError):
        regression_step(model, rng.random((8, 8, 2)))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), family=st.sampled_from(list(Family)),
       k=st.integers(1, 3), side=st.integers(3, 10))
def test_three_update_forms_agree(seed, family, k, side):
    rng = np.random.default_rng(seed)
    phi_T = rng.normal(size=(side, side, k))
    phi_I = rng.normal(size=(side, side, k))
    model = build_template_model(phi_T, family)
    a = regression_step(model, phi_I).vector
    b = model.R @ (phi_I.ravel() - phi_T.ravel())
    c = siamese_weights(model) @ np.concatenate([phi_I.ravel(), phi_T.ravel()])
    scale = max(np.abs(a).max(), 1e-12)
    assert np.abs(a - b).max() / scale < 1e-10
    assert np.abs(a - c).max() / scale < 1e-10


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.2, 3.0), c=st.floats(-3.0, 3.0), dx=st.floats(-0.2, 0.2),
       dy=st.floats(-0.2, 0.2))
def test_one_step_exact_on_linear_images(a, c, dx, dy):
    # two linear channels so both translation components are observable
    def image(shift=(0.0, 0.0)):
        return np.concatenate([ramp(12, a, c, shift), ramp(12, -c, a, shift)], axis=2)
    model = build_template_model(image(), Family.TRANSLATION, damping=0.0, mask=interior(12))
    dp = regression_step(model, image((dx, dy)))
    np.testing.assert_allclose(dp.vector, [dx, dy], atol=1e-6)


def test_ramp_shift_example():
    model = build_template_model(ramp(8, 1.5), Family.TRANSLATION, damping=1e-9,
                                 mask=interior(8))
    dp = regression_step(model, ramp(8, 1.5, shift=(0.05, 0.0)))
    np.testing.assert_allclose(dp.vector, [0.05, 0.0], atol=1e-8)


@pytest.fixture(scope="module")
def texture():
    return blurred_noise(np.random.default_rng(3), (160, 160), 4.0)[..., None]


def test_align_identical_source(texture):
    box = Box(80, 80, 32, 32)
    phi = crop_resize(texture, box, 2.0, 64).data
    model = build_template_model(phi, Family.TRANSLATION)
    res = align(model, texture, box, features=IDENT)
    assert res.iterations == 1 and res.converged
    assert np.abs(res.p_final.vector).max() == 0.0


@pytest.mark.parametrize("family", list(Family))
def test_align_recovers_shift(texture, family):
    box = Box(80, 80, 32, 32)
    model = build_template_model(crop_resize(texture, box, 2.0, 64).data, family)
    shifted = np.roll(texture, 3, axis=1)  # content moves +3 px in x
    res = align(model, shifted, box, features=IDENT, max_iters=20)
    found = warp_to_box(res.p_final, box, 2.0)
    assert res.iterations <= 20
    assert abs(found.cx - 83) < 0.1 and abs(found.cy - 80) < 0.1
    # brute-force integer search agrees on the global minimum
    ssd = [np.sum((crop_resize(shifted, Box(80 + s, 80, 32, 32), 2.0, 64).data
                   - model.phi_T) ** 2) for s in range(-6, 7)]
    assert int(np.argmin(ssd)) - 6 == 3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), sx=st.floats(-8, 8), sy=st.floats(-8, 8),
       iters=st.integers(1, 8))
def test_align_returns_minimum_ssd_iterate(texture, seed, sx, sy, iters):
    rng = np.random.default_rng(seed)
    box = Box(80, 80, 32, 32)
    model = build_template_model(crop_resize(texture, box, 2.0, 32).data, Family.TRANSLATION_SCALE)
    p0 = WarpParams(Family.TRANSLATION_SCALE, (sx / 32, sy / 32, rng.uniform(-0.1, 0.1)))
    res = align(model, texture, box, p0, features=IDENT, max_iters=iters)
    k = int(np.argmin(res.ssd_trace))
    assert res.p_final == res.p_trace[k]
    assert len(res.ssd_trace) == res.iterations <= iters
    if res.stopped_early:
        assert res.ssd_trace[-1] > res.ssd_trace[-2] or len(res.ssd_trace) >= 1
