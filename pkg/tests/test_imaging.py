import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeplk.imaging import (Patch, as_image, crop_resize, image_gradients,
                            image_gradients_adjoint, load_image, photometric_augment,
                            sample_bilinear, save_image)
from deeplk.warp import Box


def scalar_bilinear(img, x, y):
    """Reference: textbook four-neighbour interpolation, one channel."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    i, j = int(np.floor(y)), int(np.floor(x))
    i1, j1 = min(i + 1, h - 1), min(j + 1, w - 1)
    a, b = x - j, y - i
    return ((1 - a) * (1 - b) * img[i, j] + a * (1 - b) * img[i, j1]
            + (1 - a) * b * img[i1, j] + a * b * img[i1, j1])


def stencil_loop(f):
    """Reference gradients, one pixel at a time."""
    h, w = f.shape
    gx, gy = np.zeros_like(f), np.zeros_like(f)
    for r in range(h):
        for c in range(w):
            if c == 0:
                gx[r, c] = f[r, 1] - f[r, 0]
            elif c == w - 1:
                gx[r, c] = f[r, c] - f[r, c - 1]
            else:
                gx[r, c] = (f[r, c + 1] - f[r, c - 1]) / 2
            if r == 0:
                gy[r, c] = f[1, c] - f[0, c]
            elif r == h - 1:
                gy[r, c] = f[r, c] - f[r - 1, c]
            else:
                gy[r, c] = (f[r + 1, c] - f[r - 1, c]) / 2
    return gx, gy


def test_sample_at_integer_is_pixel(rng):
    img = rng.random((5, 6, 2))
    np.testing.assert_array_equal(sample_bilinear(img, 2, 3), img[3, 2])


def test_sample_midpoint():
    img = np.zeros((3, 3))
    img[1, 2] = 1.0
    assert sample_bilinear(img, 1.5, 1)[0] == pytest.approx(0.5)


def test_sample_hand_weights():
    img = np.arange(16, dtype=float).reshape(4, 4)
    x, y = 1.25, 2.75
    expected = (0.75 * 0.25 * img[2, 1] + 0.25 * 0.25 * img[2, 2]
                + 0.75 * 0.75 * img[3, 1] + 0.25 * 0.75 * img[3, 2])
    assert sample_bilinear(img, x, y)[0] == pytest.approx(expected, abs=1e-12)
    assert scalar_bilinear(img, x, y) == pytest.approx(expected, abs=1e-12)


def test_sample_matches_scalar_reference(rng):
    img = rng.random((7, 9))
    for x, y in rng.uniform(-2, 10, size=(50, 2)):
        assert sample_bilinear(img, x, y)[0] == pytest.approx(scalar_bilinear(img, x, y), abs=1e-12)


def test_crop_full_image_is_copy(rng):
    img = rng.random((16, 16, 1))
    patch = crop_resize(img, Box(7.5, 7.5, 16, 16), context=1.0, out_size=16)
    np.testing.assert_allclose(patch.data, img, atol=1e-12)
    assert patch.box == Box(7.5, 7.5, 16, 16)


def test_crop_constant():
    img = np.full((20, 30, 1), 0.37)
    patch = crop_resize(img, Box(3, 4, 50, 11), 2.0, 12)
    np.testing.assert_allclose(patch.data, 0.37)


def test_crop_ramp():
    xs = np.arange(64) / 63.0
    img = np.tile(xs, (64, 1))
    patch = crop_resize(img, Box(31.5, 31.5, 32, 32), 2.0, 64)
    np.testing.assert_allclose(patch.data[..., 0], img, atol=1e-12)


def test_crop_translation_equivariant(rng):
    img = rng.random((40, 40, 1))
    a = crop_resize(img, Box(18, 20, 8, 8), 2.0, 16)
    b = crop_resize(np.roll(img, (2, 3), axis=(0, 1)), Box(21, 22, 8, 8), 2.0, 16)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_crop_rejects_bad_input():
    img = np.zeros((10, 10))
    with pytest.raises(ValueError):
        crop_resize(img, Box(5, 5, 4, 4), 2.0, 4)


def test_gradients_constant_and_linear():
    gx, gy = image_gradients(np.full((6, 7, 2), 3.0))
    assert not gx.any() and not gy.any()
    yy, xx = np.mgrid[0:8, 0:9].astype(float)
    gx, gy = image_gradients(3 * xx + 5 * yy)
    np.testing.assert_allclose(gx, 3.0)
    np.testing.assert_allclose(gy, 5.0)


def test_gradients_match_stencil_loop(rng):
    f = rng.random((8, 8))
    gx, gy = image_gradients(f)
    rx, ry = stencil_loop(f)
    np.testing.assert_array_equal(gx[..., 0], rx)
    np.testing.assert_array_equal(gy[..., 0], ry)


def test_gradients_reject_small():
    with pytest.raises(ValueError):
        image_gradients(np.zeros((2, 5)))


def test_gradient_adjoint_is_transpose(rng):
    f = rng.random((6, 5, 2))
    a, b = rng.random((6, 5, 2)), rng.random((6, 5, 2))
    gx, gy = image_gradients(f)
    lhs = np.sum(gx * a) + np.sum(gy * b)
    rhs = np.sum(f * image_gradients_adjoint(a, b))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_augment_identity_and_determinism(rng):
    p = Patch(rng.random((8, 8, 1)))
    out = photometric_augment(p, np.random.default_rng(0), 0.0, 0.0)
    np.testing.assert_array_equal(out.data, p.data)
    a = photometric_augment(p, np.random.default_rng(3), 0.1, 0.1)
    b = photometric_augment(p, np.random.default_rng(3), 0.1, 0.1)
    np.testing.assert_array_equal(a.data, b.data)


def test_augment_forced_gain_bias_clamps():
    p = Patch(np.full((8, 8, 1), 0.5))
    out = photometric_augment(p, np.random.default_rng(0), 0.1, 0.1, gain=2.0, bias=0.2)
    np.testing.assert_array_equal(out.data, 1.0)


def test_augment_saturation_only_for_rgb(rng):
    rgb = rng.random((8, 8, 3))
    out = photometric_augment(rgb, np.random.default_rng(1), 0.0, 0.0, 0.3)
    assert not np.allclose(out, rgb)
    gray = rng.random((8, 8, 1))
    out = photometric_augment(gray, np.random.default_rng(1), 0.0, 0.0, 0.3)
    np.testing.assert_allclose(out, gray)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.5), st.floats(0, 0.5), st.integers(0, 2**31))
def test_augment_stays_in_unit_range(brightness, contrast, seed):
    data = np.random.default_rng(seed).random((8, 8, 1))
    out = photometric_augment(data, np.random.default_rng(seed), brightness, contrast)
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 6), st.floats(0, 6))
def test_bilinear_affine_along_axis(x, y):
    img = np.random.default_rng(0).random((8, 8))
    x0 = np.floor(min(x, 6.999))
    a = sample_bilinear(img, x0, y)[0]
    b = sample_bilinear(img, x0 + 1, y)[0]
    t = min(x, 6.999) - x0
    assert sample_bilinear(img, x0 + t, y)[0] == pytest.approx((1 - t) * a + t * b, abs=1e-12)


@pytest.mark.parametrize("suffix", [".png", ".pgm", ".ppm"])
def test_image_roundtrip(tmp_path, suffix, rng):
    channels = 3 if suffix == ".ppm" else 1
    img = np.round(rng.random((5, 7, channels)) * 255) / 255
    path = tmp_path / f"im{suffix}"
    save_image(path, img)
    np.testing.assert_allclose(load_image(path), img, atol=1e-12)


def test_as_image_adds_channel():
    assert as_image(np.zeros((3, 4))).shape == (3, 4, 1)
