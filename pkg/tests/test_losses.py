"""Objective terms: closed-form values, brute-force oracles, gradient checks."""

import numpy as np
import pytest

from dcmdehaze import losses
from dcmdehaze.autodiff import Tensor
from dcmdehaze.errors import (NumericError, ParameterError, ShapeError,
                              ValidationError)

from oracles import (brute_correlate2d_valid, finite_difference_grad,
                     relative_grad_error)


# ---------------------------------------------------------------- weights

def test_weights_defaults():
    w = losses.LossWeights()
    assert (w.lambda_cyc, w.lambda_adv, w.lambda_contour) == (1.0, 1.0, 0.5)


@pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
def test_weights_rejected(bad):
    with pytest.raises(ParameterError):
        losses.LossWeights(lambda_adv=bad)


# ------------------------------------------------------------- cycle loss

def test_cycle_identity_zero():
    rng = np.random.default_rng(0)
    g = rng.random((2, 3, 8, 8))
    h = rng.random((2, 3, 8, 8))
    assert losses.cycle_loss(g, g, h, h) == 0.0


def test_cycle_constant_offset():
    rng = np.random.default_rng(1)
    g = rng.random((2, 3, 8, 8)) * 0.8
    h = rng.random((2, 3, 8, 8))
    assert losses.cycle_loss(g, g + 0.1, h, h) == pytest.approx(0.1, abs=1e-12)


def test_cycle_matches_direct_summation():
    rng = np.random.default_rng(2)
    g, g2, h, h2 = (rng.random((2, 3, 5, 4)) for _ in range(4))
    manual = 0.0
    for a, b in ((g, g2), (h, h2)):
        acc = 0.0
        for idx in np.ndindex(a.shape):
            acc += abs(a[idx] - b[idx])
        manual += acc / a.size
    assert losses.cycle_loss(g, g2, h, h2) == pytest.approx(manual, abs=1e-6)


def test_cycle_symmetric_in_each_pair():
    rng = np.random.default_rng(3)
    g, g2, h, h2 = (rng.random((1, 3, 6, 6)) for _ in range(4))
    assert losses.cycle_loss(g, g2, h, h2) == pytest.approx(
        losses.cycle_loss(g2, g, h2, h), abs=1e-12)


def test_cycle_shape_mismatch():
    with pytest.raises(ShapeError):
        losses.cycle_loss(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)),
                          np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 4)))


def test_cycle_rejects_non_finite():
    bad = np.full((1, 3, 4, 4), np.nan)
    ok = np.zeros((1, 3, 4, 4))
    with pytest.raises(ValidationError):
        losses.cycle_loss(bad, ok, ok, ok)


# ------------------------------------------------------- adversarial loss

def test_disc_loss_perfect_and_worst():
    ones = np.ones((2, 1, 4, 4))
    zeros = np.zeros((2, 1, 4, 4))
    assert losses.adv_loss_discriminator(ones, zeros) == 0.0
    assert losses.adv_loss_discriminator(zeros, ones) == pytest.approx(2.0)


def test_disc_loss_matches_mean_oracle():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(2, 1, 5, 5))
    f = rng.normal(size=(2, 1, 5, 5))
    manual = np.add.reduce([(v - 1.0) ** 2 for v in r.ravel()]) / r.size \
        + np.add.reduce([v ** 2 for v in f.ravel()]) / f.size
    assert losses.adv_loss_discriminator(r, f) == pytest.approx(manual, abs=1e-6)


def test_gen_loss_values():
    assert losses.adv_loss_generator(np.ones((1, 1, 3, 3))) == 0.0
    assert losses.adv_loss_generator(np.zeros((1, 1, 3, 3))) == pytest.approx(1.0)
    rng = np.random.default_rng(5)
    f = rng.normal(size=(2, 1, 4, 4))
    assert losses.adv_loss_generator(f) == pytest.approx(
        float(np.mean((f - 1.0) ** 2)), abs=1e-6)


def test_adv_losses_permutation_invariant():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(1, 1, 4, 4))
    shuffled = rng.permutation(f.ravel()).reshape(f.shape)
    assert losses.adv_loss_generator(f) == pytest.approx(
        losses.adv_loss_generator(shuffled), abs=1e-12)


# --------------------------------------------------------------- grayscale

def test_grayscale_primaries():
    white = np.ones((2, 2, 3))
    black = np.zeros((2, 2, 3))
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    assert losses.to_grayscale(white) == pytest.approx(np.ones((2, 2)), abs=1e-12)
    assert np.all(losses.to_grayscale(black) == 0.0)
    assert losses.to_grayscale(red) == pytest.approx(np.full((2, 2), 0.299), abs=1e-12)


def test_grayscale_batched_matches_single():
    rng = np.random.default_rng(7)
    img = rng.random((5, 4, 3))
    batched = losses.to_grayscale(img.transpose(2, 0, 1)[None])
    assert batched.shape == (1, 1, 5, 4)
    assert np.allclose(batched[0, 0], losses.to_grayscale(img), atol=1e-12)


def test_grayscale_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        losses.to_grayscale(np.zeros((4, 4, 4)))


# ------------------------------------------------------------------ sobel

def test_sobel_constant_zero():
    gx, gy = losses.sobel_gradients(np.full((6, 7), 0.3))
    assert gx.shape == (4, 5) and gy.shape == (4, 5)
    assert np.all(gx == 0.0) and np.all(gy == 0.0)


@pytest.mark.parametrize("step", [0.1, 1.0, 0.033])
def test_sobel_horizontal_ramp(step):
    w = 8
    img = np.tile(np.arange(w) * step, (6, 1))
    gx, gy = losses.sobel_gradients(img)
    assert np.allclose(gx, 8.0 * step, atol=1e-9)
    assert np.allclose(gy, 0.0, atol=1e-9)


def test_sobel_transpose_swaps_axes():
    rng = np.random.default_rng(8)
    img = rng.random((7, 9))
    gx, gy = losses.sobel_gradients(img)
    gx_t, gy_t = losses.sobel_gradients(img.T)
    assert np.allclose(gx_t, gy.T, atol=1e-12)
    assert np.allclose(gy_t, gx.T, atol=1e-12)


def test_sobel_is_linear():
    rng = np.random.default_rng(9)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    gx_sum, gy_sum = losses.sobel_gradients(2.0 * a - 3.0 * b)
    gx_a, gy_a = losses.sobel_gradients(a)
    gx_b, gy_b = losses.sobel_gradients(b)
    assert np.allclose(gx_sum, 2.0 * gx_a - 3.0 * gx_b, atol=1e-9)
    assert np.allclose(gy_sum, 2.0 * gy_a - 3.0 * gy_b, atol=1e-9)


def test_sobel_matches_brute_force_on_random_images():
    rng = np.random.default_rng(10)
    for _ in range(50):
        img = rng.random((8, 8))
        gx, gy = losses.sobel_gradients(img)
        assert np.abs(gx - brute_correlate2d_valid(img, losses.SOBEL_HORIZONTAL)).max() <= 1e-6
        assert np.abs(gy - brute_correlate2d_valid(img, losses.SOBEL_VERTICAL)).max() <= 1e-6


def test_sobel_rejects_small_input():
    with pytest.raises(ShapeError):
        losses.sobel_gradients(np.zeros((2, 5)))


def test_sobel_tensor_path_matches_numpy():
    rng = np.random.default_rng(11)
    img = rng.random((2, 1, 6, 8))
    gx_np, gy_np = losses.sobel_gradients(img)
    gx_t, gy_t = losses.sobel_gradients(Tensor(img))
    assert np.allclose(gx_t.data, gx_np, atol=1e-12)
    assert np.allclose(gy_t.data, gy_np, atol=1e-12)


# ----------------------------------------------------------- contour loss

def test_contour_constant_zero():
    assert losses.contour_loss(np.full((6, 6, 3), 0.5)) == 0.0


def test_contour_zero_only_for_constant():
    rng = np.random.default_rng(12)
    img = rng.random((6, 6, 3))
    assert losses.contour_loss(img) > 1e-3


@pytest.mark.parametrize("step", [0.05, 0.01])
def test_contour_horizontal_ramp(step):
    img = np.tile((np.arange(8) * step)[None, :, None], (6, 1, 3))
    # The smoothing-floor subtraction shifts the value by at most 1e-6.
    assert losses.contour_loss(img) == pytest.approx(8.0 * step, abs=2e-6)


def test_contour_matched_identical_zero():
    rng = np.random.default_rng(13)
    img = rng.random((6, 6, 3))
    assert losses.contour_loss(img, mode="matched", reference=img) == 0.0


def test_contour_matched_requires_reference():
    with pytest.raises(ParameterError):
        losses.contour_loss(np.zeros((6, 6, 3)), mode="matched")


def test_contour_rejects_unknown_mode():
    with pytest.raises(ParameterError):
        losses.contour_loss(np.zeros((6, 6, 3)), mode="sharpen")


def test_contour_tensor_matches_numpy_path():
    rng = np.random.default_rng(14)
    img = rng.random((6, 6, 3))
    bchw = img.transpose(2, 0, 1)[None]
    t_val = losses.contour_loss(Tensor(bchw)).item()
    assert t_val == pytest.approx(losses.contour_loss(img), abs=1e-9)
    ref = rng.random((6, 6, 3))
    t_ref = losses.contour_loss(Tensor(bchw), mode="matched",
                                reference=Tensor(ref.transpose(2, 0, 1)[None])).item()
    assert t_ref == pytest.approx(
        losses.contour_loss(img, mode="matched", reference=ref), abs=1e-9)


@pytest.mark.parametrize("mode", ["literal", "matched"])
def test_contour_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(15)
    img = rng.random((1, 3, 6, 6))
    ref = rng.random((1, 3, 6, 6))

    def f(x):
        if mode == "literal":
            return losses.contour_loss(Tensor(x)).item()
        return losses.contour_loss(Tensor(x), mode="matched",
                                   reference=Tensor(ref)).item()

    x = Tensor(img.copy(), requires_grad=True)
    if mode == "literal":
        out = losses.contour_loss(x)
    else:
        out = losses.contour_loss(x, mode="matched", reference=Tensor(ref))
    out.backward()
    numeric = finite_difference_grad(f, img)
    assert relative_grad_error(x.grad, numeric) <= 1e-4


# ------------------------------------------------------------- total loss

def test_total_loss_reference_point():
    assert losses.total_loss(1.0, 1.0, 1.0) == pytest.approx(2.5, abs=1e-12)


def test_total_loss_zero_and_projection():
    assert losses.total_loss(0.0, 0.0, 0.0) == 0.0
    w = losses.LossWeights(lambda_cyc=0.0, lambda_adv=0.0, lambda_contour=1.0)
    assert losses.total_loss(5.0, 7.0, 0.37, w) == pytest.approx(0.37, abs=1e-12)


def test_total_loss_rejects_non_finite():
    with pytest.raises(NumericError, match="adv"):
        losses.total_loss(0.0, float("nan"), 0.0)


def test_total_loss_tensor_path():
    c = Tensor(np.array(1.0), requires_grad=True)
    out = losses.total_loss(c, Tensor(np.array(1.0)), Tensor(np.array(1.0)))
    assert out.item() == pytest.approx(2.5)
    out.backward()
    assert c.grad == pytest.approx(1.0)


def test_breakdown_invariant_and_dict():
    w = losses.LossWeights()
    b = losses.LossBreakdown.weighted(cyc=0.3, adv_g=0.2, adv_d=0.9,
                                      contour=0.4, weights=w)
    assert b.total == pytest.approx(0.3 + 0.2 + 0.5 * 0.4, abs=1e-12)
    d = b.as_dict()
    assert set(d) == {"cyc", "adv_g", "adv_d", "contour", "total"}
    assert d["adv_d"] == 0.9
