import numpy as np
import pytest

from crossmas.ddf import DisplacementField
from crossmas.losses import (DICE_EPS, ScaleSet, consistency_grad, consistency_loss, dice_loss, l1_grad,
                             multi_scale_dice, multi_scale_dice_grad, soft_dice, soft_dice_array, soft_dice_grad,
                             smooth_l1, total_loss)
from crossmas.nnops import grad_check
from crossmas._ops import gaussian_smooth
from crossmas.volume import LabelMap, Volume, one_hot


def brute_soft_dice(p, q):
    vals = []
    for c in range(p.shape[0]):
        num = 2 * sum(float(a) * float(b) for a, b in zip(p[c].ravel(), q[c].ravel()))
        den = sum(float(a) ** 2 for a in p[c].ravel()) + sum(float(b) ** 2 for b in q[c].ravel()) + DICE_EPS
        vals.append(num / den)
    return sum(vals) / len(vals)


def test_soft_dice_against_longhand(rng):
    p, q = rng.uniform(size=(2, 2, 3, 4, 5))
    assert abs(soft_dice_array(p, q) - brute_soft_dice(p, q)) < 1e-14


def test_soft_dice_identical_and_disjoint():
    a = np.zeros((4, 4, 4), dtype=int)
    a[:2] = 1
    la = LabelMap(a)
    # 32 foreground voxels: 2 * 32 / (32 + 32 + eps)
    assert soft_dice(one_hot(la), one_hot(la)) == pytest.approx(64.0 / (64.0 + DICE_EPS), rel=1e-15)
    lb = LabelMap(1 - a)
    assert soft_dice(one_hot(la), one_hot(lb)) == 0.0


def test_soft_dice_gradient(rng):
    p = rng.uniform(size=(2, 4, 4, 4))

    def fn(params):
        value, g = soft_dice_grad(p, params["q"])
        return value, {"q": g}

    assert grad_check(fn, {"q": rng.uniform(size=(2, 4, 4, 4))}, probe=30) < 1e-5


def test_multi_scale_dice_gradient(rng):
    scales = (0.0, 1.0, 2.0)
    fixed = rng.uniform(size=(2, 6, 5, 4))
    smoothed = [gaussian_smooth(fixed, s) for s in scales]

    def fn(params):
        value, g = multi_scale_dice_grad(smoothed, params["m"], scales)
        return value, {"m": g}

    assert grad_check(fn, {"m": rng.uniform(size=(2, 6, 5, 4))}, probe=30) < 1e-5


def test_multi_scale_dice_is_mean_over_scales(rng):
    a = LabelMap(rng.integers(0, 3, (6, 6, 6)), label_set=(0, 1, 2))
    b = LabelMap(rng.integers(0, 3, (6, 6, 6)), label_set=(0, 1, 2))
    fa, fb = one_hot(a).channels[1:], one_hot(b).channels[1:]
    expected = np.mean([soft_dice_array(gaussian_smooth(fa, s), gaussian_smooth(fb, s)) for s in (0, 1, 2, 4)])
    assert abs(multi_scale_dice(a, b) - expected) < 1e-14
    assert abs(dice_loss(a, a, b, b) + 2.0) < 1e-6


def test_scale_set_validation():
    with pytest.raises(ValueError):
        ScaleSet((1.0, 2.0))
    with pytest.raises(ValueError):
        ScaleSet((0.0, -1.0))
    assert len(ScaleSet()) == 4


def test_total_loss_validation():
    assert total_loss(-1.5, 2.0, 0.1).total == pytest.approx(-1.3)
    with pytest.raises(ValueError):
        total_loss(-1.0, 1.0, -0.1)
    with pytest.raises(ValueError):
        total_loss(-1.0, -1.0, 0.1)


def test_opposite_integer_translations_give_zero_interior_consistency(rng):
    dims = (12, 12, 12)
    ia, it = Volume(rng.normal(size=dims)), Volume(rng.normal(size=dims))
    t = (2, -1, 3)
    u = DisplacementField.constant(dims, t)
    v = DisplacementField.constant(dims, [-c for c in t])
    _, ra = _restored(ia, u, v)
    _, rt = _restored(it, v, u)
    m = 3
    interior = (slice(m, -m),) * 3
    assert np.all(ra[interior] == ia.data[interior]) and np.all(rt[interior] == it.data[interior])


def _restored(img, first, second):
    from crossmas.ddf import restore_roundtrip
    out = restore_roundtrip(img, first, second).data
    return img.data, out


def test_unit_shift_on_ramp_gives_residual_two():
    # I(x) = x along axis 0; U = V = +1 samples I at x + 2, so the residual is 2
    dims = (10, 4, 4)
    ramp = np.broadcast_to(np.arange(10.0)[:, None, None], dims).copy()
    u = DisplacementField.constant(dims, (1, 0, 0))
    cons = consistency_loss(Volume(ramp), Volume(ramp), u, u)
    _, restored = _restored(Volume(ramp), u, u)
    np.testing.assert_array_equal((restored - ramp)[:-2], 2.0)
    assert cons.total > 0 and cons.mean == cons.total / ramp.size


def test_consistency_gradient(rng):
    dims = (6, 5, 4)
    ia, it = rng.normal(size=(2,) + dims)
    base_u = rng.integers(-1, 2, size=(3,) + dims) + rng.uniform(0.2, 0.8, size=(3,) + dims)
    base_v = rng.integers(-1, 2, size=(3,) + dims) + rng.uniform(0.2, 0.8, size=(3,) + dims)

    def fn(params):
        value, gu, gv = consistency_grad(ia, it, params["u"], params["v"])
        return value, {"u": gu, "v": gv}

    # residuals are generically far from the kink at 0, so the L1 is smooth here
    assert grad_check(fn, {"u": base_u, "v": base_v}, probe=25, step=1e-7) < 1e-5


def test_l1_grad_is_sign_outside_the_smoothing_band():
    r = np.array([-1.0, -1e-7, 0.0, 5e-7, 3.0])
    np.testing.assert_allclose(l1_grad(r), [-1.0, -0.1, 0.0, 0.5, 1.0])


def test_smooth_l1_value_and_derivative_agree():
    r = np.linspace(-0.3, 0.3, 61)
    w = 0.1
    np.testing.assert_allclose(smooth_l1(r, w)[[0, 30, 60]], [0.25, 0.0, 0.25])
    assert np.all(smooth_l1(r, w) <= np.abs(r)) and np.all(np.abs(r) - smooth_l1(r, w) <= w / 2 + 1e-15)
    h = 1e-7
    numeric = (smooth_l1(r + h, w) - smooth_l1(r - h, w)) / (2 * h)
    np.testing.assert_allclose(numeric, l1_grad(r, w), atol=1e-6)
