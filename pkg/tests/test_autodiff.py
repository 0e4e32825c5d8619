import numpy as np
import pytest

from kidneyseg.autodiff import (
    Tape,
    Tensor,
    add,
    concat_cropped,
    conv3d_valid,
    crop_center,
    elementwise_mul,
    gradcheck,
    maxpool2,
    pad_spatial,
    relu,
    scale,
    select_channels,
    softmax_channels,
    spatial_dropout,
    sum_all,
    transposed_conv2,
    upsample_nearest,
)
from kidneyseg.errors import InvalidRate, ShapeError
from kidneyseg.losses import topk_weighted_ce

from oracles import fd_gradient, naive_conv3d_valid, naive_maxpool2


def _project(tape, t, r):
    """Scalar probe: sum(t * r) for a fixed random direction r."""
    return sum_all(tape, elementwise_mul(tape, t, Tensor(r)))


# -------------------------------------------------------------- conv3d


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 6, 6, 6)))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out = conv3d_valid(None, x, Tensor(w), Tensor(np.zeros(1)))
    assert np.allclose(out.data[0], x.data[0, 1:-1, 1:-1, 1:-1])


def test_conv_constant_all_ones_kernel():
    c = 1.7
    x = Tensor(np.full((1, 5, 5, 5), c))
    out = conv3d_valid(None, x, Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
    assert np.allclose(out.data, 27 * c)


def test_conv_shape_arithmetic_clinical_scale():
    x = Tensor(np.zeros((1, 108, 108, 108), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 3, 3, 3), dtype=np.float32))
    out = conv3d_valid(None, x, w, Tensor(np.zeros(1, dtype=np.float32)))
    assert out.shape == (1, 106, 106, 106)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        ci, co = rng.integers(1, 4, size=2)
        x = rng.normal(size=(ci, 5, 4, 6))
        w = rng.normal(size=(co, ci, 3, 3, 3))
        b = rng.normal(size=co)
        out = conv3d_valid(None, Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, naive_conv3d_valid(x, w, b), atol=1e-12)


def test_conv_rejects_small_spatial():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    w = Tensor(np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv3d_valid(None, x, w, Tensor(np.zeros(1)))


def test_conv_linear_in_input():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
    b = Tensor(np.zeros(2))
    x = rng.normal(size=(2, 5, 5, 5))
    y = rng.normal(size=(2, 5, 5, 5))
    a_c, b_c = 1.3, -0.7
    mix = conv3d_valid(None, Tensor(a_c * x + b_c * y), w, b).data
    parts = a_c * conv3d_valid(None, Tensor(x), w, b).data + b_c * conv3d_valid(
        None, Tensor(y), w, b
    ).data
    assert np.allclose(mix, parts, atol=1e-9)


# ---------------------------------------------------- pool / upsample


def test_maxpool_shape():
    out = maxpool2(None, Tensor(np.zeros((4, 20, 20, 20))))
    assert out.shape == (4, 10, 10, 10)


def test_maxpool_matches_naive_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 6, 8))
    out = maxpool2(None, Tensor(x))
    assert np.array_equal(out.data, naive_maxpool2(x))


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        maxpool2(None, Tensor(np.zeros((1, 5, 4, 4))))


def test_transposed_conv_doubles():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 5, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 2, 2, 2)))
    out = transposed_conv2(None, x, w, Tensor(np.zeros(2)))
    assert out.shape == (2, 10, 10, 10)


def test_transposed_conv_single_voxel_scatter():
    # One input voxel scatters exactly its kernel block.
    x = np.zeros((1, 2, 2, 2))
    x[0, 1, 0, 1] = 2.0
    w = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    out = transposed_conv2(None, Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    expected = np.zeros((1, 4, 4, 4))
    expected[0, 2:4, 0:2, 2:4] = 2.0 * w[0, 0]
    assert np.array_equal(out.data, expected)


def test_upsample_nearest_blocks():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    out = upsample_nearest(None, Tensor(x), 2)
    assert out.shape == (1, 4, 4, 4)
    assert np.all(out.data[0, :2, :2, :2] == x[0, 0, 0, 0])
    assert np.all(out.data[0, 2:, 2:, 2:] == x[0, 1, 1, 1])


# ------------------------------------------------------------- softmax


def test_softmax_equal_logits():
    out = softmax_channels(None, Tensor(np.zeros((3, 2, 2, 2))))
    assert np.allclose(out.data, 1.0 / 3.0)


def test_softmax_closed_form():
    x = np.zeros((2, 1, 1, 1))
    x[1] = np.log(2.0)
    out = softmax_channels(None, Tensor(x))
    assert np.allclose(out.data[:, 0, 0, 0], [1.0 / 3.0, 2.0 / 3.0])


def test_softmax_sums_to_one():
    rng = np.random.default_rng(5)
    out = softmax_channels(None, Tensor(rng.normal(scale=10, size=(4, 3, 3, 3))))
    assert np.allclose(out.data.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(relu(None, Tensor(out.data)).data >= 0)


# ----------------------------------------------------- shape plumbing


def test_concat_cropped_layout():
    skip = Tensor(np.ones((2, 8, 8, 8)))
    up = Tensor(np.full((3, 4, 4, 4), 2.0))
    out = concat_cropped(None, skip, up)
    assert out.shape == (5, 4, 4, 4)
    assert np.all(out.data[:2] == 1.0)
    assert np.all(out.data[2:] == 2.0)


def test_concat_rejects_odd_margin():
    with pytest.raises(ShapeError):
        concat_cropped(None, Tensor(np.zeros((1, 7, 7, 7))), Tensor(np.zeros((1, 4, 4, 4))))
    with pytest.raises(ShapeError):
        concat_cropped(None, Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros((1, 4, 4, 4))))


def test_pad_crop_inverse():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 3, 3))
    padded = pad_spatial(None, Tensor(x), 2)
    assert padded.shape == (2, 7, 7, 7)
    back = crop_center(None, padded, (3, 3, 3))
    assert np.array_equal(back.data, x)


# ------------------------------------------------------------- dropout


def test_dropout_rate_zero_identity():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3, 3, 3))
    out = spatial_dropout(None, Tensor(x), 0.0, np.random.default_rng(0), training=True)
    assert np.array_equal(out.data, x)


def test_dropout_inference_identity():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3, 3, 3))
    out = spatial_dropout(None, Tensor(x), 0.5, np.random.default_rng(0), training=False)
    assert np.array_equal(out.data, x)


def test_dropout_invalid_rate():
    x = Tensor(np.zeros((2, 2, 2, 2)))
    for rate in (-0.1, 1.0, 1.5):
        with pytest.raises(InvalidRate):
            spatial_dropout(None, x, rate, np.random.default_rng(0), training=True)


def test_dropout_channel_masks_are_spatially_constant():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(10, 4, 4, 4)) + 5.0  # bounded away from 0
    out = spatial_dropout(None, Tensor(x), 0.3, np.random.default_rng(3), training=True)
    ratio = out.data / x
    for c in range(10):
        assert np.var(ratio[c]) < 1e-18  # all-on or all-off per channel


def test_dropout_expected_fraction():
    # 10 channels at rate 0.1: one dropped channel on average.
    dropped = 0
    trials = 600
    x = Tensor(np.ones((10, 2, 2, 2)))
    for seed in range(trials):
        out = spatial_dropout(None, x, 0.1, np.random.default_rng(seed), training=True)
        dropped += int((out.data.reshape(10, -1).max(axis=1) == 0).sum())
    assert abs(dropped / trials - 1.0) < 0.15


def test_dropout_survivor_scaling():
    x = Tensor(np.full((1, 2, 2, 2), 0.9))
    for seed in range(50):
        out = spatial_dropout(None, x, 0.1, np.random.default_rng(seed), training=True)
        kept = out.data[0, 0, 0, 0]
        assert kept == 0.0 or np.isclose(kept, 1.0)
    assert any(
        np.isclose(
            spatial_dropout(None, x, 0.1, np.random.default_rng(s), True).data[0, 0, 0, 0], 1.0
        )
        for s in range(50)
    )


def test_dropout_seed_reproducible():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(8, 3, 3, 3)))
    a = spatial_dropout(None, x, 0.4, np.random.default_rng(42), training=True)
    b = spatial_dropout(None, x, 0.4, np.random.default_rng(42), training=True)
    assert np.array_equal(a.data, b.data)


# ----------------------------------------------------------- gradcheck


def test_gradcheck_quadratic():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(3, 4)))

    def f(tape, t):
        return sum_all(tape, elementwise_mul(tape, t, t))

    assert gradcheck(f, x, eps=1e-5) < 1e-8


def test_gradcheck_linear_exact():
    rng = np.random.default_rng(12)
    r = rng.normal(size=(2, 3, 3, 3))
    x = Tensor(rng.normal(size=(2, 3, 3, 3)))

    def f(tape, t):
        return _project(tape, t, r)

    assert gradcheck(f, x, eps=1e-4) < 1e-9


def test_gradcheck_conv_relu_softmax_ce_composite():
    rng = np.random.default_rng(13)
    w = Tensor(rng.normal(scale=0.5, size=(2, 1, 3, 3, 3)))
    b = Tensor(rng.normal(scale=0.1, size=2))
    target = rng.integers(0, 2, size=(3, 3, 3))
    weights = np.ones((3, 3, 3))
    x = Tensor(rng.normal(size=(1, 5, 5, 5)))

    def f(tape, t):
        h = relu(tape, conv3d_valid(tape, t, w, b))
        p = softmax_channels(tape, h)
        return topk_weighted_ce(tape, p, target, weights, k=1.0)

    assert gradcheck(f, x, eps=1e-4) < 1e-3


def test_gradient_accumulates_over_uses():
    x = Tensor(np.array([[[[2.0]]], [[[3.0]]]]), requires_grad=True)
    tape = Tape()
    y = sum_all(tape, elementwise_mul(tape, x, x))
    tape.backward(y)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2, 2, 2)), requires_grad=True)
    tape = Tape()
    y = relu(tape, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_every_op_matches_finite_differences():
    rng = np.random.default_rng(14)
    r4 = rng.normal(size=(2, 4, 4, 4))

    def make_cases():
        w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)))
        b = Tensor(rng.normal(size=2))
        wt = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
        other = Tensor(rng.normal(size=(2, 6, 6, 6)))
        r_conv = rng.normal(size=(2, 4, 4, 4))
        r_pool = rng.normal(size=(2, 3, 3, 3))
        r_up = rng.normal(size=(2, 12, 12, 12))
        r_cat = rng.normal(size=(4, 6, 6, 6))
        r_pad = rng.normal(size=(2, 8, 8, 8))
        r_crop = rng.normal(size=(2, 2, 2, 2))
        r_sel = rng.normal(size=(1, 6, 6, 6))
        return [
            lambda tape, t: _project(tape, conv3d_valid(tape, t, w, b), r_conv),
            lambda tape, t: _project(tape, maxpool2(tape, t), r_pool),
            lambda tape, t: _project(tape, transposed_conv2(tape, t, wt, b), r_up),
            lambda tape, t: _project(tape, relu(tape, t), np.abs(r_cat[:2])),
            lambda tape, t: _project(tape, softmax_channels(tape, t), r_cat[:2]),
            lambda tape, t: _project(tape, concat_cropped(tape, other, t), r_cat[:, :6, :6, :6]),
            lambda tape, t: _project(tape, elementwise_mul(tape, t, other), r_cat[:2]),
            lambda tape, t: _project(tape, pad_spatial(tape, t, 1), r_pad),
            lambda tape, t: _project(tape, crop_center(tape, t, (2, 2, 2)), r_crop),
            lambda tape, t: _project(tape, upsample_nearest(tape, t, 2), r_up),
            lambda tape, t: _project(tape, select_channels(tape, t, 0, 1), r_sel),
            lambda tape, t: _project(
                tape,
                spatial_dropout(tape, t, 0.3, np.random.default_rng(5), training=True),
                r_cat[:2],
            ),
            lambda tape, t: scale(tape, add(tape, sum_all(tape, t), sum_all(tape, t)), 0.25),
        ]

    x = Tensor(rng.normal(size=(2, 6, 6, 6)))
    for f in make_cases():
        assert gradcheck(f, x, eps=1e-5) < 1e-6


def test_conv_parameter_gradients_match_fd():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 5, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3, 3))
    b0 = rng.normal(size=3)
    r = rng.normal(size=(3, 3, 3, 3))

    def loss_for(w_arr, b_arr):
        out = conv3d_valid(None, Tensor(x), Tensor(w_arr), Tensor(b_arr))
        return float((out.data * r).sum())

    w = Tensor(w0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    tape = Tape()
    out = conv3d_valid(tape, Tensor(x), w, b)
    tape.backward(_project(tape, out, r))

    gw = fd_gradient(lambda a: loss_for(a, b0), w0, eps=1e-6)
    gb = fd_gradient(lambda a: loss_for(w0, a), b0, eps=1e-6)
    assert np.allclose(w.grad, gw, atol=1e-6)
    assert np.allclose(b.grad, gb, atol=1e-6)
