"""Kernel-level checks: brute-force oracle agreement, analytic gradients
against central differences, contract errors, and backend parity."""

import numpy as np
import pytest

from conftest import kernel_backends, lattice, rel_error
from oracles import central_difference, conv3d_loops, maxpool3d_loops

from cropseg import ops
from cropseg.errors import DimensionError

RNG = np.random.default_rng


# ---------------------------------------------------------------- conv3d

def test_conv3d_all_ones_sums_window():
    x = np.ones((1, 1, 2, 2, 2))
    k = np.ones((1, 1, 2, 2, 2))
    out = ops.conv3d_forward(x, k, np.zeros(1))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out[0, 0, 0, 0, 0] == 8.0


def test_conv3d_identity_kernel_passthrough():
    x = RNG(0).normal(size=(2, 1, 3, 4, 4))
    k = np.ones((1, 1, 1, 1, 1))
    out = ops.conv3d_forward(x, k, np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv3d_matches_loop_oracle_reference_shape():
    rng = RNG(7)
    x = rng.normal(size=(1, 2, 4, 5, 5))
    k = rng.normal(size=(3, 2, 2, 3, 3))
    b = rng.normal(size=3)
    out = ops.conv3d_forward(x, k, b, stride=(1, 1, 1), padding=(0, 1, 1))
    ref = conv3d_loops(x, k, b, (1, 1, 1), (0, 1, 1))
    assert out.shape == (1, 3, 3, 5, 5)
    assert rel_error(out, ref) <= 1e-6


@pytest.mark.parametrize("seed", range(8))
def test_conv3d_matches_loop_oracle_random_shapes(seed):
    rng = RNG(100 + seed)
    n = int(rng.integers(1, 3))
    cin = int(rng.integers(1, 4))
    cout = int(rng.integers(1, 4))
    t, h, w = (int(rng.integers(2, 6)) for _ in range(3))
    kt = int(rng.integers(1, t + 1))
    kh = int(rng.integers(1, h + 1))
    kw = int(rng.integers(1, w + 1))
    stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
    padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
    x = rng.normal(size=(n, cin, t, h, w))
    k = rng.normal(size=(cout, cin, kt, kh, kw))
    b = rng.normal(size=cout)
    out = ops.conv3d_forward(x, k, b, stride, padding)
    ref = conv3d_loops(x, k, b, stride, padding)
    assert rel_error(out, ref) <= 1e-6


def test_conv3d_channel_mismatch_names_axis():
    x = np.zeros((1, 3, 2, 2, 2))
    k = np.zeros((1, 4, 1, 1, 1))
    with pytest.raises(DimensionError, match="channel axis"):
        ops.conv3d_forward(x, k, np.zeros(1))


def test_conv3d_kernel_too_large_names_axis():
    x = np.zeros((1, 1, 2, 4, 4))
    k = np.zeros((1, 1, 3, 1, 1))
    with pytest.raises(DimensionError, match="time axis"):
        ops.conv3d_forward(x, k, np.zeros(1))


def test_conv3d_backward_zero_grad_gives_zeros():
    rng = RNG(3)
    x = rng.normal(size=(1, 2, 3, 4, 4))
    k = rng.normal(size=(2, 2, 2, 2, 2))
    g = np.zeros(ops.conv3d_out_shape(x.shape, k.shape, (1, 1, 1), (0, 0, 0)))
    gx, gk, gb = ops.conv3d_backward(x, k, g)
    assert not gx.any() and not gk.any() and not gb.any()


def test_conv3d_backward_identity_kernel_routes_grad():
    rng = RNG(4)
    x = rng.normal(size=(2, 1, 3, 3, 3))
    k = np.ones((1, 1, 1, 1, 1))
    g = rng.normal(size=x.shape)
    gx, _, _ = ops.conv3d_backward(x, k, g)
    np.testing.assert_array_equal(gx, g)


@pytest.mark.parametrize(
    "stride,padding", [((1, 1, 1), (0, 0, 0)), ((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (0, 1, 0))]
)
def test_conv3d_backward_matches_central_differences(stride, padding):
    rng = RNG(11)
    x = rng.normal(size=(2, 2, 3, 5, 4))
    k = rng.normal(size=(2, 2, 2, 3, 2))
    b = rng.normal(size=2)
    out_shape = ops.conv3d_out_shape(x.shape, k.shape, stride, padding)
    proj = rng.normal(size=out_shape)

    def scalar(xx, kk, bb):
        return float((ops.conv3d_forward(xx, kk, bb, stride, padding) * proj).sum())

    gx, gk, gb = ops.conv3d_backward(x, k, proj, stride, padding)
    fx = central_difference(lambda v: scalar(v, k, b), x)
    fk = central_difference(lambda v: scalar(x, v, b), k)
    fb = central_difference(lambda v: scalar(x, k, v), b)
    assert rel_error(gx, fx) <= 1e-4
    assert rel_error(gk, fk) <= 1e-4
    assert rel_error(gb, fb) <= 1e-4


def test_conv3d_backward_shape_mismatch():
    x = np.zeros((1, 1, 2, 2, 2))
    k = np.zeros((1, 1, 1, 1, 1))
    with pytest.raises(DimensionError, match="grad_out"):
        ops.conv3d_backward(x, k, np.zeros((1, 1, 2, 2, 3)))


# ------------------------------------------------------------- maxpool3d

def test_maxpool_basic_max():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
    out, _ = ops.maxpool3d_forward(x, (1, 2, 2))
    assert out.reshape(()) == 4.0


def test_maxpool_constant_input_tie_breaks_to_first():
    x = np.ones((1, 1, 2, 2, 2))
    out, arg = ops.maxpool3d_forward(x, (2, 2, 2))
    assert out.reshape(()) == 1.0
    assert arg.reshape(()) == 0  # lowest linear index wins ties
    g = np.full(out.shape, 5.0)
    gx = ops.maxpool3d_backward(g, arg, x.shape)
    expected = np.zeros_like(x)
    expected[0, 0, 0, 0, 0] = 5.0
    np.testing.assert_array_equal(gx, expected)


@pytest.mark.parametrize("seed", range(6))
def test_maxpool_matches_loop_oracle(seed):
    rng = RNG(200 + seed)
    x = lattice(rng, (1, 3, 4, 6, 6))
    out, arg = ops.maxpool3d_forward(x, (2, 2, 2), (2, 2, 2))
    ref_out, ref_arg = maxpool3d_loops(x, (2, 2, 2), (2, 2, 2))
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)


def test_maxpool_overlapping_windows_match_oracle():
    rng = RNG(250)
    x = lattice(rng, (2, 2, 3, 5, 5))
    out, arg = ops.maxpool3d_forward(x, (2, 2, 2), (1, 1, 1))
    ref_out, ref_arg = maxpool3d_loops(x, (2, 2, 2), (1, 1, 1))
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)


def test_maxpool_backward_matches_central_differences():
    rng = RNG(12)
    x = lattice(rng, (1, 2, 4, 4, 4))
    out, arg = ops.maxpool3d_forward(x, (2, 2, 2), (2, 2, 2))
    proj = rng.normal(size=out.shape)

    def scalar(v):
        o, _ = ops.maxpool3d_forward(v, (2, 2, 2), (2, 2, 2))
        return float((o * proj).sum())

    gx = ops.maxpool3d_backward(proj, arg, x.shape)
    fd = central_difference(scalar, x)
    assert rel_error(gx, fd) <= 1e-4


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError, match="row axis"):
        ops.maxpool3d_forward(np.zeros((1, 1, 2, 2, 2)), (1, 3, 1))


# ------------------------------------------------------------ upsample2d

def test_upsample_factor_one_is_identity():
    x = RNG(0).normal(size=(1, 2, 3, 3))
    np.testing.assert_array_equal(ops.upsample2d_nearest(x, 1), x)


def test_upsample_replicates_blocks():
    x = np.full((1, 1, 1, 1), 7.0)
    out = ops.upsample2d_nearest(x, 2)
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 7.0))


def test_upsample_rejects_bad_factor():
    with pytest.raises(ValueError, match="factor"):
        ops.upsample2d_nearest(np.zeros((1, 1, 2, 2)), 0)


def test_upsample_backward_matches_central_differences():
    rng = RNG(13)
    x = rng.normal(size=(1, 2, 3, 3))
    proj = rng.normal(size=(1, 2, 6, 6))

    def scalar(v):
        return float((ops.upsample2d_nearest(v, 2) * proj).sum())

    gx = ops.upsample2d_backward(proj, 2)
    fd = central_difference(scalar, x)
    assert rel_error(gx, fd) <= 1e-4


# ------------------------------------------------------- concat_channels

def test_concat_orders_channels():
    a = np.full((1, 2, 3, 3), 1.0)
    b = np.full((1, 3, 3, 3), 2.0)
    out = ops.concat_channels(a, b)
    assert out.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(out[:, :2], a)
    np.testing.assert_array_equal(out[:, 2:], b)


def test_concat_with_empty_channel_block_is_identity():
    a = RNG(0).normal(size=(1, 2, 3, 3))
    b = np.zeros((1, 0, 3, 3))
    np.testing.assert_array_equal(ops.concat_channels(a, b), a)


def test_concat_spatial_mismatch_names_axis():
    with pytest.raises(DimensionError, match="row axis"):
        ops.concat_channels(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 4, 3)))


def test_concat_backward_splits_gradient():
    rng = RNG(14)
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    proj = rng.normal(size=(1, 5, 3, 3))

    def scalar(aa, bb):
        return float((ops.concat_channels(aa, bb) * proj).sum())

    ga, gb = ops.concat_channels_backward(proj, 2)
    fa = central_difference(lambda v: scalar(v, b), a)
    fb = central_difference(lambda v: scalar(a, v), b)
    assert rel_error(ga, fa) <= 1e-4
    assert rel_error(gb, fb) <= 1e-4


# ---------------------------------------------------------- relu/softmax

def test_relu_values():
    x = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(ops.relu(x), [0.0, 0.0, 3.0])


def test_relu_backward_masks_negative_side():
    x = np.array([-1.0, 0.0, 2.0])
    g = np.ones(3)
    np.testing.assert_array_equal(ops.relu_backward(x, g), [0.0, 0.0, 1.0])


def test_softmax_uniform_logits():
    x = np.zeros((1, 3, 1, 1))
    np.testing.assert_allclose(ops.softmax_channels(x), 1.0 / 3.0, atol=1e-12)


def test_softmax_large_logits_do_not_overflow():
    x = np.zeros((1, 3, 1, 1))
    x[0, 0] = 1000.0
    with np.errstate(over="raise"):
        p = ops.softmax_channels(x)
    assert np.isfinite(p).all()
    # reference: the same computation done explicitly in shifted 64-bit
    z = np.array([1000.0, 0.0, 0.0], dtype=np.float64) - 1000.0
    ref = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(p[0, :, 0, 0], ref, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_normalization_and_shift_invariance(seed):
    rng = RNG(300 + seed)
    x = rng.normal(size=(2, 4, 3, 3))
    p = ops.softmax_channels(x)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    shifted = ops.softmax_channels(x + rng.normal() * np.ones_like(x))
    assert rel_error(p, shifted) <= 1e-6


def test_softmax_backward_matches_central_differences():
    rng = RNG(15)
    x = rng.normal(size=(1, 3, 2, 2))
    proj = rng.normal(size=x.shape)

    def scalar(v):
        return float((ops.softmax_channels(v) * proj).sum())

    p = ops.softmax_channels(x)
    gx = ops.softmax_channels_backward(p, proj)
    fd = central_difference(scalar, x)
    assert rel_error(gx, fd) <= 1e-4


# ----------------------------------------------------------- temporal max

def test_temporal_max_and_tie_break():
    x = np.zeros((1, 1, 3, 1, 1))
    x[0, 0] = np.array([1.0, 5.0, 5.0]).reshape(3, 1, 1)
    out, arg = ops.temporal_max(x)
    assert out.reshape(()) == 5.0
    assert arg.reshape(()) == 1  # earliest winning step


def test_temporal_max_backward_matches_central_differences():
    rng = RNG(16)
    x = lattice(rng, (2, 2, 4, 3, 3))
    out, arg = ops.temporal_max(x)
    proj = rng.normal(size=out.shape)

    def scalar(v):
        o, _ = ops.temporal_max(v)
        return float((o * proj).sum())

    gx = ops.temporal_max_backward(proj, arg, x.shape[2])
    fd = central_difference(scalar, x)
    assert rel_error(gx, fd) <= 1e-4


# -------------------------------------------------- backend parity checks

@pytest.mark.parametrize("seed", range(4))
def test_conv3d_backend_parity(seed):
    mods = kernel_backends()
    if len(mods) < 2:
        pytest.skip("only one backend available")
    rng = RNG(400 + seed)
    x = rng.normal(size=(2, 3, 4, 6, 5))
    k = rng.normal(size=(4, 3, 2, 3, 3))
    b = rng.normal(size=4)
    outs = [m.conv3d_forward(x, k, b, 1, 1, 1) for m in mods]
    assert rel_error(outs[0], outs[1]) <= 1e-6
    g = rng.normal(size=outs[0].shape)
    grads = [m.conv3d_backward(x, k, g, 1, 1, 1) for m in mods]
    for a, bb in zip(grads[0], grads[1]):
        assert rel_error(a, bb) <= 1e-6


def test_maxpool_backend_parity():
    mods = kernel_backends()
    if len(mods) < 2:
        pytest.skip("only one backend available")
    rng = RNG(500)
    x = lattice(rng, (2, 2, 4, 6, 6))
    results = [m.maxpool3d_forward(x, 2, 2, 2, 2, 2, 2) for m in mods]
    np.testing.assert_array_equal(results[0][0], results[1][0])
    np.testing.assert_array_equal(results[0][1], results[1][1])
    g = rng.normal(size=results[0][0].shape)
    backs = [m.maxpool3d_backward(g, results[0][1], 4, 6, 6) for m in mods]
    np.testing.assert_array_equal(backs[0], backs[1])


def test_kernels_are_deterministic():
    rng = RNG(600)
    x = rng.normal(size=(2, 2, 4, 5, 5))
    k = rng.normal(size=(3, 2, 2, 2, 2))
    b = rng.normal(size=3)
    a = ops.conv3d_forward(x, k, b, (1, 1, 1), (1, 0, 1))
    bout = ops.conv3d_forward(x, k, b, (1, 1, 1), (1, 0, 1))
    assert (a == bout).all()
