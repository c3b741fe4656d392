import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcd import diffcore as dc
from hcd import styleaug as sa
from hcd.diffcore import ShapeError, Tape, Tensor, grad_check


def _maps(seed, shape=(4, 3, 5, 5), floor=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape) * rng.uniform(0.5, 3.0, size=shape[:2] + (1, 1))
    x += rng.normal(size=shape[:2] + (1, 1)) * 2
    if floor:
        # rescale so every channel std clears the floor
        s = x.std(axis=(2, 3), keepdims=True)
        x = (x - x.mean(axis=(2, 3), keepdims=True)) * np.maximum(1.0, floor / s) + x.mean(axis=(2, 3), keepdims=True)
    return x


# -- statistics -----------------------------------------------------------------

def test_stats_examples():
    st_ = sa.compute_stats(Tensor(np.full((1, 1, 2, 2), 5.0)))
    assert st_.mu[0, 0] == 5.0 and st_.sigma[0, 0] == 0.0
    st_ = sa.compute_stats(Tensor([[[[-1.0, 1.0]]]]))
    assert st_.mu[0, 0] == 0.0 and st_.sigma[0, 0] == 1.0


def test_stats_match_per_entry_oracle():
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    st_ = sa.compute_stats(Tensor(x))
    for i in range(2):
        for c in range(3):
            vals = list(x[i, c].ravel())
            mu = sum(vals) / 4
            sd = (sum((v - mu) ** 2 for v in vals) / 4) ** 0.5
            assert st_.mu[i, c] == pytest.approx(mu, abs=1e-12)
            assert st_.sigma[i, c] == pytest.approx(sd, abs=1e-12)


# -- stylemix -------------------------------------------------------------------

def test_identity_permutation_is_nearly_identity():
    x = _maps(1)
    st_ = sa.compute_stats(Tensor(x))
    out = sa.stylemix(Tensor(x), np.arange(4)).data
    bound = np.abs(x - st_.mu[:, :, None, None]) * 1e-6 / st_.sigma[:, :, None, None]
    assert np.all(np.abs(out - x) <= bound + 1e-12)


def test_identity_permutation_on_two_level_channels_within_eps():
    # every pixel sits exactly one std from its channel mean
    rng = np.random.default_rng(2)
    half = np.repeat([-1.0, 1.0], 8)
    signs = np.stack([rng.permutation(half) for _ in range(6)]).reshape(3, 2, 4, 4)
    x = signs * rng.uniform(0.5, 3, (3, 2, 1, 1)) + rng.normal(size=(3, 2, 1, 1))
    out = sa.stylemix(Tensor(x), np.arange(3), 1e-6).data
    assert np.abs(out - x).max() <= 1e-6


def test_constant_recipient_channel_takes_donor_mean():
    x = _maps(2, (2, 2, 3, 3))
    x[0, 1] = 4.0
    out = sa.stylemix(Tensor(x), [1, 0]).data
    mu = sa.compute_stats(Tensor(x)).mu
    np.testing.assert_array_equal(out[0, 1], np.full((3, 3), mu[1, 1]))


def test_two_sample_swap_matches_hand_arithmetic():
    x = np.array([[[[1.0, 3.0]]], [[[10.0, 14.0]]]])  # (2, 1, 1, 2)
    eps = 1e-6
    out = sa.stylemix(Tensor(x), [1, 0], eps).data
    # sample 0: mu 2, sigma 1; sample 1: mu 12, sigma 2
    expected0 = [2.0 * (1.0 - 2.0) / (1.0 + eps) + 12.0, 2.0 * (3.0 - 2.0) / (1.0 + eps) + 12.0]
    expected1 = [1.0 * (10.0 - 12.0) / (2.0 + eps) + 2.0, 1.0 * (14.0 - 12.0) / (2.0 + eps) + 2.0]
    np.testing.assert_allclose(out[0, 0, 0], expected0, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out[1, 0, 0], expected1, atol=1e-12, rtol=0)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_statistics_transfer(n, c, hw, seed):
    rng = np.random.default_rng(seed)
    x = _maps(seed, (n, c, hw, hw + 1))
    perm = rng.permutation(n)
    eps = 1e-6
    before = sa.compute_stats(Tensor(x))
    after = sa.compute_stats(Tensor(sa.stylemix(Tensor(x), perm, eps).data))
    mu_d, sig_d = before.mu[perm], before.sigma[perm]
    assert np.all(np.abs(after.mu - mu_d) <= 1e-6 * (1 + np.abs(mu_d)))
    np.testing.assert_allclose(after.sigma, sig_d * before.sigma / (before.sigma + eps), atol=1e-6, rtol=0)


@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_mixing_back_recovers_input(n, seed):
    x = _maps(seed, (n, 2, 4, 4), floor=0.2)
    perm = np.random.default_rng(seed).permutation(n)
    inv = np.argsort(perm)
    eps = 1e-12  # the epsilon -> 0 limit
    mixed = sa.stylemix(Tensor(x), perm, eps).data
    np.testing.assert_allclose(sa.stylemix(Tensor(mixed), inv, eps).data, x, atol=1e-6, rtol=0)


def test_detached_statistics_block_their_gradient():
    x = Tensor(_maps(3, (3, 2, 3, 3)), requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(sa.stylemix(x, [2, 0, 1]))
    tape.backward(loss)
    # with constant statistics d(sum)/dx = sigma_donor / (sigma + eps) per channel
    s = sa.compute_stats(x)
    expected = (s.sigma[[2, 0, 1]] / (s.sigma + 1e-6))[:, :, None, None] * np.ones((1, 1, 3, 3))
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_full_gradient_mode_passes_grad_check():
    x0 = _maps(4, (3, 2, 2, 2), floor=0.3)
    w = Tensor(np.random.default_rng(5).normal(size=x0.shape))
    f = lambda x: dc.sum(sa.stylemix(x, [1, 2, 0], detach_stats=False) * w)  # noqa: E731
    assert grad_check(f, x0, tol=1e-4).passed


def test_stylemix_errors():
    x = Tensor(np.ones((3, 1, 2, 2)))
    with pytest.raises(ValueError):
        sa.stylemix(x, [0, 0, 1])
    with pytest.raises(ValueError):
        sa.stylemix(x, [0, 1])
    with pytest.raises(ValueError):
        sa.stylemix(x, [0, 1, 2], epsilon=0.0)
    with pytest.raises(ShapeError):
        sa.stylemix(Tensor(np.ones((3, 4))), [0, 1, 2])


def test_stylemix_batch_draws_a_permutation():
    x = Tensor(_maps(6))
    out, perm = sa.stylemix_batch(x, np.random.default_rng(0))
    assert sorted(perm) == [0, 1, 2, 3]
    np.testing.assert_array_equal(out.data, sa.stylemix(x, perm).data)


# -- gram -----------------------------------------------------------------------

def test_gram_examples():
    np.testing.assert_array_equal(sa.gram(Tensor(np.zeros((2, 3, 2, 2)))).data, np.zeros((2, 3, 3)))
    x = np.random.default_rng(0).normal(size=(3, 1, 2, 3))
    np.testing.assert_allclose(sa.gram(Tensor(x)).data[:, 0, 0], (x ** 2).mean(axis=(1, 2, 3)), rtol=1e-14)


def test_gram_matches_outer_product_oracle():
    x = np.random.default_rng(1).normal(size=(1, 2, 1, 2))
    a = x[0].reshape(2, 2)
    expected = np.array([[a[i] @ a[j] for j in range(2)] for i in range(2)]) / 4
    np.testing.assert_allclose(sa.gram(Tensor(x)).data[0], expected, atol=1e-12, rtol=0)


@given(st.integers(0, 2**32 - 1))
def test_gram_ignores_pixel_order(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3, 4))
    shuffled = x.reshape(2, 3, 12)[:, :, rng.permutation(12)].reshape(2, 3, 3, 4)
    np.testing.assert_allclose(sa.gram(Tensor(shuffled)).data, sa.gram(Tensor(x)).data, atol=1e-14)


def test_gram_loss_examples():
    x = Tensor(_maps(7))
    assert float(sa.gram_loss(x, x).data) == 0.0
    # swapping two channels permutes the Gram matrix the same way
    y = x.data.copy()
    y[:, [0, 1]] = y[:, [1, 0]]
    g = sa.gram(x).data
    gp = g[:, [1, 0, 2]][:, :, [1, 0, 2]]
    expected = float(np.mean(np.sum((g - gp) ** 2, axis=(1, 2))))
    assert float(sa.gram_loss(x, Tensor(y)).data) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ShapeError):
        sa.gram_loss(x, Tensor(np.ones((4, 3, 5, 4))))


def test_gram_loss_gradient():
    rng = np.random.default_rng(8)
    a0, b0 = rng.normal(size=(2, 2, 2, 2)), rng.normal(size=(2, 2, 2, 2))
    assert grad_check(lambda a: sa.gram_loss(a, Tensor(b0)), a0, tol=1e-4).passed
    assert grad_check(lambda b: sa.gram_loss(Tensor(a0), b), b0, tol=1e-4).passed


@given(st.integers(0, 2**32 - 1))
def test_gram_loss_against_identity_mix_is_tiny(seed):
    x = _maps(seed, (3, 3, 4, 4), floor=0.2)
    assert float(sa.gram_loss(Tensor(x), sa.stylemix(Tensor(x), np.arange(3), 1e-6)).data) <= 1e-8
