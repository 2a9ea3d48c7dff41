import math

import numpy as np
import pytest
from gradcheck import vae_case

from dgdmn.generative import (
    _bce_from_logits,
    init_vae,
    recons_loss,
    vae_gradients,
    vae_loss,
    vae_reconstruct,
    vae_sample,
    vae_train,
)


def _zero_vae(d=4, z=2, dtype=np.float64):
    vae = init_vae(d, (3,), z, np.random.default_rng(0), dtype)
    for k in vae.params:
        vae.params[k][...] = 0
    return vae


def test_kl_term_for_unit_variance_shifted_mean():
    vae = _zero_vae()
    vae.params["mu/b"][:] = [1.0, 0.0]
    _, _, kl = vae_loss(vae, np.full((3, 4), 0.5))
    assert kl == pytest.approx(0.5, abs=1e-12)


def test_bce_at_zero_logits_is_d_log2():
    vae = _zero_vae()
    _, recon, kl = vae_loss(vae, np.array([[0.0, 1.0, 1.0, 0.0]]))
    assert recon == pytest.approx(4 * math.log(2), abs=1e-12)
    assert kl == pytest.approx(0.0, abs=1e-12)


def test_bce_from_logits_is_stable_for_large_logits():
    out = _bce_from_logits(np.array([[1.0, 0.0]]), np.array([[800.0, -800.0]]))
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-12)


def test_vae_gradients_finite_difference_small_sample(rng):
    for _ in range(5):
        err, n = vae_case(rng)
        assert n <= 500
        assert err < 1e-4


def test_sampling_zero_and_shapes(rng):
    vae = init_vae(9, (6, 4), 3, rng)
    assert vae_sample(vae, 0, rng).shape == (0, 9)
    s = vae_sample(vae, 5, rng)
    assert s.shape == (5, 9)
    assert np.all((s >= 0) & (s <= 1))


def test_reconstruction_is_deterministic(rng):
    vae = init_vae(9, (6,), 2, rng)
    x = rng.random((4, 9)).astype(np.float32)
    assert np.array_equal(vae_reconstruct(vae, x), vae_reconstruct(vae, x))


def test_recons_loss_scalar_and_batch(rng):
    vae = init_vae(9, (6,), 2, rng)
    x = rng.random((3, 9)).astype(np.float32)
    batch = recons_loss(vae, x)
    assert batch.shape == (3,)
    assert recons_loss(vae, x[1]) == pytest.approx(batch[1])


def test_training_reduces_loss_and_does_not_mutate_input(rng):
    x = (rng.random((256, 16)) > 0.7).astype(np.float32)
    vae = init_vae(16, (12,), 3, rng)
    before = {k: v.copy() for k, v in vae.params.items()}
    hist = []
    trained = vae_train(vae, x, 8, rng, history=hist)
    assert hist[-1] < hist[0]
    assert all(np.array_equal(before[k], vae.params[k]) for k in before)
    assert trained is not vae


def test_gradients_keep_param_dtype(rng):
    vae = init_vae(5, (4,), 2, rng, np.float32)
    _, g = vae_gradients(vae, rng.random((3, 5)), np.zeros((3, 2), np.float32))
    assert all(g[k].dtype == np.float32 for k in g)


def test_perfect_reconstruction_has_zero_recon():
    vae = _zero_vae()
    x = np.array([[0.0, 1.0, 1.0, 0.0]])
    vae.params["dec1/b"][:] = 60 * (2 * x[0] - 1)  # saturated logits reproduce x
    _, recon, _ = vae_loss(vae, x)
    assert recon == pytest.approx(0.0, abs=1e-12)
    assert recons_loss(vae, x[0]) == pytest.approx(0.0, abs=1e-12)


def test_zero_weight_decoder_outputs_one_half(rng):
    vae = _zero_vae(d=64)
    assert np.all(vae_sample(vae, 3, rng) == 0.5)
    out = vae_reconstruct(vae, rng.random((5, 64)))
    assert out.shape == (5, 64) and np.all(out == 0.5)
    assert recons_loss(_zero_vae(), np.zeros(4)) == pytest.approx(2.772588722239781, abs=1e-12)


def test_sampling_is_deterministic_per_seed():
    vae = init_vae(9, (6,), 2, np.random.default_rng(0))
    a = vae_sample(vae, 5, np.random.default_rng(3))
    assert np.array_equal(a, vae_sample(vae, 5, np.random.default_rng(3)))


def _bce(target, recon):
    recon = np.clip(recon.astype(np.float64), 1e-7, 1 - 1e-7)
    return -(target * np.log(recon) + (1 - target) * np.log(1 - recon)).sum(axis=1)


@pytest.fixture(scope="module")
def trained_vae():
    from dgdmn.suites import builtin_suite

    s = builtin_suite("digits-mini", 0, 300, 100)
    rng = np.random.default_rng(0)
    x = np.concatenate([b.inputs for b in s.train])
    vae = vae_train(init_vae(x.shape[1], (128, 64), 16, rng), x, 25, rng)
    return vae, np.concatenate([b.inputs for b in s.test]).astype(np.float64)


def test_reconstruction_is_nearly_a_fixed_point(trained_vae):
    # mismatch measured as BCE minus the target's own entropy (Bernoulli KL)
    vae, x = trained_vae
    r = vae_reconstruct(vae, x).astype(np.float64)
    rr = vae_reconstruct(vae, r)
    assert np.all(_bce(r, rr) - _bce(r, r) <= 1.05 * (_bce(x, r) - _bce(x, x)))


@pytest.mark.xfail(strict=True, reason="raw BCE against a soft target includes that target's entropy, which is "
                                       "larger for blurry reconstructions than for the inputs; see decisions ledger")
def test_reconstruction_fixed_point_raw_bce(trained_vae):
    vae, x = trained_vae
    r = vae_reconstruct(vae, x).astype(np.float64)
    assert np.all(_bce(r, vae_reconstruct(vae, r)) <= 1.05 * _bce(x, r))


def test_noise_raises_reconstruction_loss(trained_vae, rng):
    vae, x = trained_vae
    noisy = np.clip(x + rng.normal(0, 0.5, x.shape), 0, 1)
    assert np.mean(recons_loss(vae, noisy) > recons_loss(vae, x)) >= 0.9
