"""Fully-connected variational autoencoder with a Bernoulli (BCE) decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Cache,
    Dense,
    NonFiniteError,
    ParamSet,
    RMSProp,
    all_finite,
    backward,
    copy_params,
    first_nonfinite_layer,
    forward,
    init_params,
    minibatches,
    mlp,
    sigmoid,
)

# clipping applies to generator training only
GENERATOR_OPTIMIZER = RMSProp(learning_rate=0.001, rho=0.9, epsilon=1e-8, clipnorm=1.0, clipvalue=0.5)


@dataclass
class VaeParams:
    params: ParamSet
    input_dim: int
    hidden: tuple
    latent_dim: int

    @property
    def trunk(self):
        return mlp("enc", (self.input_dim, *self.hidden), out_act="relu")

    @property
    def mu_head(self):
        return (Dense("mu", self.hidden[-1], self.latent_dim, "linear"),)

    @property
    def logvar_head(self):
        return (Dense("logvar", self.hidden[-1], self.latent_dim, "linear"),)

    @property
    def decoder(self):
        return mlp("dec", (self.latent_dim, *reversed(self.hidden), self.input_dim), out_act="sigmoid")

    def copy(self) -> "VaeParams":
        return VaeParams(copy_params(self.params), self.input_dim, tuple(self.hidden), self.latent_dim)


def init_vae(input_dim, hidden, latent_dim, rng, dtype=np.float32) -> VaeParams:
    vae = VaeParams({}, int(input_dim), tuple(int(h) for h in hidden), int(latent_dim))
    for arch in (vae.trunk, vae.mu_head, vae.logvar_head, vae.decoder):
        vae.params.update(init_params(arch, rng, dtype))
    return vae


def encode(vae: VaeParams, x):
    h = forward(vae.params, vae.trunk, x)
    return forward(vae.params, vae.mu_head, h), forward(vae.params, vae.logvar_head, h)


def decode(vae: VaeParams, z):
    return forward(vae.params, vae.decoder, z)


def _bce_from_logits(x, logits):
    """Per-sample BCE summed over pixels, computed stably from decoder logits."""
    return (np.logaddexp(0, logits) - x * logits).sum(axis=1)


def vae_gradients(vae: VaeParams, x, eps):
    """Negative ELBO terms and their parameter gradients.

    ``eps`` is the reparameterisation noise, shape ``(N, latent_dim)``; pass zeros
    for the posterior-mean path. Returns ``((total, recon, kl), grads)``.
    """
    x = np.asarray(x, dtype=vae.params["enc0/W"].dtype)
    n = len(x)
    tc, mc, lc, dc = Cache(), Cache(), Cache(), Cache()
    h = forward(vae.params, vae.trunk, x, cache=tc)
    mu = forward(vae.params, vae.mu_head, h, cache=mc)
    logvar = forward(vae.params, vae.logvar_head, h, cache=lc)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    logits = forward(vae.params, vae.decoder, z, logits=True, cache=dc)

    recon = float(_bce_from_logits(x, logits).sum() / n)
    kl = float((-0.5 * (1 + logvar - mu**2 - std**2)).sum() / n)
    total = recon + kl
    if not np.isfinite(total):
        for arch, cache in ((vae.trunk, tc), (vae.mu_head, mc), (vae.logvar_head, lc), (vae.decoder, dc)):
            if any(not np.all(np.isfinite(o)) for o in cache.out):
                raise NonFiniteError(first_nonfinite_layer(arch, cache), "loss")
        raise NonFiniteError(vae.decoder[-1].name, "loss")

    grads, dz = backward(vae.params, vae.decoder, dc, (sigmoid(logits) - x) / n, need_input=True)
    d_mu = dz + mu / n
    d_logvar = dz * eps * 0.5 * std + 0.5 * (std**2 - 1) / n
    g_mu, dh_mu = backward(vae.params, vae.mu_head, mc, d_mu, need_input=True)
    g_lv, dh_lv = backward(vae.params, vae.logvar_head, lc, d_logvar, need_input=True)
    g_trunk, _ = backward(vae.params, vae.trunk, tc, dh_mu + dh_lv, wrt_logits=False)
    grads.update(g_mu)
    grads.update(g_lv)
    grads.update(g_trunk)
    return (total, recon, kl), grads


def vae_loss(vae: VaeParams, x, eps=None):
    """``(total, recon, kl)`` averaged over the batch. ``eps=None`` uses z = mu."""
    if eps is None:
        eps = np.zeros((len(x), vae.latent_dim), dtype=vae.params["mu/W"].dtype)
    return vae_gradients(vae, x, eps)[0]


def vae_train(vae: VaeParams, x, epochs: int, rng: np.random.Generator, opt: RMSProp | None = None,
              batch_size: int = 128, history: list | None = None) -> VaeParams:
    """Minibatch RMSProp on the negative ELBO; returns a trained copy.

    ``rng`` drives both the per-epoch shuffle and the latent noise. Mean epoch
    loss is appended to ``history`` when given.
    """
    vae = vae.copy()
    opt = (opt or GENERATOR_OPTIMIZER).fresh()
    x = np.asarray(x, dtype=vae.params["enc0/W"].dtype)
    for _ in range(epochs):
        total = 0.0
        for idx in minibatches(len(x), batch_size, rng):
            eps = rng.standard_normal((len(idx), vae.latent_dim)).astype(x.dtype)
            (loss, _, _), grads = vae_gradients(vae, x[idx], eps)
            opt.apply(vae.params, grads)
            total += loss * len(idx)
        if not all_finite(vae.params):
            raise NonFiniteError("generator", "parameter")
        if history is not None:
            history.append(total / max(len(x), 1))
    return vae


def vae_sample(vae: VaeParams, n: int, rng: np.random.Generator):
    """Decode ``n`` draws from the standard-normal prior."""
    dtype = vae.params["dec0/W"].dtype
    if n == 0:
        return np.zeros((0, vae.input_dim), dtype=dtype)
    z = rng.standard_normal((n, vae.latent_dim)).astype(dtype)
    return decode(vae, z)


def vae_reconstruct(vae: VaeParams, x):
    """Deterministic reconstruction through the posterior mean."""
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros((0, vae.input_dim), dtype=vae.params["dec0/W"].dtype)
    mu, _ = encode(vae, x)
    return decode(vae, mu)


def recons_loss(vae: VaeParams, x):
    """Per-sample BCE between ``x`` and its reconstruction (scalar for a 1-D ``x``)."""
    x = np.asarray(x, dtype=vae.params["enc0/W"].dtype)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if len(xb) == 0:
        return np.zeros(0)
    mu, _ = encode(vae, xb)
    logits = forward(vae.params, vae.decoder, mu, logits=True)
    loss = np.maximum(_bce_from_logits(xb.astype(np.float64), logits.astype(np.float64)), 0.0)
    return float(loss[0]) if single else loss
