"""Dense layers, hand-written backprop and RMSProp for small fully-connected nets.

Parameters live in plain ``dict[str, np.ndarray]`` maps keyed ``"<layer>/W"`` and
``"<layer>/b"``. A network is described by a tuple of :class:`Dense` layer specs;
the same spec drives initialisation, the forward pass and the backward pass.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

ParamSet = dict[str, np.ndarray]

ACTIVATIONS = ("relu", "sigmoid", "linear", "softmax")


class ShapeError(ValueError):
    def __init__(self, layer: str, expected, got):
        super().__init__(f"layer {layer!r}: expected input width {expected}, got {got}")
        self.layer = layer


class NonFiniteError(FloatingPointError):
    """A loss or activation became NaN/inf. ``layer`` names the first offender."""

    def __init__(self, layer: str, what: str = "activation"):
        super().__init__(f"non-finite {what} at layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


Arch = tuple[Dense, ...]


def mlp(prefix: str, sizes, hidden_act="relu", out_act="linear") -> Arch:
    """Chain of Dense layers ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``."""
    sizes = list(sizes)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = out_act if i == len(sizes) - 2 else hidden_act
        layers.append(Dense(f"{prefix}{i}", int(a), int(b), act))
    return tuple(layers)


def init_params(arch: Arch, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for layer in arch:
        bound = np.sqrt(6.0 / (layer.n_in + layer.n_out))
        params[f"{layer.name}/W"] = rng.uniform(-bound, bound, (layer.n_in, layer.n_out)).astype(dtype)
        params[f"{layer.name}/b"] = np.zeros(layer.n_out, dtype=dtype)
    return params


def sigmoid(z):
    # split form avoids overflow warnings in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0)
    if act == "sigmoid":
        return sigmoid(z)
    if act == "softmax":
        return softmax(z)
    return z


@dataclass
class Cache:
    """Per-layer tensors saved by :func:`forward` for :func:`backward`."""

    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    out: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def forward(params: ParamSet, arch: Arch, x, *, logits=False, dropout=0.0, rng=None, cache=None):
    """Run ``x`` through ``arch``.

    With ``logits=True`` the last layer's activation is skipped, which is what the
    fused softmax/sigmoid losses want. ``dropout`` is applied (inverted scaling)
    after every hidden layer when ``rng`` is given.
    """
    h = np.asarray(x)
    if h.ndim != 2:
        raise ShapeError(arch[0].name, arch[0].n_in, h.shape)
    for i, layer in enumerate(arch):
        W = params[f"{layer.name}/W"]
        if h.shape[1] != W.shape[0]:
            raise ShapeError(layer.name, W.shape[0], h.shape[1])
        if h.dtype != W.dtype:
            h = h.astype(W.dtype)
        z = h @ W + params[f"{layer.name}/b"]
        last = i == len(arch) - 1
        a = z if (last and logits) else _activate(z, layer.activation)
        mask = None
        if not last and dropout > 0.0 and rng is not None:
            mask = (rng.random(a.shape) >= dropout).astype(a.dtype) / (1.0 - dropout)
            a = a * mask
        if cache is not None:
            cache.inputs.append(h)
            cache.pre.append(z)
            cache.out.append(a)
            cache.masks.append(mask)
        h = a
    return h


def backward(params: ParamSet, arch: Arch, cache: Cache, grad, *, wrt_logits=True, need_input=False):
    """Reverse pass. ``grad`` is dLoss/d(last pre-activation) when ``wrt_logits``,
    otherwise dLoss/d(last output). Returns ``(grads, grad_input)``."""
    grads = {}
    g = grad
    for i in range(len(arch) - 1, -1, -1):
        layer = arch[i]
        if i < len(arch) - 1 or not wrt_logits:
            mask = cache.masks[i]
            if mask is not None:
                g = g * mask
            g = _act_backward(g, cache.pre[i], cache.out[i] if mask is None else None, layer)
        grads[f"{layer.name}/W"] = cache.inputs[i].T @ g
        grads[f"{layer.name}/b"] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ params[f"{layer.name}/W"].T
    return grads, (g if need_input else None)


def _act_backward(g, z, a, layer):
    act = layer.activation
    if act == "relu":
        return g * (z > 0)
    if act == "sigmoid":
        s = sigmoid(z) if a is None else a
        return g * s * (1 - s)
    if act == "softmax":
        raise ValueError(f"layer {layer.name!r}: softmax backward only via fused cross-entropy")
    return g


def first_nonfinite_layer(arch: Arch, cache: Cache) -> str:
    for layer, out in zip(arch, cache.out):
        if not np.all(np.isfinite(out)):
            return layer.name
    return arch[-1].name


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    ``targets`` is either an int label vector or a row-stochastic matrix.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    if targets.ndim == 1:
        loss = -logp[np.arange(n), targets].sum() / n
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1
    else:
        loss = -(targets * logp).sum() / n
        d = np.exp(logp) - targets
    return float(loss), d / n


def gradients(params: ParamSet, arch: Arch, x, y, loss="cross_entropy"):
    """Loss and gradient of the mean batch loss for a classifier net.

    The variational objective has its own entry point,
    :func:`dgdmn.generative.vae_gradients`.
    """
    if loss != "cross_entropy":
        raise ValueError(f"unsupported loss {loss!r}; use generative.vae_gradients for the ELBO")
    if len(x) == 0:
        raise ValueError("empty batch")
    cache = Cache()
    z = forward(params, arch, x, logits=True, cache=cache)
    value, d = softmax_cross_entropy(z, np.asarray(y))
    if not np.isfinite(value):
        raise NonFiniteError(first_nonfinite_layer(arch, cache), "loss")
    grads, _ = backward(params, arch, cache, d)
    return value, grads


def per_sample_sq_grads(params: ParamSet, arch: Arch, x, d_logits) -> ParamSet:
    """Sum over samples of squared per-sample gradients.

    ``d_logits`` holds one row of dLoss_i/dlogits per sample (not averaged). For a
    dense layer the per-sample weight gradient is an outer product, so the sum of
    its squares factors as ``(a**2).T @ (delta**2)``.
    """
    cache = Cache()
    forward(params, arch, x, logits=True, cache=cache)
    out = {}
    g = d_logits
    for i in range(len(arch) - 1, -1, -1):
        layer = arch[i]
        if i < len(arch) - 1:
            g = _act_backward(g, cache.pre[i], cache.out[i], layer)
        out[f"{layer.name}/W"] = (cache.inputs[i] ** 2).T @ (g**2)
        out[f"{layer.name}/b"] = (g**2).sum(axis=0)
        if i > 0:
            g = g @ params[f"{layer.name}/W"].T
    return out


# --- optimisation -----------------------------------------------------------


def clip_gradients(grads: ParamSet, clipvalue=None, clipnorm=None) -> ParamSet:
    """Elementwise clip to ``clipvalue`` first, then rescale to global L2 norm ``clipnorm``.

    ``None`` (or a non-positive value) disables either step.
    """
    out = dict(grads)
    if clipvalue is not None and clipvalue > 0:
        out = {k: np.clip(g, -clipvalue, clipvalue) for k, g in out.items()}
    if clipnorm is not None and clipnorm > 0:
        norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in out.values()))
        if norm > clipnorm:
            scale = clipnorm / norm
            out = {k: (g * scale).astype(g.dtype) for k, g in out.items()}
    return out


@dataclass
class RMSProp:
    """RMSProp hyperparameters plus per-parameter squared-gradient accumulators."""

    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-8
    clipnorm: float | None = None
    clipvalue: float | None = None
    accum: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 < self.rho < 1 or self.epsilon <= 0:
            raise ValueError("RMSProp needs learning_rate >= 0, 0 < rho < 1, epsilon > 0")

    def fresh(self) -> "RMSProp":
        return RMSProp(self.learning_rate, self.rho, self.epsilon, self.clipnorm, self.clipvalue)

    def copy(self) -> "RMSProp":
        opt = self.fresh()
        opt.accum = {k: v.copy() for k, v in self.accum.items()}
        return opt

    def apply(self, params: ParamSet, grads: ParamSet) -> None:
        """In-place update of ``params`` and the accumulators."""
        grads = clip_gradients(grads, self.clipvalue, self.clipnorm)
        for k, g in grads.items():
            v = self.accum.get(k)
            if v is None:
                v = np.zeros_like(params[k])
            v = self.rho * v + (1.0 - self.rho) * g * g
            self.accum[k] = v.astype(params[k].dtype, copy=False)
            params[k] -= (self.learning_rate * g / (np.sqrt(v) + self.epsilon)).astype(params[k].dtype)


def rmsprop_step(params: ParamSet, grads: ParamSet, state: RMSProp):
    """Pure RMSProp step: returns ``(new_params, new_state)``; inputs untouched."""
    new_params = {k: v.copy() for k, v in params.items()}
    new_state = state.copy()
    new_state.apply(new_params, grads)
    return new_params, new_state


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def all_finite(params: ParamSet) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Index arrays covering ``range(n)``; the last partial batch is kept."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# --- randomness -------------------------------------------------------------


class Streams:
    """Named, independent random substreams derived from one experiment seed.

    ``streams.get("shuffle")`` always returns the same generator object for a
    name, so successive draws continue the stream. ``child("ltm")`` gives a
    view whose names are prefixed, e.g. ``"ltm/shuffle"``.
    """

    def __init__(self, seed: int, prefix: str = "", _pool: dict | None = None):
        self.seed = int(seed)
        self.prefix = prefix
        self._pool = {} if _pool is None else _pool

    def get(self, name: str) -> np.random.Generator:
        key = self.prefix + name
        gen = self._pool.get(key)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(key.encode()),))
            gen = np.random.Generator(np.random.PCG64(ss))
            self._pool[key] = gen
        return gen

    def child(self, prefix: str) -> "Streams":
        return Streams(self.seed, self.prefix + prefix + "/", self._pool)

    def state(self) -> dict:
        return {k: g.bit_generator.state for k, g in sorted(self._pool.items())}

    def set_state(self, states: dict) -> None:
        for key, st in states.items():
            ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(key.encode()),))
            gen = np.random.Generator(np.random.PCG64(ss))
            gen.bit_generator.state = st
            self._pool[key] = gen
