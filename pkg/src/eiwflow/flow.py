"""Invertible building blocks and the multi-scale composition.

Latents are kept per scale: ``z_k`` for ``k < K`` has shape
``[2*C_k, H_k/2, W_k/2]`` and the final ``z_K`` has shape ``[C_K, H_K, W_K]``.
The canonical flat layout (used by the prior and by checkpoints) concatenates
the row-major flattened ``z_1, ..., z_K`` in scale order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class FlowError(RuntimeError):
    pass


def _batched(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return (T.reshape(x, (1,) + x.shape), True) if x.ndim == 3 else (x, False)


def _check_finite(t, scale, step):
    if not np.all(np.isfinite(t.data)):
        raise FlowError(f"non-finite value at scale {scale}, step {step}")


# --- shape operations ----------------------------------------------------

def squeeze(x):
    """Trade each 2x2 block of a channel for four channels (TL, TR, BL, BR)."""
    x, single = _batched(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise T.ShapeError(f"squeeze: spatial size {H}x{W} must be even")
    y = T.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    y = T.reshape(y, (B, 4 * C, H // 2, W // 2))
    return T.reshape(y, y.shape[1:]) if single else y


def unsqueeze(u):
    u, single = _batched(u)
    B, C4, H, W = u.shape
    if C4 % 4:
        raise T.ShapeError(f"unsqueeze: channel count {C4} is not divisible by 4")
    C = C4 // 4
    x = T.reshape(u, (B, C, 2, 2, H, W))
    x = T.transpose(x, (0, 1, 4, 2, 5, 3))
    x = T.reshape(x, (B, C, 2 * H, 2 * W))
    return T.reshape(x, x.shape[1:]) if single else x


def split(u):
    """First half of the channels propagates, second half is factored out."""
    axis = u.ndim - 3
    C = u.shape[axis]
    if C % 2:
        raise T.ShapeError(f"split: channel count {C} is odd")
    return T.take(u, 0, C // 2, axis), T.take(u, C // 2, C, axis)


def concat(parts):
    parts = list(parts)
    if not parts:
        raise T.ShapeError("concat: no parts")
    return T.concat(parts, axis=parts[0].ndim - 3 if parts[0].ndim >= 3 else 0)


# --- steps ---------------------------------------------------------------

class ActNorm:
    """Per-channel affine map ``y = s * (x + b)`` with data-dependent init."""

    def __init__(self, channels):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.initialized = False

    def parameters(self):
        return {"scale": self.scale, "bias": self.bias}

    def initialize(self, x):
        mu = x.mean(axis=(0, 2, 3))
        sd = x.std(axis=(0, 2, 3))
        self.bias.data[...] = -mu
        self.scale.data[...] = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 1.0)
        self.initialized = True

    def _channel(self, p, shape):
        return T.broadcast_to(T.reshape(p, (1, p.shape[0], 1, 1)), shape)

    def _check(self):
        zero = self.scale.data == 0
        if zero.any():
            raise FlowError(f"actnorm: scale of channel {int(np.argmax(zero))} is zero (not invertible)")

    def forward(self, x):
        if not self.initialized:
            self.initialize(x.data)
        self._check()
        B, C, H, W = x.shape
        y = T.mul(T.add(x, self._channel(self.bias, x.shape)), self._channel(self.scale, x.shape))
        logdet = T.mul(T.sum_(T.log(T.abs_(self.scale))), float(H * W))
        return y, T.broadcast_to(T.reshape(logdet, (1,)), (B,))

    def inverse(self, y):
        if not self.initialized:
            raise FlowError("actnorm: inverse called before data-dependent initialization")
        self._check()
        return T.sub(T.div(y, self._channel(self.scale, y.shape)), self._channel(self.bias, y.shape))


def checkerboard(H, W, parity):
    m = (np.add.outer(np.arange(H), np.arange(W)) % 2 == parity).astype(np.float64)
    return m


class AffineCoupling:
    """Affine coupling layer with a two-convolution conditioner.

    With ``C >= 2`` the channels are halved and ``mask_parity`` picks which
    half conditions the other; a single-channel input uses a checkerboard
    mask instead. The log-scale is ``tanh`` of the conditioner output and the
    last convolution starts at zero, so a fresh layer is the identity.
    """

    def __init__(self, channels, height, width, hidden=32, mask_parity=0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.mask_parity = mask_parity
        if channels >= 2:
            h = channels // 2
            first, second = (0, h), (h, channels)
            self.cond_slice, self.act_slice = (first, second) if mask_parity == 0 else (second, first)
            c_in = self.cond_slice[1] - self.cond_slice[0]
            c_out = self.act_slice[1] - self.act_slice[0]
            self.mask = None
        else:
            c_in = c_out = 1
            self.mask = checkerboard(height, width, mask_parity)[None, None]
        self.c_out = c_out
        std = math.sqrt(2.0 / (c_in * 9))
        self.w1 = Tensor(rng.standard_normal((hidden, c_in, 3, 3)) * std, requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((2 * c_out, hidden, 3, 3)), requires_grad=True)
        self.b2 = Tensor(np.zeros(2 * c_out), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _st(self, cond):
        h = T.relu(T.conv2d(cond, self.w1, self.b1, padding=1))
        out = T.conv2d(h, self.w2, self.b2, padding=1)
        s = T.tanh(T.take(out, 0, self.c_out, 1))
        t = T.take(out, self.c_out, 2 * self.c_out, 1)
        return s, t

    def forward(self, x):
        if self.mask is None:
            xa = T.take(x, *self.cond_slice, 1)
            xb = T.take(x, *self.act_slice, 1)
            s, t = self._st(xa)
            yb = T.add(T.mul(xb, T.exp(s)), t)
            parts = (xa, yb) if self.mask_parity == 0 else (yb, xa)
            y = T.concat(parts, axis=1)
        else:
            m = Tensor(np.broadcast_to(self.mask, x.shape))
            inv = Tensor(np.broadcast_to(1.0 - self.mask, x.shape))
            s, t = self._st(T.mul(x, m))
            s, t = T.mul(s, inv), T.mul(t, inv)
            y = T.add(T.mul(x, T.exp(s)), t)
        return y, T.sum_(s, axis=(1, 2, 3))

    def inverse(self, y):
        if self.mask is None:
            ya = T.take(y, *self.cond_slice, 1)
            yb = T.take(y, *self.act_slice, 1)
            s, t = self._st(ya)
            xb = T.mul(T.sub(yb, t), T.exp(T.neg(s)))
            parts = (ya, xb) if self.mask_parity == 0 else (xb, ya)
            return T.concat(parts, axis=1)
        m = Tensor(np.broadcast_to(self.mask, y.shape))
        inv = Tensor(np.broadcast_to(1.0 - self.mask, y.shape))
        s, t = self._st(T.mul(y, m))
        s, t = T.mul(s, inv), T.mul(t, inv)
        return T.mul(T.sub(y, t), T.exp(T.neg(s)))


class FlowStep:
    """One step of a scale: optional actnorm followed by an affine coupling."""

    def __init__(self, channels, height, width, hidden, parity, actnorm=True, rng=None):
        self.actnorm = ActNorm(channels) if actnorm else None
        self.coupling = AffineCoupling(channels, height, width, hidden, parity, rng)

    def layers(self):
        out = {}
        if self.actnorm is not None:
            out["actnorm"] = self.actnorm
        out["coupling"] = self.coupling
        return out

    def forward(self, x):
        logdet = None
        if self.actnorm is not None:
            x, logdet = self.actnorm.forward(x)
        x, ld = self.coupling.forward(x)
        return x, ld if logdet is None else T.add(logdet, ld)

    def inverse(self, y):
        y = self.coupling.inverse(y)
        return self.actnorm.inverse(y) if self.actnorm is not None else y


@dataclass
class ScaleBlock:
    steps: list
    channels_in: int
    height_in: int
    width_in: int
    shuffle_unit: object = None


@dataclass
class Encoding:
    """Everything the inference pass produces.

    ``pre_shuffle[k]`` is the squeezed ``u_k`` and ``perms[k]`` the channel
    permutation applied to it (``None`` when shuffling is disabled).
    """
    latents: list
    logdet: Tensor
    pre_shuffle: list = field(default_factory=list)
    perms: list = field(default_factory=list)
    propagated: list = field(default_factory=list)


class MultiScaleFlow:
    """K scales of N steps with squeeze, optional shuffle and split between them."""

    def __init__(self, input_shape, scales=2, steps_per_scale=2, hidden_width=32,
                 shuffle=True, reduction_ratio=4, actnorm=True, seed=0):
        C, H, W = (int(v) for v in input_shape)
        if scales < 1 or steps_per_scale < 1:
            raise ValueError("scales and steps_per_scale must be >= 1")
        f = 2 ** (scales - 1)
        if H % f or W % f:
            raise T.ShapeError(f"input {H}x{W} is not divisible by 2^(K-1) = {f} for K = {scales}")
        self.input_shape = (C, H, W)
        self.K, self.N = scales, steps_per_scale
        self.hidden_width = hidden_width
        self.shuffle_enabled = bool(shuffle)
        self.reduction_ratio = reduction_ratio
        self.use_actnorm = actnorm
        self.seed = seed
        flow_rng = np.random.default_rng([seed, 0])
        shuffle_rng = np.random.default_rng([seed, 1])
        self.scales = []
        c, h, w = C, H, W
        for k in range(scales):
            steps = [FlowStep(c, h, w, hidden_width, i % 2, actnorm, flow_rng) for i in range(steps_per_scale)]
            unit = None
            if k < scales - 1 and shuffle:
                from .shuffle import ShuffleUnit
                unit = ShuffleUnit(4 * c, reduction_ratio, shuffle_rng)
            self.scales.append(ScaleBlock(steps, c, h, w, unit))
            if k < scales - 1:
                c, h, w = 2 * c, h // 2, w // 2

    # -- bookkeeping --

    def latent_shapes(self):
        out = []
        for k, blk in enumerate(self.scales):
            c, h, w = blk.channels_in, blk.height_in, blk.width_in
            out.append((2 * c, h // 2, w // 2) if k < self.K - 1 else (c, h, w))
        return out

    @property
    def dims(self):
        return int(np.prod(self.input_shape))

    def flow_parameters(self):
        out = {}
        for k, blk in enumerate(self.scales):
            for i, st in enumerate(blk.steps):
                for lname, layer in st.layers().items():
                    for pname, p in layer.parameters().items():
                        out[f"flow.{k}.{i}.{lname}.{pname}"] = p
        return out

    def shuffle_parameters(self):
        out = {}
        for k, blk in enumerate(self.scales):
            if blk.shuffle_unit is not None:
                for name, p in blk.shuffle_unit.parameters().items():
                    out[f"shuffle.{k}.{name}"] = p
        return out

    def named_parameters(self):
        return {**self.flow_parameters(), **self.shuffle_parameters()}

    def actnorms(self):
        return [st.actnorm for blk in self.scales for st in blk.steps if st.actnorm is not None]

    @property
    def initialized(self):
        return all(a.initialized for a in self.actnorms())

    def permutation(self, k):
        unit = self.scales[k].shuffle_unit
        return None if unit is None else unit.permutation()

    # -- passes --

    def encode(self, x, stop_scale=None):
        """Full inference pass; with ``stop_scale=k`` stop once ``u_k`` is squeezed."""
        x, _ = _batched(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"input shape {tuple(x.shape[1:])} does not match model {self.input_shape}")
        B = x.shape[0]
        logdet = Tensor(np.zeros(B))
        enc = Encoding([], logdet)
        h = x
        for k, blk in enumerate(self.scales):
            for i, st in enumerate(blk.steps):
                h, ld = st.forward(h)
                _check_finite(h, k + 1, i + 1)
                logdet = T.add(logdet, ld)
            if k == self.K - 1:
                enc.latents.append(h)
                break
            u = squeeze(h)
            if stop_scale == k:
                enc.pre_shuffle.append(u)
                enc.logdet = logdet
                return enc
            perm = None
            if blk.shuffle_unit is not None:
                perm = blk.shuffle_unit.permutation()
                u_hat = T.gather_channels(u, perm.forward)
            else:
                u_hat = u
            enc.pre_shuffle.append(u)
            enc.perms.append(perm)
            h, z = split(u_hat)
            enc.propagated.append(h)
            enc.latents.append(z)
        enc.logdet = logdet
        return enc

    def forward(self, x):
        enc = self.encode(x)
        return enc.latents, enc.logdet

    def decode_scale(self, k, x_k, z_k, trace=None):
        """Invert scale ``k`` (0-based): returns ``x_{k-1}`` from ``x_k`` and ``z_k``."""
        blk = self.scales[k]
        if k == self.K - 1:
            h = z_k
        else:
            u_hat = concat([x_k, z_k])
            if trace is not None:
                trace.append(("concat", k + 1))
            if blk.shuffle_unit is not None:
                u = T.gather_channels(u_hat, blk.shuffle_unit.permutation().inverse)
            else:
                u = u_hat
            if trace is not None:
                trace.append(("shuffle_inverse", k + 1))
            h = unsqueeze(u)
            if trace is not None:
                trace.append(("unsqueeze", k + 1))
        for st in reversed(blk.steps):
            h = st.inverse(h)
        if trace is not None:
            trace.append(("inverse_steps", k + 1))
        return h

    def inverse(self, latents, trace=None):
        latents = [_batched(z)[0] for z in latents]
        shapes = self.latent_shapes()
        if len(latents) != self.K or any(tuple(z.shape[1:]) != s for z, s in zip(latents, shapes)):
            raise T.ShapeError(f"latent shapes {[z.shape[1:] for z in latents]} do not match {shapes}")
        h = None
        for k in reversed(range(self.K)):
            h = self.decode_scale(k, h, latents[k], trace)
        return h

    def log_likelihood(self, x):
        """Per-sample ``log q(x)`` in nats, shape ``[B]``."""
        latents, logdet = self.forward(x)
        return T.add(prior_log_density(latents), logdet)


def prior_log_density(latents):
    """Standard normal log-density summed over all latent elements, per sample."""
    total = None
    for z in latents:
        d = int(np.prod(z.shape[1:]))
        lp = T.sub(T.mul(T.sum_(T.square(z), axis=tuple(range(1, z.ndim))), -0.5), d * HALF_LOG_2PI)
        total = lp if total is None else T.add(total, lp)
    return total


def flatten_latents(latents):
    """Canonical flat layout: row-major per sample, scale order."""
    return np.concatenate([np.asarray(z.data if isinstance(z, Tensor) else z).reshape(
        (z.shape[0], -1)) for z in latents], axis=1)


def unflatten_latents(flat, shapes):
    flat = np.asarray(flat)
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(Tensor(flat[:, pos:pos + n].reshape((flat.shape[0],) + tuple(s))))
        pos += n
    return out
