"""Entropy-informed channel shuffle: solver, guider, shuffler and KL regularizer.

The solver maps the (constant) channel count of a scale to channel weights
``Q``; because its input carries no data, inference and sampling recompute the
same ``Q`` and therefore the same permutation. The guider looks at pooled
channel statistics of ``u_k`` and produces data-dependent weights ``P`` that
the solver is pulled toward through ``KL(P || Q)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import HALF_LOG_2PI
from .tensor import Tensor

CHANNEL_NORMALIZER = 64.0


@dataclass(frozen=True)
class Permutation:
    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_indices(cls, forward):
        forward = np.asarray(forward, dtype=np.intp)
        n = forward.shape[0]
        if not np.array_equal(np.sort(forward), np.arange(n)):
            raise T.ShapeError(f"{forward.tolist()} is not a bijection on 0..{n - 1}")
        return cls(forward, np.argsort(forward))

    @classmethod
    def identity(cls, n):
        return cls.from_indices(np.arange(n))

    def __len__(self):
        return self.forward.shape[0]

    def is_identity(self):
        return bool(np.array_equal(self.forward, np.arange(len(self))))


def check_weights(w, atol=1e-10):
    w = np.asarray(w.data if isinstance(w, Tensor) else w)
    if w.ndim != 1 or not np.all(w > 0) or abs(w.sum() - 1.0) > atol:
        raise ValueError("channel weights must be a positive vector summing to 1")
    return w


def permutation_from_weights(q):
    """Channels in descending weight order, ties broken by original index."""
    q = check_weights(q)
    return Permutation.from_indices(np.argsort(-q, kind="stable"))


def shuffle_apply(u, perm):
    return T.gather_channels(u, perm.forward)


def shuffle_inverse(u_hat, perm):
    return T.gather_channels(u_hat, perm.inverse)


def kl_divergence(p, q):
    """``sum_c p_c ln(p_c / q_c)`` for batched ``p`` ([B, n] or [n]) and ``q`` ([n])."""
    if p.shape[-1] != q.shape[-1]:
        raise T.ShapeError(f"kl_divergence: lengths {p.shape[-1]} and {q.shape[-1]} differ")
    if p.shape != q.shape:
        q = T.broadcast_to(q, p.shape)
    return T.sum_(T.mul(p, T.sub(T.log(p), T.log(q))), axis=-1)


def kl_from_logits(p_logits, q_logits):
    """Same as :func:`kl_divergence` but stable for extreme logits."""
    if p_logits.shape != q_logits.shape:
        q_logits = T.broadcast_to(q_logits, p_logits.shape)
    lp = T.log_softmax(p_logits)
    lq = T.log_softmax(q_logits)
    return T.sum_(T.mul(T.exp(lp), T.sub(lp, lq)), axis=-1)


def _dense(x, w, b=None):
    y = T.matmul(x, T.transpose(w))
    if b is not None:
        y = T.add(y, T.broadcast_to(T.reshape(b, (1, b.shape[0])), y.shape))
    return y


class SolverNet:
    """Three bias-free dense layers from the encoded channel count to ``4C`` logits.

    Layer shapes are ``[2C x 1]``, ``[2C x 2C]``, ``[4C x 2C]`` with ReLU
    between; the last layer starts at zero so ``Q`` is uniform.
    """

    def __init__(self, channels, rng):
        if channels % 4:
            raise ValueError("solver expects the squeezed channel count 4*C_k")
        self.channels = channels
        half = channels // 2
        self.encoding = channels / CHANNEL_NORMALIZER
        # positive first layer and near-identity second layer keep every
        # hidden unit alive at init
        self.w1 = Tensor(np.abs(rng.standard_normal((half, 1))) / self.encoding, requires_grad=True)
        self.w2 = Tensor(np.eye(half) + 0.1 * rng.standard_normal((half, half)), requires_grad=True)
        self.w3 = Tensor(np.zeros((channels, half)), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}

    def logits(self):
        c = Tensor([[self.encoding]])
        h = T.relu(_dense(c, self.w1))
        h = T.relu(_dense(h, self.w2))
        return T.reshape(_dense(h, self.w3), (self.channels,))

    def __call__(self):
        return T.softmax(self.logits())


class GuiderNet:
    """Pool -> dense (reduction ratio r) -> ReLU -> dense -> softmax.

    Dense layers carry biases; the output layer starts at zero so ``P`` is
    uniform for any input.
    """

    def __init__(self, channels, reduction_ratio, rng):
        hidden = max(1, channels // reduction_ratio)
        self.channels = channels
        self.w1 = Tensor(rng.standard_normal((hidden, channels)) * math.sqrt(2.0 / channels), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((channels, hidden)), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, u):
        single = u.ndim == 3
        pooled = T.global_avg_pool(u)
        if single:
            pooled = T.reshape(pooled, (1, self.channels))
        h = T.relu(_dense(pooled, self.w1, self.b1))
        out = _dense(h, self.w2, self.b2)
        return T.reshape(out, (self.channels,)) if single else out

    def __call__(self, u):
        return T.softmax(self.logits(u))


def spacing_entropy(values):
    """Vasicek m-spacing differential entropy estimate (nats) of a 1-D sample."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = x.shape[0]
    m = max(1, int(round(math.sqrt(n))))
    i = np.arange(n)
    gap = x[np.minimum(i + m, n - 1)] - x[np.maximum(i - m, 0)]
    return float(np.mean(np.log(n / (2.0 * m) * np.maximum(gap, 1e-12))))


def prior_mismatch(u):
    """Per-channel estimate of ``KL(p_c || N(0, 1))`` over batch and positions.

    Cross-entropy against the standard normal minus the channel's marginal
    entropy; large values mark channels the prior would fit poorly.
    """
    d = np.asarray(u.data if isinstance(u, Tensor) else u)
    axis = d.ndim - 3
    d = np.moveaxis(d, axis, 0).reshape(d.shape[axis], -1)
    cross = 0.5 * np.mean(d * d, axis=1) + HALF_LOG_2PI
    return cross - np.array([spacing_entropy(row) for row in d])


class ShuffleUnit:
    """Solver, guider and the permutation derived from the solver for one scale."""

    def __init__(self, channels, reduction_ratio, rng):
        self.channels = channels
        self.solver = SolverNet(channels, rng)
        self.guider = GuiderNet(channels, reduction_ratio, rng)

    def parameters(self):
        out = {f"solver.{k}": v for k, v in self.solver.parameters().items()}
        out.update({f"guider.{k}": v for k, v in self.guider.parameters().items()})
        return out

    def solver_eval(self):
        return self.solver()

    def guider_eval(self, u):
        return self.guider(u)

    def permutation(self):
        with T.no_grad():
            q = self.solver()
        return permutation_from_weights(q)

    def guider_target_loss(self, u):
        """Cross-entropy of the guider against ``softmax(prior_mismatch(u))``.

        The guider sees ``u`` detached, so this trains the guider only.
        """
        gain = prior_mismatch(u)
        target = np.exp(gain - gain.max())
        target /= target.sum()
        lp = T.log_softmax(self.guider.logits(u.detach()))
        tgt = Tensor(np.broadcast_to(target, lp.shape))
        return T.neg(T.mean(T.sum_(T.mul(lp, tgt), axis=-1))), target
