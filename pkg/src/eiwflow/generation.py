"""Sampling, reconstruction, interpolation and attribute manipulation in latent space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import FlowError
from .tensor import Tensor


@dataclass
class LatentBundle:
    """Per-scale latents ``z_1 .. z_K``, each batched as ``[B, C_k, H_k, W_k]``."""

    latents: list
    temperature: float | None = None

    def __post_init__(self):
        # contiguous copies keep decoding independent of how the latents were sliced
        self.latents = [np.array(z.data if isinstance(z, Tensor) else z, dtype=np.float64, order="C")
                        for z in self.latents]

    @property
    def batch(self):
        return self.latents[0].shape[0]

    def shapes(self):
        return [z.shape[1:] for z in self.latents]

    def check(self, model):
        want = [tuple(s) for s in model.latent_shapes()]
        if [tuple(s) for s in self.shapes()] != want or len({z.shape[0] for z in self.latents}) != 1:
            raise T.ShapeError(f"bundle shapes {[z.shape for z in self.latents]} do not match model {want}")
        return self

    def _compatible(self, other):
        if len(self.latents) != len(other.latents) or any(
                a.shape[1:] != b.shape[1:] for a, b in zip(self.latents, other.latents)):
            raise T.ShapeError("latent bundles come from differently shaped models")

    def combine(self, other, a, b):
        """``a * self + b * other`` per scale (``other`` may have batch 1)."""
        self._compatible(other)
        return LatentBundle([a * x + b * y for x, y in zip(self.latents, other.latents)])

    def select(self, idx):
        return LatentBundle([z[idx] for z in self.latents], self.temperature)


def encode(model, x):
    with T.no_grad():
        latents, _ = model.forward(Tensor(np.asarray(x, dtype=np.float64)))
    return LatentBundle(latents)


def decode(model, bundle, trace=None):
    bundle.check(model)
    _require_initialized(model)
    with T.no_grad():
        return model.inverse([Tensor(z) for z in bundle.latents], trace).data


def _require_initialized(model):
    if not model.initialized:
        raise FlowError("model has uninitialized actnorm layers; train or load it before decoding")


def sample(model, n, temperature, rng, trace=None, return_latents=False):
    """Draw ``n`` images, scales decoded from K down to 1 with ``z_k ~ T * N(0, I)``."""
    if not 0.0 <= temperature <= 1.0:
        raise ValueError(f"temperature must be in [0, 1], got {temperature}")
    _require_initialized(model)
    shapes = model.latent_shapes()
    drawn = [None] * model.K
    h = None
    with T.no_grad():
        for k in reversed(range(model.K)):
            z = temperature * rng.standard_normal((n,) + tuple(shapes[k]))
            drawn[k] = z
            if trace is not None:
                trace.append(("sample", k + 1))
            h = model.decode_scale(k, h, Tensor(z), trace)
    if return_latents:
        return h.data, LatentBundle(drawn, temperature)
    return h.data


def reconstruct(model, x):
    """``f^-1(f(x))``."""
    return decode(model, encode(model, x))


def interpolate(model, z0, z1, alphas):
    """Decode ``(1 - a) * z1 + a * z0`` for every ``a``; results stacked along the batch axis."""
    z0._compatible(z1)
    if z0.batch != z1.batch:
        raise T.ShapeError("interpolation endpoints must have the same batch size")
    return np.concatenate([decode(model, _convex(z0, z1, a)) for a in alphas])


def _convex(z0, z1, a):
    # equal entries pass through untouched so z0 == z1 decodes identically for every a
    return LatentBundle([np.where(x0 == x1, x1, (1.0 - a) * x1 + a * x0)
                         for x0, x1 in zip(z0.latents, z1.latents)])


def manipulation_bundle(z_target, z_plus, z_minus, alpha):
    z_plus._compatible(z_minus)
    z_target._compatible(z_plus)
    direction = z_plus.combine(z_minus, 1.0, -1.0)
    return z_target.combine(direction, 1.0, alpha)


def manipulate(model, z_target, z_plus, z_minus, alpha):
    """Decode ``z_target + alpha * (z_plus - z_minus)``."""
    return decode(model, manipulation_bundle(z_target, z_plus, z_minus, alpha))


def attribute_means(model, images, labels, batch_size=256, streaming=False):
    """Per-scale latent means of the images with and without a binary attribute."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.shape != (len(images),):
        raise ValueError(f"{labels.shape[0]} labels for {len(images)} images")
    out = []
    for mask in (labels, ~labels):
        if not mask.any():
            raise ValueError("attribute subset is empty")
        sub = images[mask]
        if streaming:
            out.append(_streaming_mean(model, sub, batch_size))
        else:
            z = encode(model, sub)
            out.append(LatentBundle([a.mean(axis=0, keepdims=True) for a in z.latents]))
    return out[0], out[1]


def _streaming_mean(model, images, batch_size):
    mean, seen = None, 0
    for i in range(0, len(images), batch_size):
        z = encode(model, images[i:i + batch_size])
        for j in range(z.batch):
            seen += 1
            row = [a[j:j + 1] for a in z.latents]
            if mean is None:
                mean = [r.copy() for r in row]
            else:
                for m, r in zip(mean, row):
                    m += (r - m) / seen
    return LatentBundle(mean)
