"""Per-element entropy estimates, expected entropy (E2), R2E2 and the per-scale report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor

ENTROPY_FLOOR = -30.0
MIN_SAMPLES = 100
KDE_CUTOFF = 6.0
# above this many samples the density is evaluated on a grid with step h/20
BINNED_THRESHOLD = 5000
GRID_PER_BANDWIDTH = 20


class EntropyError(ValueError):
    pass


def silverman_bandwidth(xs_sorted):
    n = xs_sorted.shape[0]
    sd = float(np.std(xs_sorted, ddof=1))
    q1, q3 = np.quantile(xs_sorted, [0.25, 0.75])
    iqr = (q3 - q1) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    return 0.9 * spread * n ** -0.2


def kde_entropy(values, method="auto"):
    """Plug-in entropy ``-mean(log p_hat(x_i))`` of a 1-D sample, in nats.

    ``p_hat`` is a Gaussian KDE with Silverman's bandwidth evaluated at the
    sample points themselves. Returns ``None`` for a zero-spread sample.
    """
    xs = np.sort(np.asarray(values, dtype=np.float64).ravel())
    h = silverman_bandwidth(xs)
    if not h > 0 or not math.isfinite(h):
        return None
    if method == "auto":
        method = "binned" if xs.shape[0] > BINNED_THRESHOLD else "exact"
    if method == "exact":
        logp = kernels.kde_log_density_sorted(xs, h, KDE_CUTOFF)
    elif method == "binned":
        step = h / GRID_PER_BANDWIDTH
        lo = xs[0]
        n_grid = int((xs[-1] - lo) / step) + 2
        logp = kernels.kde_log_density_binned(xs, h, KDE_CUTOFF, lo, step, n_grid)
    else:
        raise ValueError(f"unknown KDE method {method!r}")
    return float(-np.mean(logp))


@dataclass
class ElementEntropyField:
    values: np.ndarray
    sample_count: int
    estimator: str = "gaussian-kde/silverman/plug-in"
    floored: int = 0

    @property
    def channels(self):
        return self.values.shape[0]


def element_entropy(samples, method="auto"):
    """Entropy of every element of ``samples`` [S, C, H, W] over its S draws."""
    s = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
    if s.ndim == 3:
        s = s[:, None]
    if s.shape[0] < MIN_SAMPLES:
        raise EntropyError(f"element_entropy needs at least {MIN_SAMPLES} samples, got {s.shape[0]}")
    S = s.shape[0]
    flat = s.reshape(S, -1)
    out = np.empty(flat.shape[1])
    floored = 0
    for j in range(flat.shape[1]):
        e = kde_entropy(flat[:, j], method)
        if e is None or e < ENTROPY_FLOOR:
            e = ENTROPY_FLOOR
            floored += 1
        out[j] = e
    return ElementEntropyField(out.reshape(s.shape[1:]), S, floored=floored)


def expected_entropy(field_, channel_subset=None):
    """Mean element entropy over ``channel_subset`` (all channels if omitted)."""
    vals = field_.values if isinstance(field_, ElementEntropyField) else np.asarray(field_)
    if channel_subset is None:
        channel_subset = range(vals.shape[0])
    idx = list(channel_subset)
    if not idx:
        raise EntropyError("expected_entropy: empty channel subset")
    if min(idx) < 0 or max(idx) >= vals.shape[0]:
        raise EntropyError(f"channel subset {idx} outside 0..{vals.shape[0] - 1}")
    return float(np.mean(vals[idx]))


def r2e2(e2_x, e2_z):
    """``(E2(z) - E2(x)) / E2(x)``."""
    if e2_x == 0:
        raise EntropyError("r2e2: e2_x is zero")
    return (e2_z - e2_x) / e2_x


REPORT_HEADER = "dataset,split,scale,model,e2_x,e2_z,r2e2"


@dataclass
class ReportRow:
    dataset: str
    split: str
    scale: int
    model: str
    e2_x: float
    e2_z: float
    r2e2: float

    def csv(self):
        return f"{self.dataset},{self.split},{self.scale},{self.model},{self.e2_x!r},{self.e2_z!r},{self.r2e2!r}"


@dataclass
class EntropyReport:
    rows: list = field(default_factory=list)
    # mean element entropy of every latent z_1..z_K, keyed by model tag
    z_entropy: dict = field(default_factory=dict)
    floored: int = 0

    def r2e2_by_scale(self, model):
        return {r.scale: r.r2e2 for r in self.rows if r.model == model}

    def extend(self, other):
        self.rows.extend(other.rows)
        self.z_entropy.update(other.z_entropy)
        self.floored += other.floored
        return self

    def to_csv(self):
        return "\n".join([REPORT_HEADER] + [r.csv() for r in self.rows]) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def collect_halves(model, images, batch_size=256):
    """Propagated halves ``x_k`` and latents ``z_k`` over ``images`` ([S, C, H, W], in [0, 1))."""
    xs, zs = None, None
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            enc = model.encode(Tensor(images[i:i + batch_size]))
            if xs is None:
                xs = [[] for _ in enc.propagated]
                zs = [[] for _ in enc.latents]
            for k, p in enumerate(enc.propagated):
                xs[k].append(p.data)
            for k, z in enumerate(enc.latents):
                zs[k].append(z.data)
    return [np.concatenate(a) for a in xs], [np.concatenate(a) for a in zs]


def entropy_report(model, images, model_tag="eiw", split="test", dataset="synthetic",
                   sample_budget=None, method="auto"):
    """E2 of ``x_k`` and ``z_k`` and their R2E2 at every scale ``k < K``.

    ``images`` are dequantized inputs in [0, 1); at most ``sample_budget`` are used.
    """
    images = np.asarray(images, dtype=np.float64)
    if sample_budget is not None:
        images = images[:sample_budget]
    if len(images) < MIN_SAMPLES:
        raise EntropyError(f"entropy_report needs at least {MIN_SAMPLES} samples, got {len(images)}")
    xs, zs = collect_halves(model, images)
    rep = EntropyReport()
    z_means = []
    for k, z in enumerate(zs):
        fz = element_entropy(z, method)
        rep.floored += fz.floored
        e2_z = expected_entropy(fz)
        z_means.append(e2_z)
        if k < len(xs):
            fx = element_entropy(xs[k], method)
            rep.floored += fx.floored
            e2_x = expected_entropy(fx)
            rep.rows.append(ReportRow(dataset, split, k + 1, model_tag, e2_x, e2_z, r2e2(e2_x, e2_z)))
    rep.z_entropy[model_tag] = z_means
    return rep
