"""Objective, dequantization, Adam with warmup and the epoch loop."""
from __future__ import annotations

import copy
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data_io
from . import tensor as T
from .flow import MultiScaleFlow, prior_log_density
from .shuffle import kl_divergence
from .tensor import Tensor, backward

LN256 = math.log(256.0)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Loss blew up; ``checkpoint`` holds the last good state (path or in-memory)."""

    def __init__(self, msg, checkpoint=None, step=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.step = step


@dataclass
class TrainConfig:
    scales: int = 3
    steps_per_scale: int = 6
    lam: float = 0.001
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    warmup_steps: int = 500
    hidden_width: int = 32
    reduction_ratio: int = 4
    dataset_kind: str = "gaussian_blobs"
    dataset_path: str | None = None
    dataset_resolution: int = 16
    dataset_size: int = 2048
    dataset_holdout: int = 0
    shuffle_enabled: bool = True
    stop_gradient: bool = False
    kl_per_sample: bool = True
    # "likelihood": the guider is fit to per-channel prior mismatch;
    # "kl": the guider only sees the gradient of the total loss
    guider_objective: str = "likelihood"
    shuffle_warm_start: bool = True
    max_grad_norm: float = 0.0
    divergence_threshold: float = 1e6

    def validate(self, input_shape=None):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.scales < 1 or self.steps_per_scale < 1:
            raise ValueError("scales and steps_per_scale must be >= 1")
        for name in ("batch_size", "epochs", "hidden_width", "reduction_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.guider_objective not in ("likelihood", "kl"):
            raise ValueError("guider_objective must be 'likelihood' or 'kl'")
        f = 2 ** (self.scales - 1)
        if input_shape is None:
            h = w = self.dataset_resolution
        else:
            _, h, w = input_shape
        if h % f or w % f or h // f < 2 or w // f < 2:
            raise ValueError(f"resolution {h}x{w} is not divisible by 2^(K-1) = {f} "
                             f"with at least 2x2 left at the final scale")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_model(cfg, input_shape):
    cfg.validate(input_shape)
    return MultiScaleFlow(input_shape, cfg.scales, cfg.steps_per_scale, cfg.hidden_width,
                          shuffle=cfg.shuffle_enabled, reduction_ratio=cfg.reduction_ratio, seed=cfg.seed)


def dequantize(x_int, rng):
    """``(x + u) / 256`` with ``u ~ U[0, 1)`` drawn from ``rng``."""
    x = np.asarray(x_int)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError(f"pixel values must lie in [0, 255], got range [{x.min()}, {x.max()}]")
    if not np.issubdtype(x.dtype, np.integer) and not np.array_equal(x, np.round(x)):
        raise ValueError("dequantize expects integer-valued input")
    return (x.astype(np.float64) + rng.random(x.shape)) / 256.0


def bits_per_dim(nll_nats, dims):
    if dims <= 0:
        raise ValueError("dims must be positive")
    return (nll_nats / dims + LN256) / math.log(2.0)


def warmup_lr(step, base_lr, warmup_steps):
    """Linear ramp over the first ``warmup_steps`` updates (``step`` counts from 1)."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads, lr=None):
        """Apply one update in place; ``params`` and ``grads`` are keyed by name."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"adam: non-finite gradient for {name}")
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self):
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors, t):
        self.t = int(t)
        self.m = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam.v.")}


@dataclass
class LossTerms:
    loss: Tensor
    nll: Tensor
    kl_sum: Tensor
    kl_per_scale: list
    encoding: object = None
    guider_losses: list = field(default_factory=list)


def total_loss(model, batch, lam, per_sample=True, stop_gradient=False, guider_targets=False):
    """``mean NLL + lam * sum_k KL(P_k || Q_k)`` on a dequantized batch.

    With ``per_sample`` the KL is averaged over per-sample guider outputs,
    otherwise it is taken against the batch-mean guider output. When
    ``lam == 0`` the KL is still reported but kept off the graph.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    enc = model.encode(x)
    ll = T.add(prior_log_density(enc.latents), enc.logdet)
    nll = T.neg(T.mean(ll))
    kls, guider_losses = [], []
    for k, u in enumerate(enc.pre_shuffle):
        unit = model.scales[k].shuffle_unit
        if unit is None:
            continue
        if lam == 0:
            with T.no_grad():
                kl = _scale_kl(unit, u.detach(), per_sample)
        else:
            kl = _scale_kl(unit, u.detach() if stop_gradient else u, per_sample)
        kls.append(kl)
        if guider_targets:
            guider_losses.append(unit.guider_target_loss(u)[0])
    kl_sum = Tensor(0.0)
    for kl in kls:
        kl_sum = T.add(kl_sum, kl)
    loss = T.add(nll, T.mul(kl_sum, lam)) if lam != 0 else nll
    for name, t in (("nll", nll), ("kl", kl_sum)):
        if not np.all(np.isfinite(t.data)):
            raise TrainingError(f"non-finite {name} in total_loss")
    return LossTerms(loss, nll, kl_sum, kls, enc, guider_losses)


def _scale_kl(unit, u, per_sample):
    q = unit.solver_eval()
    p = unit.guider_eval(u)
    if per_sample:
        return T.mean(kl_divergence(p, q))
    return kl_divergence(T.mean(p, axis=0), q)


def _scale_kl_fixed(unit, p_data, per_sample):
    q = unit.solver_eval()
    p = Tensor(p_data)
    if per_sample:
        return T.mean(kl_divergence(p, q))
    return kl_divergence(Tensor(p_data.mean(axis=0)), q)


@dataclass
class EpochRecord:
    epoch: int
    mean_nll_nats: float
    bits_per_dim: float
    kl_sum: float
    wall_seconds: float

    def csv(self):
        return (f"{self.epoch},{self.mean_nll_nats!r},{self.bits_per_dim!r},"
                f"{self.kl_sum!r},{self.wall_seconds:.3f}")


METRICS_HEADER = "epoch,mean_nll_nats,bits_per_dim,kl_sum,wall_seconds"


class Trainer:
    """Owns a model, its optimizer and the data/dequantization rng."""

    def __init__(self, cfg, input_shape, model=None):
        self.cfg = cfg.validate(input_shape)
        self.input_shape = tuple(input_shape)
        self.model = model if model is not None else build_model(cfg, input_shape)
        self.opt = Adam(cfg.learning_rate)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.epoch = 0
        self.step_losses = []
        self.step_nlls = []
        self.step_kls = []

    # -- one update --

    def loss_terms(self, x):
        cfg = self.cfg
        return total_loss(self.model, x, cfg.lam, cfg.kl_per_sample, cfg.stop_gradient,
                          guider_targets=self._guider_aux())

    def _guider_aux(self):
        return self.cfg.shuffle_enabled and self.cfg.guider_objective == "likelihood"

    def gradients(self, terms):
        params = self.model.named_parameters()
        by_tensor = backward(terms.loss, list(params.values()))
        grads = {name: by_tensor[p] for name, p in params.items()}
        if terms.guider_losses:
            aux_params = {n: p for n, p in params.items() if ".guider." in n}
            aux = Tensor(0.0)
            for gl in terms.guider_losses:
                aux = T.add(aux, gl)
            aux_g = backward(aux, list(aux_params.values()))
            for name, p in aux_params.items():
                grads[name] = aux_g[p]
        if self.cfg.max_grad_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.cfg.max_grad_norm:
                scale = self.cfg.max_grad_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        return grads

    def warm_start_shuffle(self, x, steps=300, lr=1e-2):
        """Fit each scale's guider to its target, then the solver to the guider, on one batch.

        Scales are visited in order so every actnorm downstream of scale k is
        initialized on channels already ordered by the fitted solver. The
        solver is left alone when ``lam == 0``.
        """
        x = Tensor(np.asarray(x, dtype=np.float64))
        for k, blk in enumerate(self.model.scales):
            unit = blk.shuffle_unit
            if unit is None:
                continue
            with T.no_grad():
                u = self.model.encode(x, stop_scale=k).pre_shuffle[k]
            g_params = unit.guider.parameters()
            opt = Adam(lr)
            for _ in range(steps):
                loss, _ = unit.guider_target_loss(u)
                grads = backward(loss, list(g_params.values()))
                opt.step(g_params, {n: grads[p] for n, p in g_params.items()})
            if self.cfg.lam == 0:
                continue
            with T.no_grad():
                p_data = unit.guider_eval(u).data
            s_params = unit.solver.parameters()
            opt = Adam(lr)
            for _ in range(steps):
                kl = _scale_kl_fixed(unit, p_data, self.cfg.kl_per_sample)
                grads = backward(kl, list(s_params.values()))
                opt.step(s_params, {n: grads[p] for n, p in s_params.items()})

    def train_step(self, x):
        if self.opt.t == 0 and self.cfg.shuffle_warm_start and self.cfg.shuffle_enabled:
            self.warm_start_shuffle(x)
        terms = self.loss_terms(x)
        loss = float(terms.loss.data)
        if not math.isfinite(loss) or loss > self.cfg.divergence_threshold:
            raise TrainingError(f"loss {loss} exceeded the divergence guard")
        grads = self.gradients(terms)
        lr = warmup_lr(self.opt.t + 1, self.cfg.learning_rate, self.cfg.warmup_steps)
        self.opt.step(self.model.named_parameters(), grads, lr)
        kl = float(terms.kl_sum.data)
        nll = float(terms.nll.data)
        self.step_losses.append(loss)
        self.step_nlls.append(nll)
        self.step_kls.append(kl)
        return nll, kl

    # -- loop --

    def batches(self, images):
        order = self.rng.permutation(len(images))
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            yield dequantize(images[order[i:i + bs]], self.rng)

    def run_epoch(self, images, clock=time.perf_counter):
        t0 = clock()
        nlls, kls = [], []
        for x in self.batches(images):
            snapshot = self.state()
            try:
                nll, kl = self.train_step(x)
            except TrainingError as e:
                raise TrainingDiverged(f"epoch {self.epoch + 1}, step {self.opt.t + 1}: {e}",
                                       checkpoint=snapshot, step=self.opt.t + 1) from e
            nlls.append(nll)
            kls.append(kl)
        self.epoch += 1
        mean_nll = float(np.mean(nlls))
        return EpochRecord(self.epoch, mean_nll, bits_per_dim(mean_nll, self.model.dims),
                           float(np.mean(kls)), clock() - t0)

    def fit(self, dataset, epochs=None, metrics_path=None, checkpoint_path=None,
            clock=time.perf_counter, log=None):
        images = dataset.images if isinstance(dataset, data_io.Dataset) else np.asarray(dataset)
        epochs = self.cfg.epochs if epochs is None else epochs
        records = []
        if metrics_path is not None and self.epoch == 0:
            with open(metrics_path, "w") as fh:
                fh.write(METRICS_HEADER + "\n")
        while self.epoch < epochs:
            try:
                rec = self.run_epoch(images, clock)
            except TrainingDiverged as e:
                if checkpoint_path is not None and e.checkpoint is not None:
                    path = checkpoint_path + ".last-good"
                    save_state(e.checkpoint, path)
                    e.checkpoint = path
                raise
            records.append(rec)
            if metrics_path is not None:
                with open(metrics_path, "a") as fh:
                    fh.write(rec.csv() + "\n")
            if log is not None:
                log(rec)
            if checkpoint_path is not None:
                self.save(checkpoint_path)
        return records

    # -- evaluation --

    def evaluate(self, dataset, batch_size=256, seed=12345):
        """Mean held-out NLL (nats/image) and bits/dim under fixed dequantization noise."""
        images = dataset.images if isinstance(dataset, data_io.Dataset) else np.asarray(dataset)
        rng = np.random.default_rng(seed)
        total = 0.0
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                x = dequantize(images[i:i + batch_size], rng)
                total += float(np.sum(self.model.log_likelihood(Tensor(x)).data))
        nll = -total / len(images)
        return nll, bits_per_dim(nll, self.model.dims)

    # -- persistence --

    def state(self):
        tensors = {name: p.data.copy() for name, p in self.model.named_parameters().items()}
        tensors.update({k: v.copy() for k, v in self.opt.state_tensors().items()})
        meta = {
            "config": self.cfg.to_dict(),
            "input_shape": list(self.input_shape),
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "actnorm_initialized": [a.initialized for a in self.model.actnorms()],
            "rng": self.rng.bit_generator.state,
        }
        return tensors, copy.deepcopy(meta)

    def save(self, path):
        save_state(self.state(), path)

    @classmethod
    def from_state(cls, tensors, meta):
        cfg = TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, tuple(meta["input_shape"]))
        for name, p in tr.model.named_parameters().items():
            if name not in tensors:
                raise data_io.MissingTensorError(f"checkpoint has no tensor {name!r}")
            p.data[...] = tensors[name]
        for a, flag in zip(tr.model.actnorms(), meta["actnorm_initialized"]):
            a.initialized = bool(flag)
        tr.opt.load_state(tensors, meta["adam_t"])
        tr.rng.bit_generator.state = meta["rng"]
        tr.epoch = int(meta["epoch"])
        return tr

    @classmethod
    def load(cls, path):
        ck = data_io.read_checkpoint(path)
        return cls.from_state(ck.tensors, ck.meta)


def save_state(state, path):
    tensors, meta = state
    data_io.write_checkpoint(path, tensors, meta)


def load_model(path):
    """Model from a checkpoint written by :class:`Trainer`."""
    return Trainer.load(path).model


def train(cfg, dataset, out_dir=None, clock=time.perf_counter, log=None):
    """Train from scratch; returns ``(trainer, records)``.

    With ``out_dir`` the metrics CSV and the checkpoint are written there
    (``metrics.csv``, ``model.ckpt``).
    """
    shape = dataset.shape if isinstance(dataset, data_io.Dataset) else tuple(np.asarray(dataset).shape[1:])
    tr = Trainer(cfg, shape)
    metrics = ckpt = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = os.path.join(out_dir, "metrics.csv")
        ckpt = os.path.join(out_dir, "model.ckpt")
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    records = tr.fit(dataset, metrics_path=metrics, checkpoint_path=ckpt, clock=clock, log=log)
    return tr, records
