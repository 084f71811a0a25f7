"""``eiwflow`` command line: train, sample, reconstruct, interpolate, manipulate, entropy-report."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data_io, entropy, generation
from . import training as tr


class ConfigError(ValueError):
    def __init__(self, msg, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.key, self.line = key, line


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s):
    return None if s.strip().lower() in ("", "none") else s.strip()


# config key -> (TrainConfig field, parser)
CONFIG_KEYS = {
    "scales": ("scales", int),
    "steps_per_scale": ("steps_per_scale", int),
    "lambda": ("lam", float),
    "learning_rate": ("learning_rate", float),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "warmup_steps": ("warmup_steps", int),
    "hidden_width": ("hidden_width", int),
    "reduction_ratio": ("reduction_ratio", int),
    "dataset.kind": ("dataset_kind", str),
    "dataset.path": ("dataset_path", _opt_str),
    "dataset.resolution": ("dataset_resolution", int),
    "dataset.size": ("dataset_size", int),
    "dataset.holdout": ("dataset_holdout", int),
    "shuffle.enabled": ("shuffle_enabled", _bool),
    "shuffle.stop_gradient": ("stop_gradient", _bool),
    "kl.per_sample": ("kl_per_sample", _bool),
    "guider.objective": ("guider_objective", str),
    "train.max_grad_norm": ("max_grad_norm", float),
}

# which key to blame when a constraint fails
_CONSTRAINT_KEYS = [
    ("divisible", "dataset.resolution"), ("lambda", "lambda"), ("scales", "scales"),
    ("learning_rate", "learning_rate"), ("batch_size", "batch_size"), ("epochs", "epochs"),
    ("hidden_width", "hidden_width"), ("reduction_ratio", "reduction_ratio"),
    ("warmup_steps", "warmup_steps"), ("guider_objective", "guider.objective"),
]


def apply_setting(cfg, key, value, line=None):
    if key not in CONFIG_KEYS:
        raise ConfigError("unknown config key", key, line)
    name, parse = CONFIG_KEYS[key]
    try:
        setattr(cfg, name, parse(value))
    except ValueError as e:
        raise ConfigError(f"cannot parse value {value!r} ({e})", key, line) from None


def parse_config(path, overrides=()):
    """Read ``key = value`` lines (``#`` starts a comment) into a validated TrainConfig."""
    cfg = tr.TrainConfig()
    lines = {}
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    for no, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", line=no)
        key, value = (s.strip() for s in body.split("=", 1))
        apply_setting(cfg, key, value, no)
        lines[key] = no
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        apply_setting(cfg, key, value)
        lines[key] = None
    try:
        cfg.validate()
    except ValueError as e:
        key = next((k for tag, k in _CONSTRAINT_KEYS if tag in str(e)), None)
        if key == "dataset.resolution" and "dataset.resolution" not in lines and "scales" in lines:
            key = "scales"
        raise ConfigError(str(e), key, lines.get(key)) from None
    return cfg


def load_data(spec, seed=0):
    """Dataset from a path (``.idx``/``.npz``) or ``synth:KIND[:N[:RESOLUTION[:SEED]]]``."""
    if spec.startswith("synth:"):
        parts = spec.split(":")[1:]
        kind = parts[0]
        n = int(parts[1]) if len(parts) > 1 else 256
        res = int(parts[2]) if len(parts) > 2 else 16
        s = int(parts[3]) if len(parts) > 3 else seed
        return data_io.synth_dataset(kind, n, res, s)
    if not os.path.exists(spec):
        raise FileNotFoundError(f"data file not found: {spec}")
    if spec.endswith(".npz"):
        return data_io.load_npz(spec)
    return data_io.load_idx(spec)


def _dataset_for(cfg):
    ds = data_io.load_dataset(cfg.dataset_kind, cfg.dataset_path, cfg.dataset_resolution,
                              cfg.dataset_size, cfg.seed)
    try:
        cfg.validate(ds.shape)
    except ValueError as e:
        raise ConfigError(str(e), "dataset.resolution") from None
    return ds


def _inputs(ds, seed):
    return tr.dequantize(ds.images, np.random.default_rng([seed, 3]))


def _grid(images, path, columns=None):
    n = len(images)
    columns = columns or int(np.ceil(np.sqrt(n)))
    data_io.write_image_grid(np.clip(images, 0.0, 1.0), path, columns)


# --- subcommands ---------------------------------------------------------

def cmd_train(args):
    cfg = parse_config(args.config, args.override)
    if args.seed is not None:
        cfg.seed = args.seed
    ds = _dataset_for(cfg)
    train_set = ds
    if cfg.dataset_holdout:
        train_set, _ = ds.holdout(cfg.dataset_holdout)
    clock = (lambda: 0.0) if args.fixed_clock else None
    kwargs = {} if clock is None else {"clock": clock}

    def log(rec):
        print(f"epoch {rec.epoch}: nll {rec.mean_nll_nats:.4f} nats, {rec.bits_per_dim:.4f} bits/dim, "
              f"kl_sum {rec.kl_sum:.3g}", file=sys.stderr)

    try:
        tr.train(cfg, train_set, out_dir=args.out, log=log, **kwargs)
    except tr.TrainingDiverged as e:
        print(f"error: training diverged ({e}); last good state: {e.checkpoint}", file=sys.stderr)
        return 1
    return 0


def cmd_sample(args):
    model = tr.load_model(args.checkpoint)
    imgs = generation.sample(model, args.n, args.temperature, np.random.default_rng(args.seed))
    _grid(imgs, args.out, args.columns)
    return 0


def cmd_reconstruct(args):
    model = tr.load_model(args.checkpoint)
    x = _inputs(load_data(args.data, args.seed), args.seed)
    if args.limit:
        x = x[:args.limit]
    xr = generation.reconstruct(model, x)
    print(f"max |x - x_hat| = {np.max(np.abs(x - xr)):.3e}", file=sys.stderr)
    _grid(np.concatenate([x, xr]), args.out, len(x) if len(x) <= 16 else None)
    return 0


def cmd_interpolate(args):
    model = tr.load_model(args.checkpoint)
    x = _inputs(load_data(args.data, args.seed), args.seed)
    za = generation.encode(model, x[args.idx_a:args.idx_a + 1])
    zb = generation.encode(model, x[args.idx_b:args.idx_b + 1])
    if args.steps < 2:
        raise ConfigError("--steps must be >= 2")
    alphas = np.linspace(0.0, 1.0, args.steps)
    _grid(generation.interpolate(model, za, zb, alphas), args.out, args.steps)
    return 0


def cmd_manipulate(args):
    model = tr.load_model(args.checkpoint)
    ds = load_data(args.data, args.seed)
    if args.attribute not in ds.attributes:
        raise ConfigError(f"dataset has no attribute {args.attribute!r} "
                          f"(available: {', '.join(sorted(ds.attributes)) or 'none'})")
    x = _inputs(ds, args.seed)
    z_plus, z_minus = generation.attribute_means(model, x, ds.attributes[args.attribute])
    target = generation.encode(model, x[args.idx:args.idx + 1])
    out = [generation.decode(model, target), generation.manipulate(model, target, z_plus, z_minus, args.alpha)]
    _grid(np.concatenate(out), args.out, 2)
    return 0


def cmd_entropy_report(args):
    ds = load_data(args.data, args.seed)
    x = _inputs(ds, args.seed)
    name = args.dataset_name or os.path.splitext(os.path.basename(args.data))[0].replace(":", "_")
    report = entropy.EntropyReport()
    pairs = [("eiw", args.checkpoint)]
    if args.baseline:
        pairs.insert(0, ("vanilla", args.baseline))
    for tag, path in pairs:
        model = tr.load_model(path)
        if not model.shuffle_enabled:
            tag = "vanilla"
        report.extend(entropy.entropy_report(model, x, tag, args.split, name, args.budget))
    report.write(args.out)
    if report.floored:
        print(f"warning: {report.floored} zero-variance elements floored at {entropy.ENTROPY_FLOOR} nats",
              file=sys.stderr)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="eiwflow", description="Multi-scale flow with entropy-informed channel shuffling.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", default="run", help="output directory (metrics.csv, model.ckpt)")
    t.add_argument("--seed", type=int)
    t.add_argument("--fixed-clock", action="store_true", help="record wall_seconds as 0 for byte-stable logs")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples into an image grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--temperature", type=float, default=0.8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--columns", type=int)
    s.set_defaults(func=cmd_sample)

    def data_cmd(name, help_, func):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True, help="IDX/npz path or synth:KIND[:N[:RES[:SEED]]]")
        c.add_argument("--out", required=True)
        c.add_argument("--seed", type=int, default=0)
        c.set_defaults(func=func)
        return c

    r = data_cmd("reconstruct", "encode and decode images", cmd_reconstruct)
    r.add_argument("--limit", type=int, default=16)
    i = data_cmd("interpolate", "interpolate between two images in latent space", cmd_interpolate)
    i.add_argument("--idx-a", type=int, required=True)
    i.add_argument("--idx-b", type=int, required=True)
    i.add_argument("--steps", type=int, default=8)
    m = data_cmd("manipulate", "move an image along an attribute direction", cmd_manipulate)
    m.add_argument("--attribute", required=True)
    m.add_argument("--alpha", type=float, default=1.0)
    m.add_argument("--idx", type=int, default=0)
    e = data_cmd("entropy-report", "per-scale E2/R2E2 table as CSV", cmd_entropy_report)
    e.add_argument("--baseline", help="vanilla checkpoint for a paired report")
    e.add_argument("--split", default="test")
    e.add_argument("--budget", type=int)
    e.add_argument("--dataset-name")
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, data_io.DataError, data_io.MissingTensorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    sys.exit(main())
