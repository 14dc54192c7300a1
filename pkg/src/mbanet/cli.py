"""Command-line entry point: ``mbanet train | eval | inspect | data-check``.

Exit codes: 0 success, 2 bad config key/value or bad indices, 3 missing or
malformed data, 4 checkpoint does not match the config.
"""

import argparse
import csv
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import analysis
from . import checkpoint as ckpt_io
from .config import ConfigError, load_config, parse_config
from .data import DataFormatError, load_cifar10, load_mnist, mean_subtract, split_validation
from .network import build_network, init_params
from .optim import OptState, evaluate, per_class_error, train
from .tensor import ShapeError

log = logging.getLogger("mbanet")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4

METRIC_COLUMNS = ["epoch", "lr", "train_loss", "train_error", "val_error", "wall_seconds"]


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _load_cfg(path):
    try:
        return load_config(path)
    except FileNotFoundError:
        raise CLIError(EXIT_CONFIG, f"config file not found: {path}") from None
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None


def load_split(cfg, split):
    """Return ``(dataset, train_mean)`` for ``train``/``val``/``test`` as training sees them."""
    loader = {"mnist": load_mnist, "cifar10": load_cifar10}[cfg.dataset]
    try:
        full = loader(cfg.data_dir, "train")
        if split == "test":
            test = loader(cfg.data_dir, "test")
    except FileNotFoundError as exc:
        raise CLIError(EXIT_DATA, f"missing data: {exc}") from None
    except DataFormatError as exc:
        raise CLIError(EXIT_DATA, f"bad data file: {exc}") from None
    if cfg.val_fraction > 0:
        tr, val = split_validation(full, cfg.val_fraction, cfg.split_seed)
    else:
        tr, val = full, None
    if split == "train":
        out = mean_subtract(tr)
    elif split == "val":
        if val is None:
            raise CLIError(EXIT_CONFIG, "val split requested but val_fraction is 0")
        _, out = mean_subtract(tr, val)
    elif split == "test":
        _, out = mean_subtract(tr, test)
    else:
        raise CLIError(EXIT_CONFIG, f"unknown split {split!r}")
    return out


def _write_metrics(path, metrics, header, wall_clock):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(METRIC_COLUMNS)
        row = metrics.row()
        if not wall_clock:
            row[-1] = 0.0
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _save_ckpt(path, net, state, cfg, mean):
    ckpt_io.save(path, net.named_params(), state.velocity, epoch=state.epoch, step=state.step,
                 rng=state.rng, config_text=cfg.network_text(),
                 extra={"data.mean": mean} if mean is not None else None)
    return path


def _restore(path, net, cfg):
    try:
        ck = ckpt_io.load(path, expected_config=cfg.network_text() if cfg else None, strict=True)
    except FileNotFoundError:
        raise CLIError(EXIT_DATA, f"checkpoint not found: {path}") from None
    except ckpt_io.ConfigMismatchError as exc:
        raise CLIError(EXIT_MISMATCH, f"{path}: {exc}") from None
    except ckpt_io.CheckpointError as exc:
        raise CLIError(EXIT_MISMATCH, f"{path}: {exc}") from None
    if net is not None:
        try:
            net.set_params(ck.params)
        except (KeyError, ShapeError) as exc:
            raise CLIError(EXIT_MISMATCH, f"{path}: parameters do not fit the network: {exc}") from None
    return ck


def cmd_train(args):
    cfg = _load_cfg(args.config)
    try:
        cfg = cfg.override(data_dir=args.data_dir, out_dir=args.out, seed=args.seed,
                           deterministic=args.deterministic, max_epochs=args.max_epochs)
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    tr, val = load_split(cfg, "train"), None
    if cfg.val_fraction > 0:
        val = load_split(cfg, "val")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.resolved.cfg"), "w") as fh:
        fh.write(cfg.render())

    spec = cfg.network_spec()
    net = init_params(build_network(spec, cfg.np_dtype), cfg.seed)
    tcfg = cfg.train_config()
    state = OptState.for_params(net.named_params(), cfg.seed)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    fresh = True
    if args.resume:
        ck = _restore(args.resume, net, cfg)
        state.velocity = {k: np.array(v, dtype=net.dtype) for k, v in ck.velocity.items()}
        state.epoch, state.step = ck.epoch, ck.step
        if ck.rng_state is not None:
            state.rng = ck.rng()
        fresh = not os.path.exists(metrics_path)
    elif os.path.exists(metrics_path):
        os.remove(metrics_path)

    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    header = [fresh]

    def on_epoch(m, st):
        _write_metrics(metrics_path, m, header[0], cfg.wall_clock)
        header[0] = False
        last = st.epoch == tcfg.max_epochs
        if st.epoch % cfg.checkpoint_every == 0 or last:
            _save_ckpt(os.path.join(ckpt_dir, f"epoch_{st.epoch:03d}.mbac"), net, st, cfg, tr.mean)
        log.info("epoch %d lr %.5f loss %.4f train_err %.4f val_err %.4f (%.1fs)",
                 m.epoch, m.lr, m.train_loss, m.train_error, m.val_error, m.wall_seconds)

    for _ in train(net, tr, val, tcfg, state, on_epoch, multi_crop=cfg.multi_crop):
        pass
    _save_ckpt(os.path.join(cfg.out_dir, "last.mbac"), net, state, cfg, tr.mean)
    print(f"trained to epoch {state.epoch}; outputs in {cfg.out_dir}")
    return 0


def _config_for_checkpoint(path, explicit):
    """The run's resolved config lives two levels up (run/checkpoints/x.mbac) or beside it."""
    if explicit:
        return _load_cfg(explicit)
    here = os.path.dirname(os.path.abspath(path))
    for d in (here, os.path.dirname(here)):
        cand = os.path.join(d, "config.resolved.cfg")
        if os.path.exists(cand):
            return _load_cfg(cand)
    raise CLIError(EXIT_CONFIG, f"no config.resolved.cfg next to {path}; pass --config")


def _net_from_checkpoint(args):
    cfg = _config_for_checkpoint(args.checkpoint, getattr(args, "config", None))
    if getattr(args, "data_dir", None):
        cfg = cfg.override(data_dir=args.data_dir)
    net = build_network(cfg.network_spec(), cfg.np_dtype)
    ck = _restore(args.checkpoint, net, cfg)
    return cfg, net, ck


def cmd_eval(args):
    cfg, net, ck = _net_from_checkpoint(args)
    data = load_split(cfg, args.split)
    if "data.mean" in ck.extra and data.mean is not None:
        # undo the freshly computed centring and apply the stored one
        data.images = data.images + data.mean - ck.extra["data.mean"]
    err, pred = evaluate(net, data, args.multi_crop, cfg.augment_config(), return_predictions=True)
    result = {
        "split": args.split,
        "error_rate": err,
        "per_class": per_class_error(pred, data.labels, data.n_classes),
        "multi_crop": bool(args.multi_crop),
    }
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.json")
    with open(out, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{args.split} error rate: {err:.4%}")
    return 0


def _parse_indices(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CLIError(EXIT_CONFIG, f"--indices must be four integers m,n,j,i; got {text!r}") from None
    if len(vals) != 4:
        raise CLIError(EXIT_CONFIG, f"--indices must be four integers m,n,j,i; got {text!r}")
    return vals


def _inspect_net(args):
    if args.checkpoint:
        cfg, net, _ = _net_from_checkpoint(args)
        return cfg, net
    if not args.config:
        raise CLIError(EXIT_CONFIG, "need --checkpoint or --config")
    cfg = _load_cfg(args.config)
    net = init_params(build_network(cfg.network_spec(), np.float64), cfg.seed)
    return cfg, net


def cmd_inspect(args):
    if args.what == "params":
        if not args.config:
            raise CLIError(EXIT_CONFIG, "inspect params needs --config")
        cfg = _load_cfg(args.config)
        report = analysis.count_params(cfg.network_spec(), include_fc=args.include_fc,
                                       include_bias=args.include_bias)
        print(report.table())
        return 0

    cfg, net = _inspect_net(args)
    try:
        if args.what == "mapping":
            mba = analysis.resolve_mba_layer(net, args.layer)
            if args.indices:
                m, n, j, i = _parse_indices(args.indices)
            else:
                conv = analysis._next_conv(net, mba)
                c = conv.geometry.kernel_size // 2
                m, n, j, i = 0, 0, c, c
            grid = np.linspace(args.grid_min, args.grid_max, args.grid_points)
            curve = analysis.extract_mapping(net, mba.name, m, n, j, i, grid)
            out = args.out or "mapping.csv"
            analysis.write_mapping_csv(curve, out)
            print(f"{curve.layer} m={m} n={n} j={j} i={i}: breakpoints "
                  + ", ".join(f"{t:g}" for t in curve.breakpoints) + f" -> {out}")
        else:
            data = load_split(cfg, args.split)
            edges = np.linspace(args.range[0], args.range[1], args.bins + 1)
            hist = analysis.activation_histogram(net, data, args.layer, args.samples, edges,
                                                 seed=args.seed, source=args.source)
            out = args.out or "hist.csv"
            analysis.write_histogram_csv(hist, out)
            lo, hi = hist.modal_bin
            print(f"{hist.n_samples} samples, {hist.total} values, modal bin [{lo:g}, {hi:g}) -> {out}")
    except (IndexError, KeyError) as exc:
        raise CLIError(EXIT_CONFIG, str(exc).strip("'\"")) from None
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    return 0


def cmd_data_check(args):
    if args.config:
        cfg = _load_cfg(args.config)
    else:
        cfg = parse_config("")
    cfg = cfg.override(dataset=args.dataset, data_dir=args.data_dir)
    loader = {"mnist": load_mnist, "cifar10": load_cifar10}[cfg.dataset]
    found = False
    for split in ("train", "test"):
        try:
            ds = loader(cfg.data_dir, split)
        except FileNotFoundError as exc:
            print(f"{split}: missing ({exc})")
            continue
        except DataFormatError as exc:
            raise CLIError(EXIT_DATA, f"{split}: {exc}") from None
        found = True
        counts = ", ".join(str(c) for c in ds.class_counts())
        print(f"{split}: {len(ds)} samples, image shape {ds.image_shape}, per class [{counts}]")
    if not found:
        raise CLIError(EXIT_DATA, f"no {cfg.dataset} files in {cfg.data_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mbanet", description="Multi-bias activation networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to the run's config.resolved.cfg")
    e.add_argument("--data-dir")
    e.add_argument("--split", default="val", choices=["train", "val", "test"])
    e.add_argument("--multi-crop", action="store_true")
    e.add_argument("--out", help="eval.json path (default: beside the checkpoint)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="parameter table, mapping curves, histograms")
    i.add_argument("what", choices=["params", "mapping", "hist"])
    i.add_argument("--config")
    i.add_argument("--checkpoint")
    i.add_argument("--data-dir")
    i.add_argument("--include-fc", action="store_true")
    i.add_argument("--include-bias", action="store_true")
    i.add_argument("--layer", default="0", help="MBA layer name or ordinal")
    i.add_argument("--indices", help="m,n,j,i (default 0,0,centre,centre)")
    i.add_argument("--grid-min", type=float, default=-3.0)
    i.add_argument("--grid-max", type=float, default=3.0)
    i.add_argument("--grid-points", type=int, default=601)
    i.add_argument("--samples", type=int, default=1000)
    i.add_argument("--bins", type=int, default=101)
    i.add_argument("--range", type=float, nargs=2, default=(-5.0, 5.0))
    i.add_argument("--source", choices=["input", "output"], default="input")
    i.add_argument("--split", default="train", choices=["train", "val", "test"])
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("data-check", help="validate dataset files and print counts")
    d.add_argument("--dataset", choices=["mnist", "cifar10"])
    d.add_argument("--data-dir")
    d.add_argument("--config")
    d.set_defaults(func=cmd_data_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
