"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment. Unknown keys are errors. Lists
are comma separated; inside ``stacks`` each stack lists its conv widths
joined by ``-``, e.g. ``stacks = 96-96-96, 128-128-128, 256-256-512``.
``activations`` and ``k`` take either one value for every stack or one per
stack.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import AugmentConfig
from .network import ACTIVATIONS, NetworkSpec, StackSpec
from .optim import TrainConfig

__all__ = ["ConfigError", "UnknownKeyError", "RunConfig", "parse_config", "load_config",
           "DEFAULTS", "NETWORK_KEYS", "DATASET_SHAPES"]

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    def __init__(self, key, line=None):
        self.key = key
        where = f" (line {line})" if line else ""
        super().__init__(f"unknown config key {key!r}{where}")


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt(conv):
    def parse(s):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return parse


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _stacks(s):
    return tuple(tuple(int(w) for w in part.split("-")) for part in s.split(",") if part.strip())


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join("-".join(str(w) for w in st) for st in v)
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, default); order fixes the layout of resolved snapshots
DEFAULTS = {
    # dataset
    "dataset": (str, "mnist"),
    "data_dir": (str, "data/mnist-subset"),
    "val_fraction": (float, 0.1),
    "split_seed": (int, 0),
    # network
    "stacks": (_stacks, ((8,), (16,), (32,))),
    "activations": (_strs, ("mba",)),
    "k": (_ints, (4,)),
    "fc_widths": (_ints, (128,)),
    "dropout_rate": (float, 0.5),
    "init_std": (float, 0.05),
    "fc_init_std": (_opt(float), None),
    "mba_bias_spread": (float, 0.75),
    "mba_before_fc": (_bool, False),
    "fc_mba": (_bool, False),
    "fc_k": (int, 4),
    "dtype": (str, "float32"),
    # optimisation
    "base_lr": (float, 0.1),
    "momentum": (float, 0.9),
    "weight_decay": (float, 0.005),
    "lr_drop_factor": (float, 0.1),
    "lr_drop_period": (float, 40.0),
    "lr_floor": (float, 1e-4),
    "batch_size": (int, 100),
    "max_epochs": (int, 100),
    "seed": (int, 0),
    "deterministic": (_bool, True),
    # augmentation
    "augment": (_bool, False),
    # none: crop = input side, resize range [crop, crop + 8]
    "resize_min": (_opt(int), None),
    "resize_max": (_opt(int), None),
    "crop": (_opt(int), None),
    "hflip_prob": (float, 0.5),
    "eval_resize": (_opt(int), None),
    "multi_crop": (_bool, False),
    # outputs
    "out_dir": (str, "runs/default"),
    "checkpoint_every": (int, 1),
    "wall_clock": (_bool, True),
}

# keys that determine tensor shapes and meaning; hashed into checkpoints
NETWORK_KEYS = ("dataset", "stacks", "activations", "k", "fc_widths", "mba_before_fc",
                "fc_mba", "fc_k", "dtype")


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def override(self, **changes):
        vals = dict(self.values)
        for key, val in changes.items():
            if key not in DEFAULTS:
                raise UnknownKeyError(key)
            if val is not None:
                vals[key] = val
        cfg = RunConfig(_resolve_crop(vals))
        cfg.validate()
        return cfg

    def validate(self):
        n = len(self.stacks)
        if self.dataset not in DATASET_SHAPES:
            raise ConfigError(f"dataset must be one of {sorted(DATASET_SHAPES)}, got {self.dataset!r}")
        for key in ("activations", "k"):
            if len(self[key]) not in (1, n):
                raise ConfigError(f"{key} needs 1 or {n} entries, got {len(self[key])}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"activations: unknown kind {a!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        side = DATASET_SHAPES[self.dataset][1]
        if self.crop != side:
            raise ConfigError(f"crop must equal the {self.dataset} input side {side}, got {self.crop}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        self.network_spec()
        self.train_config()

    def _per_stack(self, key):
        vals = self[key]
        return vals * len(self.stacks) if len(vals) == 1 else vals

    def network_spec(self):
        stacks = tuple(StackSpec(w, a, k) for w, a, k in
                       zip(self.stacks, self._per_stack("activations"), self._per_stack("k")))
        return NetworkSpec(
            input_shape=DATASET_SHAPES[self.dataset], n_classes=10, stacks=stacks,
            fc_widths=self.fc_widths, dropout_rate=self.dropout_rate, init_std=self.init_std,
            fc_init_std=self.fc_init_std, mba_bias_spread=self.mba_bias_spread,
            mba_before_fc=self.mba_before_fc, fc_mba=self.fc_mba, fc_k=self.fc_k,
        )

    def augment_config(self):
        return AugmentConfig(self.resize_min, self.resize_max, self.crop, self.hflip_prob,
                             self.eval_resize)

    def train_config(self):
        return TrainConfig(
            base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
            lr_drop_factor=self.lr_drop_factor, lr_drop_period=self.lr_drop_period,
            lr_floor=self.lr_floor, batch_size=self.batch_size, max_epochs=self.max_epochs,
            seed=self.seed, augment=self.augment,
            augment_cfg=self.augment_config(),
            deterministic=self.deterministic,
        )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def render(self, keys=None):
        """Resolved ``key = value`` text, defaults included, in a fixed order."""
        keys = DEFAULTS if keys is None else keys
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in keys)

    def network_text(self):
        return self.render(NETWORK_KEYS)

    def fingerprint(self):
        return hashlib.sha256(self.network_text().encode()).hexdigest()


def _resolve_crop(vals):
    side = DATASET_SHAPES.get(vals["dataset"], (0, 32, 32))[1]
    if vals["crop"] is None:
        vals["crop"] = side
    if vals["resize_min"] is None:
        vals["resize_min"] = vals["crop"]
    if vals["resize_max"] is None:
        vals["resize_max"] = vals["resize_min"] + 8
    return vals


def parse_config(text, base=None):
    vals = {k: d for k, (_, d) in DEFAULTS.items()} if base is None else dict(base.values)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise UnknownKeyError(key, lineno)
        try:
            vals[key] = DEFAULTS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(_resolve_crop(vals))
    try:
        cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
