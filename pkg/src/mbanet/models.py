"""Named architecture presets.

``shallow_*`` and ``deep_*`` use 32/64/128-wide stacks (one conv per stack
for shallow, three for deep) with two 1024-unit FC layers. ``baseline`` and
``ablation(i)`` use the 96/128/256 CIFAR stacks with two 2048-unit FC
layers. ``mnist_desk`` is the scaled 8-16-32 / FC-128 network used for the
CPU training trend.
"""

from .network import NetworkSpec, StackSpec

__all__ = ["PRESETS", "ABLATION_TABLE", "preset", "shallow", "deep", "baseline", "ablation",
           "mnist_desk"]

CIFAR_SHAPE = (3, 32, 32)
MNIST_SHAPE = (1, 28, 28)

BASELINE_WIDTHS = ((96, 96, 96), (128, 128, 128), (256, 256, 512))

# None keeps the baseline widths with ReLU; a tuple switches that stack to MBA
ABLATION_TABLE = {
    1: (None, None, (64, 64, 128)),
    2: (None, None, (128, 128, 256)),
    3: (None, None, (256, 256, 512)),
    4: (None, (32, 32, 32), (64, 64, 128)),
    5: (None, (64, 64, 64), (128, 128, 256)),
    6: (None, (128, 128, 128), (256, 256, 512)),
    7: ((24, 24, 24), (32, 32, 32), (64, 64, 128)),
    8: ((48, 48, 48), (64, 64, 64), (128, 128, 256)),
    9: ((96, 96, 96), (128, 128, 128), (256, 256, 512)),
}


def _stacks(widths, activation, k):
    return tuple(StackSpec(w, activation, k) for w in widths)


def shallow(activation="relu", k=4, input_shape=CIFAR_SHAPE, n_classes=10, **kw):
    return NetworkSpec(input_shape=input_shape, n_classes=n_classes,
                       stacks=_stacks(((32,), (64,), (128,)), activation, k),
                       fc_widths=(1024, 1024), **kw)


def deep(activation="relu", k=4, input_shape=CIFAR_SHAPE, n_classes=10, **kw):
    return NetworkSpec(input_shape=input_shape, n_classes=n_classes,
                       stacks=_stacks(((32,) * 3, (64,) * 3, (128,) * 3), activation, k),
                       fc_widths=(1024, 1024), **kw)


def baseline(fc_widths=(2048, 2048), **kw):
    return NetworkSpec(input_shape=CIFAR_SHAPE, stacks=_stacks(BASELINE_WIDTHS, "relu", 4),
                       fc_widths=fc_widths, **kw)


def ablation(model, k=4, fc_widths=(2048, 2048), **kw):
    if model not in ABLATION_TABLE:
        raise KeyError(f"ablation model must be 1..9, got {model}")
    stacks = []
    for base, row in zip(BASELINE_WIDTHS, ABLATION_TABLE[model]):
        stacks.append(StackSpec(base, "relu", k) if row is None else StackSpec(row, "mba", k))
    return NetworkSpec(input_shape=CIFAR_SHAPE, stacks=tuple(stacks), fc_widths=fc_widths, **kw)


def mnist_desk(activation="mba", k=4, **kw):
    kw.setdefault("mba_bias_spread", 0.1)
    return NetworkSpec(input_shape=MNIST_SHAPE, stacks=_stacks(((8,), (16,), (32,)), activation, k),
                       fc_widths=(128,), **kw)


PRESETS = {
    "shallow_vanilla": lambda: shallow("relu"),
    "shallow_apl": lambda: shallow("apl"),
    "shallow_mba": lambda: shallow("mba"),
    "deep_vanilla": lambda: deep("relu"),
    "deep_apl": lambda: deep("apl"),
    "deep_mba": lambda: deep("mba"),
    "baseline": baseline,
    "mnist_shallow_mba": lambda: mnist_desk("mba"),
    "mnist_shallow_relu": lambda: mnist_desk("relu"),
}
PRESETS.update({f"ablation{i}": (lambda i=i: ablation(i)) for i in ABLATION_TABLE})


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
