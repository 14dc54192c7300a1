"""Parameter accounting, mapping-function extraction and activation histograms."""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import activations as act
from .network import MBA, Conv2D, Dense, MaxPool2D

__all__ = [
    "LayerCount",
    "ParamReport",
    "count_params",
    "mba_overhead",
    "hinge_coefficients",
    "hinge_sum",
    "MappingCurve",
    "mapping_function",
    "extract_mapping",
    "mba_composite",
    "apl_composite",
    "Histogram",
    "activation_histogram",
    "resolve_mba_layer",
    "write_mapping_csv",
    "write_histogram_csv",
]


@dataclass
class LayerCount:
    name: str
    kind: str
    weights: int = 0
    biases: int = 0
    activation: int = 0
    fc: bool = False

    @property
    def total(self):
        return self.weights + self.biases + self.activation


@dataclass
class ParamReport:
    layers: list = field(default_factory=list)
    include_fc: bool = False
    include_bias: bool = False

    def _rows(self, include_fc=None):
        include_fc = self.include_fc if include_fc is None else include_fc
        return [r for r in self.layers if include_fc or not r.fc]

    def total_for(self, include_fc=None, include_bias=None):
        include_bias = self.include_bias if include_bias is None else include_bias
        rows = self._rows(include_fc)
        return sum(r.weights + r.activation + (r.biases if include_bias else 0) for r in rows)

    @property
    def total(self):
        return self.total_for()

    @property
    def weights(self):
        return sum(r.weights for r in self._rows())

    @property
    def activation(self):
        return sum(r.activation for r in self._rows())

    @property
    def biases(self):
        return sum(r.biases for r in self._rows())

    def table(self):
        lines = [f"{'layer':<22}{'kind':<8}{'weights':>12}{'biases':>10}{'act':>10}"]
        for r in self._rows():
            lines.append(f"{r.name:<22}{r.kind:<8}{r.weights:>12,}{r.biases:>10,}{r.activation:>10,}")
        scope = "including" if self.include_fc else "excluding"
        bias = "with" if self.include_bias else "without"
        lines.append(f"total ({scope} FC, {bias} layer biases): {self.total:,}")
        return "\n".join(lines)


def count_params(spec, include_fc=False, include_bias=False):
    """Closed-form parameter count of ``spec``.

    A conv layer contributes ``N*q*q*M`` weights, an MBA layer ``N*K``
    biases, an APL layer ``2*K*W*H``. By default the fully connected layers
    and the ordinary per-channel layer biases are left out, which is how
    the published parameter tables count.
    """
    report = ParamReport(include_fc=include_fc, include_bias=include_bias)
    c, h, w = spec.input_shape
    q = spec.kernel_size
    plan = spec.conv_plan()
    for si, stack in enumerate(spec.stacks):
        entries = [p for p in plan if p[0] == si]
        for _, ci, width, kind, k in entries:
            name = f"stack{si + 1}.conv{ci + 1}"
            conv_out = width * k if kind == "maxout" else width
            report.layers.append(
                LayerCount(name, "conv", weights=c * q * q * conv_out,
                           biases=0 if kind == "mba" else conv_out)
            )
            last = ci == len(entries) - 1
            if kind == "mba":
                report.layers.append(
                    LayerCount(f"stack{si + 1}.mba{ci + 1}", "mba",
                               activation=act.mba_param_count(width, k))
                )
                c = width * k
            elif kind == "apl":
                report.layers.append(
                    LayerCount(f"stack{si + 1}.apl{ci + 1}", "apl",
                               activation=act.apl_param_count(k, h, w))
                )
                c = width
            else:
                c = width
            if last:
                h, w = h // 2, w // 2
    features = c * h * w
    for fi, width in enumerate(spec.fc_widths):
        report.layers.append(
            LayerCount(f"fc{fi + 1}", "fc", weights=features * width, biases=width, fc=True)
        )
        if spec.fc_mba:
            report.layers.append(
                LayerCount(f"fc{fi + 1}.mba", "mba",
                           activation=act.mba_param_count(width, spec.fc_k), fc=True)
            )
            features = width * spec.fc_k
        else:
            features = width
    report.layers.append(
        LayerCount("classifier", "fc", weights=features * spec.n_classes,
                   biases=spec.n_classes, fc=True)
    )
    return report


def mba_overhead(spec):
    """Extra conv-stack parameters MBA adds over the same widths with ReLU:
    ``N*q*q*M*(K-1) + N*K`` summed over every MBA site feeding a conv."""
    q = spec.kernel_size
    plan = spec.conv_plan()
    total = 0
    for (_, _, n, kind, k), nxt in zip(plan, plan[1:] + [None]):
        if kind != "mba" or nxt is None:
            continue
        m = nxt[2] * (nxt[4] if nxt[3] == "maxout" else 1)
        total += n * q * q * m * (k - 1) + n * k
    return total


def hinge_coefficients(breakpoints, slopes):
    """Coefficients ``a`` with ``sum_k a_k * relu(x - t_k)`` equal to the
    continuous piecewise-linear function that is zero left of ``t_1`` and has
    slope ``slopes[k]`` on ``[t_k, t_{k+1})``."""
    t = np.asarray(breakpoints, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    s = np.asarray(slopes, dtype=float)
    if s.shape != t.shape:
        raise ValueError("need one slope per breakpoint")
    return np.diff(s, prepend=0.0)


def hinge_sum(x, breakpoints, coeffs):
    x = np.asarray(x, dtype=float)
    return act.relu_forward(x[:, None] - np.asarray(breakpoints)[None]) @ np.asarray(coeffs)


def mapping_function(x, coeffs, biases):
    """``u(x) = sum_k coeffs[k] * relu(x + biases[k])``, evaluated through the MBA forward rule."""
    x = np.asarray(x, dtype=float)
    biases = np.asarray(biases, dtype=float).reshape(1, -1)
    bands = act.mba_forward(x.reshape(-1, 1), biases)
    return bands @ np.asarray(coeffs, dtype=float)


@dataclass
class MappingCurve:
    layer: str
    m: int
    n: int
    j: int
    i: int
    x: np.ndarray
    u: np.ndarray
    coeffs: np.ndarray
    biases: np.ndarray

    @property
    def breakpoints(self):
        return np.sort(-self.biases)


def default_grid():
    return np.linspace(-3.0, 3.0, 601)


def resolve_mba_layer(net, layer):
    """Accept an MBA layer name or its ordinal among the network's MBA layers."""
    mbas = [l for l in net.layers if isinstance(l, MBA)]
    if isinstance(layer, str) and not layer.lstrip("-").isdigit():
        found = net.layer(layer)
        if not isinstance(found, MBA):
            raise ValueError(f"{layer} is not an MBA layer")
        return found
    idx = int(layer)
    if not 0 <= idx < len(mbas):
        raise IndexError(f"MBA layer index {idx} out of range ({len(mbas)} MBA layers)")
    return mbas[idx]


def _next_conv(net, layer):
    pos = net.layers.index(layer)
    for nxt in net.layers[pos + 1:]:
        if isinstance(nxt, Conv2D):
            return nxt
        if not isinstance(nxt, MaxPool2D):
            break
    raise ValueError(f"{layer.name} is not followed by a convolution")


def extract_mapping(net, layer, m, n, j, i, grid=None):
    """Mapping from input value ``x`` of channel ``n`` to its contribution at
    output channel ``m`` through kernel tap ``(j, i)`` of the following conv.

    With the normalisation ``w' = 1`` the coefficients are the conv weights
    ``W[m, n*K + k, j, i]``.
    """
    mba = resolve_mba_layer(net, layer)
    conv = _next_conv(net, mba)
    w = conv.params["weight"]
    k = mba.k
    limits = {"m": w.shape[0], "n": mba.in_channels, "j": w.shape[2], "i": w.shape[3]}
    for key, val in zip("mnji", (m, n, j, i)):
        if not 0 <= val < limits[key]:
            raise IndexError(f"index {key}={val} out of range [0, {limits[key]})")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    coeffs = np.array(w[m, n * k:(n + 1) * k, j, i], dtype=float)
    biases = np.array(mba.params["bias"][n], dtype=float)
    return MappingCurve(mba.name, m, n, j, i, grid, mapping_function(grid, coeffs, biases),
                        coeffs, biases)


def mba_composite(grid, biases, next_weights):
    """Per-output-channel mappings ``u_m(x)`` of one MBA input channel.

    ``next_weights`` is ``(M, K)``: the following layer's weights on the K
    bands of that channel at one tap. Returns ``(M, len(grid))``.
    """
    grid = np.asarray(grid, dtype=float)
    bands = act.mba_forward(grid.reshape(-1, 1), np.asarray(biases, dtype=float).reshape(1, -1))
    return np.asarray(next_weights) @ bands.T


def apl_composite(grid, slopes, hinges, n_outputs):
    """Per-output-channel hinge part ``u_m(x)`` of an APL unit at one location.

    APL is applied before the following layer mixes channels, so every
    output channel receives the same ``u``.
    """
    grid = np.asarray(grid, dtype=float)
    x = grid.reshape(-1, 1)
    slopes = np.asarray(slopes, dtype=float).reshape(-1)
    hinges = np.asarray(hinges, dtype=float).reshape(-1)
    u = (act.apl_forward(x, slopes, hinges) - act.relu_forward(x))[:, 0]
    return np.tile(u, (n_outputs, 1))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int
    n_samples: int

    @property
    def total(self):
        return int(self.counts.sum()) + self.underflow + self.overflow

    @property
    def mean_counts(self):
        return self.counts / max(self.n_samples, 1)

    @property
    def modal_bin(self):
        k = int(np.argmax(self.counts))
        return self.edges[k], self.edges[k + 1]


def activation_histogram(net, data, layer, n_samples=1000, edges=None, seed=0,
                         source="input", batch_size=250):
    """Histogram of the values entering (``source="input"``) or leaving
    (``"output"``) an MBA layer over ``n_samples`` random inputs.

    Default edges are 101 uniform bins on [-5, 5]; values outside fall into
    the underflow/overflow counters.
    """
    if source not in ("input", "output"):
        raise ValueError("source must be 'input' or 'output'")
    mba = resolve_mba_layer(net, layer)
    edges = np.linspace(-5, 5, 102) if edges is None else np.asarray(edges, dtype=float)
    if n_samples > len(data):
        warnings.warn(f"n_samples={n_samples} exceeds dataset size {len(data)}; clamping")
        n_samples = len(data)
    rows = np.sort(np.random.default_rng(seed).choice(len(data), n_samples, replace=False))
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    under = over = 0
    pos = net.layers.index(mba)
    for start in range(0, n_samples, batch_size):
        x = np.asarray(data.images[rows[start:start + batch_size]], dtype=net.dtype)
        for lyr in net.layers[:pos]:
            x = lyr.forward(x)
        if source == "output":
            x = mba.forward(x)
        vals = x.ravel()
        under += int((vals < edges[0]).sum())
        over += int((vals > edges[-1]).sum())
        inside = vals[(vals >= edges[0]) & (vals <= edges[-1])]
        counts += np.histogram(inside, bins=edges)[0]
    for lyr in net.layers:
        lyr._cache = None
    net._pending_backward = False
    return Histogram(edges, counts, under, over, n_samples)


def write_mapping_csv(curve, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# layer={curve.layer} m={curve.m} n={curve.n} j={curve.j} i={curve.i}\n")
        fh.write("# coeffs=" + " ".join(repr(float(a)) for a in curve.coeffs) + "\n")
        fh.write("# breakpoints=" + " ".join(repr(float(t)) for t in curve.breakpoints) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["x", "u"])
        for x, u in zip(curve.x, curve.u):
            writer.writerow([repr(float(x)), repr(float(u))])


def write_histogram_csv(hist, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        writer.writerow(["-inf", repr(float(hist.edges[0])), hist.underflow])
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        writer.writerow([repr(float(hist.edges[-1])), "inf", hist.overflow])
