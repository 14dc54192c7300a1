import numpy as np
import pytest

from mbanet.network import NetworkSpec, StackSpec, build_network, init_params


def naive_conv(x, w, pad=1, stride=1):
    """Direct loop cross-correlation, (N,H,W) x (M,N,q,q) -> (M,Ho,Wo)."""
    n, h, wd = x.shape
    m, _, q, _ = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - q) // stride + 1
    wo = (wd + 2 * pad - q) // stride + 1
    out = np.zeros((m, ho, wo))
    for mm in range(m):
        for yy in range(ho):
            for xx in range(wo):
                acc = 0.0
                for nn in range(n):
                    for dy in range(q):
                        for dx in range(q):
                            acc += xp[nn, yy * stride + dy, xx * stride + dx] * w[mm, nn, dy, dx]
                out[mm, yy, xx] = acc
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def tiny_spec(activation="mba", k=3, widths=((4,), (4,)), shape=(2, 8, 8), **kw):
    kw.setdefault("fc_widths", (6,))
    kw.setdefault("dropout_rate", 0.0)
    kw.setdefault("init_std", 0.3)
    return NetworkSpec(input_shape=shape, n_classes=3,
                       stacks=tuple(StackSpec(w, activation, k) for w in widths), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net():
    def make(activation="mba", seed=0, **kw):
        return init_params(build_network(tiny_spec(activation, **kw)), seed)
    return make


@pytest.fixture(scope="session")
def cifar_full(tmp_path_factory):
    """Full-size synthetic CIFAR-10 binary batches (5 x 10,000 train, 10,000 test).

    Train labels are balanced: 1,000 of each class per batch.
    """
    from mbanet.data import write_cifar10_batch

    root = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin"
    root.mkdir()
    r = np.random.default_rng(0)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        labels = r.permutation(np.repeat(np.arange(10), 1000))
        pixels = r.integers(0, 256, (10_000, 3072), dtype=np.uint8)
        write_cifar10_batch(root / name, labels, pixels)
    return root.parent


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
