"""Build a 10,000-digit MNIST subset in IDX format.

The digits come from the MIT-licensed ``mnist`` npm package (v1.1.0), which
ships real MNIST samples as per-class JSON arrays of 784 intensities in
[0, 1]. They are rescaled to bytes, shuffled with a fixed seed and written
as gzipped ``train-images-idx3-ubyte`` / ``train-labels-idx1-ubyte``.

usage: python scripts/make_mnist_subset.py [--package DIR] [--out data/mnist-subset]

Without ``--package`` the tarball is fetched with ``npm pack mnist@1.1.0``.
"""

import argparse
import json
import os
import subprocess
import tarfile
import tempfile

import numpy as np

from mbanet.data import write_idx


def fetch_package(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(os.path.join(workdir, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(workdir)
    return os.path.join(workdir, "package")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--package", help="unpacked npm package directory")
    parser.add_argument("--out", default="data/mnist-subset")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package or fetch_package(tmp)
        images, labels = [], []
        for digit in range(10):
            with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as fh:
                raw = np.asarray(json.load(fh)["data"], dtype=np.float64)
            block = np.clip(np.round(raw * 255), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
            images.append(block)
            labels.append(np.full(len(block), digit, dtype=np.uint8))

    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train-images-idx3-ubyte.gz"), images[order])
    write_idx(os.path.join(args.out, "train-labels-idx1-ubyte.gz"), labels[order])
    print(f"wrote {len(labels)} digits to {args.out}")


if __name__ == "__main__":
    main()
