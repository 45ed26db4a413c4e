"""Build the bundled 10k-digit MNIST subset as gzipped IDX files.

Source: the ``mnist`` npm package (MIT license), whose ``src/digits/<d>.json``
files each hold ``{"data": [...]}`` with 784-pixel images scaled to [0, 1]
at three decimals; ``round(v * 255)`` recovers the original bytes.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/build_mnist_subset.py package/src/digits data/

Digits are interleaved by a seeded shuffle so any prefix is class-balanced
in expectation.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fedvra.idx import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        data = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        flat = np.asarray(data, dtype=np.float64)
        n = flat.size // 784
        images.append(np.rint(flat.reshape(n, 784) * 255).astype(np.uint8))
        labels.append(np.full(n, digit, dtype=np.uint8))
    X = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(y.size)
    X, y = X[order].reshape(-1, 28, 28), y[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "mnist10k-images-idx3-ubyte.gz", X)
    write_idx(args.out_dir / "mnist10k-labels-idx1-ubyte.gz", y)
    print(f"wrote {y.size} digits; class counts {np.bincount(y).tolist()}")


if __name__ == "__main__":
    main()
