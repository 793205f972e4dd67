#!/usr/bin/env python3
"""Writes a 10k-digit MNIST subset as IDX files.

The digits come from the `mnist` npm package (1,000 handwritten digits per
class, stored as JSON intensities with three decimals). `npm pack` fetches the
tarball through whatever registry npm is configured with. The pool is split
per class into train and test with a fixed seed.

    tools/fetch_mnist_subset.py --out data/mnist
    tools/fetch_mnist_subset.py --tarball mnist-1.1.0.tgz --out data/mnist
"""

import argparse
import json
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

import numpy as np


def npm_pack(workdir: Path) -> Path:
    result = subprocess.run(
        ["npm", "pack", "mnist@1.1.0", "--silent"],
        cwd=workdir, check=True, capture_output=True, text=True,
    )
    return workdir / result.stdout.strip().splitlines()[-1]


def load_pool(tarball: Path):
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            if member is None:
                sys.exit(f"{tarball}: digit file {digit}.json missing")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            if flat.size % 784:
                sys.exit(f"{tarball}: digit {digit} payload is not a multiple of 784")
            pixels = np.rint(flat * 255.0).clip(0, 255).astype(np.uint8).reshape(-1, 784)
            images.append(pixels)
            labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(prefix: Path, images: np.ndarray, labels: np.ndarray) -> None:
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.write(images.tobytes())
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", type=Path, default=Path("data/mnist"))
    parser.add_argument("--tarball", type=Path, help="use a local mnist-1.1.0.tgz instead of npm pack")
    parser.add_argument("--test-fraction", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball or npm_pack(Path(tmp))
        images, labels = load_pool(tarball)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for digit in range(10):
        members = rng.permutation(np.flatnonzero(labels == digit))
        n_test = int(round(len(members) * args.test_fraction))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train", images[train_idx], labels[train_idx])
    write_idx(args.out / "test", images[test_idx], labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {args.out}")


if __name__ == "__main__":
    main()
