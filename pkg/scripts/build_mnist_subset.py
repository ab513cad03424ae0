"""Build an IDX-format MNIST subset from the `mnist` npm package (10,000 digits).

The package stores each digit class as JSON arrays of 784 grayscale values in
[0, 1] with three decimals; they are mapped back to bytes with round(v * 255).
Examples are shuffled with a fixed PCG32 seed so class order is mixed.

    python scripts/build_mnist_subset.py --out tests/data/mnist_subset
    python scripts/build_mnist_subset.py --tarball mnist-1.1.0.tgz --out "$AKID_DATA_PATH/mnist"
"""
import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from akid.rng import Pcg32
from akid.sensor import MNIST_FILES, write_idx


def read_tarball(path):
    images, labels = [], []
    with tarfile.open(path) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            values = np.array(json.load(tar.extractfile(member))["data"], dtype=np.float64)
            block = values.reshape(-1, 28, 28)
            images.append(np.clip(np.rint(block * 255), 0, 255).astype(np.uint8))
            labels.append(np.full(block.shape[0], digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--tarball", help="path to mnist-<version>.tgz; fetched with `npm pack` when omitted")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True, capture_output=True)
            tarball = next(Path(tmp).glob("mnist-*.tgz"))
        images, labels = read_tarball(tarball)

    order = Pcg32(args.seed, stream=1).permutation(images.shape[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images[order], out / MNIST_FILES["images"])
    write_idx(labels[order], out / MNIST_FILES["labels"])
    print(f"wrote {images.shape[0]} examples to {out}")


if __name__ == "__main__":
    main()
