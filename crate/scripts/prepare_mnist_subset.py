#!/usr/bin/env python3
"""Build an MNIST-format (IDX, gzip) subset from the digits bundled in the npm
`mnist` package (10,000 28x28 digits stored as JSON floats in [0,1]).

Usage:
    python3 scripts/prepare_mnist_subset.py [--package-dir DIR] [--out data/mnist]

Without --package-dir the script runs `npm pack mnist@1.1.0` in a temp dir.
The split is stratified: per class, a seeded shuffle puts 80% in train and
20% in test. Output file names follow the public MNIST convention so the
regular loader reads them unchanged.
"""
import argparse
import gzip
import json
import os
import struct
import subprocess
import tarfile
import tempfile

import numpy as np

SIDE = 28
TRAIN_FRACTION = 0.8
SEED = 0


def fetch_package(tmp):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
        tar.extractall(tmp)
    return os.path.join(tmp, "package")


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package-dir")
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package_dir or fetch_package(tmp)
        rng = np.random.default_rng(SEED)
        train_x, train_y, test_x, test_y = [], [], [], []
        for digit in range(10):
            with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
                raw = np.asarray(json.load(f)["data"], dtype=np.float64)
            imgs = np.rint(raw.reshape(-1, SIDE * SIDE) * 255.0).clip(0, 255)
            order = rng.permutation(len(imgs))
            cut = int(round(len(imgs) * TRAIN_FRACTION))
            train_x.append(imgs[order[:cut]])
            train_y.append(np.full(cut, digit))
            test_x.append(imgs[order[cut:]])
            test_y.append(np.full(len(imgs) - cut, digit))

    def interleave(xs, ys):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        perm = rng.permutation(len(y))
        return x[perm], y[perm]

    trx, trY = interleave(train_x, train_y)
    tex, teY = interleave(test_x, test_y)
    os.makedirs(args.out, exist_ok=True)
    write_idx_images(os.path.join(args.out, "train-images-idx3-ubyte.gz"), trx)
    write_idx_labels(os.path.join(args.out, "train-labels-idx1-ubyte.gz"), trY)
    write_idx_images(os.path.join(args.out, "t10k-images-idx3-ubyte.gz"), tex)
    write_idx_labels(os.path.join(args.out, "t10k-labels-idx1-ubyte.gz"), teY)
    print(f"train {len(trY)} test {len(teY)} -> {args.out}")


if __name__ == "__main__":
    main()
