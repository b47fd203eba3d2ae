#!/usr/bin/env python3
# Copyright 2026 The droaug Authors
# SPDX-License-Identifier: Apache-2.0
"""Builds a small MNIST subset in gzip'd IDX format from package-manager mirrors.

Train split: the 10,000 digits bundled with the npm package `mnist`.
Test split:  the 5,000 digits bundled with the Python package `mlxtend`.

The two sources are disjoint. Output goes to data/mnist-subset/.
"""
import argparse
import glob
import gzip
import io
import json
import os
import struct
import subprocess
import tarfile
import tempfile
import zipfile

import numpy as np


def write_idx(path, images, labels_path, labels):
    n, rows, cols = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(labels_path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())


def npm_digits(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = glob.glob(os.path.join(workdir, "mnist-*.tgz"))[0]
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for d in range(10):
            member = tar.extractfile(f"package/src/digits/{d}.json")
            data = np.array(json.load(member)["data"], dtype=np.float64).reshape(-1, 784)
            images.append(np.rint(data * 255.0))
            labels += [d] * len(data)
    images = np.concatenate(images).reshape(-1, 28, 28)
    labels = np.array(labels)
    # Interleave classes deterministically so prefixes stay balanced.
    order = np.random.default_rng(0).permutation(len(labels))
    return images[order], labels[order]


def mlxtend_digits(workdir):
    subprocess.run(["pip", "download", "--no-deps", "-q", "-d", workdir, "mlxtend==0.24.0"],
                   check=True)
    whl = glob.glob(os.path.join(workdir, "mlxtend-*.whl"))[0]
    raw = zipfile.ZipFile(whl).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    order = np.random.default_rng(1).permutation(len(table))
    table = table[order]
    return table[:, :-1].reshape(-1, 28, 28), table[:, -1]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data",
                                                      "mnist-subset"))
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        xtr, ytr = npm_digits(tmp)
        xte, yte = mlxtend_digits(tmp)
    write_idx(os.path.join(args.out, "train-images-idx3-ubyte.gz"), xtr,
              os.path.join(args.out, "train-labels-idx1-ubyte.gz"), ytr)
    write_idx(os.path.join(args.out, "t5k-images-idx3-ubyte.gz"), xte,
              os.path.join(args.out, "t5k-labels-idx1-ubyte.gz"), yte)
    print(f"train {xtr.shape} test {xte.shape} -> {args.out}")


if __name__ == "__main__":
    main()
