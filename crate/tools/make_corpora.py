#!/usr/bin/env python3
"""Write the two desk-scale digit corpora used by the experiments as IDX files.

digits-a: the 5000-image MNIST subset bundled inside the mlxtend wheel.
digits-b: the UCI optical digits bundled with scikit-learn (8x8, 0..16),
          bilinearly upsampled into a 20x20 box centred on a 28x28 canvas.

Usage: make_corpora.py <mlxtend wheel> <out dir>
"""
import gzip
import io
import os
import struct
import sys
import zipfile

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def write_split(out, name, images, labels, n_test, seed):
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    d = os.path.join(out, name)
    os.makedirs(d, exist_ok=True)
    write_idx_images(os.path.join(d, "train-images.idx3-ubyte"), images[n_test:])
    write_idx_labels(os.path.join(d, "train-labels.idx1-ubyte"), labels[n_test:])
    write_idx_images(os.path.join(d, "test-images.idx3-ubyte"), images[:n_test])
    write_idx_labels(os.path.join(d, "test-labels.idx1-ubyte"), labels[:n_test])


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    mnist = table[:, :-1].reshape(-1, 28, 28)
    write_split(out, "digits-a", mnist, table[:, -1].astype(int), 1000, 0)

    optical = load_digits()
    up = []
    for img in optical.images:
        small = Image.fromarray((img * (255.0 / 16.0)).astype(np.float32), mode="F")
        big = np.asarray(small.resize((20, 20), Image.BILINEAR))
        canvas = np.zeros((28, 28), dtype=np.float32)
        canvas[4:24, 4:24] = big
        up.append(np.clip(np.rint(canvas), 0, 255))
    write_split(out, "digits-b", np.stack(up), optical.target, 400, 0)


if __name__ == "__main__":
    main()
