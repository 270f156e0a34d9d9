"""Write a stratified MNIST train/test split as gzipped IDX files.

The source is the 5000-image MNIST sample (500 per digit) that ships with
mlxtend, the only copy of MNIST available offline. The split is
deterministic: 400 images per digit for training, 100 for testing, each
set shuffled with a fixed seed.

    python scripts/make_mnist_subset.py data/mnist5k
"""
import argparse
import gzip
from importlib import resources
from pathlib import Path

import numpy as np

from dessilbi.harness.data import write_idx

FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz",
         "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz")


def read_source():
    src = resources.files("mlxtend") / "data" / "data" / "mnist_5k.csv.gz"
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)


def split(labels, n_train_per_class, seed=20240601):
    rng = np.random.Generator(np.random.PCG64(seed))
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train.append(idx[:n_train_per_class])
        test.append(idx[n_train_per_class:])
    train, test = np.concatenate(train), np.concatenate(test)
    return train[rng.permutation(len(train))], test[rng.permutation(len(test))]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args(argv)
    images, labels = read_source()
    tr, te = split(labels, args.train_per_class)
    args.out.mkdir(parents=True, exist_ok=True)
    arrays = (images[tr].reshape(-1, 28, 28), labels[tr], images[te].reshape(-1, 28, 28), labels[te])
    for name, arr in zip(FILES, arrays):
        write_idx(args.out / name, arr)
        print(args.out / name, arr.shape)


if __name__ == "__main__":
    main()
