#!/usr/bin/env python3
"""Build the desk-scale MNIST set shipped in data/mnist-desk.

Source: the `mnist` npm package (v1.1.0), whose src/digits/<d>.json files
hold the first 10k MNIST training digits as grayscale values rounded to three
decimals; round(v * 255) recovers the original bytes.

Each class is split 80/20 in file order, then both splits are shuffled with
a fixed seed and written as gzipped IDX files.

usage: make_desk_mnist.py <package-dir> <out-dir>
"""

import gzip
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    # mtime=0 keeps the archives byte-reproducible.
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
        f.write(header + payload)


def main(pkg, out):
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        images = [bytes(round(v * 255) for v in flat[i : i + 784]) for i in range(0, len(flat), 784)]
        cut = round(0.8 * len(images))
        train += [(img, digit) for img in images[:cut]]
        test += [(img, digit) for img in images[cut:]]
    rng = random.Random(0)
    rng.shuffle(train)
    rng.shuffle(test)
    os.makedirs(out, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), 0x803, (len(rows), 28, 28), b"".join(r[0] for r in rows))
        write_idx(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), 0x801, (len(rows),), bytes(r[1] for r in rows))
        print(name, len(rows))


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
