#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

The npm package (https://github.com/cazala/mnist, MIT) ships 10,000 MNIST
digits as per-class JSON arrays of 28x28 floats rounded to three decimals.
Multiplying by 255 and rounding recovers the original bytes exactly.

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The first 80% of each class goes to the training split, the rest to the
test split; both are then shuffled with a fixed seed.
"""
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
PIXELS = SIDE * SIDE
TRAIN_FRACTION = 0.8
SEED = 20211206


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(data) // PIXELS
        samples = []
        for i in range(count):
            chunk = data[i * PIXELS:(i + 1) * PIXELS]
            samples.append(([int(round(v * 255)) for v in chunk], digit))
        cut = int(count * TRAIN_FRACTION)
        train.extend(samples[:cut])
        test.extend(samples[cut:])
    rng = random.Random(SEED)
    rng.shuffle(train)
    rng.shuffle(test)
    for name, split in (("train", train), ("t10k", test)):
        write_images(dst / f"{name}-images-idx3-ubyte", [s[0] for s in split])
        write_labels(dst / f"{name}-labels-idx1-ubyte", [s[1] for s in split])
        print(f"{name}: {len(split)} samples")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
