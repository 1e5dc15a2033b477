#!/usr/bin/env python3
"""Builds IDX files from the digits bundled in the `mnist` npm package.

The npm package stores 10000 MNIST digits as grayscale values rounded to three
decimals, one JSON file per class. Rounding back through 255 recovers the
original bytes exactly. The samples are shuffled with a fixed seed and split
into train/test IDX pairs.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_idx.py package/src/digits data/mnist
"""
import argparse
import json
import os
import random
import struct


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20180101)
    args = ap.parse_args()

    samples = []
    for label in range(10):
        with open(os.path.join(args.digits_dir, f"{label}.json")) as f:
            flat = json.load(f)["data"]
        if len(flat) % 784:
            raise SystemExit(f"{label}.json: length {len(flat)} not a multiple of 784")
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i:i + 784]]
            samples.append((px, label))

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test], samples[args.test:]
    os.makedirs(args.out_dir, exist_ok=True)
    for name, part in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte"), [s[0] for s in part])
        write_idx_labels(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte"), [s[1] for s in part])
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out_dir}")


if __name__ == "__main__":
    main()
