#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the `mnist` npm package into
gzipped IDX files (train / t10k) under data/mnist/.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/prepare_mnist.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

TRAIN_FRACTION = 0.8


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    per_class = []
    for digit in range(10):
        values = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(values) % 784 == 0
        images = [
            bytes(round(v * 255) for v in values[i : i + 784])
            for i in range(0, len(values), 784)
        ]
        per_class.append(images)

    splits = {"train": [], "t10k": []}
    for digit, images in enumerate(per_class):
        cut = int(len(images) * TRAIN_FRACTION)
        splits["train"].append([(img, digit) for img in images[:cut]])
        splits["t10k"].append([(img, digit) for img in images[cut:]])

    for name, groups in splits.items():
        # round-robin interleave so the files are not sorted by class
        merged = []
        longest = max(len(g) for g in groups)
        for i in range(longest):
            for g in groups:
                if i < len(g):
                    merged.append(g[i])
        write_idx(
            dst / f"{name}-images-idx3-ubyte.gz",
            0x00000803,
            [len(merged), 28, 28],
            b"".join(img for img, _ in merged),
        )
        write_idx(
            dst / f"{name}-labels-idx1-ubyte.gz",
            0x00000801,
            [len(merged)],
            bytes(label for _, label in merged),
        )
        print(f"{name}: {len(merged)} samples")


if __name__ == "__main__":
    main()
