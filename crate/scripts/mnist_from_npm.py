#!/usr/bin/env python3
"""Build gzipped IDX files from the 10,000 MNIST digits bundled in the npm `mnist` package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The digits are shuffled with a fixed seed; the first 1000 become the t10k
split and the remaining 9000 the train split.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for label in range(10):
        raw = json.loads((src / f"{label}.json").read_text())["data"]
        for i in range(len(raw) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            samples.append((px, label))
    random.Random(20200101).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    for name, part in (("t10k", samples[:1000]), ("train", samples[1000:])):
        with gzip.GzipFile(dst / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), 28, 28))
            for px, _ in part:
                f.write(px)
        with gzip.GzipFile(dst / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(lbl for _, lbl in part))
        print(f"{name}: {len(part)} images")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
