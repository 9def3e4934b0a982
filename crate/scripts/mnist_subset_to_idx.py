"""Convert a CSV MNIST subset (784 pixel columns then a label column) to IDX files."""

import argparse
import gzip
import struct
from pathlib import Path

import numpy as np


def main():
    p = argparse.ArgumentParser()
    p.add_argument("csv", type=Path)
    p.add_argument("out", type=Path)
    args = p.parse_args()

    opener = gzip.open if args.csv.suffix == ".gz" else open
    with opener(args.csv, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    assert pixels.max() <= 255 and labels.max() <= 9

    args.out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with open(args.out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(args.out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} images to {args.out}")


if __name__ == "__main__":
    main()
