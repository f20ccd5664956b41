#!/usr/bin/env python3
"""Rebuild data/mnist10k/ from the 10,000 MNIST digits bundled in the npm
`mnist` package (v1.1.0, MIT).

The package stores each digit as 784 floats rounded to 3 decimals of
byte/255; rounding value*255 recovers the original bytes exactly.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/build_mnist10k.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

SEED = 20240501
N_TRAIN = 8000


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        px = np.rint(np.asarray(raw, dtype=np.float64).reshape(-1, 784) * 255)
        images.append(px.astype(np.uint8))
        labels += [digit] * len(px)
    x = np.vstack(images)
    y = np.asarray(labels, dtype=np.uint8)
    perm = np.random.default_rng(SEED).permutation(len(y))
    x, y = x[perm], y[perm]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, N_TRAIN)), ("t10k", slice(N_TRAIN, None))):
        xs, ys = x[sl], y[sl]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(ys), 28, 28), xs.tobytes())
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(ys),), ys.tobytes())
        print(name, len(ys), np.bincount(ys, minlength=10).tolist())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
