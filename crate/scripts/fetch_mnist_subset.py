#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset in IDX format.

The digits come from the `mnist` npm package, which ships 10,000 real MNIST
samples as JSON (pixel intensities already divided by 255 and rounded to three
decimals). They are converted back to bytes and written as

    <out>/images-idx3-ubyte   (magic 0x00000803, N x 28 x 28)
    <out>/labels-idx1-ubyte   (magic 0x00000801, N)

Usage: scripts/fetch_mnist_subset.py [--tarball mnist-1.1.0.tgz] [--out data/mnist-subset]
"""
import argparse
import io
import json
import os
import struct
import subprocess
import tarfile
import tempfile


def fetch_tarball(workdir):
    out = subprocess.run(
        ["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, capture_output=True, text=True
    )
    return os.path.join(workdir, out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball")
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist-subset"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball or fetch_tarball(tmp)
        images, labels = [], []
        with tarfile.open(tarball) as tar:
            for digit in range(10):
                member = tar.extractfile(f"package/src/digits/{digit}.json")
                data = json.load(io.TextIOWrapper(member))["data"]
                assert len(data) % 784 == 0
                for k in range(len(data) // 784):
                    px = data[k * 784:(k + 1) * 784]
                    images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
                    labels.append(digit)

    os.makedirs(args.out, exist_ok=True)
    n = len(labels)
    with open(os.path.join(args.out, "images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for img in images:
            f.write(img)
    with open(os.path.join(args.out, "labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))
    print(f"wrote {n} digits to {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
