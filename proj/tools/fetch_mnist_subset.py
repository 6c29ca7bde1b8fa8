#!/usr/bin/env python3
"""Build IDX-format MNIST files from the 10k-digit subset shipped in the
`mnist` npm package (MIT licensed, github.com/cazala/mnist).

The npm package stores pixels as 3-decimal floats in [0, 1]; they are mapped
back to bytes with round(v * 255). Per class, the first 80% of the digits go
to the training files and the rest to the t10k files.

Usage: fetch_mnist_subset.py OUT_DIR [--package-dir DIR]
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

TRAIN_FRACTION = 0.8


def unpack_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(workdir.glob("mnist-*.tgz"))
    with tarfile.open(tgz) as tar:
        tar.extractall(workdir)
    return workdir / "package"


def write_idx(path: pathlib.Path, images, labels_path: pathlib.Path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--package-dir", default=None)
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        pkg = (pathlib.Path(args.package_dir) if args.package_dir
               else unpack_package(pathlib.Path(tmp)))
        train, test = [], []
        for digit in range(10):
            raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
            count = len(raw) // 784
            images = [[min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
                      for i in range(count)]
            cut = int(count * TRAIN_FRACTION)
            train += [(img, digit) for img in images[:cut]]
            test += [(img, digit) for img in images[cut:]]

    # interleave classes so that file order is not sorted by label
    def interleave(rows):
        by_class = [[r for r in rows if r[1] == d] for d in range(10)]
        merged = []
        for i in range(max(len(c) for c in by_class)):
            merged += [c[i] for c in by_class if i < len(c)]
        return merged

    for name, rows in (("train", interleave(train)), ("t10k", interleave(test))):
        write_idx(out / f"{name}-images-idx3-ubyte", [r[0] for r in rows],
                  out / f"{name}-labels-idx1-ubyte", [r[1] for r in rows])
        print(f"{name}: {len(rows)} images")


if __name__ == "__main__":
    main()
