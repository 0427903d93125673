"""Rebuild the IDX fixtures in this directory from the `mnist` npm package.

The npm package (MIT licensed) ships the 10k MNIST test digits as JSON arrays of
intensities rounded to 1/255 steps. This script writes digits 3 and 5 back out
as standard IDX image/label files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 make_mnist_subset.py package/src/digits
"""
import json
import struct
import sys
from pathlib import Path

DIGITS = (3, 5)


def main(src: Path, dst: Path) -> None:
    images, labels = [], []
    for d in DIGITS:
        values = json.loads((src / f"{d}.json").read_text())["data"]
        for i in range(0, len(values), 784):
            images.append(bytes(round(v * 255) for v in values[i:i + 784]))
            labels.append(d)
    with open(dst / "mnist35-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        f.writelines(images)
    with open(dst / "mnist35-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(__file__).resolve().parent)
