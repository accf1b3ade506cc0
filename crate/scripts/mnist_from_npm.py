"""Converts the digits bundled with the npm `mnist` package into IDX files.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 mnist_from_npm.py package/src/digits OUT_DIR
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src, out):
    images, labels = bytearray(), bytearray()
    for digit in range(10):
        raw = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        images.extend(min(255, max(0, round(p * 255))) for p in raw[: count * SIDE * SIDE])
        labels.extend([digit] * count)
    n = len(labels)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, SIDE, SIDE) + images)
    (out / "train-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
