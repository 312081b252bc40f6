#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

The package ships 10,000 MNIST digits (about 1,000 per class) as JSON arrays of
x/255 values. This writes desk-images-idx3-ubyte / desk-labels-idx1-ubyte.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist-desk
"""
import json
import pathlib
import struct
import sys


def main(src: str, dst: str) -> None:
    src_dir, out = pathlib.Path(src), pathlib.Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    pixels, labels = bytearray(), bytearray()
    for digit in range(10):
        values = json.loads((src_dir / f"{digit}.json").read_text())["data"]
        if len(values) % 784:
            raise SystemExit(f"{digit}.json: length {len(values)} is not a multiple of 784")
        pixels.extend(round(v * 255) for v in values)
        labels.extend([digit] * (len(values) // 784))
    n = len(labels)
    (out / "desk-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(pixels))
    (out / "desk-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    main(sys.argv[1], sys.argv[2])
