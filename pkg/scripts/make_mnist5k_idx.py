"""Convert mlxtend's bundled 5000-image MNIST sample into IDX files.

The CSV rows are 784 pixel values followed by the digit label.  Usage:

    python scripts/make_mnist5k_idx.py [path/to/mnist_5k.csv.gz | mlxtend-*.whl] [outdir]

Without arguments the CSV is taken from an installed mlxtend.
"""
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from robust_features.data import save_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv(src):
    if src is None:
        import mlxtend.data.mnist as mn
        src = mn.DATA_PATH
    src = Path(src)
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")


def main(argv):
    src = argv[1] if len(argv) > 1 else None
    out = Path(argv[2] if len(argv) > 2 else "data")
    out.mkdir(parents=True, exist_ok=True)
    table = read_csv(src)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    save_idx(out / "mnist5k-images-idx3-ubyte.gz", images)
    save_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(labels)} images, class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main(sys.argv)
