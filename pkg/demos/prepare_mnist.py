"""Build MNIST IDX files for configs/mnist_desk.toml.

The full 60k/10k files are the natural input, but any ``pixels..., label``
CSV of 28x28 digits works.  With no argument the 5000-digit sample bundled
in the ``mlxtend`` wheel is used: 4000 training and 1000 test digits.

    python demos/prepare_mnist.py [digits.csv[.gz]] [--out data/mnist]
"""
import argparse
import importlib.util
import sys
from pathlib import Path

from hyperaug.data import idx_from_csv, load_mnist_idx


def bundled_csv():
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    return path if path.exists() else None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv", nargs="?")
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()
    source = Path(args.csv) if args.csv else bundled_csv()
    if source is None:
        sys.exit("no CSV given and mlxtend is not installed (pip install mlxtend)")
    out = idx_from_csv(source, args.out)
    for name in ("train", "test"):
        ds = load_mnist_idx(out, name)
        print(f"{name}: {len(ds)} images {ds.images.shape[1:]} -> {out}")


if __name__ == "__main__":
    main()
