"""Download the four MNIST IDX files into <root>/mnist.

Usage: python scripts/fetch_mnist.py [--root DIR] [--base-url URL]

The loader reads the gzipped files directly, so nothing is unpacked.
"""

import argparse
import os
import sys
import urllib.request
from pathlib import Path

BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def _present(dest: Path, name: str) -> bool:
    stem = name.removesuffix(".gz")
    # the loader also accepts the dotted variant, e.g. train-images.idx3-ubyte
    dotted = stem.replace("-idx", ".idx")
    return any((dest / n).exists() for n in (name, stem, dotted, dotted + ".gz"))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--root", default=os.environ.get("UKIE_DATA_ROOT", "data"))
    p.add_argument("--base-url", default=BASE_URL)
    args = p.parse_args(argv)
    dest = Path(args.root) / "mnist"
    dest.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        target = dest / name
        if _present(dest, name):
            print(f"have {target}")
            continue
        tmp = target.with_suffix(".part")
        print(f"fetching {args.base_url}{name}")
        urllib.request.urlretrieve(args.base_url + name, tmp)
        tmp.rename(target)
    return 0


if __name__ == "__main__":
    sys.exit(main())
