"""Regenerate tests/fixtures/mnist100 from a full MNIST directory.

Keeps the first 100 items of each split, gzip-compressed.
Usage: python scripts/make_fixture.py MNIST_DIR
"""

import sys
from pathlib import Path

from sbnq.data import MNIST_FILES, load_mnist_dir, write_idx

N = 100


def main(src: str) -> int:
    out = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "mnist100"
    out.mkdir(parents=True, exist_ok=True)
    for split, (img_name, lab_name) in MNIST_FILES.items():
        ds = load_mnist_dir(src, split)
        write_idx(out / f"{img_name}.gz", ds.images[:N, 0])
        write_idx(out / f"{lab_name}.gz", ds.labels[:N])
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1]))
