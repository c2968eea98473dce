"""Best-effort MNIST download into a directory of raw IDX files.

Pulls the npm package ``mnist-data`` (it ships the four original IDX files)
from the npm registry, since that is often reachable where the usual mirrors
are not. Usage: python scripts/fetch_mnist.py DEST_DIR
"""

import io
import sys
import tarfile
import urllib.request
from pathlib import Path

URL = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz"
FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def main(dest: str) -> int:
    out = Path(dest)
    out.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(URL, timeout=120) as resp:
        blob = resp.read()
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for name in FILES:
            member = tar.getmember(f"package/data/{name}")
            (out / name).write_bytes(tar.extractfile(member).read())
            print(out / name)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist"))
