"""Build the desk-scale MNIST subset used by the experiments.

The source is the ``mnist`` npm package (v1.1.0, MIT), which bundles 10000
MNIST digits as JSON (pixel/255 rounded to three decimals).  The script
fetches it with ``npm pack`` unless ``--tarball`` points at a local copy,
restores the 8-bit pixels and writes a 5000 train / 1000 test split (test
stratified at 100 per class) as gzipped IDX files under ``data/mnist5k``.
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from crossbar_sim.data import write_idx
from crossbar_sim.numerics import RandomStream

PACKAGE = "mnist@1.1.0"


def fetch_tarball(workdir: Path) -> Path:
    out = subprocess.run(["npm", "pack", PACKAGE], cwd=workdir, check=True, capture_output=True, text=True)
    return workdir / out.stdout.strip().splitlines()[-1]


def read_digits(tarball: Path) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    with tarfile.open(tarball) as tar:
        for c in range(10):
            member = tar.extractfile(f"package/src/digits/{c}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            img = np.rint(flat * 255).clip(0, 255).astype(np.uint8).reshape(-1, 784)
            xs.append(img)
            ys.append(np.full(len(img), c, dtype=np.uint8))
    return np.concatenate(xs), np.concatenate(ys)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tarball", type=Path, help="local mnist-1.1.0.tgz (otherwise fetched with npm)")
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball or fetch_tarball(Path(tmp))
        x, y = read_digits(tarball)

    stream = RandomStream(args.seed, "mnist-split")
    test = []
    for c in range(10):
        members = np.flatnonzero(y == c)
        test.extend(members[stream.permutation(len(members))[: args.test_per_class]])
    test = np.asarray(test)
    rest = np.setdiff1d(np.arange(len(y)), test)
    train = rest[stream.permutation(len(rest))[: args.n_train]]
    test = test[stream.permutation(len(test))]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", x[train].reshape(-1, 28, 28))
    write_idx(out / "train-labels-idx1-ubyte.gz", y[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", x[test].reshape(-1, 28, 28))
    write_idx(out / "t10k-labels-idx1-ubyte.gz", y[test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main()
