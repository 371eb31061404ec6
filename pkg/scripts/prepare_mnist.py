"""Write MNIST IDX files for the experiments.

With ``--from DIR`` the four standard IDX files (gzipped or not) are copied
through the parser and re-emitted, which validates them. Without it, the
5000-image MNIST subset shipped inside ``mlxtend`` is split into a
stratified 4000/1000 train/test pair. That fallback exists because the
full dataset cannot always be downloaded.
"""

import argparse
from pathlib import Path

import numpy as np

from bkd import data

NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(src: Path, stem: str) -> Path:
    for cand in (src / stem, src / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(src / stem)


def from_mlxtend(out: Path, seed: int = 0) -> None:
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    ds = data.Dataset(images.reshape(len(images), -1), y.astype(np.int64), "classification", 10)
    train, test = data.stratified_split(ds, 0.2, seed=seed)
    for split, part in (("train", train), ("test", test)):
        img_name, lab_name = NAMES[split]
        data.write_idx(out / img_name, part.inputs.reshape(-1, 28, 28))
        data.write_idx(out / lab_name, part.labels)


def from_dir(src: Path, out: Path) -> None:
    for img_name, lab_name in NAMES.values():
        images = data.read_idx(_find(src, img_name), data.IDX_IMAGES_MAGIC)
        labels = data.read_idx(_find(src, lab_name), data.IDX_LABELS_MAGIC)
        data.write_idx(out / img_name, images)
        data.write_idx(out / lab_name, labels)


def ensure_mnist(out, src=None) -> Path:
    out = Path(out)
    if all((out / n).exists() for pair in NAMES.values() for n in pair):
        return out
    out.mkdir(parents=True, exist_ok=True)
    if src is not None:
        from_dir(Path(src), out)
    else:
        from_mlxtend(out)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--from", dest="src", default=None,
                    help="directory with the official IDX files")
    args = ap.parse_args()
    out = ensure_mnist(args.out, args.src)
    train = data.load_idx(out / NAMES["train"][0], out / NAMES["train"][1])
    test = data.load_idx(out / NAMES["test"][0], out / NAMES["test"][1])
    print(f"{out}: train {len(train)} x {train.dim}, test {len(test)}")


if __name__ == "__main__":
    main()
