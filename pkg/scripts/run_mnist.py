"""MNIST teacher / scratch / vanilla KD / backward KD table over several seeds.

Writes ``mnist.csv`` (one row per seed plus a median row) to ``--out``.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from bkd import experiments, nn
from prepare_mnist import ensure_mnist

COLUMNS = ("teacher", "scratch", "vanilla_kd", "backward_kd")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="data/mnist", help="IDX directory (prepared if empty)")
    ap.add_argument("--out", default="runs/mnist")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--activation", default="relu")
    args = ap.parse_args()

    train, test = experiments.load_mnist(ensure_mnist(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recipe = experiments.MnistRecipe(activation=args.activation)
    rows = []
    for seed in args.seeds:
        t0 = time.time()
        ckpt = out / f"teacher_seed{seed}.bkd"
        if ckpt.exists():
            teacher = nn.load(ckpt)
        else:
            teacher, _ = experiments.train_mnist_teacher(train, test, seed, recipe)
            nn.save(teacher, ckpt)
        res = experiments.mnist_comparison(train, test, seed, recipe, teacher)
        rows.append([seed, *(res[c] for c in COLUMNS)])
        print(f"seed {seed}: " + " ".join(f"{c}={res[c]:.4f}" for c in COLUMNS)
              + f" ({time.time() - t0:.0f}s)", flush=True)
    med = np.median(np.array([r[1:] for r in rows]), axis=0)
    with open(out / "mnist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *COLUMNS])
        w.writerows(rows)
        w.writerow(["median", *med])
    print("median: " + " ".join(f"{c}={v:.4f}" for c, v in zip(COLUMNS, med)))


if __name__ == "__main__":
    main()
