"""Few-sample distillation on a stratified MNIST subset.

The teacher sees the full training set; both students see only ``--fraction``
of it. Backward KD keeps every round's auxiliary samples (accumulate mode).
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from bkd import data, distill, experiments, nn
from prepare_mnist import ensure_mnist


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="data/mnist")
    ap.add_argument("--out", default="runs/few_sample")
    ap.add_argument("--fraction", type=float, default=0.1)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--teacher-dir", default="runs/mnist",
                    help="reuse teacher_seed{n}.bkd from here when present")
    args = ap.parse_args()

    train, test = experiments.load_mnist(ensure_mnist(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recipe = experiments.MnistRecipe()
    rows = []
    for seed in args.seeds:
        ckpt = Path(args.teacher_dir) / f"teacher_seed{seed}.bkd"
        if ckpt.exists():
            T = nn.load(ckpt)
        else:
            T, _ = experiments.train_mnist_teacher(train, test, seed, recipe)
        X = data.subsample(train, args.fraction, seed, stratified=True)
        p = recipe.kd.replace(seed=seed, aux_retention="accumulate")
        _, rv = distill.vanilla_kd(experiments.mnist_student(seed), T, X, p, eval_data=test)
        _, rb = distill.backward_kd(experiments.mnist_student(seed), T, X, p, eval_data=test)
        rows.append([seed, len(X), rv.final["accuracy"], rb.final["accuracy"]])
        print(f"seed {seed}: n={len(X)} vanilla={rows[-1][2]:.4f} backward={rows[-1][3]:.4f}",
              flush=True)
    med = np.median(np.array([r[2:] for r in rows]), axis=0)
    with open(out / "few_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "n_train", "vanilla_kd", "backward_kd"])
        w.writerows(rows)
        w.writerow(["median", "", *med])
    print(f"median: vanilla={med[0]:.4f} backward={med[1]:.4f}")


if __name__ == "__main__":
    main()
