"""Recipes for the three desk-scale experiments.

Each recipe returns plain dicts of metrics so the CLI, the scripts in
``scripts/`` and the acceptance tests share one definition of the setup.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import data, distill, nn
from .data import Dataset
from .losses import KdHyperParams
from .tensor import Tensor

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
TEACHER_DIMS = (784, 800, 10)
STUDENT_DIMS = (784, 5, 10)


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / (stem + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"missing MNIST file {directory / stem}[.gz]")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    train = data.load_idx(_find(d, MNIST_FILES["train"][0]), _find(d, MNIST_FILES["train"][1]))
    test = data.load_idx(_find(d, MNIST_FILES["test"][0]), _find(d, MNIST_FILES["test"][1]))
    return train, test


# ---------------------------------------------------------------------------
# MNIST


@dataclass
class MnistRecipe:
    teacher_epochs: int = 20
    teacher_lr: float = 0.05
    teacher_momentum: float = 0.9
    activation: str = "relu"
    kd: KdHyperParams = None

    def __post_init__(self):
        if self.kd is None:
            self.kd = KdHyperParams(lam=0.5, temperature=2.0, train_epochs=10, hyper_epochs=3,
                                    perturb_steps=10, perturb_rate=3e-4, learning_rate=0.005,
                                    momentum=0.9, batch_size=64, input_clip=(0.0, 1.0))


def train_mnist_teacher(train: Dataset, test: Optional[Dataset], seed: int,
                        recipe: MnistRecipe):
    params = KdHyperParams(train_epochs=recipe.teacher_epochs, learning_rate=recipe.teacher_lr,
                           momentum=recipe.teacher_momentum, batch_size=64, seed=seed)
    teacher = nn.init_mlp(TEACHER_DIMS, seed, recipe.activation)
    return distill.train_scratch(teacher, train, params, eval_data=test)


def mnist_student(seed: int, activation: str = "relu") -> nn.Network:
    return nn.init_mlp(STUDENT_DIMS, seed + 1, activation)


def mnist_comparison(train: Dataset, test: Dataset, seed: int, recipe: MnistRecipe,
                 teacher: Optional[nn.Network] = None) -> dict:
    """Teacher, scratch student, equal-budget vanilla KD and backward KD accuracies."""
    out = {}
    if teacher is None:
        teacher, rep = train_mnist_teacher(train, test, seed, recipe)
    out["teacher"] = distill.evaluate(teacher, test)["accuracy"]
    p = recipe.kd.replace(seed=seed)
    budget = p.train_epochs * (p.hyper_epochs + 2)
    _, rep = distill.train_scratch(mnist_student(seed, recipe.activation), train, p,
                                   epochs=budget, eval_data=test)
    out["scratch"] = rep.final["accuracy"]
    _, rep = distill.vanilla_kd(mnist_student(seed, recipe.activation), teacher, train, p,
                                eval_data=test)
    out["vanilla_kd"] = rep.final["accuracy"]
    _, rep = distill.backward_kd(mnist_student(seed, recipe.activation), teacher, train, p,
                                 eval_data=test)
    out["backward_kd"] = rep.final["accuracy"]
    out["aux_divergence"] = rep.aux_divergence
    return out


# ---------------------------------------------------------------------------
# synthetic polynomial


@dataclass
class SyntheticRecipe:
    teacher_degree: int = 20
    student_degree: int = 15
    n_points: int = 8
    interval: tuple = (-1.0, 1.0)
    spacing: str = "random"
    grid_points: int = 1000
    kd: KdHyperParams = None

    def __post_init__(self):
        if self.kd is None:
            self.kd = KdHyperParams(lam=1.0, train_epochs=1000, hyper_epochs=3, perturb_steps=30,
                                    perturb_rate=5.0, learning_rate=0.05, batch_size=self.n_points,
                                    input_clip=tuple(self.interval))


def synthetic_teacher(degree: int, seed: int, interval=(-1.0, 1.0)) -> nn.PolynomialModel:
    """Fixed degree-``degree`` polynomial with standard-normal coefficients on scaled x."""
    lo, hi = interval
    coef = np.random.default_rng(seed).normal(size=degree + 1)
    return nn.PolynomialModel(coef, half_width=max(abs(lo), abs(hi)), seed=seed)


def grid_divergence(S, T, interval=(-1.0, 1.0), n: int = 1000) -> float:
    g = np.linspace(interval[0], interval[1], n).reshape(-1, 1)
    s = S.forward(Tensor(g)).data
    t = T.forward(Tensor(g)).data
    return float(np.mean(np.sum((s - t) ** 2, axis=1)))


def synthetic_run(seed: int, recipe: SyntheticRecipe) -> dict:
    T = synthetic_teacher(recipe.teacher_degree, seed, recipe.interval)
    X = data.gen_synthetic(T, recipe.n_points, recipe.interval, seed, recipe.spacing)
    p = recipe.kd.replace(seed=seed)
    hw = max(abs(v) for v in recipe.interval)
    auxes = []
    S_v, rep_v = distill.vanilla_kd(nn.init_polynomial(recipe.student_degree, seed, hw), T, X, p)
    S_b, rep_b = distill.backward_kd(nn.init_polynomial(recipe.student_degree, seed, hw), T, X, p,
                                     on_aux=lambda j, aux: auxes.append(aux))
    return {
        "teacher": T, "data": X, "vanilla": S_v, "backward": S_b, "aux": auxes,
        "vanilla_grid": grid_divergence(S_v, T, recipe.interval, recipe.grid_points),
        "backward_grid": grid_divergence(S_b, T, recipe.interval, recipe.grid_points),
        "reports": (rep_v, rep_b),
    }


# ---------------------------------------------------------------------------
# token task


@dataclass
class TokenRecipe:
    vocab: int = 20
    seq_len: int = 4
    n_train: int = 10000
    n_test: int = 2000
    n_transfer: int = 100
    teacher_dim: int = 8
    teacher_hidden: int = 64
    student_dim: int = 4
    student_hidden: int = 8
    teacher_epochs: int = 30
    teacher_lr: float = 0.05
    student_init: str = "teacher_svd"
    kd: KdHyperParams = None

    def __post_init__(self):
        if self.student_init not in ("teacher_svd", "random"):
            raise ValueError(f"unknown student_init {self.student_init!r}")
        if self.kd is None:
            self.kd = KdHyperParams(lam=0.5, temperature=2.0, train_epochs=20, hyper_epochs=3,
                                    perturb_steps=10, perturb_rate=0.5, learning_rate=0.01,
                                    momentum=0.9, batch_size=32, bkd_output="probs")


def token_data(seed: int, recipe: TokenRecipe) -> tuple[Dataset, Dataset]:
    """Teacher training set and held-out set."""
    train = data.gen_token_task(recipe.vocab, recipe.seq_len, recipe.n_train, seed)
    test = data.gen_token_task(recipe.vocab, recipe.seq_len, recipe.n_test, seed + 10_000)
    return train, test


def token_transfer(train: Dataset, recipe: TokenRecipe) -> Dataset:
    """The student distills on a small transfer set (the first ``n_transfer`` rows)."""
    return train.take(np.arange(min(recipe.n_transfer, len(train))))


def token_teacher(train: Dataset, test: Optional[Dataset], seed: int, recipe: TokenRecipe):
    T = nn.init_embedding(recipe.vocab, recipe.teacher_dim, recipe.seq_len,
                          [recipe.teacher_hidden], 2, seed)
    p = KdHyperParams(train_epochs=recipe.teacher_epochs, learning_rate=recipe.teacher_lr,
                      momentum=0.9, batch_size=32, seed=seed)
    return distill.train_scratch(T, train, p, eval_data=test)


def teacher_svd_embedding(W_T: np.ndarray, dim: int) -> np.ndarray:
    """``U_d^T W_T``: the teacher's token vectors in its top-``dim`` singular subspace."""
    U, _, _ = np.linalg.svd(W_T, full_matrices=False)
    return U[:, :dim].T @ W_T


def token_student(seed: int, recipe: TokenRecipe,
                  teacher: Optional[nn.EmbeddingModel] = None) -> nn.EmbeddingModel:
    S = nn.init_embedding(recipe.vocab, recipe.student_dim, recipe.seq_len,
                          [recipe.student_hidden], 2, seed + 1)
    if recipe.student_init == "teacher_svd":
        if teacher is None:
            raise ValueError("teacher_svd initialization needs the teacher")
        S.W.data = teacher_svd_embedding(teacher.W.data, recipe.student_dim)
    return S


def token_run(seed: int, recipe: TokenRecipe, teacher=None) -> dict:
    train, test = token_data(seed, recipe)
    if teacher is None:
        teacher, _ = token_teacher(train, test, seed, recipe)
    p = recipe.kd.replace(seed=seed)
    transfer = token_transfer(train, recipe)
    auxes = []
    _, rep_v = distill.vanilla_kd_embedding(token_student(seed, recipe, teacher), teacher,
                                            transfer, p, eval_data=test)
    _, rep_b = distill.backward_kd_embedding(token_student(seed, recipe, teacher), teacher,
                                             transfer, p, eval_data=test,
                                             on_aux=lambda j, aux: auxes.append(aux))
    return {
        "teacher": distill.evaluate(teacher, test)["accuracy"],
        "vanilla": rep_v.final["accuracy"],
        "backward": rep_b.final["accuracy"],
        "aux": auxes,
        "reports": (rep_v, rep_b),
    }


def output_root() -> Path:
    return Path(os.environ.get("BKD_OUTPUT_ROOT", "runs"))
