"""Training orchestration: scratch training, vanilla KD and backward KD.

The backward-KD pipeline alternates a maximization step (auxiliary samples
from :mod:`bkd.auxgen`) with a minimization step (vanilla KD on the original
data plus the auxiliary set)::

    pre-train    e epochs on X
    h times:     X' <- ascend(X);  e epochs on X u X'
    fine-tune    e epochs on X

All phases share one optimizer and one shuffling generator seeded from
``params.seed``, so a run with ``h = 0`` replays a ``2e``-epoch vanilla run
exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as tn
from .auxgen import (AuxiliaryBatch, compute_transform, frozen, generate_auxiliary,
                     generate_auxiliary_embedding)
from .data import Dataset
from .losses import (KdHyperParams, cross_entropy, kd_loss_alpha, kd_loss_lambda,
                     kd_loss_regression, mse)
from .nn import EmbeddingModel, Model, save
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainSet:
    """Rows a student is fitted on: its inputs, teacher outputs and labels."""

    inputs: np.ndarray
    teacher_out: Optional[np.ndarray]
    labels: np.ndarray
    is_aux: np.ndarray
    tokens: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.inputs)

    @staticmethod
    def concat(parts: Sequence["TrainSet"]) -> "TrainSet":
        if len(parts) == 1:
            return parts[0]
        tokens = None
        width = next((p.tokens.shape[1] for p in parts if p.tokens is not None), None)
        if width is not None:
            # rows without token ids (auxiliary embeddings) get a zero placeholder
            tokens = np.concatenate([np.zeros((len(p), width), dtype=np.int64)
                                     if p.tokens is None else p.tokens for p in parts])
        return TrainSet(np.concatenate([p.inputs for p in parts]),
                        np.concatenate([p.teacher_out for p in parts]),
                        np.concatenate([p.labels for p in parts]),
                        np.concatenate([p.is_aux for p in parts]), tokens)


@dataclass
class TrainReport:
    params: dict
    epoch_phase: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    epoch_metric: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    aux_divergence: list = field(default_factory=list)
    transform_residual: list = field(default_factory=list)
    optimizer_steps: int = 0
    final: dict = field(default_factory=dict)
    seconds: float = 0.0
    metric_name: str = "accuracy"

    @property
    def epochs(self) -> int:
        return len(self.epoch_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "phase", "rows", "train_loss", self.metric_name])
        for i, (ph, n, loss, m) in enumerate(zip(self.epoch_phase, self.epoch_rows,
                                                  self.epoch_loss, self.epoch_metric)):
            w.writerow([i + 1, ph, n, repr(loss), "" if m is None else repr(m)])
        return buf.getvalue()

    def summary(self) -> str:
        parts = [f"epochs={self.epochs}", f"steps={self.optimizer_steps}"]
        parts += [f"{k}={v:.6g}" for k, v in sorted(self.final.items())]
        if self.aux_divergence:
            base, aux = self.aux_divergence[-1]
            parts.append(f"aux_divergence={base:.6g}->{aux:.6g}")
        return " ".join(parts)

    def fingerprint(self) -> tuple:
        """Everything except wall-clock time, for determinism checks."""
        return (self.epoch_phase, self.epoch_loss, self.epoch_metric, self.epoch_rows,
                self.aux_divergence, self.transform_residual, self.optimizer_steps,
                sorted(self.final.items()))


class SGD:
    """Mini-batch SGD with optional heavy-ball momentum."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.momentum:
                self.velocity[i] = self.momentum * self.velocity[i] + g
                g = self.velocity[i]
            p.data = p.data - self.lr * g
        self.steps += 1


# ---------------------------------------------------------------------------
# evaluation


def _student_fn(model: Model) -> Callable[[Tensor], Tensor]:
    if isinstance(model, EmbeddingModel):
        return model.forward_from_embedding
    return model.forward


def predict(model: Model, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    with frozen(model):
        out = []
        for i in range(0, len(inputs), chunk):
            xb = inputs[i:i + chunk]
            if isinstance(model, EmbeddingModel) and np.issubdtype(xb.dtype, np.integer):
                out.append(model.forward(xb).data)
            else:
                out.append(_student_fn(model)(Tensor(xb)).data)
    return np.concatenate(out)


def evaluate(model: Model, data: Dataset) -> dict:
    """Accuracy and mean cross-entropy for classifiers, MSE for regressors."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    out = predict(model, data.inputs)
    if data.kind == "regression":
        return {"mse": float(mse(Tensor(out), Tensor(data.targets())).item())}
    acc = float(np.mean(out.argmax(axis=1) == data.labels))
    loss = cross_entropy(tn.softmax(Tensor(out), axis=-1), data.labels).item()
    return {"accuracy": acc, "loss": float(loss)}


def _metric(model: Model, data: Optional[Dataset]):
    if data is None:
        return None
    m = evaluate(model, data)
    return m["mse"] if data.kind == "regression" else m["accuracy"]


# ---------------------------------------------------------------------------
# core epoch loop


def _token_batch_loss(model: EmbeddingModel, xb, tokb, tb, yb, auxb,
                      params: KdHyperParams, mode: str) -> Tensor:
    # original rows go through the token lookup so W_S learns; auxiliary rows are
    # free embedding vectors and only reach the head
    if mode == "supervised":
        return cross_entropy(tn.softmax(model.forward(tokb), axis=-1), yb)
    soft_only = params.aux_labels == "soft_only"
    parts = []
    o, a = np.flatnonzero(~auxb), np.flatnonzero(auxb)
    if o.size:
        parts.append((o.size, _kd(model.forward(tokb[o]), Tensor(tb[o]), yb[o], params,
                                  params.lam)))
    if a.size:
        s = model.forward_from_embedding(Tensor(xb[a]))
        parts.append((a.size, _kd(s, Tensor(tb[a]), None if soft_only else yb[a], params,
                                  1.0 if soft_only else params.lam)))
    if len(parts) == 1:
        return parts[0][1]
    n = len(xb)
    return tn.add(tn.scale(parts[0][1], parts[0][0] / n), tn.scale(parts[1][1], parts[1][0] / n))


def _batch_loss(model: Model, xb: np.ndarray, tb, yb, auxb, params: KdHyperParams,
                mode: str, tokb=None) -> Tensor:
    if tokb is not None:
        return _token_batch_loss(model, xb, tokb, tb, yb, auxb, params, mode)
    s = _student_fn(model)(Tensor(xb))
    if mode == "supervised":
        if yb.dtype.kind == "f":
            return mse(s, Tensor(yb))
        return cross_entropy(tn.softmax(s, axis=-1), yb)
    t = Tensor(tb)
    if mode == "regression":
        return kd_loss_regression(s, t, Tensor(yb), params.lam)
    if params.aux_labels == "soft_only" and auxb.any() and not auxb.all():
        o, a = np.flatnonzero(~auxb), np.flatnonzero(auxb)
        lo = _kd(_rows(s, o), Tensor(tb[o]), yb[o], params, params.lam)
        la = _kd(_rows(s, a), Tensor(tb[a]), None, params, 1.0)
        n = len(xb)
        return tn.add(tn.scale(lo, len(o) / n), tn.scale(la, len(a) / n))
    if params.aux_labels == "soft_only" and auxb.all():
        return _kd(s, t, None, params, 1.0)
    return _kd(s, t, yb, params, params.lam)


def _rows(s: Tensor, rows: np.ndarray) -> Tensor:
    return tn.gather_rows(s, rows)


def _kd(s: Tensor, t: Tensor, y, params: KdHyperParams, lam: float) -> Tensor:
    if params.kd_form == "alpha":
        alpha = 0.0 if y is None else params.alpha
        return kd_loss_alpha(s, t, y, alpha, params.temperature)
    return kd_loss_lambda(s, t, y, lam, params.temperature)


def run_epochs(model: Model, data: TrainSet, params: KdHyperParams, epochs: int,
               rng: np.random.Generator, opt: SGD, report: TrainReport, phase: str,
               mode: str = "kd", eval_data: Optional[Dataset] = None,
               checkpoint_dir=None) -> None:
    if len(data) == 0:
        raise ValueError("training set is empty")
    trainable = opt.params
    n, b = len(data), params.batch_size
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, b):
            idx = order[start:start + b]
            tb = None if data.teacher_out is None else data.teacher_out[idx]
            tokb = None if data.tokens is None else data.tokens[idx]
            try:
                loss = _batch_loss(model, data.inputs[idx], tb, data.labels[idx],
                                   data.is_aux[idx], params, mode, tokb)
                grads = tn.grad(loss, trainable)
            except NumericError as exc:
                raise TrainingDiverged(f"{phase}: non-finite value at epoch "
                                       f"{report.epochs + 1}, step {opt.steps}: {exc}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"{phase}: non-finite gradient at step {opt.steps}")
            opt.step(grads)
            total += loss.item() * len(idx)
        report.epoch_phase.append(phase)
        report.epoch_loss.append(total / n)
        report.epoch_rows.append(n)
        report.epoch_metric.append(_metric(model, eval_data))
    report.optimizer_steps = opt.steps
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save(model, Path(checkpoint_dir) / f"student_{phase}.bkd")


def _finish(model: Model, report: TrainReport, eval_data: Optional[Dataset], t0: float):
    if eval_data is not None:
        report.final = evaluate(model, eval_data)
    report.seconds = time.perf_counter() - t0
    return model, report


def _new_report(params: KdHyperParams, kind: str, regression: bool, **extra) -> TrainReport:
    echo = params.as_dict()
    echo.update(pipeline=kind, **extra)
    return TrainReport(echo, metric_name="mse" if regression else "accuracy")


# ---------------------------------------------------------------------------
# training sets


def _teacher_outputs(T: Model, inputs: np.ndarray) -> np.ndarray:
    return predict(T, inputs)


def base_trainset(X: Dataset, T: Optional[Model]) -> TrainSet:
    inputs = X.inputs.astype(np.float64)
    t_out = None if T is None else _teacher_outputs(T, inputs)
    labels = X.targets() if X.kind == "regression" else X.labels
    return TrainSet(inputs, t_out, labels, np.zeros(len(X), dtype=bool))


def aux_trainset(aux: AuxiliaryBatch, regression: bool) -> TrainSet:
    labels = aux.teacher_logits.copy() if regression else aux.pseudo_labels
    return TrainSet(aux.inputs, aux.teacher_logits, labels, np.ones(len(aux), dtype=bool))


def expected_steps(n: int, params: KdHyperParams, pipeline: str = "backward") -> int:
    """Optimizer steps implied by the schedule for ``n`` original rows."""
    e, h, b = params.train_epochs, params.hyper_epochs, params.batch_size
    if pipeline == "vanilla":
        return e * (h + 2) * math.ceil(n / b)
    steps = 2 * e * math.ceil(n / b)
    for j in range(1, h + 1):
        rows = n * (1 + (j if params.aux_retention == "accumulate" else 1))
        steps += e * math.ceil(rows / b)
    return steps


def _check_ready(X: Dataset) -> None:
    if len(X) == 0:
        raise ValueError("training data is empty")


# ---------------------------------------------------------------------------
# public pipelines


def train_scratch(model: Model, data: Dataset, params: KdHyperParams,
                  epochs: Optional[int] = None, eval_data: Optional[Dataset] = None,
                  checkpoint_dir=None):
    """Plain supervised training (cross-entropy or squared error)."""
    _check_ready(data)
    t0 = time.perf_counter()
    epochs = params.train_epochs if epochs is None else epochs
    rng = np.random.default_rng(params.seed)
    opt = SGD(model.params(), params.learning_rate, params.momentum)
    report = _new_report(params, "scratch", data.kind == "regression", epochs=epochs)
    rows = (_token_trainset(model, None, data) if isinstance(model, EmbeddingModel)
            else base_trainset(data, None))
    run_epochs(model, rows, params, epochs, rng, opt, report, "scratch", "supervised",
               eval_data, checkpoint_dir)
    return _finish(model, report, eval_data, t0)


def _kd_mode(X: Dataset) -> str:
    return "regression" if X.kind == "regression" else "kd"


def vanilla_kd(S: Model, T: Model, X: Dataset, params: KdHyperParams,
               epochs: Optional[int] = None, eval_data: Optional[Dataset] = None,
               checkpoint_dir=None):
    """KD on the original data only. ``epochs`` defaults to the equal-budget ``e (h + 2)``."""
    _check_ready(X)
    t0 = time.perf_counter()
    if epochs is None:
        epochs = params.train_epochs * (params.hyper_epochs + 2)
    rng = np.random.default_rng(params.seed)
    opt = SGD(S.params(), params.learning_rate, params.momentum)
    report = _new_report(params, "vanilla_kd", X.kind == "regression", epochs=epochs)
    with frozen(T):
        run_epochs(S, base_trainset(X, T), params, epochs, rng, opt, report, "vanilla",
                   _kd_mode(X), eval_data, checkpoint_dir)
    return _finish(S, report, eval_data, t0)


def backward_kd(S: Model, T: Model, X: Dataset, params: KdHyperParams,
                eval_data: Optional[Dataset] = None,
                on_aux: Optional[Callable[[int, AuxiliaryBatch], None]] = None,
                checkpoint_dir=None):
    """Pre-train, ``h`` min-max rounds on ``X u X'``, then fine-tune on ``X``."""
    _check_ready(X)
    t0 = time.perf_counter()
    e, regression = params.train_epochs, X.kind == "regression"
    rng = np.random.default_rng(params.seed)
    opt = SGD(S.params(), params.learning_rate, params.momentum)
    report = _new_report(params, "backward_kd", regression)
    mode = _kd_mode(X)

    def fit(rows: TrainSet, phase: str) -> None:
        run_epochs(S, rows, params, e, rng, opt, report, phase, mode, eval_data, checkpoint_dir)

    with frozen(T):
        base = base_trainset(X, T)
        fit(base, "pretrain")
        kept: list[TrainSet] = []
        for j in range(params.hyper_epochs):
            aux = generate_auxiliary(X.inputs, S, T, params, classification=not regression)
            report.aux_divergence.append((aux.mean_origin_divergence, aux.mean_divergence))
            if on_aux is not None:
                on_aux(j, aux)
            log.info("hyper epoch %d: divergence %.4g -> %.4g", j + 1,
                     aux.mean_origin_divergence, aux.mean_divergence)
            current = aux_trainset(aux, regression)
            kept = kept + [current] if params.aux_retention == "accumulate" else [current]
            fit(TrainSet.concat([base, *kept]), f"minmax{j + 1}")
        fit(base, "finetune")
    return _finish(S, report, eval_data, t0)


# ---------------------------------------------------------------------------
# embedding space


def _token_trainset(S: EmbeddingModel, T: Optional[EmbeddingModel], X: Dataset) -> TrainSet:
    """Original token rows; ``inputs`` holds the student's current embedding stream."""
    tokens = np.asarray(X.inputs, dtype=np.int64)
    with frozen(S):
        Z_S = S.embed(tokens).data
    t_out = None if T is None else predict(T, tokens)
    return TrainSet(Z_S, t_out, X.labels, np.zeros(len(X), dtype=bool), tokens)


def vanilla_kd_embedding(S: EmbeddingModel, T: EmbeddingModel, X: Dataset,
                         params: KdHyperParams, epochs: Optional[int] = None,
                         eval_data: Optional[Dataset] = None, checkpoint_dir=None):
    """KD where each model reads its own embedding stream of ``X``."""
    _check_ready(X)
    t0 = time.perf_counter()
    if epochs is None:
        epochs = params.train_epochs * (params.hyper_epochs + 2)
    rng = np.random.default_rng(params.seed)
    opt = SGD(S.params(), params.learning_rate, params.momentum)
    report = _new_report(params, "vanilla_kd_embedding", False, epochs=epochs)
    base = _token_trainset(S, T, X)
    with frozen(T):
        run_epochs(S, base, params, epochs, rng, opt, report, "vanilla", "kd", eval_data,
                   checkpoint_dir)
    return _finish(S, report, eval_data, t0)


def embedding_box(S: EmbeddingModel, params: KdHyperParams):
    """Coordinate bounds for embedding ascent: ``input_clip`` if set, else the range of W_S."""
    if params.input_clip is not None:
        return params.input_clip
    return float(S.W.data.min()), float(S.W.data.max())


def transform_residual(W_S: np.ndarray, W_T: np.ndarray, Q: np.ndarray) -> float:
    """Relative residual of the normal equations ``Q W_S W_S^T = W_T W_S^T``."""
    rhs = W_T @ W_S.T
    return float(np.linalg.norm(Q @ (W_S @ W_S.T) - rhs) / np.linalg.norm(rhs))


def backward_kd_embedding(S: EmbeddingModel, T: EmbeddingModel, X: Dataset,
                          params: KdHyperParams, eval_data: Optional[Dataset] = None,
                          on_aux: Optional[Callable[[int, AuxiliaryBatch], None]] = None,
                          checkpoint_dir=None):
    """Backward KD with ascent on student embeddings mapped to the teacher through ``Q``."""
    _check_ready(X)
    t0 = time.perf_counter()
    e = params.train_epochs
    rng = np.random.default_rng(params.seed)
    opt = SGD(S.params(), params.learning_rate, params.momentum)
    report = _new_report(params, "backward_kd_embedding", False)
    base = _token_trainset(S, T, X)

    def fit(rows: TrainSet, phase: str) -> None:
        run_epochs(S, rows, params, e, rng, opt, report, phase, "kd", eval_data, checkpoint_dir)

    with frozen(T):
        fit(base, "pretrain")
        kept: list[TrainSet] = []
        for j in range(params.hyper_epochs):
            transform = compute_transform(S.W.data, T.W.data)
            report.transform_residual.append(transform_residual(S.W.data, T.W.data, transform.Q))
            with frozen(S):
                Z_S = S.embed(base.tokens).data
            aux = generate_auxiliary_embedding(Z_S, S, T, transform, params,
                                               embedding_box(S, params))
            report.aux_divergence.append((aux.mean_origin_divergence, aux.mean_divergence))
            if on_aux is not None:
                on_aux(j, aux)
            current = aux_trainset(aux, False)
            kept = kept + [current] if params.aux_retention == "accumulate" else [current]
            fit(TrainSet.concat([base, *kept]), f"minmax{j + 1}")
        fit(base, "finetune")
    return _finish(S, report, eval_data, t0)
