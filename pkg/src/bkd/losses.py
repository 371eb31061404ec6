"""Distillation and divergence objectives.

All losses take :class:`~bkd.tensor.Tensor` logits (or regression outputs)
and return a scalar tensor so they can be differentiated with respect to the
student's parameters or its inputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor

PROB_FLOOR = 1e-12

RETENTION_MODES = ("reset_each_hyper_epoch", "accumulate")
KD_FORMS = ("lambda", "alpha")
BKD_OUTPUTS = ("logits", "probs")
AUX_LABELS = ("teacher_argmax", "soft_only")


@dataclass
class KdHyperParams:
    alpha: float = 0.5
    lam: float = 0.5
    temperature: float = 2.0
    perturb_rate: float = 0.05
    train_epochs: int = 5
    hyper_epochs: int = 3
    perturb_steps: int = 10
    learning_rate: float = 0.1
    batch_size: int = 64
    momentum: float = 0.0
    seed: int = 0
    aux_retention: str = "reset_each_hyper_epoch"
    input_clip: Optional[tuple[float, float]] = None
    kd_form: str = "lambda"
    bkd_output: str = "logits"
    aux_labels: str = "teacher_argmax"
    grad_floor: float = 1e-8
    max_halvings: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.perturb_rate < 0:
            raise ValueError("perturb_rate must be nonnegative")
        if self.train_epochs < 1:
            raise ValueError("train_epochs must be at least 1")
        if self.hyper_epochs < 0 or self.perturb_steps < 0:
            raise ValueError("hyper_epochs and perturb_steps must be nonnegative")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.aux_retention not in RETENTION_MODES:
            raise ValueError(f"aux_retention must be one of {RETENTION_MODES}")
        if self.kd_form not in KD_FORMS:
            raise ValueError(f"kd_form must be one of {KD_FORMS}")
        if self.bkd_output not in BKD_OUTPUTS:
            raise ValueError(f"bkd_output must be one of {BKD_OUTPUTS}")
        if self.aux_labels not in AUX_LABELS:
            raise ValueError(f"aux_labels must be one of {AUX_LABELS}")
        if self.input_clip is not None:
            lo, hi = self.input_clip
            if not lo < hi:
                raise ValueError(f"input_clip needs lo < hi, got {self.input_clip}")
            self.input_clip = (float(lo), float(hi))

    def replace(self, **changes) -> "KdHyperParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return KdHyperParams(**d)

    def as_dict(self) -> dict:
        return asdict(self)


def _check_coef(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _onehot(labels, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _check_probs(p: Tensor, name: str) -> None:
    if np.any(p.data < 0):
        raise ValueError(f"{name} has negative entries")


def kl_div(p: Tensor, q: Tensor) -> Tensor:
    """Batch-mean ``KL(p || q) = sum p log(p / q)`` over rows of probabilities.

    Both arguments are smoothed to ``(1 - c*eps) p + eps`` first, which keeps
    logs finite and leaves ``KL(p, p)`` exactly zero.
    """
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shapes {p.shape} and {q.shape} differ")
    _check_probs(p, "p")
    _check_probs(q, "q")
    ps = tn.affine_smooth(p, PROB_FLOOR)
    qs = tn.affine_smooth(q, PROB_FLOOR)
    terms = tn.mul(ps, tn.sub(tn.log(ps), tn.log(qs)))
    if terms.data.ndim == 1:
        return tn.sum(terms)
    return tn.mean(tn.sum(terms, axis=1))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch-mean ``-log p[label]`` on eps-smoothed probabilities."""
    _check_probs(probs, "probs")
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n x c] probabilities, got {probs.shape}")
    onehot = _onehot(labels, probs.shape[1])
    if onehot.shape[0] != probs.shape[0]:
        raise DimensionError(f"{onehot.shape[0]} labels for {probs.shape[0]} rows")
    logp = tn.log(tn.affine_smooth(probs, PROB_FLOOR))
    return tn.scale(tn.sum(tn.mul(logp, Tensor(onehot))), -1.0 / probs.shape[0])


def soft(logits: Tensor, tau: float) -> Tensor:
    return tn.softmax(tn.scale(logits, 1.0 / tau), axis=-1)


def _check_pair(s: Tensor, t: Tensor) -> None:
    if s.shape != t.shape:
        raise DimensionError(f"student output {s.shape} and teacher output {t.shape} differ")


def kd_loss_alpha(student_logits: Tensor, teacher_logits: Tensor, labels,
                  alpha: float, tau: float) -> Tensor:
    """``alpha * CE(softmax(S), y) + (1 - alpha) * KL(softmax(S/tau) || softmax(T/tau))``."""
    _check_coef("alpha", alpha)
    _check_tau(tau)
    _check_pair(student_logits, teacher_logits)
    return _mix(student_logits, teacher_logits, labels, alpha, 1.0 - alpha, tau)


def kd_loss_lambda(student_logits: Tensor, teacher_logits: Tensor, labels,
                   lam: float, tau: float) -> Tensor:
    """``(1 - lam) H(softmax(S), y) + tau^2 lam KL(softmax(S/tau) || softmax(T/tau))``."""
    _check_coef("lambda", lam)
    _check_tau(tau)
    _check_pair(student_logits, teacher_logits)
    return _mix(student_logits, teacher_logits, labels, 1.0 - lam, tau * tau * lam, tau)


def _mix(s: Tensor, t: Tensor, labels, w_ce: float, w_kl: float, tau: float) -> Tensor:
    # zero-weight terms are skipped so boundary settings reproduce the pure losses bit-for-bit
    terms = []
    if w_ce != 0.0:
        ce = cross_entropy(tn.softmax(s, axis=-1), labels)
        terms.append(ce if w_ce == 1.0 else tn.scale(ce, w_ce))
    if w_kl != 0.0:
        kl = kl_div(soft(s, tau), soft(t.detach(), tau))
        terms.append(kl if w_kl == 1.0 else tn.scale(kl, w_kl))
    return terms[0] if len(terms) == 1 else tn.add(terms[0], terms[1])


def bkd_per_sample(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    """Per-row ``||S(x) - T(x)||^2``, shape ``[n]``."""
    _check_pair(student_out, teacher_out)
    d = tn.sub(student_out, teacher_out)
    sq = tn.mul(d, d)
    return tn.sum(sq, axis=1) if sq.data.ndim == 2 else sq


def bkd_loss(student_out: Tensor, teacher_out: Tensor) -> Tensor:
    """Squared L2 distance between outputs, summed over output dims, mean over batch."""
    return tn.mean(bkd_per_sample(student_out, teacher_out))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared errors over output dims, mean over batch."""
    return bkd_loss(pred, target)


def kd_loss_regression(student_out: Tensor, teacher_out: Tensor, targets: Tensor,
                       lam: float) -> Tensor:
    """Regression analogue: ``(1 - lam) * mse(S, y) + lam * bkd(S, T)``."""
    _check_coef("lambda", lam)
    terms = []
    if lam != 1.0:
        terms.append(tn.scale(mse(student_out, targets), 1.0 - lam))
    if lam != 0.0:
        terms.append(tn.scale(bkd_loss(student_out, teacher_out.detach()), lam))
    return terms[0] if len(terms) == 1 else tn.add(terms[0], terms[1])
