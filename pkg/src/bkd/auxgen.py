"""Auxiliary sample generation at maximum student/teacher divergence.

Inputs are pushed uphill on the per-sample divergence
``||S(x) - T(x)||^2`` by gradient ascent. A step is accepted only if it
strictly increases the divergence; otherwise the rate is halved (up to
``max_halvings`` times) and the sample stops once no halving helps. For
token models the ascent runs on the student's embedding vectors, and the
teacher sees ``Q z_S`` where ``Q`` is the least-squares map between the two
embedding matrices.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import tensor as tn
from .losses import KdHyperParams, bkd_per_sample
from .nn import EmbeddingModel, Model
from .tensor import NumericError, Tensor

OutputFn = Callable[[Tensor], Tensor]

CHUNK = 2048
SINGULAR_COND = 1e12


class SingularTransformError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(
            f"student embedding Gram matrix is singular (condition number ~{cond:.3g})")
        self.cond = cond


@dataclass
class AuxiliaryBatch:
    """Perturbed inputs together with their teacher labels and divergences.

    ``inputs[i]`` was grown from ``origin[i]``; ``divergence`` is the final
    per-sample BKD value and ``origin_divergence`` the value before ascent.
    For embedding runs ``teacher_inputs`` holds the matching ``Q z_S`` rows.
    """

    inputs: np.ndarray
    origin: np.ndarray
    teacher_logits: np.ndarray
    soft_targets: np.ndarray
    pseudo_labels: np.ndarray
    divergence: np.ndarray
    origin_divergence: np.ndarray
    aborted: np.ndarray
    steps: np.ndarray
    teacher_inputs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def mean_divergence(self) -> float:
        return float(self.divergence.mean())

    @property
    def mean_origin_divergence(self) -> float:
        return float(self.origin_divergence.mean())


@dataclass
class EmbeddingTransform:
    Q: np.ndarray
    student_dim: int
    teacher_dim: int
    vocab_size: int
    cond: float

    def apply(self, z_s: np.ndarray) -> np.ndarray:
        """Map concatenated student token vectors ``[n x L*d1]`` to ``[n x L*d2]``."""
        return apply_transform(Tensor(z_s), self.Q).data


class PerturbResult(NamedTuple):
    x: np.ndarray
    trace: list
    aborted: bool


class EmbeddingPerturbResult(NamedTuple):
    z_s: np.ndarray
    z_t: np.ndarray
    trace: list
    aborted: bool


@contextlib.contextmanager
def frozen(*models: Model):
    """Temporarily stop parameter gradients so only inputs are differentiated."""
    saved = [[p.requires_grad for p in m.params()] for m in models]
    try:
        for m in models:
            for p in m.params():
                p.requires_grad = False
        yield
    finally:
        for m, flags in zip(models, saved):
            for p, f in zip(m.params(), flags):
                p.requires_grad = f


def _divergence(s_fn: OutputFn, t_fn: OutputFn, x: Tensor, use_probs: bool) -> Tensor:
    s, t = s_fn(x), t_fn(x)
    if use_probs:
        s, t = tn.softmax(s, axis=-1), tn.softmax(t, axis=-1)
    return bkd_per_sample(s, t)


def _loss(s_fn, t_fn, x: np.ndarray, use_probs: bool) -> np.ndarray:
    """Per-sample divergence; rows that overflow come back as NaN."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _divergence(s_fn, t_fn, Tensor(x), use_probs).data
    except NumericError:
        if len(x) == 1:
            return np.array([np.nan])
        return np.concatenate([_loss(s_fn, t_fn, x[i:i + 1], use_probs) for i in range(len(x))])


def _loss_and_grad(s_fn, t_fn, x: np.ndarray, use_probs: bool):
    try:
        leaf = Tensor(x, requires_grad=True)
        with np.errstate(over="ignore", invalid="ignore"):
            per = _divergence(s_fn, t_fn, leaf, use_probs)
            (g,) = tn.grad(tn.sum(per), [leaf])
        return per.data, g
    except NumericError:
        if len(x) == 1:
            return np.array([np.nan]), np.full_like(x, np.nan)
        parts = [_loss_and_grad(s_fn, t_fn, x[i:i + 1], use_probs) for i in range(len(x))]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def ascend(x0: np.ndarray, s_fn: OutputFn, t_fn: OutputFn, eta: float, steps: int,
           clip: Optional[tuple[float, float]] = None, *, grad_floor: float = 1e-8,
           max_halvings: int = 10, use_probs: bool = False):
    """Batched gradient ascent on per-sample divergence.

    Returns ``(x, traces, aborted, n_accepted)``. Each row is handled
    independently: its gradient is the gradient of its own divergence, and
    its rate is halved on its own schedule.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = len(x0)
    x = x0.copy()
    L = _loss(s_fn, t_fn, x, use_probs)
    aborted = ~np.isfinite(L)
    traces = [[float(v)] for v in L]
    accepted = np.zeros(n, dtype=np.int64)
    active = ~aborted
    if eta == 0.0:
        active[:] = False
    for _ in range(steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        L_cur, g = _loss_and_grad(s_fn, t_fn, x[idx], use_probs)
        bad = ~np.all(np.isfinite(g), axis=1) | ~np.isfinite(L_cur)
        if bad.any():
            lost = idx[bad]
            x[lost] = x0[lost]
            aborted[lost] = True
            active[lost] = False
            for i in lost:
                traces[i] = traces[i][:1]
                accepted[i] = 0
        flat = np.linalg.norm(g, axis=1) < grad_floor
        active[idx[flat & ~bad]] = False
        keep = ~bad & ~flat
        idx, g, L_cur = idx[keep], g[keep], L_cur[keep]
        rate = np.full(idx.size, float(eta))
        pending = np.ones(idx.size, dtype=bool)
        for attempt in range(max_halvings + 1):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            trial = x[idx[p]] + rate[p, None] * g[p]
            if clip is not None:
                trial = np.clip(trial, clip[0], clip[1])
            L_new = _loss(s_fn, t_fn, trial, use_probs)
            ok = np.isfinite(L_new) & (L_new > L_cur[p])
            for j, row in enumerate(p):
                if ok[j]:
                    i = idx[row]
                    x[i] = trial[j]
                    traces[i].append(float(L_new[j]))
                    accepted[i] += 1
            pending[p[ok]] = False
            rate[p[~ok]] *= 0.5
        active[idx[pending]] = False
    return x, traces, aborted, accepted


def _model_fn(model: Model) -> OutputFn:
    if isinstance(model, EmbeddingModel):
        return model.forward_from_embedding
    return model.forward


def perturb_sample(x, S: Model, T: Model, eta: float, steps: int,
                   clip: Optional[tuple[float, float]] = None, *, grad_floor: float = 1e-8,
                   max_halvings: int = 10, use_probs: bool = False) -> PerturbResult:
    """Ascend a single input; the trace lists the divergence after every accepted step."""
    x = np.asarray(x, dtype=np.float64)
    row = x.reshape(1, -1)
    with frozen(S, T):
        xs, traces, aborted, _ = ascend(row, _model_fn(S), _model_fn(T), eta, steps, clip,
                                        grad_floor=grad_floor, max_halvings=max_halvings,
                                        use_probs=use_probs)
    return PerturbResult(xs[0].reshape(x.shape), traces[0], bool(aborted[0]))


def _batch(inputs: np.ndarray, origin: np.ndarray, L0, traces, aborted, accepted,
           t_logits: np.ndarray, tau: float, classification: bool, teacher_inputs=None):
    final = np.array([tr[-1] for tr in traces])
    if classification:
        soft = tn.softmax(Tensor(t_logits / tau), axis=-1).data
        pseudo = t_logits.argmax(axis=1)
    else:
        soft = t_logits.copy()
        pseudo = t_logits.ravel().copy()
    return AuxiliaryBatch(inputs, origin, t_logits, soft, pseudo, final, L0, aborted,
                          accepted, teacher_inputs)


def _ascend_chunked(x0, s_fn, t_fn, params: KdHyperParams, clip, use_probs):
    xs, traces, aborted, accepted = [], [], [], []
    for start in range(0, len(x0), CHUNK):
        out = ascend(x0[start:start + CHUNK], s_fn, t_fn, params.perturb_rate,
                     params.perturb_steps, clip, grad_floor=params.grad_floor,
                     max_halvings=params.max_halvings, use_probs=use_probs)
        xs.append(out[0])
        traces += out[1]
        aborted.append(out[2])
        accepted.append(out[3])
    return np.concatenate(xs), traces, np.concatenate(aborted), np.concatenate(accepted)


def generate_auxiliary(X: np.ndarray, S: Model, T: Model, params: KdHyperParams,
                       classification: bool = True) -> AuxiliaryBatch:
    """One auxiliary sample per row of ``X``, labelled by the teacher at its new location."""
    X = np.asarray(X, dtype=np.float64)
    use_probs = classification and params.bkd_output == "probs"
    with frozen(S, T):
        s_fn, t_fn = _model_fn(S), _model_fn(T)
        x_new, traces, aborted, accepted = _ascend_chunked(X, s_fn, t_fn, params,
                                                           params.input_clip, use_probs)
        t_logits = _forward_np(t_fn, x_new)
    L0 = np.array([tr[0] for tr in traces])
    return _batch(x_new, np.arange(len(X)), L0, traces, aborted, accepted, t_logits,
                  params.temperature, classification)


def _forward_np(fn: OutputFn, x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(Tensor(x[i:i + CHUNK])).data for i in range(0, len(x), CHUNK)])


# ---------------------------------------------------------------------------
# embedding space


def compute_transform(W_S, W_T) -> EmbeddingTransform:
    """Least-squares ``Q`` with ``W_T ~= Q W_S``, from the normal equations.

    Solves ``Q (W_S W_S^T) = W_T W_S^T`` with a linear solve instead of forming
    the inverse. A square ``W_S`` takes the closed form ``W_T W_S^{-1}``, which
    avoids squaring its condition number. Raises :class:`SingularTransformError`
    if ``W_S`` is not of full row rank.
    """
    W_S = np.asarray(W_S.data if isinstance(W_S, Tensor) else W_S, dtype=np.float64)
    W_T = np.asarray(W_T.data if isinstance(W_T, Tensor) else W_T, dtype=np.float64)
    if W_S.ndim != 2 or W_T.ndim != 2 or W_S.shape[1] != W_T.shape[1]:
        raise tn.DimensionError(f"embedding matrices {W_S.shape} and {W_T.shape} disagree on |V|")
    gram = W_S @ W_S.T
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularTransformError(cond)
    if W_S.shape[0] == W_S.shape[1]:
        Q = W_T @ np.linalg.inv(W_S)
    else:
        Q = np.linalg.solve(gram, (W_T @ W_S.T).T).T
    return EmbeddingTransform(Q, W_S.shape[0], W_T.shape[0], W_S.shape[1], cond)


def apply_transform(z_s: Tensor, Q) -> Tensor:
    """Blockwise ``Q z`` for each token slot of a concatenated embedding row."""
    Qm = np.asarray(Q, dtype=np.float64)
    d2, d1 = Qm.shape
    n, width = z_s.shape
    if width % d1:
        raise tn.DimensionError(f"embedding width {width} is not a multiple of {d1}")
    seq = width // d1
    tokens = tn.reshape(z_s, (n * seq, d1))
    mapped = tn.matmul(tokens, Tensor(Qm.T))
    return tn.reshape(mapped, (n, seq * d2))


def _teacher_via_q(T: EmbeddingModel, Q) -> OutputFn:
    return lambda z: T.forward_from_embedding(apply_transform(z, Q))


def perturb_embedding(z_s, S: EmbeddingModel, T: EmbeddingModel, Q, eta: float, steps: int, *,
                      grad_floor: float = 1e-8, max_halvings: int = 10,
                      use_probs: bool = False) -> EmbeddingPerturbResult:
    """Ascend the student embedding; the teacher is evaluated at ``Q z_S`` every step."""
    z = np.asarray(z_s, dtype=np.float64)
    row = z.reshape(1, -1)
    with frozen(S, T):
        zs, traces, aborted, _ = ascend(row, S.forward_from_embedding, _teacher_via_q(T, Q), eta,
                                        steps, None, grad_floor=grad_floor,
                                        max_halvings=max_halvings, use_probs=use_probs)
    zt = apply_transform(Tensor(zs), Q).data
    return EmbeddingPerturbResult(zs[0].reshape(z.shape), zt[0], traces[0], bool(aborted[0]))


def generate_auxiliary_embedding(Z_S: np.ndarray, S: EmbeddingModel, T: EmbeddingModel,
                                 transform: EmbeddingTransform, params: KdHyperParams,
                                 clip: Optional[tuple[float, float]] = None) -> AuxiliaryBatch:
    """Ascend every row of ``Z_S``; ``clip`` bounds each embedding coordinate."""
    Z_S = np.asarray(Z_S, dtype=np.float64)
    use_probs = params.bkd_output == "probs"
    with frozen(S, T):
        t_fn = _teacher_via_q(T, transform.Q)
        z_new, traces, aborted, accepted = _ascend_chunked(Z_S, S.forward_from_embedding, t_fn,
                                                           params, clip, use_probs)
        z_t = transform.apply(z_new)
        t_logits = _forward_np(T.forward_from_embedding, z_t)
    L0 = np.array([tr[0] for tr in traces])
    return _batch(z_new, np.arange(len(Z_S)), L0, traces, aborted, accepted, t_logits,
                  params.temperature, True, teacher_inputs=z_t)
