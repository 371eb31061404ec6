"""Model definitions, initialization and checkpoint persistence.

Three model kinds share the forward/parameter interface:

* :class:`Network` -- a stack of affine layers with per-layer activations.
* :class:`PolynomialModel` -- a linear model over monomial features of a
  scalar input, scaled by the half-width of the input domain.
* :class:`EmbeddingModel` -- a ``d x |V|`` embedding matrix whose token
  vectors are concatenated and fed into a :class:`Network` head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DimensionError, Tensor

ACTIVATIONS = ("identity", "relu", "tanh")
MAGIC = b"BKD1"
VERSION = 1
INIT_UNIFORM_FAN_IN = 1

_KIND_CODES = {"mlp": 0, "polynomial": 1, "embedding": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; "
                             f"expected one of {ACTIVATIONS}")


def mlp_spec(dims: Sequence[int], hidden_activation: str = "relu") -> list[LayerSpec]:
    """Layer table for ``dims[0] -> ... -> dims[-1]``; the output layer is linear."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    return [LayerSpec(dims[i], dims[i + 1],
                      hidden_activation if i < len(dims) - 2 else "identity")
            for i in range(len(dims) - 1)]


def _activate(h: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return tn.relu(h)
    if kind == "tanh":
        return tn.tanh(h)
    return h


class Network:
    kind = "mlp"

    def __init__(self, layers: Sequence[LayerSpec], weights: Sequence[np.ndarray],
                 biases: Sequence[np.ndarray], seed: int = 0):
        layers = list(layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.weights = [Tensor(w, requires_grad=True) for w in weights]
        self.biases = [Tensor(b, requires_grad=True) for b in biases]
        for spec, w, b in zip(layers, self.weights, self.biases):
            if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
                raise DimensionError(f"parameter shapes {w.shape}, {b.shape} do not match {spec}")
        self.seed = seed

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"network expects [n x {self.in_dim}] input, got {x.shape}")
        h = x
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            h = _activate(tn.linear(h, w, b), spec.activation)
        return h

    __call__ = forward


class PolynomialModel:
    """``sum_k c_k (x / half_width)^k`` evaluated as a linear model over monomials."""

    kind = "polynomial"

    def __init__(self, coefficients, half_width: float = 1.0, seed: int = 0):
        coef = np.asarray(coefficients, dtype=np.float64)
        if coef.ndim != 1 or coef.size < 1:
            raise ValueError("polynomial needs a 1-d coefficient vector")
        if not half_width > 0:
            raise ValueError("half_width must be positive")
        self.coef = Tensor(coef, requires_grad=True)
        self.half_width = float(half_width)
        self.seed = seed

    @property
    def degree(self) -> int:
        return self.coef.shape[0] - 1

    in_dim = 1
    out_dim = 1

    def params(self) -> list[Tensor]:
        return [self.coef]

    def features(self, x: Tensor) -> Tensor:
        return tn.monomials(tn.scale(x, 1.0 / self.half_width), self.degree)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != 1:
            raise DimensionError(f"polynomial expects [n x 1] input, got {x.shape}")
        return tn.matmul(self.features(x), tn.reshape(self.coef, (self.degree + 1, 1)))

    __call__ = forward


class EmbeddingModel:
    kind = "embedding"

    def __init__(self, embedding: np.ndarray, head: Network, seq_len: int, seed: int = 0):
        self.W = Tensor(embedding, requires_grad=True)
        if self.W.data.ndim != 2:
            raise DimensionError("embedding matrix must be [d x |V|]")
        self.head = head
        self.seq_len = int(seq_len)
        if head.in_dim != self.embed_dim * self.seq_len:
            raise DimensionError(
                f"head input {head.in_dim} != embed_dim {self.embed_dim} x seq_len {self.seq_len}")
        self.seed = seed

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.W.shape[1]

    @property
    def in_dim(self) -> int:
        return self.head.in_dim

    @property
    def out_dim(self) -> int:
        return self.head.out_dim

    def params(self) -> list[Tensor]:
        return [self.W] + self.head.params()

    def embed(self, tokens) -> Tensor:
        """Concatenated token vectors ``[n x seq_len*d]``, recorded against ``W``."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] != self.seq_len:
            raise DimensionError(f"expected token ids [n x {self.seq_len}], got {ids.shape}")
        rows = tn.gather_rows(tn.transpose(self.W), ids.ravel())
        return tn.reshape(rows, (ids.shape[0], self.seq_len * self.embed_dim))

    def forward(self, tokens) -> Tensor:
        return self.head.forward(self.embed(tokens))

    __call__ = forward

    def forward_from_embedding(self, z: Tensor) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.in_dim:
            raise DimensionError(f"embedding input must be [n x {self.in_dim}], got {z.shape}")
        return self.head.forward(z)


Model = Union[Network, PolynomialModel, EmbeddingModel]


def forward(model: Model, batch) -> Tensor:
    if isinstance(model, EmbeddingModel):
        return model.forward(batch)
    return model.forward(batch if isinstance(batch, Tensor) else Tensor(batch))


def forward_from_embedding(model: EmbeddingModel, z) -> Tensor:
    return model.forward_from_embedding(z if isinstance(z, Tensor) else Tensor(z))


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_network(layers: Sequence[LayerSpec], seed: int) -> Network:
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for spec in layers:
        ws.append(_uniform(rng, spec.in_dim, (spec.out_dim, spec.in_dim)))
        bs.append(_uniform(rng, spec.in_dim, (spec.out_dim,)))
    return Network(layers, ws, bs, seed=seed)


def init_mlp(dims: Sequence[int], seed: int, hidden_activation: str = "relu") -> Network:
    return init_network(mlp_spec(dims, hidden_activation), seed)


def init_polynomial(degree: int, seed: int, half_width: float = 1.0) -> PolynomialModel:
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    rng = np.random.default_rng(seed)
    return PolynomialModel(_uniform(rng, degree + 1, degree + 1), half_width, seed=seed)


def init_embedding(vocab: int, embed_dim: int, seq_len: int, hidden: Sequence[int],
                   n_out: int, seed: int, hidden_activation: str = "relu") -> EmbeddingModel:
    rng = np.random.default_rng(seed)
    W = _uniform(rng, vocab, (embed_dim, vocab))
    head_seed = int(rng.integers(2**31))
    head = init_mlp([embed_dim * seq_len, *hidden, n_out], head_seed, hidden_activation)
    return EmbeddingModel(W, head, seq_len, seed=seed)


def param_count(model: Model) -> int:
    return int(np.sum([p.data.size for p in model.params()]))


def clone(model: Model) -> Model:
    """Deep copy with fresh parameter leaves."""
    if isinstance(model, Network):
        return Network(model.layers, [w.data.copy() for w in model.weights],
                       [b.data.copy() for b in model.biases], seed=model.seed)
    if isinstance(model, PolynomialModel):
        return PolynomialModel(model.coef.data.copy(), model.half_width, seed=model.seed)
    if isinstance(model, EmbeddingModel):
        return EmbeddingModel(model.W.data.copy(), clone(model.head), model.seq_len,
                              seed=model.seed)
    raise TypeError(f"not a model: {type(model).__name__}")


def set_trainable(model: Model, flag: bool) -> None:
    for p in model.params():
        p.requires_grad = flag


# ---------------------------------------------------------------------------
# checkpoints
#
# header: magic "BKD1" | u8 version | u8 kind | u8 init scheme | u64 init seed
# mlp:        u32 n_layers, then per layer u32 in, u32 out, u8 activation
# polynomial: u32 degree, f64 half_width
# embedding:  u32 vocab, u32 embed_dim, u32 seq_len, then the head's mlp table
# payload:    little-endian float64 parameters in params() order


def _mlp_table(net: Network) -> bytes:
    out = struct.pack("<I", len(net.layers))
    for spec in net.layers:
        out += struct.pack("<IIB", spec.in_dim, spec.out_dim, ACTIVATIONS.index(spec.activation))
    return out


def to_bytes(model: Model) -> bytes:
    kind = _KIND_CODES[model.kind]
    head = MAGIC + struct.pack("<BBBQ", VERSION, kind, INIT_UNIFORM_FAN_IN, model.seed)
    if isinstance(model, Network):
        head += _mlp_table(model)
    elif isinstance(model, PolynomialModel):
        head += struct.pack("<Id", model.degree, model.half_width)
    else:
        head += struct.pack("<III", model.vocab_size, model.embed_dim, model.seq_len)
        head += _mlp_table(model.head)
    payload = b"".join(p.data.astype("<f8").tobytes() for p in model.params())
    return head + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        if self.pos + 8 * n > len(self.buf):
            raise CheckpointError("checkpoint payload truncated")
        arr = np.frombuffer(self.buf, dtype="<f8", count=n, offset=self.pos)
        self.pos += 8 * n
        return arr.astype(np.float64).reshape(shape)


def _read_mlp_table(r: _Reader) -> list[LayerSpec]:
    (n,) = r.take("<I")
    layers = []
    for _ in range(n):
        i, o, a = r.take("<IIB")
        if a >= len(ACTIVATIONS):
            raise CheckpointError(f"unknown activation code {a}")
        layers.append(LayerSpec(i, o, ACTIVATIONS[a]))
    return layers


def _read_mlp_params(r: _Reader, layers, seed) -> Network:
    ws, bs = [], []
    for spec in layers:
        ws.append(r.floats((spec.out_dim, spec.in_dim)))
        bs.append(r.floats((spec.out_dim,)))
    return Network(layers, ws, bs, seed=seed)


def from_bytes(buf: bytes) -> Model:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version, kind, scheme, seed = r.take("<BBBQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in _KIND_NAMES:
        raise CheckpointError(f"unknown model kind code {kind}")
    if scheme != INIT_UNIFORM_FAN_IN:
        raise CheckpointError(f"unknown init scheme {scheme}")
    name = _KIND_NAMES[kind]
    if name == "mlp":
        model = _read_mlp_params(r, _read_mlp_table(r), seed)
    elif name == "polynomial":
        degree, hw = r.take("<Id")
        model = PolynomialModel(r.floats((degree + 1,)), hw, seed=seed)
    else:
        vocab, dim, seq_len = r.take("<III")
        layers = _read_mlp_table(r)
        W = r.floats((dim, vocab))
        head = _read_mlp_params(r, layers, 0)
        model = EmbeddingModel(W, head, seq_len, seed=seed)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes in checkpoint")
    return model


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())


__all__ = [
    "LayerSpec", "Network", "PolynomialModel", "EmbeddingModel", "CheckpointError",
    "ContractError", "mlp_spec", "init_network", "init_mlp", "init_polynomial",
    "init_embedding", "param_count", "clone", "set_trainable", "forward",
    "forward_from_embedding", "save", "load", "to_bytes", "from_bytes",
]
