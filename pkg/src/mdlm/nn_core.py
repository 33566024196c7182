"""Dense tensors with reverse-mode differentiation and shared transformer layers.

Everything is plain numpy underneath. A :class:`Tensor` records the operation
that produced it while gradient recording is enabled; ``loss.backward()``
walks the recorded graph once and frees it. Matmul work can be tallied with
:func:`count_macs`, which is what the analytic cost model in :mod:`mdlm.perf`
is checked against.
"""

from __future__ import annotations

import contextlib
import contextvars
import copy
import math
from collections.abc import Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
INIT_STD = 0.02

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_mac_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("mac_counters", default=())


class NonFiniteError(FloatingPointError):
    """Raised as soon as an operation produces NaN or Inf."""


class MacCounter:
    """Accumulates multiply-add counts of every matmul run while it is active."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)

    def __repr__(self) -> str:
        return f"MacCounter(macs={self.macs})"


@contextlib.contextmanager
def count_macs(counter: MacCounter | None = None) -> Iterator[MacCounter]:
    """Activate a counter. Nested counters all see the inner work."""
    counter = counter if counter is not None else MacCounter()
    token = _mac_counters.set(_mac_counters.get() + (counter,))
    try:
        yield counter
    finally:
        _mac_counters.reset(token)


def _record_macs(n: int) -> None:
    for counter in _mac_counters.get():
        counter.add(n)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """N-dimensional array with an optional gradient and recorded history."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self):
        return total(self)

    def backward(self) -> None:
        """Back-propagate from this scalar into every reachable leaf ``.grad``.

        The recorded graph is released afterwards; a second call without
        recomputing the forward pass raises ``RuntimeError``.
        """
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if self._op == "consumed":
            raise RuntimeError("graph already consumed by backward(); recompute the forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any parameter that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"backward of {node._op}")
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False
                node._op = "consumed"


class Parameter(Tensor):
    """A leaf tensor owned by a module. Trainable unless frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None) -> None:
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


def tensor(data, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=like.dtype))


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = tensor(a)
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = tensor(a)
    b = _coerce(b, a)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = math.prod(out.shape[:-2])
    _record_macs(batch * m * n * k)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape

    def backward(g):
        return (g.reshape(original),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward, "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def total(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return mul(total(a), 1.0 / a.data.size)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result(out.astype(d.dtype, copy=False), (x,), backward, "gelu")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = _unbroadcast(g * xhat, weight.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * weight.data
            n = d.shape[-1]
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        return gx, gw, gb

    return _result(out.astype(d.dtype, copy=False), (x, weight, bias), backward, "layer_norm")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` marks positions that may be attended (True)."""
    d = x.data
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(-1, keepdims=True)),)

    return _result(p.astype(x.dtype, copy=False), (x,), backward, "softmax")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of 2-D ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise ValueError("cross_entropy expects logits [N, V] and N targets")
    if len(targets) == 0:
        raise ValueError("cross_entropy over zero positions is undefined")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(len(targets))
    loss = -logp[rows, targets].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / len(targets)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container; attributes that are parameters or modules are tracked."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype) -> Module:
        """Convert every parameter in place (use on a copy for 64-bit reference runs)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def copy(self) -> Module:
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != value.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = np.array(value, dtype=p.dtype, copy=True)


def normal_init(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(DEFAULT_DTYPE)


class LoRAPair(Module):
    """Low-rank delta ``scaling * B @ A`` for one linear map; B starts at zero."""

    def __init__(self, in_dim: int, out_dim: int, rank: int, alpha: float, dropout: float,
                 rng: np.random.Generator) -> None:
        self.rank = rank
        self.alpha = alpha
        self.dropout = dropout
        # A uses the same small-normal init as every other matrix here.
        self.A = Parameter(normal_init(rng, (rank, in_dim)))
        self.B = Parameter(np.zeros((out_dim, rank), dtype=DEFAULT_DTYPE))
        self._rng = np.random.default_rng(rng.integers(2**63))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            x = dropout(x, self.dropout, self._rng)
        h = matmul(matmul(x, self.A.T), self.B.T)
        return mul(h, self.scaling)

    def merged_delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(normal_init(rng, (out_dim, in_dim)))
        self.bias = Parameter(np.zeros(out_dim, dtype=DEFAULT_DTYPE)) if bias else None
        self.lora: LoRAPair | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight.T)
        if self.bias is not None:
            y = add(y, self.bias)
        if self.lora is not None:
            y = add(y, self.lora.delta(x))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        self.weight = Parameter(np.ones(dim, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(dim, dtype=DEFAULT_DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class KVCache:
    """Per-layer keys/values for incremental decoding, shaped [..., heads, length, head_dim]."""

    def __init__(self, n_layers: int) -> None:
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.values: list[np.ndarray | None] = [None] * n_layers

    def __len__(self) -> int:
        return 0 if self.keys[0] is None else self.keys[0].shape[-2]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=-2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=-2)
        return self.keys[layer], self.values[layer]

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys + self.values if a is not None)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator) -> None:
        if dim % n_heads:
            raise ValueError(f"model dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        *lead, length, dim = t.shape
        t = t.reshape(*lead, length, self.n_heads, dim // self.n_heads)
        return t.swapaxes(-2, -3)

    def __call__(self, x: Tensor, causal: bool, cache: KVCache | None = None, layer: int = 0,
                 return_probs: bool = False):
        *lead, length, dim = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        past = 0
        if cache is not None:
            if grad_enabled():
                raise RuntimeError("KV-cached attention is inference-only; wrap in no_grad()")
            past = len(cache)
            kd, vd = cache.append(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        scale = 1.0 / math.sqrt(dim // self.n_heads)
        scores = mul(matmul(q, k.swapaxes(-1, -2)), scale)
        mask = None
        if causal:
            total_len = k.shape[-2]
            qpos = np.arange(past, past + length)[:, None]
            mask = np.arange(total_len)[None, :] <= qpos
        probs = softmax(scores, mask)
        ctx = matmul(probs, v).swapaxes(-2, -3).reshape(*lead, length, dim)
        out = self.o(ctx)
        return (out, probs) if return_probs else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, rng: np.random.Generator) -> None:
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, ff_dim, rng)

    def __call__(self, x: Tensor, causal: bool, cache: KVCache | None = None, layer: int = 0) -> Tensor:
        x = add(x, self.attn(self.ln1(x), causal, cache, layer))
        return add(x, self.mlp(self.ln2(x)))

    def linear_maps(self) -> dict[str, Linear]:
        return {
            "attn.q": self.attn.q,
            "attn.k": self.attn.k,
            "attn.v": self.attn.v,
            "attn.o": self.attn.o,
            "mlp.fc1": self.mlp.fc1,
            "mlp.fc2": self.mlp.fc2,
        }


def attention(x: Tensor, params: MultiHeadAttention, causal: bool) -> Tensor:
    return params(x, causal)


def transformer_block(x: Tensor, params: TransformerBlock, causal: bool) -> Tensor:
    return params(x, causal)
