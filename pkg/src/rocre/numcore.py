"""Minimal reverse-mode autodiff over numpy arrays.

Everything trainable in the package is built from the ops in this module,
so a single finite-difference oracle covers the whole model.  Arrays keep
whatever float dtype they were created with; use float64 for gradient
checks and determinism tests.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
from scipy.special import erf


class NumericDomainError(ValueError):
    """Non-finite values or degenerate inputs reached a numeric op."""


class ConfigError(ValueError):
    """Inconsistent architecture or hyperparameter configuration."""


class UsageError(ValueError):
    """An API was called outside its contract (shapes, roots, state)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericDomainError(f"non-finite values in {what}")


class Tensor:
    """A numpy array plus the closure that routes gradients to its parents."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() on a non-scalar tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor this scalar depends on."""
        grads = _run_backward(self)
        for t in _topo_order(self):
            if t.requires_grad:
                t.grad = grads.get(id(t))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor) -> dict[int, np.ndarray]:
    if root.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(a.data * on, (a,), lambda g: (g * on,))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "gelu": gelu,
    "relu": relu,
    "identity": identity,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --- shape / reduction -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if b.ndim == 2 and a.ndim >= 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def index(a, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"token id out of range for table with {table.shape[0]} rows")
    return index(table, ids)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# --- fused numerics --------------------------------------------------------


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max-subtraction; ``mask`` False entries get weight 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor; rejects non-finite input."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax input")
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx_hat = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def l2_normalize(x, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    """Scale vectors to unit length; near-zero vectors are an error."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n < min_norm):
        raise NumericDomainError("cannot normalize a near-zero vector")
    y = x.data / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _make(y, (x,), bw)


def masked_mean(x, mask: np.ndarray, axis: int = -2) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is True.

    ``mask`` has the shape of ``x`` without its trailing feature axis.
    """
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise NumericDomainError("masked mean over zero positions")
    y = (x.data * m).sum(axis=axis) / np.squeeze(count, axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * m / count,)

    return _make(y, (x,), bw)


# --- transformer blocks ----------------------------------------------------


def multi_head_self_attention(
    x,
    layer_params: Mapping[str, Tensor],
    num_heads: int,
    pad_mask: np.ndarray | None = None,
    attn_store: list | None = None,
) -> Tensor:
    """Scaled dot-product self-attention with output projection.

    ``x`` is (L, H) or (B, L, H).  ``pad_mask`` marks real positions with
    True; keys at False positions receive exactly zero weight.  When
    ``attn_store`` is a list, the (B, heads, L, L) weights are appended.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        if pad_mask is not None:
            pad_mask = np.asarray(pad_mask, dtype=bool)[None, :]
    b, length, hidden = x.shape
    if hidden % num_heads:
        raise ConfigError(f"hidden size {hidden} not divisible by {num_heads} heads")
    if pad_mask is not None and np.shape(pad_mask) != (b, length):
        raise UsageError(f"pad_mask shape {np.shape(pad_mask)} != {(b, length)}")
    dh = hidden // num_heads

    def heads(t):
        return transpose(reshape(t, (b, length, num_heads, dh)), (0, 2, 1, 3))

    q = heads(x @ layer_params["Wq"])
    k = heads(x @ layer_params["Wk"])
    v = heads(x @ layer_params["Wv"])
    scores = (q @ transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    key_mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    w = softmax(scores, axis=-1, mask=key_mask)
    if attn_store is not None:
        attn_store.append(w.data[0] if squeeze else w.data)
    ctx = reshape(transpose(w @ v, (0, 2, 1, 3)), (b, length, hidden))
    out = ctx @ layer_params["Wo"]
    return reshape(out, (length, hidden)) if squeeze else out


def encoder_layer(
    x: Tensor,
    p: Mapping[str, Tensor],
    num_heads: int,
    pad_mask: np.ndarray | None,
    act: str = "gelu",
    attn_store: list | None = None,
) -> Tensor:
    """Pre-norm transformer layer: attention then feed-forward, each residual."""
    h = layer_norm(x, p["ln1_g"], p["ln1_b"])
    x = x + multi_head_self_attention(h, p, num_heads, pad_mask, attn_store)
    h = layer_norm(x, p["ln2_g"], p["ln2_b"])
    h = activation(act)(h @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]
    return x + h


def layer_param_shapes(hidden: int, ffn: int) -> dict[str, tuple[int, int]]:
    return {
        "ln1_g": (1, hidden),
        "ln1_b": (1, hidden),
        "Wq": (hidden, hidden),
        "Wk": (hidden, hidden),
        "Wv": (hidden, hidden),
        "Wo": (hidden, hidden),
        "ln2_g": (1, hidden),
        "ln2_b": (1, hidden),
        "W1": (hidden, ffn),
        "b1": (1, ffn),
        "W2": (ffn, hidden),
        "b2": (1, hidden),
    }


# --- parameters ------------------------------------------------------------


class ParamSet:
    """Ordered name -> 2-D Tensor collection with a stable flat view."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        arr = np.array(value, copy=True)
        if arr.ndim != 2:
            raise UsageError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        _check_finite(arr, f"parameter {name!r}")
        t = Tensor(arr, requires_grad=True, name=name)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Entries under ``prefix.`` keyed by their short name."""
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self._entries.items() if k.startswith(pre)}

    @property
    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def flat(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._entries.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.size != self.num_scalars:
            raise UsageError(f"flat vector has {vec.size} values, expected {self.num_scalars}")
        i = 0
        for t in self._entries.values():
            n = t.data.size
            t.data[...] = vec[i : i + n].reshape(t.shape)
            i += n

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for k, t in self._entries.items():
            out.add(k, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for k, t in self._entries.items():
            out.add(k, t.data)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
            for a, b in zip(self._entries.values(), other._entries.values())
        )


@dataclass
class GradResult:
    loss: float
    grads: dict[str, np.ndarray]


def backward(loss: Tensor, params: ParamSet | None = None) -> GradResult:
    """Reverse-mode gradients of a scalar loss.

    Parameters in ``params`` that the loss does not depend on get exact
    zeros, so the result always mirrors the ParamSet layout.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    grads = _run_backward(loss)
    value = float(loss.data.reshape(-1)[0])
    if not math.isfinite(value):
        raise NumericDomainError(f"non-finite loss {value}")
    out: dict[str, np.ndarray] = {}
    if params is not None:
        for name, t in params.items():
            g = grads.get(id(t))
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype)
            t.grad = out[name]
    return GradResult(loss=value, grads=out)


def finite_difference_errors(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    epsilon: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, float]:
    """Per-parameter max relative error between backprop and central differences."""
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    for name, t in params.items():
        if t.dtype != np.float64:
            raise UsageError(f"finite differences need float64 params; {name!r} is {t.dtype}")
    analytic = backward(loss_fn(params), params).grads
    errors: dict[str, float] = {}
    with no_grad():
        for name in names if names is not None else params.names():
            data = params[name].data
            worst = 0.0
            for idx in np.ndindex(data.shape):
                orig = data[idx]
                data[idx] = orig + epsilon
                up = loss_fn(params).item()
                data[idx] = orig - epsilon
                down = loss_fn(params).item()
                data[idx] = orig
                fd = (up - down) / (2.0 * epsilon)
                a = float(analytic[name][idx])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                worst = max(worst, rel)
            errors[name] = worst
    return errors


def finite_difference_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error over every scalar in ``params``.

    Non-differentiable points (e.g. |x| at 0) are the caller's problem.
    """
    errs = finite_difference_errors(loss_fn, params, epsilon)
    return max(errs.values(), default=0.0)


# --- initialization --------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int], dtype=np.float64) -> np.ndarray:
    fan_in, fan_out = shape
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02, dtype=np.float64) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_layer(params: ParamSet, prefix: str, rng: np.random.Generator, hidden: int, ffn: int, dtype) -> None:
    for short, shape in layer_param_shapes(hidden, ffn).items():
        name = f"{prefix}.{short}"
        if short.endswith("_g"):
            params.add(name, np.ones(shape, dtype=dtype))
        elif short.startswith("ln") or short.startswith("b"):
            params.add(name, np.zeros(shape, dtype=dtype))
        else:
            params.add(name, xavier_uniform(rng, shape, dtype))


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper = AdamHyper(),
) -> tuple[ParamSet, AdamState]:
    """One AdamW update, in place; weight decay bypasses the moment estimates."""
    for name, t in params.items():
        g = grads.get(name)
        if g is None or g.shape != t.shape or state.m.get(name, g).shape != t.shape:
            raise UsageError(f"gradient/state shape mismatch for {name!r}")
    state.step += 1
    c1 = 1.0 - hyper.beta1**state.step
    c2 = 1.0 - hyper.beta2**state.step
    for name, t in params.items():
        g = grads[name]
        m = state.m[name] = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = state.v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        if hyper.weight_decay:
            t.data -= hyper.lr * hyper.weight_decay * t.data
        t.data -= (hyper.lr * update).astype(t.dtype)
    return params, state


# --- checkpoint ------------------------------------------------------------

CHECKPOINT_MAGIC = b"ROCCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    params: ParamSet,
    architecture_config: dict,
    seed: int,
    step: int,
    extra: dict | None = None,
) -> None:
    """Write params to a self-describing binary container.

    Layout (all integers little-endian)::

        8 bytes   magic b"ROCCKPT1"
        u32       header length in bytes
        bytes     UTF-8 JSON header {format_version, architecture_config,
                  seed, step, dtype, extra}
        u32       tensor count
        per tensor:
          u16     name length, then UTF-8 name
          u32     rows, u32 cols
          f64     rows*cols values, row-major
    """
    dtypes = {str(t.dtype) for _, t in params.items()} or {"float64"}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture_config": architecture_config,
        "seed": int(seed),
        "step": int(step),
        "dtype": dtypes.pop() if len(dtypes) == 1 else "float64",
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            rows, cols = t.shape
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise UsageError(f"{path}: not a checkpoint file")
    pos = 8
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UsageError(f"{path}: unsupported format_version {header.get('format_version')}")
    dtype = np.dtype(header.get("dtype", "float64"))
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        vals = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=pos)
        pos += 8 * rows * cols
        params.add(name, vals.reshape(rows, cols).astype(dtype))
    return params, header
