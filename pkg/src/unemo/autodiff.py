"""Minimal reverse-mode automatic differentiation on top of numpy.

Only the handful of primitives the navigation model needs are provided:
dense 2-D algebra, a few elementwise nonlinearities, row softmax, and the
composite layers (cross-attention, MLP, reparameterization, KL) built from
them.  Every primitive records a closure that maps the output gradient to
operand gradients; :meth:`Tensor.backward` replays them in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, DomainError, NonFiniteError, TrainingError

_GRAD_ENABLED = True
_CHECKED = True


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf rejection at tensor construction. Returns the old value."""
    global _CHECKED
    old, _CHECKED = _CHECKED, bool(flag)
    return old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _CHECKED and not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NonFiniteError(f"non-finite value at index {tuple(int(i) for i in bad)}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data, out.grad, out.requires_grad = self.data, None, False
        out._parents, out._backward = (), None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def __getitem__(self, idx) -> "Tensor":
        return take_rows(self, idx)

    # reverse pass ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    if _CHECKED and not np.isfinite(data).all():
        raise NonFiniteError("operation produced a non-finite value")
    out.data = data
    out.grad = None
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = parents
        out._backward = backward
    else:
        out._parents, out._backward = (), None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# primitives -----------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[m×k]`` and ``b[k×n]``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    data = a.data.sum(axis=axis, keepdims=True)
    return _make(data, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def tanh_grad(y: np.ndarray) -> np.ndarray:
    """Local derivative of tanh expressed through its output."""
    return 1.0 - y * y


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * tanh_grad(y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return _make(y, (a,), lambda g: (g / (1.0 + np.exp(-x)),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(data, tuple(tensors), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather; ``idx`` may be an int, slice or integer sequence. Result stays 2-D."""
    if isinstance(idx, (int, np.integer)):
        idx = [int(idx)]
    data = a.data[idx]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        if isinstance(idx, slice):
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward)


# composite layers -----------------------------------------------------------
def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"width mismatch: input {x.shape} vs weight {w.shape}")
    y = matmul(x, w)
    return y if b is None else add(y, b)


def cross_attention(query: Tensor, keys: Tensor, params: "ParamStore", layer_tag: str) -> Tensor:
    """softmax(Q Kᵀ/√d) V with Q = query·W_q, K = keys·W_k, V = keys·W_v.

    ``d`` is the key projection width. Query rows attend over key rows.
    """
    wq = params[f"{layer_tag}.W_q"]
    wk = params[f"{layer_tag}.W_k"]
    wv = params[f"{layer_tag}.W_v"]
    if keys.shape[0] < 1:
        raise DimensionError("cross_attention needs at least one key row")
    q = linear(query, wq)
    k = linear(keys, wk)
    v = linear(keys, wv)
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(wk.shape[1]))
    return matmul(softmax_rows(scores), v)


def mlp(x: Tensor, params: "ParamStore", tag: str) -> Tensor:
    """Stacked affine layers ``{tag}.W{i}``/``{tag}.b{i}`` with tanh between them."""
    n = params.mlp_depth(tag)
    if n == 0:
        raise ConfigError(f"no MLP layers configured for {tag!r}")
    h = x
    for i in range(n):
        h = linear(h, params[f"{tag}.W{i}"], params[f"{tag}.b{i}"])
        if i < n - 1:
            h = tanh(h)
    return h


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """z = mu + sigma ⊙ eps; eps is treated as a constant."""
    if (sigma.data < 0).any():
        raise DomainError("sigma must be elementwise non-negative")
    eps_t = eps.detach() if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.dtype))
    if eps_t.shape != mu.shape or sigma.shape != mu.shape:
        raise DimensionError(f"shape mismatch: mu {mu.shape}, sigma {sigma.shape}, eps {eps_t.shape}")
    return add(mu, mul(sigma, eps_t))


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """Σ ½(μ² + σ² − 1 − ln σ²) for a diagonal Gaussian against N(0, I)."""
    if (sigma.data <= 0).any():
        raise DomainError("sigma must be strictly positive")
    s2 = square(sigma)
    terms = add(add(square(mu), s2), neg(add(log(s2), 1.0)))
    return mul(tsum(terms), 0.5)


def mse(pred: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error; with ``mask`` the mean runs over unmasked entries only."""
    target = target.detach() if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = add(pred, neg(target))
    if mask is None:
        return tmean(square(diff))
    m = np.asarray(mask, dtype=pred.dtype)
    count = float(m.sum())
    if count == 0:
        raise DimensionError("mask selects no entries")
    return mul(tsum(mul(square(diff), m)), 1.0 / count)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """−log softmax(logits)[label] for a 1×C logit row."""
    row = logits if logits.data.ndim == 2 else reshape(logits, (1, -1))
    if not 0 <= label < row.shape[1]:
        raise DimensionError(f"label {label} outside {row.shape[1]} classes")
    return neg(tsum(take_col(log_softmax_rows(row), label)))


def take_col(a: Tensor, j: int) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, j] = g[:, 0]
        return (out,)

    return _make(a.data[:, [j]], (a,), backward)


# randomness ------------------------------------------------------------------
def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


class Rng:
    """Counter-based (Philox) random stream with deterministic named children."""

    def __init__(self, seed: int = 0, _key: tuple = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *tags) -> "Rng":
        return Rng(self.seed, self._key + tuple(_tag_int(t) for t in tags))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(size) * scale

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)


# parameters -------------------------------------------------------------------
class ParamStore:
    """Ordered name → trainable tensor map with per-name seeded initialization."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._depth_cache: dict[str, int] = {}

    def add(self, name: str, shape: tuple, init: str = "glorot", value=None) -> Tensor:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if value is not None:
            data = np.array(value, dtype=self.dtype).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "glorot":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) == 2 else (1, shape[-1])
            a = math.sqrt(6.0 / (fan_in + fan_out))
            data = Rng(self.rng_seed).child("init", name).uniform(-a, a, shape).astype(self.dtype)
        elif init == "normal":
            data = (Rng(self.rng_seed).child("init", name).normal(shape) * 0.1).astype(self.dtype)
        else:
            raise ConfigError(f"unknown init scheme {init!r}")
        t = Tensor(data, requires_grad=True)
        self.entries[name] = t
        self._depth_cache.clear()
        return t

    def add_linear(self, tag: str, d_in: int, d_out: int, bias: bool = True) -> None:
        self.add(f"{tag}.W", (d_in, d_out))
        if bias:
            self.add(f"{tag}.b", (1, d_out), init="zeros")

    def add_mlp(self, tag: str, widths: Sequence[int]) -> None:
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.add(f"{tag}.W{i}", (a, b))
            self.add(f"{tag}.b{i}", (1, b), init="zeros")

    def add_attention(self, tag: str, d_query: int, d_key_in: int, d_model: int, d_attn: int | None = None) -> None:
        d_attn = d_attn or d_model
        self.add(f"{tag}.W_q", (d_query, d_attn))
        self.add(f"{tag}.W_k", (d_key_in, d_attn))
        self.add(f"{tag}.W_v", (d_key_in, d_model))

    def mlp_depth(self, tag: str) -> int:
        n = self._depth_cache.get(tag)
        if n is None:
            n = 0
            while f"{tag}.W{n}" in self.entries:
                n += 1
            self._depth_cache[tag] = n
        return n

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.entries[name]
        except KeyError:
            raise ConfigError(f"missing parameter {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.entries.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            if k not in self.entries:
                raise ConfigError(f"unexpected parameter {k!r} in state")
            if self.entries[k].shape != np.shape(v):
                raise DimensionError(f"parameter {k!r}: expected {self.entries[k].shape}, got {np.shape(v)}")
            self.entries[k].data = np.array(v, dtype=self.dtype)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.rng_seed, self.dtype)
        for k, v in self.entries.items():
            other.add(k, v.shape, value=v.data)
        other.moments = {k: (m.copy(), s.copy()) for k, (m, s) in self.moments.items()}
        return other

    def num_values(self) -> int:
        return sum(t.data.size for t in self.entries.values())


def adam_step(params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
              t: int = 1, only: Iterable[str] | None = None) -> None:
    """One bias-corrected Adam update in place; moments live on ``params.moments``."""
    b1, b2 = betas
    names = list(params.entries) if only is None else list(only)
    for name in names:
        p = params[name]
        if p.grad is None:
            raise TrainingError(f"missing gradient for parameter {name!r}")
        g = p.grad
        m, v = params.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.moments[name] = (m, v)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((t.grad ** 2).sum()) for t in params.entries.values() if t.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in params.entries.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


# gradient checking --------------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, tuple] | None
    passed: bool
    checked: int
    tol: float
    failures: list = field(default_factory=list)

    def __str__(self):
        where = f"{self.worst[0]}{list(self.worst[1])}" if self.worst else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_error:.3e} at {where} over {self.checked} coords"


def finite_diff_grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore,
                           h: float = 1e-5, tol: float = 1e-4, max_coords: int | None = None,
                           seed: int = 0, names: Iterable[str] | None = None,
                           floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients against central differences.

    Relative error is |a − n| / max(|a|, |n|, floor). When ``max_coords`` is
    given and smaller than the parameter count, a seeded subsample of that
    many coordinates (at least 200) is checked.
    """
    names = list(params.entries) if names is None else list(names)
    params.clear_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise TrainingError("non-finite loss at the base point")
    loss.backward()
    coords = [(n, idx) for n in names for idx in np.ndindex(params[n].shape)]
    if max_coords is not None and len(coords) > max(max_coords, 200):
        k = max(max_coords, 200)
        pick = Rng(seed).child("gradcheck").gen.choice(len(coords), size=k, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data))
                for n in names}
    worst_err, worst = 0.0, None
    failures = []
    with no_grad():
        for name, idx in coords:
            p = params[name]
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(loss_fn(params).data)
            p.data[idx] = orig - h
            fm = float(loss_fn(params).data)
            p.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                failures.append((name, idx, math.inf))
                worst_err, worst = math.inf, (name, idx)
                continue
            num = (fp - fm) / (2 * h)
            ana = float(analytic[name][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > tol:
                failures.append((name, idx, err))
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, idx)
    return GradCheckReport(worst_err, worst, not failures, len(coords), tol, failures)
