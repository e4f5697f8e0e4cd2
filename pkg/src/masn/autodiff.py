"""Dense float64 tensors with reverse-mode gradients.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates into the ``grad`` slot of every leaf that requires
gradients (normally a :class:`Parameter`).

Leading batch dimensions are allowed everywhere; gradients flowing into a
broadcast operand are summed back to its shape.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_recording = contextvars.ContextVar("masn_autodiff_recording", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (used for finite differences and inference)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # one reduction: the sum is finite iff every entry is (barring overflow near 1e308)
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        # extended precision passes through (finite-difference evaluation only)
        dtype = np.longdouble if getattr(data, "dtype", None) == np.longdouble else np.float64
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return swap_last(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a gradient slot of the same shape."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = False
    if _recording.get():
        for p in parents:
            if p.requires_grad:
                needs = True
                break
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine shape mismatch {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw, _unbroadcast(g, b.shape)

    return _make(xd @ wd + b.data, (x, w, b), backward, "affine")


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def backward(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _make(np.array(x.data[key]), (x,), backward, "getitem")


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), backward, "concat")


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[..., k, :] = x[..., idx[..., k], :] with idx sharing x's leading dims."""
    idx = np.asarray(idx, dtype=np.int64)
    lead = x.shape[:-2]
    if idx.shape[:-1] != lead:
        raise ValueError(f"index leading dims {idx.shape[:-1]} != {lead}")
    n_rows = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"row index out of range [0, {n_rows})")
    p = int(np.prod(lead)) if lead else 1
    flat = x.data.reshape(p, n_rows, x.shape[-1])
    fidx = idx.reshape(p, idx.shape[-1])
    bidx = np.arange(p)[:, None]
    out = flat[bidx, fidx].reshape(lead + (idx.shape[-1], x.shape[-1]))
    shape = x.shape

    def backward(g):
        gx = np.zeros((p, n_rows, shape[-1]))
        np.add.at(gx, (bidx, fidx), g.reshape(p, idx.shape[-1], shape[-1]))
        return (gx.reshape(shape),)

    return _make(out, (x,), backward, "gather_rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs a last dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_cell(x, h, c, w_x, w_h, b) -> Tensor:
    """One LSTM step, gate order (input, forget, candidate, output).

    Returns ``concat([h_new, c_new], -1)`` as a single node; split with
    ``out[..., :hidden]`` and ``out[..., hidden:]``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    n = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * n) or w_h.shape != (n, 4 * n) or b.shape != (4 * n,):
        raise ValueError("lstm_cell weight shapes do not match the hidden size")
    xd, hd, cd = x.data, h.data, c.data
    z = xd @ w_x.data + hd @ w_h.data + b.data
    i = _sigmoid(z[..., :n])
    f = _sigmoid(z[..., n:2 * n])
    u = np.tanh(z[..., 2 * n:3 * n])
    o = _sigmoid(z[..., 3 * n:])
    c_new = f * cd + i * u
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(g):
        gh, gc = g[..., :n], g[..., n:]
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate([
            gc * u * i * (1.0 - i),
            gc * cd * f * (1.0 - f),
            gc * i * (1.0 - u * u),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        flat_gz = gz.reshape(-1, 4 * n)
        return (
            gz @ w_x.data.T,
            gz @ w_h.data.T,
            gc * f,
            xd.reshape(-1, xd.shape[-1]).T @ flat_gz,
            hd.reshape(-1, n).T @ flat_gz,
            flat_gz.sum(axis=0),
        )

    out = np.concatenate([h_new, c_new], axis=-1)
    return _make(out, (x, h, c, w_x, w_h, b), backward, "lstm_cell")


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Ordered mapping of path -> Parameter.

    Paths are unique and enumeration follows insertion order, so two stores
    built by the same code enumerate identically.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, path: str, value) -> Parameter:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        p = Parameter(value)
        self._params[path] = p
        return p

    def __getitem__(self, path: str) -> Parameter:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def paths(self) -> list[str]:
        return list(self._params)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self._params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self._params):
            missing = set(self._params) ^ set(state)
            raise KeyError(f"parameter paths differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            p = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} != {p.shape}")
            p.data = v.copy()
            p.zero_grad()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self._params.items():
            out.add(k, p.data)
        return out

    def num_values(self) -> int:
        return int(np.sum([p.size for p in self._params.values()]))


class ParamScope:
    """Prefix view over a ParamStore; ``scope["w"]`` reads ``prefix/w``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix.rstrip("/")

    def __getitem__(self, name: str) -> Parameter:
        return self.store[f"{self.prefix}/{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}/{name}" in self.store

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self.store, f"{self.prefix}/{name}")


# ---------------------------------------------------------------------------
# finite-difference oracle


def relative_error(g_ad, g_fd):
    g_ad, g_fd = np.asarray(g_ad), np.asarray(g_fd)
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def sample_indices(size: int, max_entries: int = 64) -> np.ndarray:
    """Deterministic evenly strided flat indices, at most ``max_entries``."""
    if size <= max_entries:
        return np.arange(size)
    return (np.arange(max_entries) * size) // max_entries


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    # path -> (flat index, g_ad, g_fd) of the worst entry
    worst: dict[str, tuple] = field(default_factory=dict)
    loss: float = 0.0
    eps: float = 1e-5
    fd_dtype: str = "float64"
    # failing path -> relative error of its worst entry re-checked at eps / 100;
    # a small value there means the eps-step crossed a kink (ReLU, hinge)
    recheck: dict[str, float] = field(default_factory=dict)

    @property
    def roundoff_floor(self) -> float:
        """Rough size of the rounding error in one central difference."""
        unit = float(np.finfo(np.dtype(self.fd_dtype)).eps)
        return unit * max(abs(self.loss), 1.0) / self.eps

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self, tol: float) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v >= tol}

    def ok(self, tol: float) -> bool:
        return not self.failures(tol)

    def roundoff_limited(self, tol: float) -> dict[str, bool]:
        """For each failing path: is the worst mismatch within the rounding floor?"""
        out = {}
        for k in self.failures(tol):
            _, g_ad, g_fd = self.worst[k]
            out[k] = abs(g_ad - g_fd) <= self.roundoff_floor
        return out

    def format(self, tol: float | None = None) -> str:
        width = max((len(k) for k in self.errors), default=4)
        lines = [f"{'path':<{width}}  entries  max_rel_err"]
        for k, v in self.errors.items():
            flag = ""
            if tol is not None and v >= tol:
                _, g_ad, g_fd = self.worst[k]
                flag = f"  FAIL (ad {g_ad:.3e}, fd {g_fd:.3e})"
                if k in self.recheck:
                    flag += f", at eps/100: {self.recheck[k]:.1e}"
            lines.append(f"{k:<{width}}  {self.checked[k]:>7}  {v:.3e}{flag}")
        return "\n".join(lines)


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore,
               eps: float = 1e-5, max_entries: int = 64,
               paths: Iterable[str] | None = None, extended: bool = True,
               recheck_above: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` must rebuild the forward pass from ``params`` on every call.
    With ``extended`` the perturbed losses are evaluated in ``np.longdouble``,
    which keeps the rounding error of ``(up - down) / 2 eps`` well below the
    smallest gradients a full model produces. The reverse-mode side is always
    float64. Paths whose error reaches ``recheck_above`` get their worst entry
    re-measured with a 100x smaller step (diagnostic only; ``errors`` keeps
    the eps-step value).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    with no_grad():
        first = loss_fn(params).item()
        second = loss_fn(params).item()
    if first != second:
        raise RuntimeError("loss_fn is not deterministic across identical calls")
    params.zero_grad()
    loss_fn(params).backward()
    grads = {k: p.grad.reshape(-1).copy() for k, p in params.items()}
    params.zero_grad()

    fd_dtype = np.longdouble if extended else np.float64
    report = GradCheckReport(loss=first, eps=eps, fd_dtype=np.dtype(fd_dtype).name)
    saved = {k: p.data for k, p in params.items()}
    try:
        for k, p in params.items():
            p.data = saved[k].astype(fd_dtype)
        for path in (params.paths() if paths is None else list(paths)):
            flat = params[path].data.reshape(-1)
            g_ad = grads[path]
            idx = sample_indices(flat.size, max_entries)
            worst, worst_entry = -1.0, None
            for i in idx:
                g_fd = _central_difference(loss_fn, params, flat, i, fd_dtype(eps))
                err = float(relative_error(g_ad[i], g_fd))
                if err > worst:
                    worst, worst_entry = err, (int(i), float(g_ad[i]), g_fd)
            if worst >= recheck_above:
                i = worst_entry[0]
                g_small = _central_difference(loss_fn, params, flat, i, fd_dtype(eps) / 100)
                report.recheck[path] = float(relative_error(g_ad[i], g_small))
            report.errors[path] = max(worst, 0.0)
            report.worst[path] = worst_entry
            report.checked[path] = len(idx)
    finally:
        for k, p in params.items():
            p.data = saved[k]
    return report


def _central_difference(loss_fn, params, flat, i, eps):
    orig = flat[i]
    with no_grad():
        flat[i] = orig + eps
        up = loss_fn(params).data
        flat[i] = orig - eps
        down = loss_fn(params).data
    flat[i] = orig
    return float((up - down) / (2 * eps))


def check_finite_grads(params: ParamStore) -> None:
    for path, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient at {path}")
