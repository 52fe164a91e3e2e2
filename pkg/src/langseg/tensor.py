"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the recorded graph in reverse topological order and accumulates
gradients of parameters into a :class:`ParamStore`.
"""
from __future__ import annotations

import io
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

__all__ = [
    "Tensor", "ParamStore", "backward", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "matmul", "tsum", "mean", "exp", "log",
    "tanh", "relu", "sqrt", "clip_min", "reshape", "transpose", "concat",
    "broadcast_to", "index", "take_rows", "gather_classes", "conv2d", "bilinear_resize",
    "softmax", "softmax_channels", "save_tensor", "load_tensor",
    "write_tensor", "read_tensor",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable n-d array of doubles that may sit on a compute graph."""

    __slots__ = ("data", "_parents", "_backward", "requires_grad", "__weakref__")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), backward_fn: BackwardFn | None = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # constant subgraphs need no tape entry
        self._parents = parents if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data) -> Tensor:
    return Tensor(data)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = constant(a)
    return Tensor(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return Tensor(np.maximum(a.data, 0.0), (a,), lambda g: (g * on,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    on = a.data > floor
    return Tensor(np.where(on, a.data, floor), (a,), lambda g: (g * on,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [constant(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing, ``a[key]``."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return Tensor(np.array(a.data[key]), (a,), bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer index array."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor(table.data[ids], (table,), bw)


def gather_classes(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Pick ``probs[..., labels[p], p]`` along the channel axis (-3).

    ``probs`` is ``[..., C, H, W]`` and ``labels`` is ``[..., H, W]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.expand_dims(labels, -3)
    shape = probs.shape

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, np.expand_dims(g, -3), axis=-3)
        return (full,)

    return Tensor(np.take_along_axis(probs.data, idx, axis=-3)[..., 0, :, :], (probs,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor(ad @ bd, (a, b), bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is ``[Cin, H, W]`` or batched ``[N, Cin, H, W]``; ``kernel`` is
    ``[Cout, Cin, kh, kw]`` with odd spatial size.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects [Cin,H,W] input and 4-d kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel spatial size must be odd, got {kh}x{kw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {x.shape} (pad {padding})")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd

    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, cin, ho * wo)
    else:
        taps = [xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                for i in range(kh) for j in range(kw)]
        cols = np.stack(taps, axis=2).reshape(n, cin * kh * kw, ho * wo)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(kmat, cols).reshape(n, cout, ho, wo)

    def bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if not x.requires_grad:
            return None, gk
        gcols = np.matmul(kmat.T, g2)
        if kh == 1 and kw == 1 and stride == 1 and not padding:
            gx = gcols.reshape(n, cin, h, w)
            return (gx if batched else gx[0]), gk
        gxp = np.zeros((n, cin, hp, wp))
        if kh == 1 and kw == 1:
            gxp[:, :, ::stride, ::stride][:, :, :ho, :wo] += gcols.reshape(n, cin, ho, wo)
        else:
            gcols = gcols.reshape(n, cin, kh * kw, ho, wo)
            t = 0
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, t]
                    t += 1
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx if batched else gx[0]), gk

    return Tensor(out if batched else out[0], (x, kernel), bw)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize over the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return Tensor(x.data.copy(), (x,), lambda g: (g,))
    rh, rw = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    out = rh @ x.data @ rw.T
    return Tensor(out, (x,), lambda g: (rh.T @ g @ rw,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return Tensor(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of ``[..., C, H, W]``."""
    return softmax(logits, axis=-3)


# ---------------------------------------------------------------- differentiation

def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients of leaves found in ``params`` are *added* to its accumulators,
    so calling twice without :meth:`ParamStore.zero_grad` accumulates.
    Returns the raw leaf gradients keyed by ``id(tensor)``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for name, value in params.items():
            g = leaves.get(id(value))
            if g is not None:
                params.grads[name] += g
    return leaves


class ParamStore:
    """Named learnable tensors with gradient accumulators.

    Names are hierarchical strings such as ``"decoder.head.weight"`` and are
    always iterated in lexicographic order.
    """

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._values: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, arr in (entries or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> Tensor:
        if name in self._values:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        t = Tensor(arr, requires_grad=True)
        self._values[name] = t
        self.grads[name] = np.zeros_like(arr)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._values[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._values[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        old = self[name]
        arr = np.array(value, dtype=np.float64)
        if arr.shape != old.shape:
            raise DimensionError(f"{name}: new value shape {arr.shape} != {old.shape}")
        # rebind rather than mutate so tensors held by finished graphs stay valid
        self._values[name] = Tensor(arr, requires_grad=True)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(t.size for t in self._values.values())

    def frozen(self) -> "ParamStore":
        """Constant view for inference: ops on it record no tape."""
        out = ParamStore()
        for name, t in self.items():
            out._values[name] = Tensor(t.data)
            out.grads[name] = np.zeros_like(t.data)
        return out

    def copy(self) -> "ParamStore":
        return ParamStore({n: t.data.copy() for n, t in self.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.items()}


# ---------------------------------------------------------------- serialization

def write_tensor(fh, arr: np.ndarray) -> None:
    """``TNSR v1 <rank> <dims...>\\n`` then little-endian float64 row-major."""
    arr = np.asarray(arr, dtype=np.float64)
    dims = " ".join(str(d) for d in arr.shape)
    header = f"TNSR v1 {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    line = fh.readline()
    parts = line.decode("ascii", errors="replace").split()
    if len(parts) < 3 or parts[0] != "TNSR" or parts[1] != "v1":
        raise FormatError(f"bad tensor header {line[:40]!r}")
    rank = int(parts[2])
    shape = tuple(int(d) for d in parts[3:])
    if len(shape) != rank:
        raise FormatError(f"tensor header rank {rank} does not match dims {shape}")
    count = int(np.prod(shape)) if shape else 1
    buf = fh.read(8 * count)
    if len(buf) != 8 * count:
        raise FormatError(f"truncated tensor payload: wanted {8 * count} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
