"""Reverse-mode automatic differentiation on numpy buffers.

Small eager tape: every operation returns a new Tensor holding its value,
links to its parents, and a closure that routes the output gradient to
them.  `backward()` on a scalar walks the tape in reverse topological
order.  Float32 is the working precision; wrap code in `precision("float64")`
for finite-difference verification.  Single-threaded and deterministic:
identical inputs replay bit-identical forward and backward passes.

Hard index selections (top-k, gather indices, comparison masks) are
constants to the tape: gradients flow through selected values only.
"""

from __future__ import annotations

import contextlib
import struct

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

NEG_LARGE = -1e9  # stands in for -inf inside masked attention logits


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for new tensors ("float32"/"float64")."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = {"float32": np.float32, "float64": np.float64}[name]
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # ---- bookkeeping

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operators

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and not isinstance(axes[0], int):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_t(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_t(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out = Tensor(data, _parents=tuple(parents), _backward=backward)
        out.requires_grad = True
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bw(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), bw)


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data  # ties route to the first argument

    def bw(g):
        a._accumulate(_unbroadcast(g * pick_a, a.shape))
        b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _make(data, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * pick_a, a.shape))
        b._accumulate(_unbroadcast(g * ~pick_a, b.shape))

    return _make(data, (a, b), bw)


# ---------------------------------------------------------------------------
# pointwise


def exp(x) -> Tensor:
    x = _wrap(x)
    data = np.exp(x.data)

    def bw(g):
        x._accumulate(g * data)

    return _make(data, (x,), bw)


def log(x) -> Tensor:
    x = _wrap(x)
    data = np.log(x.data)

    def bw(g):
        x._accumulate(g / x.data)

    return _make(data, (x,), bw)


def sqrt(x) -> Tensor:
    x = _wrap(x)
    data = np.sqrt(x.data)

    def bw(g):
        x._accumulate(g * 0.5 / data)

    return _make(data, (x,), bw)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    data = np.where(mask, x.data, 0.0)

    def bw(g):
        x._accumulate(g * mask)

    return _make(data, (x,), bw)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    data = _sigmoid_np(x.data)

    def bw(g):
        x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), bw)


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = _wrap(x)
    data = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - data * data))

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    data = x.data.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(old))

    return _make(data, (x,), bw)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(data, (x,), bw)


def swap_last(x) -> Tensor:
    """Transpose the last two axes (matrix transpose for batched tensors)."""
    x = _wrap(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(parts, axis=0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeError(f"concat axis {axis}: incompatible {[tuple(q.shape) for q in parts]}")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            p._accumulate(g[tuple(sl)])

    return _make(data, tuple(parts), bw)


def take(x, idx) -> Tensor:
    """Numpy indexing; gradient scatters (with accumulation) back to x."""
    x = _wrap(x)
    data = x.data[idx]

    def bw(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        x._accumulate(buf)

    return _make(data, (x,), bw)


def gather(x, index: np.ndarray, axis: int = -1) -> Tensor:
    """take_along_axis with gradient; `index` is a constant integer array
    of the same rank as x."""
    x = _wrap(x)
    index = np.asarray(index)
    if index.ndim != x.ndim:
        raise ShapeError(f"gather: index rank {index.ndim} != tensor rank {x.ndim}")
    data = np.take_along_axis(x.data, index, axis=axis)
    ax = axis % x.ndim

    def bw(g):
        buf = np.zeros_like(x.data)
        sliders = tuple(
            np.arange(n).reshape([-1 if i == d else 1 for i in range(index.ndim)])
            for d, n in enumerate(index.shape)
        )
        full = tuple(index if d == ax else np.broadcast_to(sliders[d], index.shape) for d in range(index.ndim))
        np.add.at(buf, full, g)
        x._accumulate(buf)

    return _make(data, (x,), bw)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the boolean mask holds; their gradient is 0."""
    x = _wrap(x)
    keep = ~np.asarray(mask, dtype=bool)
    data = np.where(keep, x.data, value)

    def bw(g):
        x._accumulate(g * keep)

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_t(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(gg, x.shape).copy() if gg.shape != x.shape else gg)

    return _make(data, (x,), bw)


def mean_t(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_t(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# composite / specialized ops


def softmax(x, axis=-1) -> Tensor:
    """Stable softmax; entries at NEG_LARGE get exactly zero weight."""
    x = _wrap(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))

    return _make(data, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = _wrap(x)
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    data = x.data - lse

    def bw(g):
        x._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean_t(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean_t(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(xc, inv), gamma), beta)


def l2_normalize(x, axis=-1, eps: float = 1e-12) -> Tensor:
    nrm = sqrt(add(sum_t(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, nrm)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2D convolution: x (B,C,H,W) * w (O,C,kh,kw) -> (B,O,Ho,Wo)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    Bn, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C != C2:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}, stride {s}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((Bn, O, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
            out += np.einsum("bchw,oc->bohw", xs, w.data[:, :, i, j], optimize=True)
    if b is not None:
        b = _wrap(b)
        out = out + b.data.reshape(1, O, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]
                dw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xs, optimize=True)
                dxp[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += np.einsum(
                    "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True
                )
        x._accumulate(dxp[:, :, p : p + H, p : p + W] if p else dxp)
        w._accumulate(dw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy over all elements, stable for large |logit|."""
    x = _wrap(logits)
    t = _wrap(targets)
    z = x.data
    elems = np.maximum(z, 0.0) - z * t.data + np.log1p(np.exp(-np.abs(z)))
    data = np.asarray(elems.mean())
    n = float(z.size)

    def bw(g):
        x._accumulate(g * (_sigmoid_np(z) - t.data) / n)
        if t.requires_grad or t._parents:
            t._accumulate(g * (-z) / n)

    return _make(data, (x, t), bw)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) distance."""
    x = _wrap(pred)
    t = _wrap(target)
    d = x.data - t.data
    ad = np.abs(d)
    elems = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    data = np.asarray(elems.mean())
    n = float(d.size)

    def bw(g):
        gd = g * np.clip(d / beta, -1.0, 1.0) / n
        x._accumulate(gd)
        if t.requires_grad or t._parents:
            t._accumulate(-gd)

    return _make(data, (x, t), bw)


def topk_indices(values, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the k largest entries, ties broken toward the lowest index.

    Plain integer output: a hard selection, invisible to the tape.
    """
    v = values.data if isinstance(values, Tensor) else np.asarray(values)
    if k > v.shape[axis]:
        raise ShapeError(f"topk k={k} exceeds axis size {v.shape[axis]}")
    order = np.argsort(-v, axis=axis, kind="stable")
    sl = [slice(None)] * v.ndim
    sl[axis] = slice(0, k)
    return np.sort(order[tuple(sl)], axis=axis)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5, n_samples: int = 200, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Samples >= n_samples coordinates across params (proportional to size).
    Call inside `precision("float64")` for meaningful tolerances.

    The difference quotient carries cancellation noise of order
    |f| * machine_eps / eps; that provable bound is subtracted from the
    disagreement before normalizing, so coordinates whose true gradient is
    exactly zero do not read as failures.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value")
    out.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    total = sum(p.size for p in params.values())
    worst = 0.0
    for name, p in params.items():
        n_here = max(1, int(np.ceil(n_samples * p.size / total)))
        flat_idx = rng.choice(p.size, size=min(n_here, p.size), replace=False)
        for fi in flat_idx:
            midx = np.unravel_index(fi, p.shape)
            orig = float(p.data[midx])
            p.data[midx] = orig + eps
            with no_grad():
                up = float(f().data)
            p.data[midx] = orig - eps
            with no_grad():
                dn = float(f().data)
            p.data[midx] = orig
            fd = (up - dn) / (2.0 * eps)
            ad = float(grads[name].reshape(-1)[fi])
            if not (np.isfinite(fd) and np.isfinite(ad)):
                raise FloatingPointError(f"non-finite gradient for {name}[{fi}]")
            noise = 32.0 * max(abs(up), abs(dn), 1.0) * float(np.finfo(np.float64).eps) / eps
            denom = max(abs(fd), abs(ad), 1e-8)
            worst = max(worst, max(0.0, abs(fd - ad) - noise) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"CMT1"


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """`CMT1` | u32 count | per tensor: u32 name-len, name, u32 rank, u32 dims..., f32-LE payload."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name in sorted(named):
            arr = np.asarray(named[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("bad checkpoint magic; expected CMT1")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"truncated checkpoint at tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        return out
