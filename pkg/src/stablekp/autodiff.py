"""Small tape-based reverse-mode autodiff over numpy arrays.

Ops record a backward closure on the active :class:`Tape`; ``tape.backward(root)``
replays them in reverse and accumulates gradients into every ``Value`` that
requires them. Leaf parameters live in a :class:`ParamStore` and can be shared
by several tapes; their gradients accumulate until the optimizer zeroes them.

All arithmetic is float64.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError, TrainingDivergedError

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Value:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


class Tape:
    """Records ops while active (``with tape:``) and replays them backwards."""

    def __init__(self):
        self.nodes: list[tuple[Value, tuple[Value, ...], Callable]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: Value, parents: tuple, backward: Callable) -> None:
        self.nodes.append((out, parents, backward))

    def backward(self, root: Value, grad=None) -> None:
        root.grad = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for out, parents, fn in reversed(self.nodes):
            if not out.grad.any():
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is not None and p.requires_grad:
                    p.grad = p.grad + g


def _make(data, parents: Sequence[Value], backward: Callable) -> Value:
    needs = any(p.requires_grad for p in parents)
    out = Value(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Value:
    a, b = lift(a), lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Value:
    a, b = lift(a), lift(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Value:
    a, b = lift(a), lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Value:
    a, b = lift(a), lift(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def log(a) -> Value:
    a = lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Value:
    a = lift(a)
    return _make(a.data ** 2, (a,), lambda g: (2.0 * a.data * g,))


def total(a) -> Value:
    """Sum of all entries (scalar)."""
    a = lift(a)
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def getitem(a, key) -> Value:
    a = lift(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), backward)


def gather(a, index) -> Value:
    """Rows of ``a`` selected by an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    return getitem(a, index)


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [lift(v) for v in values]
    data = np.concatenate([v.data for v in vals], axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(data, vals, lambda g: tuple(np.split(g, sizes, axis=axis)))


def dense(x, W, b) -> Value:
    """Affine layer over the last axis: ``x @ W.T + b`` with W of shape (n_out, n_in)."""
    x, W, b = lift(x), lift(W), lift(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise InvalidArgumentError(
            f"dense shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        return g @ W.data, g2.T @ x2, g2.sum(axis=0)

    return _make(out, (x, W, b), backward)


def affine(x, R: np.ndarray, t: np.ndarray) -> Value:
    """Apply a constant rigid map to rows: ``x @ R.T + t``."""
    x = lift(x)
    R = np.asarray(R, dtype=np.float64)
    return _make(x.data @ R.T + np.asarray(t, dtype=np.float64), (x,), lambda g: (g @ R,))


def relu(x) -> Value:
    x = lift(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x) -> Value:
    """ln(1 + e^x), evaluated as logaddexp(0, x) so large |x| neither overflows nor underflows."""
    x = lift(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def set_maxpool(x, axis: int = -2) -> Value:
    """Channel-wise max over a set axis; gradient goes to the first argmax only."""
    x = lift(x)
    if x.shape[axis] == 0:
        raise InvalidArgumentError("set_maxpool over an empty set")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis=axis), (x,), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Value:
    x = lift(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = (g - out * proj) / safe
        return (np.where(norm > eps, gx, g / eps),)

    return _make(out, (x,), backward)


def scalar_op(value: float, grads: Iterable[tuple]) -> Value:
    """A scalar whose gradient w.r.t. each input Value is supplied analytically.

    ``grads`` is a sequence of ``(input, d value / d input)`` pairs; inputs that
    are plain arrays are ignored.
    """
    pairs = [(v, np.asarray(g, dtype=np.float64)) for v, g in grads if isinstance(v, Value)]
    parents = tuple(v for v, _ in pairs)
    local = [g for _, g in pairs]
    return _make(np.float64(value), parents, lambda g: tuple(g * lg for lg in local))


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Value) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named parameters plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Value] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.meta: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def add(self, name: str, data) -> Value:
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter {name!r}")
        val = Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = val
        self.m[name] = np.zeros_like(val.data)
        self.v[name] = np.zeros_like(val.data)
        return val

    def __getitem__(self, name: str) -> Value:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def n_values(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        with self._lock:
            for name, g in grads.items():
                self.params[name].grad = self.params[name].grad + g

    def scale_grads(self, factor: float) -> None:
        for v in self.params.values():
            v.grad = v.grad * factor

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, val in self.params.items():
            out.add(name, val.data.copy())
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.step = self.step
        out.meta = {k: np.array(v) for k, v in self.meta.items()}
        return out


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update in place; gradients are zeroed afterwards."""
    for name, val in store.params.items():
        if not np.all(np.isfinite(val.grad)):
            raise TrainingDivergedError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, val in store.params.items():
        g = val.grad
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / c1
        v_hat = store.v[name] / c2
        val.data = val.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        val.zero_grad()
    return store


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    kinks: list = field(default_factory=list)
    worst: Optional[tuple] = None

    def __float__(self):
        return self.max_rel_error


_EPS = float(np.finfo(np.float64).eps)
# wide-stencil refinement: step multiple and the number of ulps of slack allowed
_WIDE = 100.0
_ULPS = 16.0


def _central(f: Callable[[float], float], s: float) -> tuple[float, float, float]:
    fp, fm = f(s), f(-s)
    return (fp - fm) / (2 * s), fp, fm


def _probe(f: Callable[[float], float], f0: float, h: float,
           refine: bool = False) -> tuple[float, bool]:
    """Numeric derivative along one coordinate and whether the stencil looks non-smooth.

    Two step sizes are compared using function values only, so a wrong
    analytic gradient can never be mistaken for a kink:

    * the one-sided slopes differ by an amount that does not halve when the
      step halves (a slope jump at x itself), or
    * the central differences at h and h/2 disagree by more than smooth
      truncation allows (a slope jump somewhere inside the stencil).

    Smooth coordinates are estimated by Richardson extrapolation of the two
    central differences. With ``refine`` the estimate is repeated on a wider
    stencil, which removes most of the roundoff that dominates tiny
    derivatives; the wide value is used only when its two extrapolations agree
    and it lies within the roundoff bar of the narrow one.
    """
    c1, fp, fm = _central(f, h)
    c2, fp2, fm2 = _central(f, h / 2)
    gap1 = abs((fp - f0) - (f0 - fm)) / h
    gap2 = abs((fp2 - f0) - (f0 - fm2)) / (h / 2)
    jump_at_x = gap1 > 1e-7 and gap2 > 0.75 * gap1
    jump_inside = abs(c1 - c2) > 1e-7 + 1e-6 * abs(c2)
    if jump_at_x or jump_inside:
        return c1, True
    narrow = (4 * c2 - c1) / 3  # Richardson: cancels the h^2 truncation term
    if not refine:
        return narrow, False
    H = _WIDE * h
    C1, *v1 = _central(f, H)
    C2, *v2 = _central(f, H / 2)
    C4, *v4 = _central(f, H / 4)
    scale = max(abs(f0), abs(fp), abs(fm), *map(abs, v1 + v2 + v4))
    wide = (4 * C2 - C1) / 3
    wide_inner = (4 * C4 - C2) / 3
    wide_ok = abs(wide - wide_inner) <= _ULPS * _EPS * scale / (H / 4)
    if wide_ok and abs(wide - narrow) <= _ULPS * _EPS * scale / (h / 2):
        return wide, False
    return narrow, False


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fn: Callable[[Value], Value], x, h: float = 1e-6, coords=None,
               refine: bool = True) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn`` at ``x`` with central differences.

    Coordinates where ``fn`` is not smooth within the stencil (a ReLU hinge, a
    max-pool or nearest-neighbour switch) are reported in ``kinks`` and left
    out of the maximum.
    """
    x0 = np.array(x, dtype=np.float64)
    xv = Value(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(xv)
    tape.backward(out)
    analytic = xv.grad.reshape(-1)
    flat = x0.reshape(-1)
    f0 = float(data_of(fn(Value(x0))))
    coords = range(flat.size) if coords is None else coords
    worst, worst_at, kinks, n = 0.0, None, [], 0
    for i in coords:
        def shifted(delta, i=i):
            xs = flat.copy()
            xs[i] += delta
            return float(data_of(fn(Value(xs.reshape(x0.shape)))))
        numeric, kink = _probe(shifted, f0, h, refine)
        if kink:
            kinks.append(int(i))
            continue
        err = _rel_err(analytic[i], numeric)
        n += 1
        if err > worst:
            worst, worst_at = err, (int(i), float(analytic[i]), numeric)
    return GradCheckReport(worst, n, kinks, worst_at)


def grad_check_store(loss_fn: Callable[[], Value], store: ParamStore, h: float = 1e-6,
                     per_param: Optional[int] = None, seed: int = 0,
                     refine: bool = False) -> GradCheckReport:
    """Finite-difference check of ``loss_fn`` w.r.t. the parameters of ``store``.

    ``per_param`` limits the number of randomly chosen entries tested per tensor.
    """
    store.zero_grad()
    with Tape() as tape:
        out = loss_fn()
    tape.backward(out)
    analytic = {k: v.grad.copy() for k, v in store.items()}
    store.zero_grad()
    f0 = float(loss_fn().data)
    rng = np.random.default_rng(seed)
    worst, worst_at, kinks, n = 0.0, None, [], 0
    for name, val in store.items():
        size = val.data.size
        idx = np.arange(size)
        if per_param is not None and size > per_param:
            idx = np.sort(rng.choice(size, per_param, replace=False))
        flat = val.data.reshape(-1)
        for i in idx:
            orig = flat[i]

            def shifted(delta):
                flat[i] = orig + delta
                try:
                    return float(loss_fn().data)
                finally:
                    flat[i] = orig
            numeric, kink = _probe(shifted, f0, h, refine)
            if kink:
                kinks.append((name, int(i)))
                continue
            a = float(analytic[name].reshape(-1)[i])
            err = _rel_err(a, numeric)
            n += 1
            if err > worst:
                worst, worst_at = err, (name, int(i), a, numeric)
    store.zero_grad()
    return GradCheckReport(worst, n, kinks, worst_at)


# ---------------------------------------------------------------------------
# checkpoint format: b"USIP", u32 version, then records
#   u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f64le values (row-major)

MAGIC = b"USIP"
FORMAT_VERSION = 1


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")  # keeps 0-d scalars at rank 0
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def save_checkpoint(path, store: ParamStore, include_optimizer: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in store.meta.items():
            _write_record(fh, f"meta.{name}", np.asarray(arr))
        for name, val in store.items():
            _write_record(fh, name, val.data)
        if include_optimizer:
            _write_record(fh, "adam.step", np.asarray(float(store.step)))
            for name in store:
                _write_record(fh, f"adam.m/{name}", store.m[name])
                _write_record(fh, f"adam.v/{name}", store.v[name])


class CheckpointError(InvalidArgumentError):
    kind = "bad-checkpoint"


def read_records(path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 8
    out = []
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out.append((name, arr.astype(np.float64)))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from None
    return out


def load_checkpoint(path) -> ParamStore:
    store = ParamStore()
    moments = []
    for name, arr in read_records(path):
        if name.startswith("meta."):
            store.meta[name[5:]] = arr
        elif name == "adam.step":
            store.step = int(arr.reshape(-1)[0])
        elif name.startswith("adam.m/") or name.startswith("adam.v/"):
            moments.append((name, arr))
        else:
            store.add(name, arr)
    for name, arr in moments:
        target = store.m if name.startswith("adam.m/") else store.v
        key = name[7:]
        if key not in store:
            raise CheckpointError(f"{path}: moment buffer for unknown parameter {key!r}")
        target[key] = arr.copy()
    return store
