"""Reverse-mode differentiation over dense real64 / complex128 numpy arrays.

Every op accepts either plain arrays or :class:`Node` objects.  With plain
arrays the op just computes the value (no recording), so the same model code
serves inference and training.  When any operand is a Node the result is
appended to that node's :class:`Tape` together with a closure mapping the
output cotangent to operand cotangents.

Complex cotangents follow the convention ``dL/dRe + 1j * dL/dIm`` for a real
scalar loss ``L``; with it the adjoint of a complex-linear map ``A`` is
``A^H`` and the adjoint of the unitary FFT is the inverse FFT.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

REAL = np.dtype(np.float64)
COMPLEX = np.dtype(np.complex128)


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "parents", "backward_fn", "tape", "index", "op", "name")

    def __init__(self, value, parents, backward_fn, tape, op, name=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.op = op
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}, dtype={self.dtype})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of one forward evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    def leaf(self, value, name: str | None = None) -> Node:
        value = _as_array(value)
        if name is None:
            name = f"leaf{len(self.leaves)}"
        if name in self.leaves:
            raise TapeError(f"duplicate leaf name {name!r}")
        node = Node(value, (), None, self, "leaf", name)
        self.leaves[name] = node
        return node

    def leaves_from(self, params: Mapping[str, np.ndarray]) -> dict[str, Node]:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def backward(self, out: Node) -> dict[str, np.ndarray]:
        """Gradients of the real scalar ``out`` with respect to every leaf."""
        if not isinstance(out, Node) or out.tape is not self or not self.nodes:
            raise TapeError("backward called before forward: output is not recorded on this tape")
        if out.value.size != 1 or np.iscomplexobj(out.value):
            raise TapeError(f"backward needs a real scalar output, got shape {out.shape} {out.dtype}")
        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.backward_fn is None:
                if g is not None:
                    grads[node.index] = g
                continue
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if parent is None or pg is None:
                    continue
                if pg.shape != parent.value.shape:
                    raise TapeError(f"{node.op}: adjoint shape {pg.shape} != operand shape {parent.shape}")
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        result = {}
        for name, leaf in self.leaves.items():
            g = grads.get(leaf.index)
            result[name] = np.zeros_like(leaf.value) if g is None else g
        return result

    def clear(self):
        """Drop recorded intermediates; nodes reference the tape, so free them eagerly."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
        self.nodes = []
        self.leaves = {}


def value(x):
    return x.value if isinstance(x, Node) else x


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    if np.iscomplexobj(a):
        return a.astype(COMPLEX, copy=False)
    return a.astype(REAL, copy=False)


def _operand(x):
    if isinstance(x, Node):
        return x.value, x
    if isinstance(x, (int, float, complex, np.number)):
        return x, None
    return _as_array(x), None


def _record(op, out, parents, backward_fn):
    nodes = [p for p in parents if p is not None]
    if not nodes:
        return out
    tape = nodes[0].tape
    for p in nodes[1:]:
        if p.tape is not tape:
            raise TapeError(f"{op}: operands recorded on different tapes")
    return Node(out, tuple(parents), backward_fn, tape, op)


def _is_complex(a) -> bool:
    return np.iscomplexobj(a)


def _check_dtypes(op, a, b):
    # python scalars and 0-d arrays may mix; tensors never silently promote
    if (isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and a.ndim and b.ndim
            and _is_complex(a) != _is_complex(b)):
        raise DTypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype} (use complex_ to promote)")


def _broadcast_shape(op, sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None


def _unbroadcast(g, shape, real):
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
    if real and np.iscomplexobj(g):
        g = g.real
    return g


def _shape(x):
    return np.shape(x)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, an = _operand(a)
    bv, bn = _operand(b)
    _check_dtypes("add", av, bv)
    _broadcast_shape("add", _shape(av), _shape(bv))
    out = av + bv
    sa, sb = _shape(av), _shape(bv)
    ra, rb = not _is_complex(av), not _is_complex(bv)
    return _record("add", out, (an, bn),
                   lambda g: (_unbroadcast(g, sa, ra), _unbroadcast(g, sb, rb)))


def sub(a, b):
    av, an = _operand(a)
    bv, bn = _operand(b)
    _check_dtypes("sub", av, bv)
    _broadcast_shape("sub", _shape(av), _shape(bv))
    out = av - bv
    sa, sb = _shape(av), _shape(bv)
    ra, rb = not _is_complex(av), not _is_complex(bv)
    return _record("sub", out, (an, bn),
                   lambda g: (_unbroadcast(g, sa, ra), _unbroadcast(-g, sb, rb)))


def mul(a, b):
    """Hadamard product (with numpy broadcasting)."""
    av, an = _operand(a)
    bv, bn = _operand(b)
    _check_dtypes("hadamard", av, bv)
    _broadcast_shape("hadamard", _shape(av), _shape(bv))
    out = av * bv
    sa, sb = _shape(av), _shape(bv)
    ra, rb = not _is_complex(av), not _is_complex(bv)

    def back(g):
        ga = _unbroadcast(g * np.conj(bv), sa, ra) if an is not None else None
        gb = _unbroadcast(g * np.conj(av), sb, rb) if bn is not None else None
        return ga, gb

    return _record("hadamard", out, (an, bn), back)


def div(a, b):
    av, an = _operand(a)
    bv, bn = _operand(b)
    if _is_complex(av) or _is_complex(bv):
        raise DTypeError("div: real operands only")
    _broadcast_shape("div", _shape(av), _shape(bv))
    out = av / bv
    sa, sb = _shape(av), _shape(bv)

    def back(g):
        ga = _unbroadcast(g / bv, sa, True) if an is not None else None
        gb = _unbroadcast(-g * out / bv, sb, True) if bn is not None else None
        return ga, gb

    return _record("div", out, (an, bn), back)


def scale(x, c):
    """Multiply by a constant scalar (real or complex)."""
    xv, xn = _operand(x)
    if _is_complex(c) and not _is_complex(xv):
        raise DTypeError("scale: complex factor on a real tensor")
    out = xv * c
    return _record("scale", out, (xn,), lambda g: (g * np.conj(c),))


def _unary(op, f, df, real_only=True):
    def apply(x):
        xv, xn = _operand(x)
        if real_only and _is_complex(xv):
            raise DTypeError(f"{op}: real tensors only")
        out = f(xv)
        return _record(op, out, (xn,), lambda g: (g * df(xv, out),))
    apply.__name__ = op
    return apply


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


tanh = _unary("tanh", np.tanh, lambda x, y: 1.0 - y * y)
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))
sigmoid = _unary("sigmoid", _sigmoid, lambda x, y: y * (1.0 - y))
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
square = _unary("square", np.square, lambda x, y: 2.0 * x)


# ---------------------------------------------------------------- linear algebra

def matmul(x, w):
    """``x @ w`` for ``x`` of shape (..., k) and a 2-D ``w`` of shape (k, n)."""
    xv, xn = _operand(x)
    wv, wn = _operand(w)
    _check_dtypes("matmul", xv, wv)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {xv.shape} and {wv.shape}")
    out = xv @ wv

    def back(g):
        gx = g @ np.conj(wv).T if xn is not None else None
        gw = None
        if wn is not None:
            gw = np.conj(xv.reshape(-1, xv.shape[-1])).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _record("matmul", out, (xn, wn), back)


def einsum(subscripts: str, a, b):
    """Two-operand einsum with explicit index letters (no ellipsis)."""
    av, an = _operand(a)
    bv, bn = _operand(b)
    _check_dtypes("einsum", av, bv)
    ins, sout = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if len(sa) != av.ndim or len(sb) != bv.ndim:
        raise ShapeError(f"einsum: subscripts {subscripts!r} do not fit shapes {av.shape} and {bv.shape}")
    try:
        out = np.einsum(subscripts, av, bv, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum: incompatible shapes {av.shape} and {bv.shape} for {subscripts!r}") from None

    def back(g):
        ga = np.einsum(f"{sout},{sb}->{sa}", g, np.conj(bv), optimize=True) if an is not None else None
        gb = np.einsum(f"{sout},{sa}->{sb}", g, np.conj(av), optimize=True) if bn is not None else None
        if ga is not None and not _is_complex(av):
            ga = ga.real
        if gb is not None and not _is_complex(bv):
            gb = gb.real
        return ga, gb

    return _record("einsum", out, (an, bn), back)


# ---------------------------------------------------------------- reductions / reshaping

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    xv, xn = _operand(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    shape = xv.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (xn,), back)


def mean(x, axis=None, keepdims=False):
    xv = value(x)
    count = xv.size if axis is None else int(np.prod([xv.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    xv, xn = _operand(x)
    old = xv.shape
    out = xv.reshape(shape)
    return _record("reshape", out, (xn,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    xv, xn = _operand(x)
    inv = np.argsort(axes)
    out = np.transpose(xv, axes)
    return _record("transpose", out, (xn,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    xv, xn = _operand(x)
    out = xv[idx]

    def back(g):
        full = np.zeros_like(xv)
        if _has_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record("getitem", out, (xn,), back)


def _has_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence, axis=-1):
    vals, nodes = zip(*(_operand(x) for x in xs))
    kinds = {_is_complex(v) for v in vals}
    if len(kinds) > 1:
        raise DTypeError("concat: mixed real and complex operands")
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    sizes = [v.shape[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", out, nodes, lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(x, sizes: Sequence[int], axis=-1):
    xv = value(x)
    if np.sum(sizes) != xv.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {xv.shape[axis]}")
    parts, start = [], 0
    ax = axis % xv.ndim
    for s in sizes:
        idx = (slice(None),) * ax + (slice(start, start + s),)
        parts.append(getitem(x, idx))
        start += s
    return parts


def stack(xs: Sequence, axis=0):
    vals, nodes = zip(*(_operand(x) for x in xs))
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[v.shape for v in vals]}") from None
    n = len(vals)
    return _record("stack", out, nodes,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def softmax(x, axis=-1):
    xv, xn = _operand(x)
    if _is_complex(xv):
        raise DTypeError("softmax: real tensors only")
    z = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", out, (xn,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- complex

def complex_(re, im=None):
    """Assemble a complex tensor from a real pair (``im`` may be omitted)."""
    rv, rn = _operand(re)
    if im is None:
        iv, inn = np.zeros_like(rv), None
    else:
        iv, inn = _operand(im)
    if _is_complex(rv) or _is_complex(iv):
        raise DTypeError("complex_: operands must be real")
    if np.shape(rv) != np.shape(iv):
        raise ShapeError(f"complex_: incompatible shapes {np.shape(rv)} and {np.shape(iv)}")
    out = rv + 1j * iv
    return _record("complex", out, (rn, inn), lambda g: (g.real.copy(), g.imag.copy()))


def real(z):
    zv, zn = _operand(z)
    return _record("real", zv.real.copy(), (zn,), lambda g: (g.astype(COMPLEX),))


def imag(z):
    zv, zn = _operand(z)
    return _record("imag", zv.imag.copy(), (zn,), lambda g: (1j * g,))


def abs2(z):
    """Complex modulus squared, real output."""
    zv, zn = _operand(z)
    out = (zv * np.conj(zv)).real
    return _record("abs2", out, (zn,), lambda g: (2.0 * g * zv,))


# ---------------------------------------------------------------- Fourier transforms (unitary)

def fft(x, axes):
    xv, xn = _operand(x)
    out = np.fft.fftn(xv, axes=axes, norm="ortho")
    real_in = not _is_complex(xv)

    def back(g):
        gx = np.fft.ifftn(g, axes=axes, norm="ortho")
        return (gx.real if real_in else gx,)

    return _record("fft", out, (xn,), back)


def ifft(x, axes):
    xv, xn = _operand(x)
    out = np.fft.ifftn(xv, axes=axes, norm="ortho")
    real_in = not _is_complex(xv)

    def back(g):
        gx = np.fft.fftn(g, axes=axes, norm="ortho")
        return (gx.real if real_in else gx,)

    return _record("ifft", out, (xn,), back)


def _interior_weights(n_last, m_last):
    # half-spectrum bins counted twice in the real signal: 1 .. ceil(n/2)-1
    w = np.ones(m_last)
    top = m_last - 1 if n_last % 2 == 0 else m_last
    w[1:top] = 2.0
    return w


def rfft(x, axes):
    """Unitary real-input transform; the last of ``axes`` is halved."""
    xv, xn = _operand(x)
    if _is_complex(xv):
        raise DTypeError("rfft: real tensors only")
    axes = tuple(a % xv.ndim for a in axes)
    s = tuple(xv.shape[a] for a in axes)
    out = np.fft.rfftn(xv, axes=axes, norm="ortho")
    w = _interior_weights(s[-1], out.shape[axes[-1]])
    wshape = [1] * out.ndim
    wshape[axes[-1]] = -1
    w = w.reshape(wshape)

    def back(g):
        return (np.fft.irfftn(g / w, s=s, axes=axes, norm="ortho"),)

    return _record("rfft", out, (xn,), back)


def irfft(x, shape: Sequence[int], axes):
    """Inverse of :func:`rfft`; ``shape`` is the real-space size along ``axes``."""
    xv, xn = _operand(x)
    axes = tuple(a % xv.ndim for a in axes)
    s = tuple(shape)
    out = np.fft.irfftn(xv, s=s, axes=axes, norm="ortho")
    w = _interior_weights(s[-1], xv.shape[axes[-1]])
    wshape = [1] * xv.ndim
    wshape[axes[-1]] = -1
    w = w.reshape(wshape)

    def back(g):
        return (np.fft.rfftn(g, axes=axes, norm="ortho") * w,)

    return _record("irfft", out, (xn,), back)


def mode_indices(n: int, keep: int, half: bool = False) -> np.ndarray:
    """FFT-ordered indices retained when keeping |k| <= keep on an axis of length n.

    ``half`` selects the non-negative half axis of a real transform (length n//2+1).
    """
    if keep <= 0:
        raise ValueError(f"mode truncation needs keep > 0, got {keep}")
    if half:
        return np.arange(min(keep, n // 2) + 1)
    if 2 * keep + 1 >= n:
        return np.arange(n)
    return np.concatenate([np.arange(keep + 1), np.arange(n - keep, n)])


def truncate(x, keep: Sequence[int], axes, full_shape: Sequence[int], half_last: bool = True):
    """Gather the retained low modes into a compact spectrum (drops the rest)."""
    xv, xn = _operand(x)
    axes = tuple(a % xv.ndim for a in axes)
    idx = [mode_indices(n, k, half=(half_last and i == len(axes) - 1))
           for i, (n, k) in enumerate(zip(full_shape, keep))]
    out = xv
    for ax, ix in zip(axes, idx):
        out = np.take(out, ix, axis=ax)
    in_shape = xv.shape

    def back(g):
        return (_scatter(g, idx, axes, in_shape),)

    return _record("mode-truncate", out, (xn,), back)


def pad_modes(x, keep: Sequence[int], axes, full_shape: Sequence[int], half_last: bool = True):
    """Adjoint of :func:`truncate`: scatter a compact spectrum into zeros."""
    xv, xn = _operand(x)
    axes = tuple(a % xv.ndim for a in axes)
    idx = [mode_indices(n, k, half=(half_last and i == len(axes) - 1))
           for i, (n, k) in enumerate(zip(full_shape, keep))]
    out_shape = list(xv.shape)
    for i, (ax, n) in enumerate(zip(axes, full_shape)):
        out_shape[ax] = n // 2 + 1 if (half_last and i == len(axes) - 1) else n
    out = _scatter(xv, idx, axes, tuple(out_shape))

    def back(g):
        r = g
        for ax, ix in zip(axes, idx):
            r = np.take(r, ix, axis=ax)
        return (r,)

    return _record("mode-pad", out, (xn,), back)


def _scatter(g, idx, axes, shape):
    full = np.zeros(shape, dtype=g.dtype)
    sel = [slice(None)] * len(shape)
    for ax, ix in zip(axes, idx):
        sel[ax] = ix
    full[np.ix_(*[s if isinstance(s, np.ndarray) else np.arange(n) for s, n in zip(sel, shape)])] = g
    return full


# ---------------------------------------------------------------- gradient check

def grad_check(f: Callable[[Mapping], object], theta0: Mapping[str, np.ndarray],
               step: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
               seed: int = 0) -> dict:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` maps a dict of leaves (Nodes or arrays) to a real scalar.  Returns a
    report with the max relative error and ``passed``.  ``max_entries`` limits
    the number of probed entries per leaf (chosen with a seeded generator).
    """
    theta0 = {k: _as_array(v).copy() for k, v in theta0.items()}
    tape = Tape()
    leaves = tape.leaves_from(theta0)
    out = f(leaves)
    if not isinstance(out, Node):
        grads = {k: np.zeros_like(v) for k, v in theta0.items()}
        base = float(np.asarray(out))
    else:
        base = float(np.asarray(out.value))
        grads = tape.backward(out)
    if not np.isfinite(base):
        raise FloatingPointError("grad_check: non-finite objective")
    rng = np.random.default_rng(seed)

    def evaluate(params):
        v = float(np.asarray(value(f(params))))
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: non-finite objective under perturbation")
        return v

    tape_g, fd_g = [], []
    for name, arr in theta0.items():
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, max_entries, replace=False))
        parts = [(1.0, "re")] + ([(1j, "im")] if np.iscomplexobj(arr) else [])
        for i in flat_idx:
            for unit, part in parts:
                plus = dict(theta0)
                minus = dict(theta0)
                p = arr.copy().reshape(-1)
                m = arr.copy().reshape(-1)
                p[i] += unit * step
                m[i] -= unit * step
                plus[name] = p.reshape(arr.shape)
                minus[name] = m.reshape(arr.shape)
                fd_g.append((evaluate(plus) - evaluate(minus)) / (2 * step))
                gi = grads[name].reshape(-1)[i]
                tape_g.append(gi.real if part == "re" else gi.imag)
    tape_g = np.asarray(tape_g, dtype=float)
    fd_g = np.asarray(fd_g, dtype=float)
    if not (np.all(np.isfinite(tape_g)) and np.all(np.isfinite(fd_g))):
        raise FloatingPointError("grad_check: non-finite gradient")
    floor = 1e-3 * np.max(np.abs(fd_g)) if fd_g.size else 0.0
    denom = np.maximum(np.maximum(np.abs(tape_g), np.abs(fd_g)), floor)
    diff = np.abs(tape_g - fd_g)
    rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
    max_rel = float(rel.max()) if rel.size else 0.0
    return {"max_rel_error": max_rel, "passed": max_rel < tol, "entries": int(rel.size),
            "value": base}
