"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of operations the scenario network needs are provided.
Every op checks shapes strictly; there is no general broadcasting.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

# Klambauer et al. constants (self-normalising networks).
SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of differentiable ops executed on this thread."""

    nodes: list = field(default_factory=list)

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_state = threading.local()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward):
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = needs
    out.grad = None
    if needs:
        current_tape().record(out, inputs, backward)
    return out


def backward(loss: Tensor):
    """Replay the tape in reverse and accumulate leaf gradients.

    The tape is cleared afterwards, also on failure.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = current_tape()
    try:
        grads = {id(loss): np.ones_like(loss.data)}
        owners = {id(loss): loss}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            owners.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
                    owners[k] = t
        for k, g in grads.items():
            t = owners[k]
            g = np.asarray(g, dtype=np.float64).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
    finally:
        tape.clear()


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable onto ``a``)."""
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ValueError(f"scale: constant of shape {c.shape} does not fit {a.shape}")
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def selu(x: Tensor) -> Tensor:
    pos = x.data > 0
    e = np.exp(np.minimum(x.data, 0.0))
    out = SELU_LAMBDA * np.where(pos, x.data, SELU_ALPHA * (e - 1.0))
    dx = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * e)
    return _make(out, (x,), lambda g: (g * dx,))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "selu":
        return selu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    axis = axis % len(shape)
    return _make(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take_rows(x: Tensor, idx) -> Tensor:
    """Rows ``idx`` (unique indices) of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise ValueError(f"take_rows: need a 2-D tensor, got {x.shape}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), bw)


def embed_rows(part: Tensor, idx, n: int, fill: Tensor) -> Tensor:
    """``(n, F)`` tensor with ``part`` at rows ``idx`` and ``fill`` on every other row."""
    idx = np.asarray(idx, dtype=np.int64)
    f = fill.shape[0] if fill.data.ndim == 1 else -1
    if part.data.ndim != 2 or part.shape != (len(idx), f):
        raise ValueError(f"embed_rows: part {part.shape} does not match {len(idx)} rows of width {fill.shape}")
    out = np.empty((n, f))
    out[:] = fill.data
    out[idx] = part.data

    def bw(g):
        gp = g[idx]
        return gp, g.sum(axis=0) - gp.sum(axis=0)

    return _make(out, (part, fill), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis of a 2-D input."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ wd + b.data, (x, w, b), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    f = x.shape[-1]
    if f < 1 or gain.shape != (f,) or bias.shape != (f,):
        raise ValueError(f"layer_norm: bad shapes x={x.shape} gain={gain.shape} bias={bias.shape}")
    # row reductions through BLAS matvecs/einsum; fewer temporaries than .mean
    xd = x.data.reshape(-1, f)
    ones = np.full(f, 1.0 / f)
    xc = xd - (xd @ ones)[:, None]
    inv = (1.0 / np.sqrt(np.einsum("ij,ij->i", xc, xc) / f + eps))[:, None]
    xhat = xc
    xhat *= inv
    gd = gain.data
    shape = x.shape

    def bw(g):
        g2 = g.reshape(-1, f)
        dxhat = g2 * gd
        dx = dxhat - (dxhat @ ones)[:, None]
        dx -= xhat * (np.einsum("ij,ij->i", dxhat, xhat) / f)[:, None]
        dx *= inv
        return dx.reshape(shape), np.einsum("ij,ij->j", g2, xhat), g2.sum(axis=0)

    out = xhat * gd
    out += bias.data
    return _make(out.reshape(shape), (x, gain, bias), bw)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- temporal convolution


def conv1d_dilated(x: Tensor, w: Tensor, dilation: int, pad: int, b: Tensor | None = None) -> Tensor:
    """Same-length dilated convolution along the last axis.

    ``x`` is ``(..., C_in, T)``, ``w`` is ``(C_out, C_in, K)``.  Both ends of the
    time axis get ``pad`` zeros; leading axes (vertices) are never mixed.
    """
    if dilation < 1 or pad < 0:
        raise ValueError(f"conv1d_dilated: need dilation >= 1 and pad >= 0, got {dilation}, {pad}")
    c_out, c_in, k = w.shape
    if x.data.ndim < 2 or x.shape[-2] != c_in:
        raise ValueError(f"conv1d_dilated: input {x.shape} does not have {c_in} channels")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"conv1d_dilated: bias shape {b.shape} != ({c_out},)")
    t = x.shape[-1]
    if 2 * pad != dilation * (k - 1):
        raise ValueError(
            f"conv1d_dilated: pad {pad} does not preserve length for K={k}, dilation={dilation}"
        )
    lead = x.shape[:-2]
    xd = x.data.reshape((-1, c_in, t))
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, c, j, t] = xp[b, c, t + j*dilation]
    cols = np.stack([xp[:, :, j * dilation: j * dilation + t] for j in range(k)], axis=2)
    cols = cols.reshape(xd.shape[0], c_in * k, t)
    w2 = w.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(lead + (c_out, t))

    def bw(g):
        g3 = g.reshape(-1, c_out, t)
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w2.T, g3).reshape(-1, c_in, k, t)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j * dilation: j * dilation + t] += gcols[:, :, j, :]
        gx = gxp[:, :, pad: pad + t].reshape(x.shape)
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


# ---------------------------------------------------------------- sparse relations


@dataclass(frozen=True, eq=False)
class SparseRelation:
    """A typed edge set over ``n_vertices`` vertices.

    The dense form puts ``weight`` at ``[src, dst]``; undirected relations also
    fill ``[dst, src]``.  Propagation multiplies by the dense form, so row ``i``
    gathers from the vertices at the other end of its edges.
    """

    n_vertices: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    normalized: bool = False
    undirected: bool = False

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        object.__setattr__(self, "weight", w)
        n = self.n_vertices
        if not (len(src) == len(dst) == len(w)):
            raise ValueError("src, dst and weight must have equal length")
        if len(src):
            if src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n:
                raise ValueError(f"edge index out of range for {n} vertices")
            if not np.all(w > 0) or not np.all(np.isfinite(w)):
                raise ValueError("edge weights must be positive and finite")
            if len(np.unique(src * n + dst)) != len(src):
                raise ValueError("duplicate (src, dst) pair")

    @classmethod
    def from_edges(cls, n_vertices, edges, **kw):
        edges = list(edges)
        src = [e[0] for e in edges]
        dst = [e[1] for e in edges]
        w = [e[2] if len(e) > 2 else 1.0 for e in edges]
        return cls(n_vertices, src, dst, w, **kw)

    @classmethod
    def empty(cls, n_vertices, **kw):
        return cls(n_vertices, [], [], [], **kw)

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))

    @property
    def n_edges(self):
        return len(self.src)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        n = self.n_vertices
        rows, cols, w = self.src, self.dst, self.weight
        if self.undirected:
            off = rows != cols
            rows, cols, w = (
                np.concatenate([rows, cols[off]]),
                np.concatenate([cols, rows[off]]),
                np.concatenate([w, w[off]]),
            )
        return sp.csr_matrix((w, (rows, cols)), shape=(n, n))

    @cached_property
    def matrix_t(self) -> sp.csr_matrix:
        return self.matrix.T.tocsr()

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def incident(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.src] = True
        mask[self.dst] = True
        return mask

    def subgraph(self, idx) -> "SparseRelation":
        """The relation restricted to vertices ``idx``, renumbered in that order.

        Every edge must stay inside ``idx``.
        """
        idx = np.asarray(idx, dtype=np.int64)
        pos = np.full(self.n_vertices, -1, dtype=np.int64)
        pos[idx] = np.arange(len(idx))
        src, dst = pos[self.src], pos[self.dst]
        if np.any(src < 0) or np.any(dst < 0):
            raise ValueError("subgraph would drop edges")
        return SparseRelation(len(idx), src, dst, self.weight, self.normalized, self.undirected)


def propagate(rel: SparseRelation, h: Tensor) -> Tensor:
    """Multiply node features by a normalized relation (``Â · H``)."""
    if not rel.normalized:
        raise ValueError("propagate requires a normalized relation")
    if h.data.ndim != 2 or h.shape[0] != rel.n_vertices:
        raise ValueError(f"propagate: features {h.shape} vs {rel.n_vertices} vertices")
    m, mt = rel.matrix, rel.matrix_t
    return _make(np.asarray(m @ h.data), (h,), lambda g: (np.asarray(mt @ g),))
