"""Minimal reverse-mode differentiation engine on numpy arrays.

Backward functions are themselves written in terms of Tensor operations, so
calling `grad(..., create_graph=True)` produces gradients that are again
differentiable.  That is what lets a training loss contain the network's
input Jacobian (computed as vector-Jacobian products) and still receive
exact parameter gradients: the second derivative of tanh enters through the
recorded backward of (1 - tanh^2).

Supported primitives: elementwise arithmetic with broadcasting, matmul (2-d),
einsum contractions, tanh/exp/sqrt/power, sum/mean reductions, reshape,
transpose, stack/take, broadcast.  This is deliberately not a general
computation-graph framework; it covers exactly the loss templates the
backward solvers need.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjps")
    # Keep numpy from consuming Tensor operands in mixed expressions.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()

    # -- basic introspection -------------------------------------------------
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

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor tracked by the engine (copied to own its storage)."""
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    return t


def make_node(data, parents, vjps) -> Tensor:
    """Create a graph node; recording is skipped when gradients are disabled
    or no parent requires them."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _sum_to(g: Tensor, shape) -> Tensor:
    """Reduce a broadcasted gradient back to the given shape."""
    gshape = g.data.shape
    if gshape == shape:
        return g
    nd, k = len(gshape), len(shape)
    axes = tuple(range(nd - k))
    axes += tuple(
        i for i in range(nd - k, nd)
        if shape[i - (nd - k)] == 1 and gshape[i] != 1
    )
    out = tsum(g, axis=axes, keepdims=False) if axes else g
    if out.data.shape != shape:
        out = reshape(out, shape)
    return out


def broadcast_to(t: Tensor, shape) -> Tensor:
    t = wrap(t)
    if t.data.shape == tuple(shape):
        return t
    data = np.broadcast_to(t.data, shape)
    return make_node(data, (t,), (lambda g: _sum_to(g, t.data.shape),))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = wrap(a), wrap(b)
    return make_node(
        a.data + b.data, (a, b),
        (lambda g: _sum_to(g, a.data.shape), lambda g: _sum_to(g, b.data.shape)),
    )


def sub(a, b):
    a, b = wrap(a), wrap(b)
    return make_node(
        a.data - b.data, (a, b),
        (lambda g: _sum_to(g, a.data.shape),
         lambda g: _sum_to(neg(g), b.data.shape)),
    )


def mul(a, b):
    a, b = wrap(a), wrap(b)
    return make_node(
        a.data * b.data, (a, b),
        (lambda g: _sum_to(mul(g, b), a.data.shape),
         lambda g: _sum_to(mul(g, a), b.data.shape)),
    )


def div(a, b):
    a, b = wrap(a), wrap(b)
    return make_node(
        a.data / b.data, (a, b),
        (lambda g: _sum_to(div(g, b), a.data.shape),
         lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.data.shape)),
    )


def neg(a):
    a = wrap(a)
    return make_node(-a.data, (a,), (lambda g: neg(g),))


def power(a, p):
    a = wrap(a)
    p = float(p)
    return make_node(
        a.data ** p, (a,),
        (lambda g: mul(g, mul(p, power(a, p - 1.0))) if p != 1.0 else g,),
    )


def exp(a):
    a = wrap(a)
    out = make_node(np.exp(a.data), (a,), ())
    out._vjps = (lambda g: mul(g, out),)
    return out


def tanh(a):
    a = wrap(a)
    out = make_node(np.tanh(a.data), (a,), ())
    out._vjps = (lambda g: mul(g, sub(1.0, mul(out, out))),)
    return out


def sqrt(a):
    a = wrap(a)
    out = make_node(np.sqrt(a.data), (a,), ())
    out._vjps = (lambda g: div(mul(0.5, g), out),)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = wrap(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return broadcast_to(reshape(g, (1,) * a.data.ndim), a.data.shape)
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(
                1 if i in axes else s for i, s in enumerate(a.data.shape)
            )
            g = reshape(g, shape)
        return broadcast_to(g, a.data.shape)

    return make_node(data, (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    a = wrap(a)
    if axis is None:
        denom = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        denom = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def reshape(a, shape):
    a = wrap(a)
    orig = a.data.shape
    return make_node(
        a.data.reshape(shape), (a,), (lambda g: reshape(g, orig),)
    )


def transpose(a, axes=None):
    a = wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return make_node(
        np.transpose(a.data, axes), (a,), (lambda g: transpose(g, inv),)
    )


def matmul(a, b):
    """2-d matrix product (B, m) @ (m, n)."""
    a, b = wrap(a), wrap(b)
    return make_node(
        a.data @ b.data, (a, b),
        (lambda g: matmul(g, transpose(b)),
         lambda g: matmul(transpose(a), g)),
    )


def _swap_last(t):
    axes = tuple(range(t.data.ndim - 2)) + (t.data.ndim - 1, t.data.ndim - 2)
    return transpose(t, axes)


def bmm(a, b):
    """Batched matrix product with numpy matmul broadcasting over leading
    dimensions (e.g. (B,m,k) @ (B,k,n) or (m,k) @ (B,k,n))."""
    a, b = wrap(a), wrap(b)
    return make_node(
        np.matmul(a.data, b.data), (a, b),
        (lambda g: _sum_to(bmm(g, _swap_last(b)), a.data.shape),
         lambda g: _sum_to(bmm(_swap_last(a), g), b.data.shape)),
    )


def einsum(spec: str, *tensors):
    """Differentiable einsum for pure contractions (explicit indices, no
    repeated index within one operand, every operand index recoverable from
    the output and the remaining operands)."""
    tensors = tuple(wrap(t) for t in tensors)
    ins, out = spec.replace(" ", "").split("->")
    ins = ins.split(",")
    if len(ins) != len(tensors):
        raise ValueError(f"einsum spec {spec!r} does not match operand count")
    known = set(out)
    for s in ins:
        known |= set(s)
    for i, s in enumerate(ins):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand {i} of {spec!r}")
        avail = set(out).union(*(set(ins[j]) for j in range(len(ins)) if j != i))
        if not set(s) <= avail:
            raise ValueError(
                f"operand {i} of {spec!r} has indices unrecoverable in backward"
            )

    data = np.einsum(spec, *(t.data for t in tensors))

    def make_vjp(i):
        others = [j for j in range(len(ins)) if j != i]
        back_spec = ",".join([out] + [ins[j] for j in others]) + "->" + ins[i]

        def vjp(g):
            return einsum(back_spec, g, *(tensors[j] for j in others))

        return vjp

    return make_node(data, tensors, tuple(make_vjp(i) for i in range(len(ins))))


def affine(x, W, b):
    """Fused x @ W + b for a 2-d batch; backward stays differentiable."""
    x, W, b = wrap(x), wrap(W), wrap(b)
    out = x.data @ W.data + b.data
    return make_node(
        out, (x, W, b),
        (lambda g: matmul(g, transpose(W)),
         lambda g: matmul(transpose(x), g),
         lambda g: tsum(g, axis=0)),
    )


def layer_norm_op(h, gain, offset, eps: float):
    """Fused layer normalization over the last axis.

    The backward pass uses the closed-form vector-Jacobian product; when a
    graph is being recorded (double backward) the normalized quantities are
    recomputed differentiably from the input instead of reusing the cached
    forward values.
    """
    h, gain, offset = wrap(h), wrap(gain), wrap(offset)
    hd = h.data
    m = hd.mean(axis=-1, keepdims=True)
    c = hd - m
    v = (c * c).mean(axis=-1, keepdims=True)
    s = np.sqrt(v + eps)
    hhat = c / s
    out = hhat * gain.data + offset.data

    def _normed():
        if _grad_enabled:
            m_t = mean(h, axis=-1, keepdims=True)
            c_t = sub(h, m_t)
            v_t = mean(mul(c_t, c_t), axis=-1, keepdims=True)
            s_t = sqrt(add(v_t, eps))
            return div(c_t, s_t), s_t
        return Tensor(hhat), Tensor(s)

    def vjp_h(G):
        hhat_t, s_t = _normed()
        Gg = mul(G, gain)
        m1 = mean(Gg, axis=-1, keepdims=True)
        m2 = mean(mul(Gg, hhat_t), axis=-1, keepdims=True)
        return div(sub(sub(Gg, m1), mul(hhat_t, m2)), s_t)

    def vjp_gain(G):
        hhat_t, _ = _normed()
        return _sum_to(mul(G, hhat_t), gain.data.shape)

    def vjp_offset(G):
        return _sum_to(G, offset.data.shape)

    return make_node(out, (h, gain, offset), (vjp_h, vjp_gain, vjp_offset))


def take_at(a, idx: int, axis: int):
    a = wrap(a)
    data = np.take(a.data, idx, axis=axis)
    shape = a.data.shape
    return make_node(
        data, (a,), (lambda g: embed_at(g, shape, idx, axis),)
    )


def embed_at(a, shape, idx: int, axis: int):
    a = wrap(a)
    data = np.zeros(shape)
    sl = [slice(None)] * len(shape)
    sl[axis] = idx
    data[tuple(sl)] = a.data
    return make_node(data, (a,), (lambda g: take_at(g, idx, axis),))


def stack(tensors, axis: int = 0):
    tensors = tuple(wrap(t) for t in tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    vjps = tuple(
        (lambda i: lambda g: take_at(g, i, axis))(i) for i in range(len(tensors))
    )
    return make_node(data, tensors, vjps)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def grad(output: Tensor, wrt, grad_output=None, create_graph: bool = False):
    """Gradients of `output` with respect to the tensors in `wrt`.

    With create_graph=True the backward pass is recorded, so the returned
    gradients can be differentiated again (double backward).  Unreachable
    inputs receive zero gradients.
    """
    if grad_output is None:
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = wrap(grad_output)
        if seed.data.shape != output.data.shape:
            raise ValueError("grad_output shape mismatch")

    topo = []
    visited = set()
    stack_ = [(output, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))

    wrt_ids = {id(w) for w in wrt}
    grads = {id(output): seed}
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = create_graph
    try:
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wrt_ids:
                grads[id(node)] = g  # keep leaf grads
            for p, vjp in zip(node._parents, node._vjps):
                if not p.requires_grad:
                    continue
                pg = vjp(g)
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else add(acc, pg)
    finally:
        _grad_enabled = prev

    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out
