"""Small reverse-mode automatic differentiation on dense numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` whenever at least one input is tracked (a trainable leaf or the
output of a recorded op).  ``Tape.backward`` walks the record in reverse and
accumulates gradients.  Outside a tape the same functions evaluate eagerly
with no bookkeeping, which is what inference uses.

Broadcasting is restricted to leading (batch) dimensions: two shapes are
compatible when they are equal or one is a suffix of the other.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tracked", "_node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("name", "output", "inputs", "backward")

    def __init__(self, name, output, inputs, backward):
        self.name = name
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; use as a context manager.

    Example::

        w = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_(square(w))
        tape.backward(loss)[w]   # -> array([6.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, tensor):
        tensor.requires_grad = True
        tensor.tracked = True
        self.leaves[id(tensor)] = tensor
        return tensor

    def backward(self, loss, wrt=None, seed=None):
        """Gradients of ``loss`` with respect to trainable leaves.

        ``wrt`` may be a list of leaves or a dict of name -> leaf; the result
        mirrors its form (list -> dict keyed by tensor, dict -> dict keyed by
        name).  Without ``wrt`` every watched or reached leaf is returned.
        ``seed`` replaces the implicit unit cotangent and then ``loss`` need
        not be scalar.
        """
        if seed is None:
            if loss.data.size != 1:
                raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        else:
            seed = np.asarray(seed, dtype=DTYPE)
            if seed.shape != loss.shape:
                raise ShapeError(
                    f"cotangent shape {seed.shape} does not match output shape {loss.shape}"
                )
        if not loss.tracked:
            raise GradientError(
                "loss has no trainable ancestry on this tape (was it computed "
                "outside the tape, or from constants only?)"
            )
        grads = {id(loss): seed}
        reached = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._node is None:
                    reached[key] = inp
        if loss._node is None:
            reached[id(loss)] = loss

        def grad_of(t):
            g = grads.get(id(t))
            return np.zeros_like(t.data) if g is None else g

        if wrt is None:
            leaves = dict(self.leaves)
            leaves.update(reached)
            return {t: grad_of(t) for t in leaves.values()}
        if isinstance(wrt, dict):
            return {name: grad_of(t) for name, t in wrt.items()}
        return {t: grad_of(t) for t in wrt}


def _tape():
    return _TAPES[-1] if _TAPES else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(name, out, inputs, backward):
    if not np.isfinite(out).all():
        raise NonFiniteError(f"op '{name}' produced non-finite values")
    t = Tensor(out)
    tape = _tape()
    if tape is not None and any(i.tracked for i in inputs):
        t.tracked = True
        t._node = _Node(name, t, inputs, backward)
        tape.nodes.append(t._node)
    return t


def _check_broadcast(name, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{name}: shapes {sa} and {sb} are not compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# elementwise arithmetic -----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("multiply", a, b)
    ad, bd = a.data, b.data
    return _finish("multiply", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


multiply = mul


def neg(a):
    a = as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _finish("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


# linear algebra -------------------------------------------------------------

def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if not (ba == bb or ba[len(ba) - len(bb):] == bb or bb[len(bb) - len(ba):] == ba):
        raise ShapeError(f"matmul: batch shapes of {a.shape} and {b.shape} are not compatible")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g @ _swap(bd), ad.shape), _unbroadcast(_swap(ad) @ g, bd.shape))

    return _finish("matmul", ad @ bd, (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` for x of shape (..., n), w (n, m), b (m,)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not conform to weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        inputs = (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _finish("linear", out, inputs, backward)


def gru_cell(x, h, wx, wh, bx, bh):
    """One gated recurrent update (reset / update gate, tanh candidate).

    Gate layout along the last axis of the weights is [reset, update, new].
    Returns the new hidden state, which is also the cell output.
    """
    x, h, wx, wh, bx, bh = (as_tensor(t) for t in (x, h, wx, wh, bx, bh))
    d = h.shape[-1]
    if wx.shape != (x.shape[-1], 3 * d) or wh.shape != (d, 3 * d) \
            or bx.shape != (3 * d,) or bh.shape != (3 * d,) or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(
            f"gru_cell: x {x.shape}, h {h.shape}, wx {wx.shape}, wh {wh.shape}, "
            f"bx {bx.shape}, bh {bh.shape} are inconsistent"
        )
    xd, hd = x.data, h.data
    gx = xd @ wx.data + bx.data
    gh = hd @ wh.data + bh.data
    r = _sigmoid(gx[..., :d] + gh[..., :d])
    u = _sigmoid(gx[..., d:2 * d] + gh[..., d:2 * d])
    hn = gh[..., 2 * d:]
    n = np.tanh(gx[..., 2 * d:] + r * hn)
    out = (1.0 - u) * n + u * hd

    def backward(g):
        dn = g * (1.0 - u)
        du = g * (hd - n)
        dh = g * u
        dan = dn * (1.0 - n * n)
        dar = dan * hn * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dgx = np.concatenate([dar, dau, dan], axis=-1)
        dgh = np.concatenate([dar, dau, dan * r], axis=-1)
        dx = dgx @ wx.data.T
        dh = dh + dgh @ wh.data.T
        gx2 = dgx.reshape(-1, 3 * d)
        gh2 = dgh.reshape(-1, 3 * d)
        dwx = xd.reshape(-1, xd.shape[-1]).T @ gx2
        dwh = hd.reshape(-1, d).T @ gh2
        return dx, dh, dwx, dwh, gx2.sum(axis=0), gh2.sum(axis=0)

    return _finish("gru_cell", out, (x, h, wx, wh, bx, bh), backward)


# structural ops -------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _finish("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _finish("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (it is Ellipsis or it is None or isinstance(it, (slice, int, np.integer))):
            raise TypeError("only basic indexing (ints, slices, Ellipsis) is supported")


def take(a, index):
    """Basic slicing (the ``slice`` primitive)."""
    a = as_tensor(a)
    _basic_index(index)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _finish("slice", a.data[index], (a,), backward)


slice_ = take


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finish("concat", out, tuple(tensors),
                   lambda g: np.split(g, bounds, axis=axis))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _finish("stack", out, tuple(tensors),
                   lambda g: [np.take(g, i, axis=axis) for i in range(n)])


# reductions -----------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _finish("sum", out, (a,), lambda g: (np.array(_expand(g, shape, axis, keepdims)),))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _finish("mean", out, (a,),
                   lambda g: (np.array(_expand(g, shape, axis, keepdims)) / count,))


# differentiation helpers ----------------------------------------------------

def vjp(fn, point, cotangent):
    """Return ``J(point)^T @ cotangent`` for the map ``fn`` via one reverse pass."""
    with Tape() as tape:
        x = tape.watch(Tensor(np.array(point, dtype=DTYPE)))
        y = fn(x)
        if not y.tracked:
            # output independent of the input
            cot = np.asarray(cotangent, dtype=DTYPE)
            if cot.shape != y.shape:
                raise ShapeError(f"cotangent shape {cot.shape} does not match output shape {y.shape}")
            return np.zeros_like(x.data)
        return tape.backward(y, wrt=[x], seed=cotangent)[x]


def value_and_grad(fn, params):
    """Evaluate scalar ``fn(leaves)`` and its gradient for a dict of arrays."""
    with Tape() as tape:
        leaves = {k: tape.watch(Tensor(v)) for k, v in params.items()}
        loss = fn(leaves)
        grads = tape.backward(loss, wrt=leaves)
    return float(loss.data), grads
