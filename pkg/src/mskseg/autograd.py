"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the compute graph is a :class:`Tensor` wrapping an immutable
float64 ndarray.  Operations build the graph eagerly; calling ``backward()``
on a scalar result walks the recorded operations in reverse topological
order and accumulates gradients into ``.grad`` buffers.

Conventions, fixed across the package:

* float64 everywhere, no mixed precision
* no broadcasting beyond scalar-with-tensor; shapes must match exactly,
  use ``reshape`` to be explicit
* a graph supports exactly one backward pass; rerun the forward to
  differentiate again
* convolution is cross-correlation (no kernel flip), zero padding only
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "OpRecord",
    "computation_record",
    "apply_op",
    "concat",
    "matmul",
    "linear",
    "index_rows",
    "conv2d",
    "conv2d_transpose",
    "upsample_nearest2",
    "cross_entropy",
    "binary_cross_entropy",
    "smooth_l1",
    "grad_check",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode.

    ``data`` is made read-only at construction; results of operations are
    fresh arrays, so immutability costs nothing.  ``grad`` is the one
    mutable attachment and exists only after a backward pass has reached
    this tensor.

    EXAMPLE:
        >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
        >>> y = (x * 3.0).sum()
        >>> y.backward()
        >>> x.grad.tolist()
        [[3.0, 3.0]]
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_bwd", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            if not arr.flags.owndata:
                arr = arr.copy()
            arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None
        self._parents = ()
        self._bwd = None
        self._backward_done = False

    # ---- introspection -------------------------------------------------

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
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same values with no graph history and no grad."""
        return Tensor(self.data)

    # ---- graph construction ---------------------------------------------

    def _ensure_same_shape(self, other: "Tensor"):
        if self.data.shape != other.data.shape:
            raise ValueError(
                f"shape mismatch {self.data.shape} vs {other.data.shape}; "
                "only scalar-with-tensor mixing is implicit, reshape explicitly"
            )

    def __add__(self, other):
        if isinstance(other, Tensor):
            if other.ndim != 0 and self.ndim != 0:
                self._ensure_same_shape(other)
            return apply_op(
                "add", (self, other), self.data + other.data,
                lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)),
            )
        return apply_op("add", (self,), self.data + float(other), lambda g: (g,))

    __radd__ = __add__

    def __neg__(self):
        return apply_op("neg", (self,), -self.data, lambda g: (-g,))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            if other.ndim != 0 and self.ndim != 0:
                self._ensure_same_shape(other)
            return apply_op(
                "sub", (self, other), self.data - other.data,
                lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape)),
            )
        return apply_op("sub", (self,), self.data - float(other), lambda g: (g,))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.ndim != 0 and self.ndim != 0:
                self._ensure_same_shape(other)
            a, b = self.data, other.data
            return apply_op(
                "mul", (self, other), a * b,
                lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            )
        c = float(other)
        return apply_op("mul", (self,), self.data * c, lambda g: (g * c,))

    __rmul__ = __mul__

    def __truediv__(self, other):
        c = float(other)
        return apply_op("div", (self,), self.data / c, lambda g: (g / c,))

    def __getitem__(self, key):
        out = self.data[key]
        if np.shape(out) == () and not isinstance(out, np.ndarray):
            out = np.asarray(out)

        def bwd(g, key=key, shape=self.data.shape):
            full = np.zeros(shape)
            full[key] += g
            return (full,)

        return apply_op("slice", (self,), out, bwd)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return apply_op("reshape", (self,), self.data.reshape(shape), lambda g: (g.reshape(old),))

    def sum(self, axis=None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis=None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
        return apply_op("transpose", (self,), self.data.transpose(axes),
                        lambda g: (g.transpose(inv),))

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        return apply_op("relu", (self,), np.where(mask, self.data, 0.0), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.data)
        return apply_op("sigmoid", (self,), y, lambda g: (g * y * (1.0 - y),))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            return (y * (g - dot),)

        return apply_op("softmax", (self,), y, bwd)

    # ---- backward -------------------------------------------------------

    def backward(self):
        """Run reverse mode from this scalar, once per forward pass.

        Populates ``.grad`` on every requires_grad tensor reachable from
        here.  A second call without a fresh forward raises, the tape does
        not support double backward.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward already ran for this graph; rerun the forward first")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor with requires_grad=False")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._bwd is None:
                continue
            parent_grads = node._bwd(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        self._backward_done = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operands receive the sum of the incoming gradient
    if shape == () and np.shape(g) != ():
        return np.asarray(g.sum())
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _reduce(t: Tensor, axis, mean: bool) -> Tensor:
    data = t.data.mean(axis=axis) if mean else t.data.sum(axis=axis)
    shape = t.data.shape

    if axis is None:
        axes = tuple(range(len(shape)))
    elif isinstance(axis, int):
        axes = (axis % len(shape),)
    else:
        axes = tuple(a % len(shape) for a in axis)
    count = 1
    for a in axes:
        count *= shape[a]

    def bwd(g):
        gx = np.asarray(g)
        for a in sorted(axes):
            gx = np.expand_dims(gx, a)
        gx = np.broadcast_to(gx, shape)
        if mean:
            gx = gx / count
        return (np.ascontiguousarray(gx),)

    return apply_op("mean" if mean else "sum", (t,), data, bwd)


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order so deep graphs cannot hit the recursion limit
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass(frozen=True)
class OpRecord:
    """One applied operation: name plus references to its operand tensors."""

    op: str
    inputs: tuple
    output: Tensor


def computation_record(root: Tensor) -> list[OpRecord]:
    """The operations behind ``root``, topologically ordered.

    Every operation's inputs are produced by earlier entries (or are
    leaves), which is exactly the property the backward pass relies on.
    """
    return [
        OpRecord(op=t._op, inputs=t._parents, output=t)
        for t in _toposort(root)
        if t._op is not None
    ]


def apply_op(op: str, parents: tuple, data: np.ndarray, backward) -> Tensor:
    """Create the output tensor of an operation and link it into the graph.

    ``backward`` maps the output gradient to a tuple of parent gradients
    (entries may be None for non-differentiable operands).  The link is
    kept only when some parent requires grad, so inference-time graphs
    carry no tape.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._bwd = backward
    return out


# ---- joining and linear algebra ------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an existing axis. All other dims must agree."""
    ts = list(tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return apply_op("concat", tuple(ts), data, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; a 1-D left operand is treated as a row vector."""
    squeeze = a.ndim == 1
    ad = a.data[None, :] if squeeze else a.data
    if ad.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if ad.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    out = ad @ b.data

    def bwd(g):
        g2 = g[None, :] if squeeze else g
        ga = g2 @ b.data.T
        gb = ad.T @ g2
        return (ga[0] if squeeze else ga, gb)

    return apply_op("matmul", (a, b), out[0] if squeeze else out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w plus a per-column bias, for (N,D) or (D,) inputs."""
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or w.ndim != 2 or xd.shape[1] != w.shape[0]:
        raise ValueError(f"linear shapes do not chain: {x.shape} @ {w.shape}")
    out = xd @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"bias must be ({w.shape[1]},), got {b.shape}")
        out = out + b.data[None, :]

    def bwd(g):
        g2 = g[None, :] if squeeze else g
        gx = g2 @ w.data.T
        gw = xd.T @ g2
        if b is not None:
            return (gx[0] if squeeze else gx, gw, g2.sum(axis=0))
        return (gx[0] if squeeze else gx, gw)

    parents = (x, w) if b is None else (x, w, b)
    return apply_op("linear", parents, out[0] if squeeze else out, bwd)


def index_rows(x: Tensor, idx) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate in backward."""
    ii = np.asarray(idx, dtype=np.int64)
    if ii.ndim != 1:
        raise ValueError(f"index_rows wants a 1-D index, got shape {ii.shape}")
    if ii.size and (ii.min() < 0 or ii.max() >= x.shape[0]):
        raise ValueError(f"row index out of range [0,{x.shape[0]}): {ii.min()}..{ii.max()}")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, ii, g)
        return (gx,)

    return apply_op("index_rows", (x,), x.data[ii], bwd)


# ---- convolution ----------------------------------------------------------


def _conv_out_side(side: int, k: int, stride: int, padding: int) -> int:
    out = (side + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(f"kernel {k} with stride {stride}, padding {padding} exceeds input side {side}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C,H,W) map with a (C_out,C,kh,kw) kernel.

    Zero padding only; output side is floor((H + 2p - kh)/stride) + 1.
    No kernel flip: out[o,i,j] = sum_c,u,v x[c, i*s+u-p, j*s+v-p] k[o,c,u,v].
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) and (C_out,C,kh,kw), got {x.shape}, {kernel.shape}")
    cin, h, w = x.shape
    cout, cink, kh, kw = kernel.shape
    if cink != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel expects {cink}")
    ho = _conv_out_side(h, kh, stride, padding)
    wo = _conv_out_side(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = (kmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"bias must be ({cout},), got {bias.shape}")
        out = out + bias.data[:, None, None]

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        gk = (gmat @ cols.T).reshape(cout, cin, kh, kw)
        gcols = (kmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride] += gcols[:, di, dj]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None:
            return (np.ascontiguousarray(gx), gk, g.sum(axis=(1, 2)))
        return (np.ascontiguousarray(gx), gk)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op("conv2d", parents, out, bwd)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Adjoint of conv2d: (C,H,W) with (C,C_out,kh,kw) to (C_out,(H-1)s+kh,...).

    Satisfies <conv2d(x,k), y> == <x_cov, conv2d_transpose(y, k)> with the same
    kernel, where x_cov is the leading region of x actually covered by the
    forward stride. The tests pin this identity down directly.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d_transpose expects (C,H,W) and (C,C_out,kh,kw), got {x.shape}, {kernel.shape}")
    cin, h, w = x.shape
    cink, cout, kh, kw = kernel.shape
    if cink != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernel expects {cink}")
    h2 = (h - 1) * stride + kh
    w2 = (w - 1) * stride + kw

    # t[o,u,v,i,j] = sum_c x[c,i,j] k[c,o,u,v], scattered at stride offsets
    t = np.tensordot(kernel.data, x.data, axes=([0], [0]))
    out = np.zeros((cout, h2, w2))
    for di in range(kh):
        for dj in range(kw):
            out[:, di : di + h * stride : stride, dj : dj + w * stride : stride] += t[:, di, dj]
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"bias must be ({cout},), got {bias.shape}")
        out = out + bias.data[:, None, None]

    def bwd(g):
        gx = np.zeros((cin, h, w))
        gk = np.empty((cin, cout, kh, kw))
        for di in range(kh):
            for dj in range(kw):
                patch = g[:, di : di + h * stride : stride, dj : dj + w * stride : stride]
                gx += np.tensordot(kernel.data[:, :, di, dj], patch, axes=([1], [0]))
                gk[:, :, di, dj] = np.tensordot(x.data, patch, axes=([1, 2], [1, 2]))
        if bias is not None:
            return (gx, gk, g.sum(axis=(1, 2)))
        return (gx, gk)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return apply_op("conv2d_transpose", parents, out, bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C,H,W) map."""
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return apply_op("upsample_nearest2", (x,), out, bwd)


# ---- losses ----------------------------------------------------------------


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy from raw logits.

    logits: (N,K) or (K,); targets: integer class indices, shape (N,) or ().
    Computed via logsumexp, so saturated logits stay finite.
    """
    z = logits.data if logits.ndim == 2 else logits.data[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    n, k = z.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match {n} rows")
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"target index out of range [0,{k}): {t.min()}..{t.max()}")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = np.asarray((lse - z[np.arange(n), t]).mean())

    def bwd(g):
        soft = np.exp(z - zmax)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), t] -= 1.0
        gz = soft * (float(g) / n)
        return (gz if logits.ndim == 2 else gz[0],)

    return apply_op("cross_entropy", (logits,), loss, bwd)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from raw logits against 0/1 targets.

    Uses the softplus form max(z,0) - z*t + log1p(exp(-|z|)), finite for
    any logit magnitude.  binary_cross_entropy(0, 1) == ln 2.
    """
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    if t.shape != z.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {z.shape}")
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray(per.mean())
    n = max(z.size, 1)

    def bwd(g):
        return ((_sigmoid(z) - t) * (float(g) / n),)

    return apply_op("binary_cross_entropy", (logits,), loss, bwd)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean smooth-L1 (Huber at delta=1) between pred and a constant target."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"target shape {t.shape} != pred shape {pred.shape}")
    d = pred.data - t
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    loss = np.asarray(per.mean())
    n = max(d.size, 1)

    def bwd(g):
        return (np.clip(d, -1.0, 1.0) * (float(g) / n),)

    return apply_op("smooth_l1", (pred,), loss, bwd)


# ---- gradient checking ------------------------------------------------------


def grad_check(fn, inputs, step: float = 1e-5, weights=None) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor; the checked scalar is
    sum(fn(inputs) * weights) with weights defaulting to ones.  Returns the
    max over all input entries of |analytic - numeric| / max(1, |numeric|).

    EXAMPLE:
        >>> err = grad_check(lambda t: t.sigmoid(), [np.zeros(3)])
        >>> err < 1e-8
        True
    """
    tensors = [x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    out = fn(*tensors)
    w = np.ones_like(out.data) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = (out * Tensor(w)).sum() if out.ndim else out * Tensor(w)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def eval_at(datas) -> float:
        o = fn(*[Tensor(d) for d in datas])
        return float((o.data * w).sum())

    max_err = 0.0
    for ti, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        base = [u.data for u in tensors]
        flat = t.data.ravel()
        for pos in range(flat.size):
            plus = t.data.copy().ravel()
            plus[pos] += step
            minus = t.data.copy().ravel()
            minus[pos] -= step
            shape = t.data.shape
            f_plus = eval_at(base[:ti] + [plus.reshape(shape)] + base[ti + 1:])
            f_minus = eval_at(base[:ti] + [minus.reshape(shape)] + base[ti + 1:])
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[ti].ravel()[pos]
            err = abs(a - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
