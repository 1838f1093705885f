"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 or float64). Every op checks
shapes explicitly; the only implicit broadcast is scalar*tensor. Ops record
a graph node whenever an input requires grad, and ``Tensor.backward()``
(or an explicit :class:`GradGraph`) propagates gradients to all
requires-grad leaves.

Gradient verification runs in float64 via :func:`grad_check`; training code
may use float32.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradGraph",
    "ShapeError",
    "DegenerateInputError",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_bias",
    "matmul",
    "bmm",
    "similarity_matrix",
    "conv2d",
    "conv2d_transpose",
    "relu",
    "sigmoid",
    "tanh",
    "mean_pool",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose",
    "concat",
    "slice_last",
    "softmax",
    "log_softmax",
    "cross_entropy_with_logits",
    "bce_with_logits",
    "l2_normalize",
    "layer_norm",
    "embedding",
    "grad_check",
]


class ShapeError(ValueError):
    """Shape mismatch; carries the op name and the offending shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class DegenerateInputError(ValueError):
    """Numerically degenerate input (e.g. a near-zero row fed to l2_normalize)."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense tensor participating in a reverse-mode gradient graph.

    ``data`` is always a float32 or float64 numpy array. ``grad`` is
    allocated (zero-filled) at construction for requires-grad leaves and
    accumulated in place by backward passes. Tensors are treated as
    immutable after creation except for grad accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Backpropagate from this scalar through its graph."""
        GradGraph.from_output(self).run()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(op, tensors[0].shape, t.shape)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


class GradGraph:
    """Topologically ordered view of the graph that produced a scalar output.

    ``nodes`` lists every reachable tensor with inputs-before-outputs
    ordering; ``run`` walks it exactly once in reverse, accumulating grads
    into requires-grad leaves.
    """

    def __init__(self, nodes: list[Tensor], output: Tensor):
        self.nodes = nodes
        self.output = output

    @classmethod
    def from_output(cls, output: Tensor) -> "GradGraph":
        if output.data.size != 1:
            raise ShapeError("backward", output.shape)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
        return cls(order, output)

    def run(self) -> None:
        grads: dict[int, np.ndarray] = {
            id(self.output): np.ones_like(self.output.data)
        }
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad += g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                # vjps may return aliased views (e.g. add hands back g for
                # both parents), so accumulation is out-of-place
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def backward(graph: GradGraph) -> None:
    graph.run()


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data))


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Scalar * tensor — the one permitted broadcast."""
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` over the trailing axes of ``x`` (explicit suffix broadcast).

    ``b.shape`` must equal ``x.shape[-b.ndim:]``; the gradient of ``b`` sums
    over the leading axes.
    """
    _check_dtypes("add_bias", x, b)
    nb = b.data.ndim
    if nb == 0 or nb > x.data.ndim or x.shape[x.data.ndim - nb:] != b.shape:
        raise ShapeError("add_bias", x.shape, b.shape)
    lead = tuple(range(x.data.ndim - nb))

    def vjp(g):
        return g, g.sum(axis=lead) if lead else g
    return _make("add_bias", x.data + b.data, (x, b), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError("reshape", x.shape, shape)
    return _make("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", ())
    _check_dtypes("concat", *tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )
    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, vjp)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis; the backward pads the complement with zeros."""
    n = x.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeError("slice_last", x.shape, (start, stop))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)
    return _make("slice_last", np.ascontiguousarray(x.data[..., start:stop]), (x,), vjp)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (G, m, k) @ (G, k, n) -> (G, m, n)."""
    _check_dtypes("bmm", a, b)
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError("bmm", a.shape, b.shape)
    return _make("bmm", np.matmul(a.data, b.data), (a, b),
                 lambda g: (np.matmul(g, b.data.swapaxes(1, 2)),
                            np.matmul(a.data.swapaxes(1, 2), g)))


def similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Inner-product similarity: rows of ``a`` against rows of ``b`` -> (n, m)."""
    _check_dtypes("similarity_matrix", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("similarity_matrix", a.shape, b.shape)
    return _make("similarity_matrix", a.data @ b.data.T, (a, b),
                 lambda g: (g @ b.data, g.T @ a.data))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    oh = (Hp - kh) // s + 1
    ow = (Wp - kw) // s + 1
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (B, C, kh, kw, oh, ow), (sb, sc, sh, sw, sh * s, sw * s))
    return np.ascontiguousarray(view).reshape(B, C * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution (cross-correlation) on (B, C, H, W) inputs.

    ``w`` is (F, C, kh, kw). ``padding`` is 'same' (symmetric (k-1)//2 per
    side) or 'valid'. Implemented as im2col + GEMM; the input gradient uses
    a k*k strided scatter, so no per-element scatter-add is needed.
    """
    parents = [x, w] + ([bias] if bias is not None else [])
    _check_dtypes("conv2d", *parents)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if bias is not None and bias.shape != (F,):
        raise ShapeError("conv2d", bias.shape, (F,))
    s = int(stride)
    ph = (kh - 1) // 2 if padding == "same" else 0
    pw = (kw - 1) // 2 if padding == "same" else 0
    oh = _conv_out_size(H, kh, s, ph)
    ow = _conv_out_size(W, kw, s, pw)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, s)                      # (B, C*kh*kw, oh*ow)
    w2 = w.data.reshape(F, C * kh * kw)
    out = np.matmul(w2, cols)                          # (B, F, oh*ow)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, F, oh, ow)

    Hp, Wp = H + 2 * ph, W + 2 * pw

    def vjp(g):
        g2 = g.reshape(B, F, oh * ow)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, oh, ow)
        dxp = np.zeros((B, C, Hp, Wp), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, i, j]
        dx = dxp[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else dxp
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw
    return _make("conv2d", out, parents, vjp)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Transposed 2-D convolution upsampling (B, C, H, W) to (B, F, H*s, W*s).

    ``w`` is (C, F, kh, kw) with odd kh, kw. Output size is exactly H*s
    (symmetric (k-1)//2 cropping with output padding s-1).
    """
    parents = [x, w] + ([bias] if bias is not None else [])
    _check_dtypes("conv2d_transpose", *parents)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv2d_transpose", x.shape, w.shape)
    B, C, H, W = x.shape
    _, F, kh, kw = w.shape
    if bias is not None and bias.shape != (F,):
        raise ShapeError("conv2d_transpose", bias.shape, (F,))
    s = int(stride)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    oh, ow = H * s, W * s

    # scatter x onto a stride-dilated grid, then accumulate kernel taps
    yp = np.zeros((B, F, oh + 2 * ph, ow + 2 * pw), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            # y_p[b, f, i + s*h, j + s*w] += sum_c x[b,c,h,w] * w[c,f,i,j]
            contrib = np.tensordot(x.data, w.data[:, :, i, j], axes=([1], [0]))
            yp[:, :, i:i + s * H:s, j:j + s * W:s] += contrib.transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(yp[:, :, ph:ph + oh, pw:pw + ow])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gslice = gp[:, :, i:i + s * H:s, j:j + s * W:s]   # (B, F, H, W)
                dx += np.tensordot(gslice, w.data[:, :, i, j], axes=([1], [1])
                                   ).transpose(0, 3, 1, 2)
                dw[:, :, i, j] = np.tensordot(
                    x.data, gslice, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw
    return _make("conv2d_transpose", out, parents, vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean_pool(x: Tensor) -> Tensor:
    """Global spatial mean pool: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError("mean_pool", x.shape)
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(
            x.data.dtype, copy=True),)
    return _make("mean_pool", out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _make("sum_all", out, (x,),
                 lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return _make("mean_all", out, (x,),
                 lambda g: (np.full_like(x.data, float(g) / n),))


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return _make("softmax", out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)
    return _make("log_softmax", out, (x,), vjp)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray,
                              mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under ``logits`` (N, V).

    ``mask`` (N,) weights positions; the mean divides by ``mask.sum()`` so
    masked-out positions contribute exactly zero.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_with_logits", logits.shape)
    targets = np.asarray(targets)
    n, v = logits.shape
    if n == 0:
        raise ShapeError("cross_entropy_with_logits", logits.shape)
    if targets.shape != (n,):
        raise ShapeError("cross_entropy_with_logits", logits.shape, targets.shape)
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError(
            f"cross_entropy_with_logits: target id out of range [0, {v})")
    if mask is None:
        mask = np.ones(n, dtype=logits.data.dtype)
    else:
        mask = np.asarray(mask, dtype=logits.data.dtype)
        if mask.shape != (n,):
            raise ShapeError("cross_entropy_with_logits", mask.shape, (n,))
    denom = float(mask.sum())
    if denom <= 0:
        raise DegenerateInputError("cross_entropy_with_logits: empty mask")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lsm = z - lse
    rows = np.arange(n)
    nll = -lsm[rows, targets]
    out = np.asarray((nll * mask).sum() / denom, dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(lsm)
        p[rows, targets] -= 1.0
        return (p * (mask * (float(g) / denom))[:, None],)
    return _make("cross_entropy_with_logits", out, (logits,), vjp)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits; ``targets`` in {0, 1}."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    d = logits.data
    # max(x,0) - x*t + log(1 + exp(-|x|))
    loss = np.maximum(d, 0.0) - d * targets + np.log1p(np.exp(-np.abs(d)))
    n = d.size
    out = np.asarray(loss.mean(), dtype=d.dtype)

    def vjp(g):
        sig = np.empty_like(d)
        pos = d >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        sig[~pos] = e / (1.0 + e)
        return ((sig - targets) * (float(g) / n),)
    return _make("bce_with_logits", out, (logits,), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Normalize rows (last axis) to unit Euclidean norm."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if norms.min() < min_norm:
        raise DegenerateInputError(
            f"l2_normalize: row norm {norms.min():.3e} below {min_norm:.0e}")
    out = x.data / norms

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norms,)
    return _make("l2_normalize", out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learnable gain and bias."""
    _check_dtypes("layer_norm", x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def vjp(g):
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias
    return _make("layer_norm", out, (x, gain, bias), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V, d) indexed by integer ids of any shape."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("embedding", table.shape)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ValueError(f"embedding: id out of range [0, {v})")
    out = table.data[ids]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)
    return _make("embedding", out, (table,), vjp)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor,
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor to a scalar Tensor and must be re-evaluable. The
    caller keeps inputs away from non-differentiable kinks (e.g. relu at 0)
    by more than ~10*h. Runs at the point's dtype; use float64.
    """
    x = Tensor(point.data.astype(np.float64), requires_grad=True)
    out = fn(x)
    x.zero_grad()
    out.backward()
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(Tensor(x.data.copy())).item()
        flat[i] = orig - h
        fm = fn(Tensor(x.data.copy())).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
