"""Dense float64 tensors with reverse-mode automatic differentiation.

Covers exactly the operations the detector needs: convolution, ReLU,
fully connected layers, channel concatenation, the loss primitives, and
a handful of structural ops (sum, scale, reshape, gather).  Arrays are
row-major numpy buffers; double precision is the default and single
precision can be selected with `set_default_dtype`.

A forward call builds one `Op` node per output tensor.  `backward` on a
scalar walks the graph once in reverse topological order; each node's
backward runs at most once and gradients accumulate by addition, so
shared sub-graphs (shared parameters, reused activations) come out
right without any bookkeeping by the caller.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GeometryError, NumericError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Select the dtype newly created tensors use (float64 or float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise DimensionError(f"unsupported dtype {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus an optional gradient and producing op."""

    __slots__ = ("data", "grad", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, op: "Op | None" = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.op = op
        self.requires_grad = bool(requires_grad)

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
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A leaf tensor that owns its buffer and accumulates gradients."""
    t = Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=True)
    return t


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Op:
    """One applied operation: inputs, saved state, and a backward rule."""

    name = "op"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self._done = False

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    def _out(self, data) -> Tensor:
        needs = any(t.requires_grad for t in self.inputs)
        return Tensor(data, requires_grad=needs, op=self if needs else None)


def backward(root: Tensor, seed=None) -> None:
    """Reverse-mode sweep from `root`, accumulating into `.grad` fields.

    `seed` defaults to 1 for scalar roots.  Each op's backward runs at
    most once; re-running a graph that was already swept is an error.
    """
    if seed is None:
        if root.size != 1:
            raise DimensionError("backward() without a seed needs a scalar root")
        seed = np.ones_like(root.data)
    else:
        seed = np.asarray(seed, dtype=root.data.dtype)
        if seed.shape != root.data.shape:
            raise DimensionError(
                f"seed shape {seed.shape} does not match root {root.data.shape}"
            )
    if not root.requires_grad:
        return

    # iterative post-order over tensors that can reach a parameter
    topo: list[Tensor] = []
    state: dict[int, int] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        tid = id(t)
        mark = state.get(tid, 0)
        if mark == 2:
            continue
        if mark == 1:
            state[tid] = 2
            topo.append(t)
            continue
        state[tid] = 1
        stack.append(t)
        if t.op is not None:
            for inp in t.op.inputs:
                if inp.requires_grad and state.get(id(inp), 0) == 0:
                    stack.append(inp)

    root.grad = seed.copy() if root.grad is None else root.grad + seed
    for t in reversed(topo):
        op = t.op
        if op is None or t.grad is None:
            continue
        if op._done:
            raise NumericError("backward already ran through this op")
        op._done = True
        grads = op.backward(t.grad)
        for inp, g in zip(op.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(g, dtype=inp.data.dtype)
            else:
                inp.grad += g


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# structural ops


class _AddN(Op):
    name = "add_n"

    def backward(self, grad):
        return [grad for _ in self.inputs]


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of same-shape tensors, left to right.

    The backward pass hands every input the identical upstream gradient
    array, so each summand sees exactly the gradient of the total.
    """
    if not tensors:
        raise DimensionError("add_n needs at least one input")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"add_n shape mismatch: {t.data.shape} vs {shape}")
    out = tensors[0].data
    for t in tensors[1:]:
        out = out + t.data
    if len(tensors) == 1:
        out = out.copy()
    op = _AddN(*tensors)
    return op._out(out)


def add(a: Tensor, b: Tensor) -> Tensor:
    return add_n([a, b])


class _Scale(Op):
    name = "scale"

    def __init__(self, x: Tensor, factor: float):
        super().__init__(x)
        self.factor = factor

    def backward(self, grad):
        return [grad * self.factor]


def scale(x: Tensor, factor: float) -> Tensor:
    op = _Scale(x, float(factor))
    return op._out(x.data * float(factor))


class _Reshape(Op):
    name = "reshape"

    def __init__(self, x: Tensor):
        super().__init__(x)
        self.in_shape = x.data.shape

    def backward(self, grad):
        return [grad.reshape(self.in_shape)]


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    op = _Reshape(x)
    return op._out(x.data.reshape(shape))


class _GatherRows(Op):
    name = "gather_rows"

    def __init__(self, x: Tensor, idx: np.ndarray):
        super().__init__(x)
        self.idx = idx
        self.in_shape = x.data.shape

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(out, self.idx, grad)
        return [out]


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (leading-axis entries) by index; repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows takes a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise DimensionError("gather_rows index out of range")
    op = _GatherRows(x, idx)
    return op._out(x.data[idx])


class _SumAll(Op):
    name = "sum_all"

    def __init__(self, x: Tensor):
        super().__init__(x)
        self.in_shape = x.data.shape

    def backward(self, grad):
        return [np.broadcast_to(grad, self.in_shape).copy()]


def sum_all(x: Tensor) -> Tensor:
    op = _SumAll(x)
    return op._out(np.asarray(x.data.sum()))


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean of an empty tensor")
    return scale(sum_all(x), 1.0 / x.size)


class _WeightedSum(Op):
    name = "weighted_sum"

    def __init__(self, x: Tensor, weights: np.ndarray):
        super().__init__(x)
        self.weights = weights

    def backward(self, grad):
        return [grad * self.weights]


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar dot product with a constant weight array of equal shape."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise DimensionError(f"weight shape {w.shape} vs tensor {x.data.shape}")
    op = _WeightedSum(x, w)
    return op._out(np.asarray((x.data * w).sum()))


# ---------------------------------------------------------------------------
# neural ops


class _Relu(Op):
    name = "relu"

    def __init__(self, x: Tensor, mask: np.ndarray):
        super().__init__(x)
        self.mask = mask

    def backward(self, grad):
        return [grad * self.mask]


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    op = _Relu(x, mask)
    return op._out(np.where(mask, x.data, 0.0))


class _Linear(Op):
    name = "fully_connected"

    def backward(self, grad):
        x, w, b = self.inputs
        gx = grad @ w.data.T if x.requires_grad else None
        gw = x.data.T @ grad if w.requires_grad else None
        gb = grad.sum(axis=0) if b.requires_grad else None
        return [gx, gw, gb]


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,D] @ weight[D,M] + bias[M]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise DimensionError(
            f"fully_connected ranks: x{x.shape} w{weight.shape} b{bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"fully_connected extents: x{x.shape} w{weight.shape} b{bias.shape}"
        )
    op = _Linear(x, weight, bias)
    return op._out(x.data @ weight.data + bias.data)


def _conv_out_extent(extent: int, k: int, stride: int, pad: int, dil: int) -> int:
    eff = dil * (k - 1) + 1
    out = (extent + 2 * pad - eff) // stride + 1
    if out <= 0:
        raise GeometryError(
            f"convolution output extent {out} for input {extent}, "
            f"kernel {k}, stride {stride}, pad {pad}, dilation {dil}"
        )
    return out


class _Conv2d(Op):
    name = "conv2d"

    def __init__(self, x, w, b, cols, geom):
        super().__init__(x, w, b)
        self.cols = cols  # [N, C*kh*kw, OH*OW]
        self.geom = geom

    def backward(self, grad):
        x, w, b = self.inputs
        n, cout, oh, ow = grad.shape
        g2 = grad.reshape(n, cout, oh * ow)
        wmat = w.data.reshape(cout, -1)
        gw = None
        if w.requires_grad:
            gw = np.einsum("ncl,nkl->ck", g2, self.cols).reshape(w.data.shape)
        gb = g2.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)  # [N, C*kh*kw, L]
            gx = _col2im(dcols, self.geom)
        return [gx, gw, gb]


def _im2col(xd, kh, kw, stride, pad, dil, oh, ow):
    n, c, h, w = xd.shape
    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            y0 = i * dil
            x0 = j * dil
            cols[:, :, i, j] = xp[
                :, :, y0 : y0 + stride * oh : stride, x0 : x0 + stride * ow : stride
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols, geom):
    n, c, h, w, kh, kw, stride, pad, dil, oh, ow = geom
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            y0 = i * dil
            x0 = j * dil
            buf[
                :, :, y0 : y0 + stride * oh : stride, x0 : x0 + stride * ow : stride
            ] += d6[:, :, i, j]
    if pad:
        return buf[:, :, pad : pad + h, pad : pad + w]
    return buf


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation over x[N,Cin,H,W] with weight[Cout,Cin,kh,kw].

    The receptive extent of the kernel is dilation*(k-1)+1 per axis.
    """
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise DimensionError(
            f"conv2d ranks: x{x.shape} w{weight.shape} b{bias.shape}"
        )
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w or bias.shape[0] != cout:
        raise DimensionError(
            f"conv2d channels: x has {cin}, weight wants {cin_w}, "
            f"bias has {bias.shape[0]} for {cout} outputs"
        )
    if stride < 1 or dilation < 1 or pad < 0:
        raise GeometryError(
            f"conv2d stride={stride} pad={pad} dilation={dilation}"
        )
    oh = _conv_out_extent(h, kh, stride, pad, dilation)
    ow = _conv_out_extent(w, kw, stride, pad, dilation)
    cols = _im2col(x.data, kh, kw, stride, pad, dilation, oh, ow)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(n, cout, oh, ow)
    geom = (n, cin, h, w, kh, kw, stride, pad, dilation, oh, ow)
    op = _Conv2d(x, weight, bias, cols, geom)
    return op._out(out)


class _ConcatChannels(Op):
    name = "concat_channels"

    def __init__(self, inputs, axis, sizes):
        super().__init__(*inputs)
        self.axis = axis
        self.sizes = sizes

    def backward(self, grad):
        outs = []
        start = 0
        for t, s in zip(self.inputs, self.sizes):
            sl = [slice(None)] * grad.ndim
            sl[self.axis] = slice(start, start + s)
            outs.append(grad[tuple(sl)] if t.requires_grad else None)
            start += s
        return outs


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate feature maps along the channel axis (third from last)."""
    if not tensors:
        raise DimensionError("concat_channels needs at least one input")
    nd = tensors[0].ndim
    if nd < 3:
        raise DimensionError("concat_channels expects rank >= 3 inputs")
    axis = nd - 3
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        if t.ndim != nd:
            raise DimensionError("concat_channels rank mismatch")
        other = list(t.shape)
        for ax in range(nd):
            if ax != axis and other[ax] != ref[ax]:
                raise DimensionError(
                    f"concat_channels extent mismatch on axis {ax}: "
                    f"{t.shape} vs {tensors[0].shape}"
                )
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    op = _ConcatChannels(tensors, axis, sizes)
    return op._out(data)


# ---------------------------------------------------------------------------
# loss ops


class _SoftmaxCrossEntropy(Op):
    name = "softmax_cross_entropy"

    def __init__(self, scores, labels, probs):
        super().__init__(scores)
        self.labels = labels
        self.probs = probs

    def backward(self, grad):
        r = np.arange(self.labels.size)
        d = self.probs.copy()
        d[r, self.labels] -= 1.0
        return [d * grad[:, None]]


def softmax_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Per-row -log softmax(scores)[label]; scores are [R, M], labels [R]."""
    if scores.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy scores rank {scores.ndim}")
    lab = np.asarray(labels, dtype=np.intp)
    if lab.ndim != 1 or lab.shape[0] != scores.shape[0]:
        raise DimensionError("one label per score row required")
    if lab.size and (lab.min() < 0 or lab.max() >= scores.shape[1]):
        raise DimensionError("class label out of range")
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    r = np.arange(lab.size)
    loss = np.log(denom[:, 0]) - z[r, lab]
    op = _SoftmaxCrossEntropy(scores, lab, probs)
    return op._out(loss)


class _SmoothL1(Op):
    name = "smooth_l1"

    def __init__(self, pred, diff, weights):
        super().__init__(pred)
        self.diff = diff
        self.weights = weights

    def backward(self, grad):
        d = self.diff
        slope = np.where(np.abs(d) < 1.0, d, np.sign(d))
        return [slope * (grad * self.weights)[:, None]]


def smooth_l1_rows(pred: Tensor, target, weights=None) -> Tensor:
    """Row-wise smooth-L1: sum_i f(pred_i - target_i), f = 0.5x^2 or |x|-0.5.

    `weights` (one per row, default 1) switch rows off; a zero weight
    yields zero loss and zero gradient for that row.
    """
    if pred.ndim != 2:
        raise DimensionError(f"smooth_l1_rows pred rank {pred.ndim}")
    tgt = np.asarray(target, dtype=pred.data.dtype)
    if tgt.shape != pred.data.shape:
        raise DimensionError(
            f"smooth_l1_rows target {tgt.shape} vs pred {pred.data.shape}"
        )
    if weights is None:
        w = np.ones(pred.shape[0], dtype=pred.data.dtype)
    else:
        w = np.asarray(weights, dtype=pred.data.dtype)
        if w.shape != (pred.shape[0],):
            raise DimensionError("smooth_l1_rows needs one weight per row")
    d = pred.data - tgt
    ad = np.abs(d)
    cell = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    loss = cell.sum(axis=1) * w
    op = _SmoothL1(pred, d, w)
    return op._out(loss)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    `f` must rebuild its graph on every call (parameters are perturbed
    in place between calls).  Returns the worst relative error
    |analytic - numeric| / max(1, |numeric|) over every parameter
    element.
    """
    if eps <= 0:
        raise DimensionError("grad_check needs eps > 0")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        if not p.requires_grad:
            raise DimensionError("grad_check parameters must require gradients")
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise DimensionError("grad_check needs a scalar function")
    assert_finite(loss.data, "grad_check loss")
    loss.backward()
    analytic = []
    for p in plist:
        analytic.append(
            np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        )

    worst = 0.0
    for p, a in zip(plist, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            assert_finite(hi.data, "grad_check loss")
            flat[i] = orig - eps
            lo = f()
            assert_finite(lo.data, "grad_check loss")
            flat[i] = orig
            numeric = (hi.item() - lo.item()) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
