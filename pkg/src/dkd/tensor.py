"""Dense float64 tensors with reverse-mode automatic differentiation.

Design: a tensor is an immutable numpy array plus an optional tape node
(parents + backward closure). Gradients accumulate into .grad across
backward calls until explicitly cleared. Everything is 64-bit so the
finite-difference test harness has the precision it needs; there is no
view aliasing, no GPU, and only the broadcasting the pipeline uses.

The convolution and segment-max inner loops are delegated to the kernel
backend (compiled extension or numpy fallback, see _kernels).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import InvalidArgumentError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """N-d float64 array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(*ts: Tensor) -> bool:
    return _GRAD_ENABLED[-1] and any(t.requires_grad for t in ts)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    # g may alias another node's grad buffer: copy on first write
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _acc_owned(t: Tensor, g: np.ndarray) -> None:
    # for freshly allocated gradient arrays the closure owns outright
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar. Gradients accumulate across calls."""
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    _acc(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    out._backward = bk
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc_owned(b, _unbroadcast(-g, b.data.shape))

    out._backward = bk
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc_owned(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc_owned(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bk
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc_owned(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bk
    return out


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if not _tracked(x):
        return Tensor(data)
    out = _node(np.asarray(data), (x,), None)

    def bk():
        g = out.grad
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            shape = list(x.data.shape)
            for a in ax:
                shape[a] = 1
            g = g.reshape(shape)
        _acc(x, np.broadcast_to(g, x.data.shape))

    out._backward = bk
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    if not _tracked(x):
        return Tensor(data)
    out = _node(np.ascontiguousarray(data), (x,), None)

    def bk():
        _acc(x, out.grad.reshape(x.data.shape))

    out._backward = bk
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise InvalidArgumentError("concat of zero tensors")
    data = np.concatenate([t.data for t in ts], axis=axis)
    if not _tracked(*ts):
        return Tensor(data)
    out = _node(data, tuple(ts), None)
    sizes = [t.data.shape[axis] for t in ts]

    def bk():
        g = out.grad
        off = 0
        sl = [slice(None)] * g.ndim
        for t, s in zip(ts, sizes):
            if t.requires_grad:
                sl[axis] = slice(off, off + s)
                _acc(t, g[tuple(sl)])
            off += s

    out._backward = bk
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack C_i x H x W features along the channel axis."""
    shapes = {t.data.shape[1:] for t in tensors}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"concat_channels spatial mismatch: {[t.data.shape for t in tensors]}")
    return concat(tensors, axis=0)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        g = np.zeros_like(x.data)
        g[sl] = out.grad
        _acc_owned(x, g)

    out._backward = bk
    return out


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (no gradient to mask)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"where_mask branches differ: {a.data.shape} vs {b.data.shape}")
    data = np.where(mask, a.data, b.data)
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc_owned(a, np.where(mask, g, 0.0))
        if b.requires_grad:
            _acc_owned(b, np.where(mask, 0.0, g))

    out._backward = bk
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 1, so zero-initialized residual blocks that
    # start with an all-zero pre-activation still receive gradient signal
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * (x.data >= 0.0))

    out._backward = bk
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = _sigmoid_np(x.data)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * data * (1.0 - data))

    out._backward = bk
    return out


def _log_sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = _log_sigmoid_np(x.data)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * _sigmoid_np(-x.data))

    out._backward = bk
    return out


def softplus(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * _sigmoid_np(x.data))

    out._backward = bk
    return out


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * data)

    out._backward = bk
    return out


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad / x.data)

    out._backward = bk
    return out


def power(x: Tensor, k: float) -> Tensor:
    x = _as_tensor(x)
    data = np.power(x.data, k)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * k * np.power(x.data, k - 1.0))

    out._backward = bk
    return out


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.abs(x.data)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad * np.sign(x.data))

    out._backward = bk
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along one axis."""
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise InvalidArgumentError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        g = out.grad
        _acc_owned(x, data * (g - (g * data).sum(axis=axis, keepdims=True)))

    out._backward = bk
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        g = out.grad
        _acc_owned(x, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    out._backward = bk
    return out


# ---------------------------------------------------------------------------
# linear algebra / convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise InvalidArgumentError(f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    if not _tracked(a, b):
        return Tensor(data)
    out = _node(data, (a, b), None)

    def bk():
        g = out.grad
        if a.requires_grad:
            _acc_owned(a, g @ b.data.T)
        if b.requires_grad:
            _acc_owned(b, a.data.T @ g)

    out._backward = bk
    return out


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * p, w + 2 * p), dtype=np.float64)
    out[:, p : p + h, p : p + w] = x
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2D cross-correlation over a C x H x W map.

    weight is (C_out, C_in/groups, kh, kw). Supports dense (groups=1),
    depthwise (groups == C_in) and, slowly, anything in between.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise InvalidArgumentError(
            f"conv2d expects CxHxW input and 4-d kernel, got {x.data.shape} and {weight.data.shape}"
        )
    cin, h, w = x.data.shape
    cout, cper, kh, kw = weight.data.shape
    if cper * groups != cin or cout % groups != 0:
        raise InvalidArgumentError(
            f"conv2d channel mismatch: input {x.data.shape}, kernel {weight.data.shape}, groups {groups}"
        )
    if padding < 0 or stride < 1:
        raise InvalidArgumentError(f"conv2d bad stride/padding: {stride}/{padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidArgumentError(f"conv2d output empty for input {x.data.shape}, kernel {kh}x{kw}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise InvalidArgumentError(f"conv2d bias shape {bias.data.shape} != ({cout},)")

    xp = _pad2d(x.data, padding)
    hp, wp = xp.shape[1], xp.shape[2]

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if groups == 1 and pointwise:
        # 1x1 convs skip the unfold/fold machinery entirely
        w2 = weight.data.reshape(cout, cin)
        o2 = w2 @ x.data.reshape(cin, h * w)
        if bias is not None:
            o2 += bias.data[:, None]
        data = o2.reshape(cout, h, w)
        parents = (x, weight) if bias is None else (x, weight, bias)
        if not _tracked(*parents):
            return Tensor(data)
        out = _node(data, parents, None)

        def bk_point():
            g2 = out.grad.reshape(cout, h * w)
            if weight.requires_grad:
                _acc_owned(weight, (g2 @ x.data.reshape(cin, h * w).T).reshape(weight.data.shape))
            if bias is not None and bias.requires_grad:
                _acc_owned(bias, g2.sum(axis=1))
            if x.requires_grad:
                _acc_owned(x, (w2.T @ g2).reshape(cin, h, w))

        out._backward = bk_point
        return out

    if groups == 1:
        cols = K.im2col(xp, kh, kw, stride)
        w2 = weight.data.reshape(cout, cin * kh * kw)
        o2 = w2 @ cols
        if bias is not None:
            o2 = o2 + bias.data[:, None]
        data = o2.reshape(cout, ho, wo)
        parents = (x, weight) if bias is None else (x, weight, bias)
        if not _tracked(*parents):
            return Tensor(data)
        # the unfolded column buffer is k^2 times the input: dropping it here
        # and re-gathering in backward keeps the tape's working set small,
        # which matters more than the extra gather (page faults dominate)
        del cols, o2
        out = _node(data, parents, None)

        def bk_dense():
            g2 = out.grad.reshape(cout, ho * wo)
            if weight.requires_grad:
                cols_b = K.im2col(_pad2d(x.data, padding), kh, kw, stride)
                _acc_owned(weight, (g2 @ cols_b.T).reshape(weight.data.shape))
            if bias is not None and bias.requires_grad:
                _acc_owned(bias, g2.sum(axis=1))
            if x.requires_grad:
                dxp = K.col2im(weight.data.reshape(cout, cin * kh * kw).T @ g2, cin, hp, wp, kh, kw, stride)
                _acc_owned(x, np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + w]) if padding else dxp)

        out._backward = bk_dense
        return out

    if groups == cin and cper == 1 and cout == cin:
        wd = np.ascontiguousarray(weight.data[:, 0])
        data = K.depthwise_fw(xp, wd, stride)
        if bias is not None:
            data = data + bias.data[:, None, None]
        parents = (x, weight) if bias is None else (x, weight, bias)
        if not _tracked(*parents):
            return Tensor(data)
        out = _node(data, parents, None)

        def bk_dw():
            g = out.grad
            if weight.requires_grad:
                _acc_owned(weight, np.ascontiguousarray(K.depthwise_bw_weight(xp, g, kh, kw, stride)[:, None]))
            if bias is not None and bias.requires_grad:
                _acc_owned(bias, g.sum(axis=(1, 2)))
            if x.requires_grad:
                dxp = K.depthwise_bw_input(g, wd, hp, wp, stride)
                _acc_owned(x, np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + w]) if padding else dxp)

        out._backward = bk_dw
        return out

    # generic grouped fallback: per-group dense convolutions
    cg_in, cg_out = cin // groups, cout // groups
    parts = []
    for gi in range(groups):
        xg = narrow(x, 0, gi * cg_in, cg_in)
        wg = narrow(weight, 0, gi * cg_out, cg_out)
        bg = narrow(bias, 0, gi * cg_out, cg_out) if bias is not None else None
        parts.append(conv2d(xg, wg, bg, stride=stride, padding=padding, groups=1))
    return concat(parts, axis=0)


def conv_gn_act(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    gn_scale: Tensor,
    gn_shift: Tensor,
    num_groups: int,
    stride: int = 1,
    padding: int = 0,
    eps: float = 1e-5,
    tscale: Optional[Tensor] = None,
    tshift: Optional[Tensor] = None,
    act: bool = True,
) -> Tensor:
    """Fused dense conv -> group norm -> optional per-channel FiLM
    (y * (1 + tscale) + tshift) -> optional relu.

    One tape node instead of five: the training loop is dominated by python
    and allocation overhead at desk scale, so the fusion matters more than
    any FLOP-level trick. Gradients are exactly those of the composed ops.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    cin, h, w = x.data.shape
    cout, cper, kh, kw = weight.data.shape
    if cper != cin:
        raise InvalidArgumentError(f"conv_gn_act is dense only: input {x.data.shape}, kernel {weight.data.shape}")
    if cout % num_groups != 0:
        raise InvalidArgumentError(f"{cout} channels not divisible by {num_groups} groups")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    xp = x.data if pointwise else _pad2d(x.data, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    w2 = weight.data.reshape(cout, cin * kh * kw)
    y2 = w2 @ (x.data.reshape(cin, h * w) if pointwise else K.im2col(xp, kh, kw, stride))
    if bias is not None:
        y2 += bias.data[:, None]
    yg = y2.reshape(num_groups, -1)
    mu = yg.mean(axis=1, keepdims=True)
    var = yg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((yg - mu) * inv).reshape(cout, ho, wo)
    z = gn_scale.data[:, None, None] * xhat + gn_shift.data[:, None, None]
    if tscale is not None:
        z = z * (1.0 + tscale.data) + tshift.data
    data = np.maximum(z, 0.0) if act else z
    parents = [x, weight, gn_scale, gn_shift]
    if bias is not None:
        parents.append(bias)
    if tscale is not None:
        parents.extend((tscale, tshift))
    if not _tracked(*parents):
        return Tensor(data)
    mask = z >= 0.0 if act else None
    out = _node(data, tuple(parents), None)

    def bk():
        g = out.grad * mask if act else out.grad
        if tscale is not None:
            zg = gn_scale.data[:, None, None] * xhat + gn_shift.data[:, None, None]
            if tscale.requires_grad:
                _acc_owned(tscale, (g * zg).sum(axis=(1, 2))[:, None, None])
            if tshift.requires_grad:
                _acc_owned(tshift, g.sum(axis=(1, 2))[:, None, None])
            g = g * (1.0 + tscale.data)
        if gn_scale.requires_grad:
            _acc_owned(gn_scale, (g * xhat).sum(axis=(1, 2)))
        if gn_shift.requires_grad:
            _acc_owned(gn_shift, g.sum(axis=(1, 2)))
        dxh = (g * gn_scale.data[:, None, None]).reshape(num_groups, -1)
        xh = xhat.reshape(num_groups, -1)
        dy = (inv * (dxh - dxh.mean(axis=1, keepdims=True) - xh * (dxh * xh).mean(axis=1, keepdims=True))).reshape(
            cout, ho, wo
        )
        dy2 = dy.reshape(cout, ho * wo)
        if bias is not None and bias.requires_grad:
            _acc_owned(bias, dy2.sum(axis=1))
        if weight.requires_grad:
            cols_b = x.data.reshape(cin, h * w) if pointwise else K.im2col(_pad2d(x.data, padding), kh, kw, stride)
            _acc_owned(weight, (dy2 @ cols_b.T).reshape(weight.data.shape))
        if x.requires_grad:
            if pointwise:
                _acc_owned(x, (w2.T @ dy2).reshape(cin, h, w))
            else:
                dxp = K.col2im(w2.T @ dy2, cin, hp, wp, kh, kw, stride)
                _acc_owned(
                    x, np.ascontiguousarray(dxp[:, padding : padding + h, padding : padding + w]) if padding else dxp
                )

    out._backward = bk
    return out


def film_modulate(trunk: Tensor, scale: Tensor, shift: Tensor, gate: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused gated modulation of a channel-normalized trunk:
    trunk + gate * (scale * LN(trunk) + shift), LN over channels per pixel."""
    trunk, scale, shift, gate = map(_as_tensor, (trunk, scale, shift, gate))
    if not (trunk.data.shape == scale.data.shape == shift.data.shape == gate.data.shape):
        raise InvalidArgumentError(
            f"film_modulate shapes differ: {trunk.data.shape} vs {scale.data.shape}/{shift.data.shape}/{gate.data.shape}"
        )
    mu = trunk.data.mean(axis=0, keepdims=True)
    var = trunk.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    that = (trunk.data - mu) * inv
    m = scale.data * that + shift.data
    data = trunk.data + gate.data * m
    if not _tracked(trunk, scale, shift, gate):
        return Tensor(data)
    out = _node(data, (trunk, scale, shift, gate), None)

    def bk():
        g = out.grad
        if gate.requires_grad:
            _acc_owned(gate, g * m)
        dm = g * gate.data
        if scale.requires_grad:
            _acc_owned(scale, dm * that)
        if shift.requires_grad:
            _acc_owned(shift, dm)
        if trunk.requires_grad:
            dth = dm * scale.data
            dln = inv * (dth - dth.mean(axis=0, keepdims=True) - that * (dth * that).mean(axis=0, keepdims=True))
            _acc_owned(trunk, g + dln)

    out._backward = bk
    return out


def group_norm(x: Tensor, num_groups: int, eps: float, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize each channel group to zero mean / unit variance, then apply
    a per-channel affine transform."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"group_norm expects CxHxW, got {x.data.shape}")
    c = x.data.shape[0]
    if num_groups < 1 or c % num_groups != 0:
        raise InvalidArgumentError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if eps <= 0:
        raise InvalidArgumentError(f"group_norm eps must be > 0, got {eps}")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise InvalidArgumentError(
            f"group_norm affine shapes {scale.data.shape}/{shift.data.shape} != ({c},)"
        )
    xg = x.data.reshape(num_groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.data.shape)
    data = scale.data[:, None, None] * xhat + shift.data[:, None, None]
    if not _tracked(x, scale, shift):
        return Tensor(data)
    out = _node(data, (x, scale, shift), None)

    def bk():
        g = out.grad
        if scale.requires_grad:
            _acc_owned(scale, (g * xhat).sum(axis=(1, 2)))
        if shift.requires_grad:
            _acc_owned(shift, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxh = (g * scale.data[:, None, None]).reshape(num_groups, -1)
            xh = xhat.reshape(num_groups, -1)
            dx = inv * (dxh - dxh.mean(axis=1, keepdims=True) - xh * (dxh * xh).mean(axis=1, keepdims=True))
            _acc_owned(x, dx.reshape(x.data.shape))

    out._backward = bk
    return out


def layer_norm_channels(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the channel vector at every spatial location (no affine)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise InvalidArgumentError(f"layer_norm_channels expects CxHxW, got {x.data.shape}")
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (x.data - mu) * inv
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        g = out.grad
        dx = inv * (g - g.mean(axis=0, keepdims=True) - data * (g * data).mean(axis=0, keepdims=True))
        _acc_owned(x, dx)

    out._backward = bk
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a CxHxW map."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)

    def bk():
        _acc_owned(x, out.grad.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    out._backward = bk
    return out


def segment_max(x: Tensor, starts: np.ndarray) -> Tensor:
    """Row-segment max over a (P, C) matrix; starts has S+1 boundaries."""
    x = _as_tensor(x)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    data, arg = K.segment_max(np.ascontiguousarray(x.data), starts)
    if not _tracked(x):
        return Tensor(data)
    out = _node(data, (x,), None)
    cidx = np.arange(x.data.shape[1])[None, :]

    def bk():
        g = np.zeros_like(x.data)
        g[arg, cidx] += out.grad
        _acc_owned(x, g)

    out._backward = bk
    return out


def scatter_to_grid(rows: Tensor, cells: np.ndarray, h: int, w: int) -> Tensor:
    """Place (S, C) row vectors at flat cell indices of an H x W grid -> (C, H, W)."""
    rows = _as_tensor(rows)
    s, c = rows.data.shape
    if len(np.unique(cells)) != s:
        raise InvalidArgumentError("scatter_to_grid requires unique cell indices")
    flat = np.zeros((c, h * w), dtype=np.float64)
    flat[:, cells] = rows.data.T
    data = flat.reshape(c, h, w)
    if not _tracked(rows):
        return Tensor(data)
    out = _node(data, (rows,), None)

    def bk():
        _acc_owned(rows, np.ascontiguousarray(out.grad.reshape(c, h * w)[:, cells].T))

    out._backward = bk
    return out
