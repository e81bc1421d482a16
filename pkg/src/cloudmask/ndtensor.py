"""Small dense-tensor engine with reverse-mode autodiff.

Only the operators a plain U-Net needs are provided: same/valid 2-D
convolution, 2x2 max pooling, 2x2 stride-2 transposed convolution, channel
concatenation, relu/sigmoid and mean binary cross-entropy (plus ``tsum`` for
testing).  Tensors are NCHW numpy arrays in float32 (default) or float64.
Reductions accumulate in float64; scalar results (losses, sums) stay float64.

Every op records a ``Node`` holding its parents and a backward closure.  Nodes
carry a global creation counter, so sorting a graph by that counter gives a
valid forward order and the reverse a valid backward order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

BCE_EPS = 1e-7

_node_ids = itertools.count()
_grad_enabled = True


class TensorError(ValueError):
    """Shape or argument contract violated by a tensor op."""


class NonFiniteError(FloatingPointError):
    """A forward result or gradient contained NaN or Inf."""


class BackwardError(RuntimeError):
    """Backward called on a non-scalar root or on an already consumed graph."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("id", "parents", "backward_fn", "consumed")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable):
        self.id = next(_node_ids)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A numpy array plus the autodiff bookkeeping attached to it."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    return arr


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(parents, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xc: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Padded channel-first (C, N, Hp, Wp) -> (C*kh*kw, N*Ho*Wo) columns.

    Each copy moves whole image rows, which is far cheaper than gathering short
    channel runs.
    """
    c, n, hp, wp = xc.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation of an NCHW batch with a (Cout, Cin, kH, kW) kernel."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise TensorError(
            f"conv2d expects 4-D input and kernel, got input {x.shape} and kernel {kernel.shape}"
        )
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise TensorError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise TensorError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise TensorError(f"same padding needs odd kernel sides, got kernel {kernel.shape}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        if kh > h or kw > w:
            raise TensorError(f"valid conv kernel {kernel.shape} larger than input {x.shape}")
        ph = pw = 0
    else:
        raise TensorError(f"unknown padding {padding!r}; use 'same' or 'valid'")

    xc = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xc[:, :, ph:ph + h, pw:pw + w] = x.data.transpose(1, 0, 2, 3)
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    cols = _im2col(xc, kh, kw)
    kmat = kernel.data.reshape(cout, -1)
    out = kmat @ cols
    out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def backward_fn(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = gk = gb = None
        if bias.requires_grad:
            gb = gmat.sum(axis=1, dtype=np.float64).astype(bias.dtype)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
            gxc = np.zeros(xc.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxc[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
            gx = np.ascontiguousarray(gxc[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))
        return gx, gk, gb

    return _result(out, (x, kernel, bias), backward_fn, "conv2d")


def upconv2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """2x2 transposed convolution with stride 2; kernel is (Cin, Cout, 2, 2).

    Stride equals kernel size, so every input pixel writes its own disjoint
    2x2 output block: out[n, o, 2i+a, 2j+b] = sum_c x[n, c, i, j] * k[c, o, a, b] + bias[o].
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise TensorError(
            f"upconv2 expects 4-D input and kernel, got input {x.shape} and kernel {kernel.shape}"
        )
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    if (kh, kw) != (2, 2):
        raise TensorError(f"upconv2 kernel must be 2x2 spatially, got kernel {kernel.shape}")
    if kcin != cin:
        raise TensorError(f"upconv2 channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (cout,):
        raise TensorError(f"upconv2 bias shape {bias.shape} does not match kernel {kernel.shape}")

    xmat = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    kmat = kernel.data.reshape(cin, cout * 4)
    blocks = (xmat @ kmat).reshape(n, h, w, cout, 2, 2)
    out = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * w)
    out += bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        # g: (N, Cout, 2H, 2W) -> per-input-pixel blocks (N*H*W, Cout*4)
        gblocks = g.reshape(n, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gblocks @ kmat.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2))
        if kernel.requires_grad:
            gk = (xmat.T @ gblocks).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), backward_fn, "upconv2")


# ---------------------------------------------------------------------------
# pooling, concatenation, activations


def maxpool2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2/stride-2 max pooling; returns the pooled tensor and flat in-block argmax.

    Ties go to the first element of the block in row-major order.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise TensorError(f"maxpool2 expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise TensorError(f"maxpool2 needs even height and width, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray):
        gblocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=x.dtype)
        np.put_along_axis(gblocks, idx[..., None], g[..., None], axis=-1)
        gx = gblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(out, (x,), backward_fn, "maxpool2"), idx


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise TensorError(f"concat_channels expects 4-D tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise TensorError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), backward_fn, "concat_channels")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    out = np.maximum(x.data, x.data.dtype.type(0))

    def backward_fn(g: np.ndarray):
        return (np.where(active, g, g.dtype.type(0)),)

    return _result(out, (x,), backward_fn, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _stable_sigmoid(x.data)

    def backward_fn(g: np.ndarray):
        return (g * out * (1 - out),)

    return _result(out, (x,), backward_fn, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise TensorError(f"unknown activation {kind!r}; use 'relu' or 'sigmoid'")


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, float64 scalar result)


def tsum(x: Tensor, weights=None) -> Tensor:
    """Sum of all elements (optionally weighted elementwise) as a float64 scalar."""
    x = _as_tensor(x)
    if weights is None:
        out = np.asarray(x.data.sum(dtype=np.float64))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != x.shape:
            raise TensorError(f"tsum weights {w.shape} do not match input {x.shape}")
        out = np.asarray((x.data.astype(np.float64) * w).sum())

    def backward_fn(g: np.ndarray):
        if weights is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        return ((w * float(g)).astype(x.dtype),)

    return _result(out, (x,), backward_fn, "sum")


def bce_loss(probs: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    probs = _as_tensor(probs)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if probs.shape != t.shape:
        raise TensorError(f"bce_loss shape mismatch: probs {probs.shape} vs targets {t.shape}")
    p64 = probs.data.astype(np.float64)
    t64 = t.astype(np.float64)
    pc = np.clip(p64, BCE_EPS, 1.0 - BCE_EPS)
    count = pc.size
    out = np.asarray(-(t64 * np.log(pc) + (1.0 - t64) * np.log1p(-pc)).sum() / count)
    inside = (p64 >= BCE_EPS) & (p64 <= 1.0 - BCE_EPS)

    def backward_fn(g: np.ndarray):
        gp = (pc - t64) / (pc * (1.0 - pc)) / count * float(g)
        gp[~inside] = 0.0
        return (gp.astype(probs.dtype),)

    return _result(out, (probs,), backward_fn, "bce_loss")


# ---------------------------------------------------------------------------
# backward


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t.node.parents)
    found.sort(key=lambda t: t.node.id, reverse=True)
    return found


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from a scalar root.

    The graph is consumed: saved forward context is released, and a second call
    on the same graph raises ``BackwardError``.
    """
    if root.data.size != 1 or root.data.ndim != 0:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
            return
        raise BackwardError("root does not require grad")
    if root.node.consumed:
        raise BackwardError("graph already consumed by a previous backward call")

    order = _collect(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    for t in order:
        g = grads.pop(id(t), None)
        node = t.node
        if g is not None:
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, "gradient")
                if parent.node is None:
                    parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        node.consumed = True
        node.backward_fn = _consumed


def _consumed(g):
    raise BackwardError("graph already consumed by a previous backward call")


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(
    builder: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-3,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``builder`` maps input tensors to a scalar tensor.  Every scalar of every
    input is perturbed by +/-eps; the relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    arrays = [np.array(a, copy=True) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(builder(*leaves))
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    worst = 0.0
    with no_grad():
        for k, arr in enumerate(arrays):
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                hi = orig + arr.dtype.type(eps)
                lo = orig - arr.dtype.type(eps)
                flat[i] = hi
                f_hi = builder(*[Tensor(a) for a in arrays]).item()
                flat[i] = lo
                f_lo = builder(*[Tensor(a) for a in arrays]).item()
                flat[i] = orig
                numeric = (f_hi - f_lo) / (float(hi) - float(lo))
                a = float(analytic[k].reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
