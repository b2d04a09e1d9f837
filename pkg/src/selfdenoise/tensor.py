"""Small N-d float32 tensor with reverse-mode differentiation.

Only the operations the SDNN pipeline needs are provided. Feature maps use
the N x H x W x C layout so that per-channel broadcasts hit the innermost
axis.

Every differentiable op returns a new :class:`Tensor` whose ``_parents`` and
``_backward`` describe one tape entry. :func:`backward` linearises the tape
reachable from a scalar loss and replays it in reverse.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


@contextmanager
def precision(dtype):
    """Evaluate forward passes in ``dtype`` (used by finite-difference oracles).

    Tensors met inside the block are cast to constants, so no tape is kept.
    """
    global DTYPE
    old = DTYPE
    DTYPE = dtype
    try:
        yield
    finally:
        DTYPE = old


class ShapeError(ValueError):
    pass


_kink_log: Optional[list] = None


@contextmanager
def record_kinks():
    """Collect the activation patterns of ReLU and max-pool ops run inside the block.

    Two evaluations with equal patterns lie on the same smooth piece of a
    piecewise-smooth function.
    """
    global _kink_log
    old = _kink_log
    _kink_log = log = []
    try:
        yield log
    finally:
        _kink_log = old


class Tensor:
    """N-dimensional float32 array that records how it was produced."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = tuple(_parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=DTYPE)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype == DTYPE:
            return x
        return Tensor(x.data)
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    return out


def _shape_mismatch(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: shape mismatch between {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_mismatch("add", a.shape, b.shape)
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        out._backward = lambda g: (g, g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise _shape_mismatch("mul", a.shape, b.shape)
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        out._backward = lambda g: (g * b.data, g * a.data)
    return out


def broadcast_add_channel(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector to every spatial site of an N x H x W x C map.

    ``b`` is either length C (shared by the batch) or N x C (one vector per
    sample). Its gradient is the upstream gradient summed over the
    broadcast axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4:
        raise ShapeError(f"broadcast_add_channel: expected N x H x W x C input, got {a.shape}")
    n, _, _, c = a.shape
    if b.shape == (c,):
        bb = b.data.reshape(1, 1, 1, c)
        sum_axes = (0, 1, 2)
    elif b.shape == (n, c):
        bb = b.data.reshape(n, 1, 1, c)
        sum_axes = (1, 2)
    else:
        raise _shape_mismatch("broadcast_add_channel", a.shape, b.shape)
    out = _result(a.data + bb, (a, b), "broadcast_add_channel")
    if out.requires_grad:
        out._backward = lambda g: (g, g.sum(axis=sum_axes, dtype=DTYPE).reshape(b.shape))
    return out


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single-element tensor ``s``."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.size != 1:
        raise ShapeError(f"scale: factor must have one element, got {s.shape}")
    sv = s.data.reshape(())
    out = _result(x.data * sv, (x, s), "scale")
    if out.requires_grad:
        out._backward = lambda g: (g * sv, np.sum(g * x.data, dtype=DTYPE).reshape(s.shape))
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    out = _result(np.where(mask, x.data, DTYPE(0)), (x,), "relu")
    if out.requires_grad:
        out._backward = lambda g: (g * mask,)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = _result(x.data.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(x.shape),)
    return out


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    out = _result(np.sum(x.data, dtype=DTYPE).reshape(1), (x,), "sum")
    if out.requires_grad:
        out._backward = lambda g: (np.broadcast_to(g.reshape(()), x.shape),)
    return out


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """sum(x * w) for a constant array ``w``; handy as a probe for gradient checks."""
    x = _as_tensor(x)
    w = np.asarray(w, dtype=DTYPE)
    if w.shape != x.shape:
        raise _shape_mismatch("weighted_sum", x.shape, w.shape)
    out = _result(np.sum(x.data * w, dtype=DTYPE).reshape(1), (x,), "weighted_sum")
    if out.requires_grad:
        out._backward = lambda g: (g.reshape(()) * w,)
    return out


# -------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_mismatch("matmul", a.shape, b.shape)
    out = _result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            return (g @ b.data.T if a.requires_grad else None,
                    a.data.T @ g if b.requires_grad else None)
        out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {x.shape}")
    out = _result(x.data.T.copy(), (x,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: (g.T,)
    return out


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape N x D_in."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise _shape_mismatch("dense", x.shape, weight.shape)
    y = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise _shape_mismatch("dense bias", (weight.shape[1],), bias.shape)
        y = y + bias.data
        parents.append(bias)
    out = _result(y, parents, "dense")
    if out.requires_grad:
        def _bw(g):
            grads = [g @ weight.data.T if x.requires_grad else None,
                     x.data.T @ g if weight.requires_grad else None]
            if bias is not None:
                grads.append(g.sum(axis=0, dtype=DTYPE))
            return grads
        out._backward = _bw
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x H x W x C_in map with a K x K x C_in x C_out kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise _shape_mismatch("conv2d", x.shape, kernel.shape)
    n, h, w, cin = x.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {kernel.shape}")
    if kcin != cin:
        raise _shape_mismatch("conv2d", x.shape, kernel.shape)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: non-positive output extent {ho}x{wo} for input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    # windows: N x Ho' x Wo' x C x K x K -> strided -> N x Ho x Wo x K x K x C
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * cin)
    wmat = kernel.data.reshape(k * k * cin, cout)
    y = (cols @ wmat).reshape(n, ho, wo, cout)
    out = _result(y, (x, kernel), "conv2d")
    if out.requires_grad:
        def _bw(g):
            g2 = g.reshape(n * ho * wo, cout)
            dk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
            dx = None
            if x.requires_grad:
                dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
                dxp = np.zeros(xp.shape, dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                dx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
            return dx, dk
        out._backward = _bw
    return out


# ------------------------------------------------------------------ pooling


def pool2d(x: Tensor, mode: str = "max", target=(1, 1)) -> Tensor:
    """Adaptive equal-window pooling of an N x H x W x C map to ``target`` sites.

    Max mode routes the gradient to the first maximum met in a row-major scan
    of each window; avg mode spreads it uniformly.
    """
    x = _as_tensor(x)
    if isinstance(target, int):
        target = (target, target)
    th, tw = target
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d: expected N x H x W x C input, got {x.shape}")
    n, h, w, c = x.shape
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ShapeError(f"pool2d: spatial extents {h}x{w} not divisible by target {th}x{tw}")
    kh, kw = h // th, w // tw
    # N x th x kh x tw x kw x C -> N x th x tw x (kh*kw) x C
    win = x.data.reshape(n, th, kh, tw, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, th, tw, kh * kw, c)
    if mode == "max":
        idx = np.argmax(win, axis=3)
        if _kink_log is not None:
            _kink_log.append(idx)
        y = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    elif mode == "avg":
        idx = None
        y = win.mean(axis=3, dtype=DTYPE)
    else:
        raise ValueError(f"pool2d: unknown mode {mode!r}")
    out = _result(y, (x,), f"pool2d_{mode}")
    if out.requires_grad:
        def _bw(g):
            if mode == "max":
                dwin = np.zeros(win.shape, dtype=DTYPE)
                np.put_along_axis(dwin, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
            else:
                dwin = np.broadcast_to(g[:, :, :, None, :] / DTYPE(kh * kw), win.shape)
            return (dwin.reshape(n, th, tw, kh, kw, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c),)
        out._backward = _bw
    return out


# ------------------------------------------------------------ normalisation


def l2_normalize(x: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Divide each row of an N x D tensor by sqrt(sum of squares + epsilon)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected N x D input, got {x.shape}")
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True, dtype=DTYPE) + DTYPE(epsilon))
    y = x.data / norm
    out = _result(y, (x,), "l2_normalize")
    if out.requires_grad:
        def _bw(g):
            dot = np.sum(g * y, axis=1, keepdims=True, dtype=DTYPE)
            return ((g - y * dot) / norm,)
        out._backward = _bw
    return out


def rms_normalize(x: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Divide each sample by the root-mean-square of all its entries.

    Parameter-free and identical in training and evaluation; keeps feature
    maps at unit scale so that a fixed noise magnitude stays meaningful.
    """
    x = _as_tensor(x)
    axes = tuple(range(1, x.data.ndim))
    r = np.sqrt(np.mean(x.data * x.data, axis=axes, keepdims=True, dtype=DTYPE) + DTYPE(epsilon))
    y = x.data / r
    out = _result(y, (x,), "rms_normalize")
    if out.requires_grad:
        def _bw(g):
            m = np.mean(g * y, axis=axes, keepdims=True, dtype=DTYPE)
            return ((g - y * m) / r,)
        out._backward = _bw
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (max-subtracted)."""
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True, dtype=DTYPE)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected N x C logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, dtype=DTYPE))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels], dtype=DTYPE)
    out = _result(np.asarray([loss], dtype=DTYPE), (logits,), "softmax_cross_entropy")
    if out.requires_grad:
        def _bw(g):
            p = np.exp(z - lse[:, None])
            p[rows, labels] -= 1
            return (p * (g.reshape(()) / DTYPE(n)),)
        out._backward = _bw
    return out


# ----------------------------------------------------------------- backward


def tape(loss: Tensor) -> list:
    """Operations reachable from ``loss`` in recording (topological) order."""
    order: list = []
    seen: set = set()
    stack = [(loss, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from a scalar loss.

    Each tape entry is visited once, newest first. Gradients accumulate into
    existing ``grad`` arrays; callers zero them between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + pg if key in pending else np.asarray(pg, dtype=DTYPE)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, mask=None,
               oracle_dtype=np.float64, indices=None, exclude_kinks: bool = False) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    The tape gradient is always computed in float32. The difference quotient
    is evaluated in ``oracle_dtype``; pass ``np.float32`` to keep the oracle
    in single precision too. ``mask`` selects the coordinates to compare
    (e.g. to skip points next to a ReLU or max kink); ``indices`` restricts
    the differencing itself to the given flat coordinates. With
    ``exclude_kinks`` a coordinate is skipped when x +- h changes any ReLU
    or max-pool pattern relative to x.
    """
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None
    coords = np.arange(x.size) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
    numeric = np.zeros(coords.size, dtype=np.float64)
    smooth = np.ones(coords.size, dtype=bool)
    original = x.data
    work = original.astype(oracle_dtype)
    flat = work.reshape(-1)
    x.data = work
    try:
        with precision(oracle_dtype):
            base_pattern = None
            if exclude_kinks:
                with record_kinks() as base_pattern:
                    f(x)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                with record_kinks() as pat_p:
                    fp = float(f(x).data.reshape(-1)[0])
                flat[i] = orig - h
                with record_kinks() as pat_m:
                    fm = float(f(x).data.reshape(-1)[0])
                if exclude_kinks:
                    smooth[j] = _same_pattern(base_pattern, pat_p) and _same_pattern(base_pattern, pat_m)
                step = float(orig + h) - float(orig - h) if oracle_dtype != np.float64 else 2.0 * h
                flat[i] = orig
                numeric[j] = (fp - fm) / step
    finally:
        x.data = original
    a = analytic.reshape(-1)[coords]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    rel = np.abs(a - numeric) / denom
    keep = smooth if mask is None else smooth & np.asarray(mask, dtype=bool).reshape(-1)[coords]
    rel = rel[keep]
    return float(rel.max()) if rel.size else 0.0


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))
