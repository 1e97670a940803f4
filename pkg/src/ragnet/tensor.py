"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every value in the library is a 4-D (batch, channel, height, width) array;
scalars are shaped (1, 1, 1, 1).  Operations record onto an explicitly opened
Tape; ``backward`` replays the tape in reverse and accumulates gradients
additively into every reachable tensor with ``requires_grad``.  Outside a tape
the same functions run forward-only, which is how oracles, evaluation and
data preparation avoid graph overhead.

Computation runs in float32 by default; tests and gradient checks use
float64.  No broadcasting is performed except tensor-times-python-scalar:
all shapes must match exactly, which keeps the network wiring shape-exact.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
SCALAR_SHAPE = (1, 1, 1, 1)

# Subgradient choices: |x| and Frobenius norm get gradient 0 at 0, clamp gets
# gradient 0 outside the clamp interval (inclusive boundaries pass through).


class Tape:
    """Ordered record of executed operations for one forward pass.

    Nodes are appended in execution order, so the list is already a valid
    topological order and a single reversed sweep visits each node once.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_OpNode] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


class _OpNode:
    __slots__ = ("op", "parents", "out", "grad_fn", "seq")

    _counter = 0

    def __init__(self, op, parents, out, grad_fn):
        self.op = op
        self.parents = parents
        self.out = out
        self.grad_fn = grad_fn
        _OpNode._counter += 1
        self.seq = _OpNode._counter


class Tensor:
    """A 4-D array with optional gradient tracking.

    Tensors produced by operations are treated as immutable; only ``grad``
    mutates afterwards (by accumulation during ``backward``).
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (N,C,H,W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _OpNode | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scalar_add(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scalar_add(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named trainable tensor; names are unique within a network."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _record(op: str, parents, out: Tensor, grad_fn) -> Tensor:
    """Attach *out* to the active tape when any parent tracks gradients."""
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _OpNode(op, tuple(parents), out, grad_fn)
        tape.nodes.append(out.node)
    return out


# ---------------------------------------------------------------------------
# factories

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value: float, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=requires_grad)


def scalar(value: float, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full(SCALAR_SHAPE, value, dtype=dtype))


# ---------------------------------------------------------------------------
# convolution family

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation) with zero padding.

    ``w`` is (Cout, Cin, k, k) with k odd or 1; output spatial size is
    floor((H + 2*pad - k)/stride) + 1.
    """
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k != 1 and k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd or 1, got {k}")
    if ci != ci_w:
        raise ValueError(f"conv2d: input has {ci} channels but weight expects {ci_w}")
    if pad < 0:
        raise ValueError(f"conv2d: pad must be >= 0, got {pad}")
    if b is not None and b.shape != (1, co, 1, 1):
        raise ValueError(f"conv2d: bias shape {b.shape} != (1,{co},1,1)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output spatial size ({ho},{wo}) is empty for input ({h},{wd})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: (N*Ho*Wo, Ci*k*k) @ (Ci*k*k, Co)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, ci * k * k)
    wmat = w.data.reshape(co, ci * k * k)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data
    out = Tensor(np.ascontiguousarray(out_data))

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
        dw = (g2.T @ cols).reshape(co, ci, k, k)
        dcols = (g2 @ wmat).reshape(n, ho, wo, ci, k, k)
        dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                    dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", parents, out, grad_fn)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution with the fixed kernel 2, stride 2 layout.

    ``w`` is (Cin, Cout, 2, 2); output spatial size exactly doubles.  With
    stride equal to kernel size the output footprints are disjoint.
    """
    n, ci, h, wd = x.shape
    ci_w, co, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"conv_transpose2d: kernel must be 2x2, got {kh}x{kw}")
    if ci != ci_w:
        raise ValueError(f"conv_transpose2d: input has {ci} channels but weight expects {ci_w}")
    if b is not None and b.shape != (1, co, 1, 1):
        raise ValueError(f"conv_transpose2d: bias shape {b.shape} != (1,{co},1,1)")

    out_data = np.empty((n, co, 2 * h, 2 * wd), dtype=x.data.dtype)
    for u in range(2):
        for v in range(2):
            # out[:, :, u::2, v::2] = sum_ci x[:, ci] * w[ci, :, u, v]
            out_data[:, :, u::2, v::2] = np.tensordot(x.data, w.data[:, :, u, v], axes=([1], [0])).transpose(0, 3, 1, 2)
    if b is not None:
        out_data += b.data
    out = Tensor(out_data)

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for u in range(2):
            for v in range(2):
                gs = g[:, :, u::2, v::2]
                dx += np.tensordot(gs, w.data[:, :, u, v], axes=([1], [1])).transpose(0, 3, 1, 2)
                dw[:, :, u, v] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
        db = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _record("conv_transpose2d", parents, out, grad_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major scan."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2: spatial dims must be even, got ({h},{w})")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # first max in row-major window order
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def grad_fn(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _record("maxpool2x2", (x,), out, grad_fn)


def mask_mean3x3(m: Tensor) -> Tensor:
    """Mean of the zero-padded 3x3 neighborhood with fixed divisor 9.

    Border values are attenuated by the missing zero-padded neighbors
    (edges 6/9, corners 4/9 for an all-ones input).  Self-adjoint, so the
    backward pass is the same averaging applied to the incoming gradient.
    """
    def avg9(a):
        ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(ap, (3, 3), axis=(2, 3))
        return win.sum(axis=(-1, -2)) / 9.0

    out = Tensor(avg9(m.data).astype(m.data.dtype))

    def grad_fn(g):
        return (avg9(g).astype(g.dtype),)

    return _record("mask_mean3x3", (m,), out, grad_fn)


def downsample2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x: spatial dims must be even, got ({h},{w})")
    out = Tensor(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _record("downsample2x", (x,), out, grad_fn)


def spatial_gradient(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward-difference gradients (gx, gy); the last column/row is zero."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"spatial_gradient: need H,W >= 2, got ({h},{w})")
    return _sgrad_x(x), _sgrad_y(x)


def _sgrad_x(x: Tensor) -> Tensor:
    gx = np.zeros_like(x.data)
    gx[:, :, :, :-1] = x.data[:, :, :, 1:] - x.data[:, :, :, :-1]
    out = Tensor(gx)

    def grad_fn(g):
        dx = np.zeros_like(g)
        dx[:, :, :, :-1] -= g[:, :, :, :-1]
        dx[:, :, :, 1:] += g[:, :, :, :-1]
        return (dx,)

    return _record("sgrad_x", (x,), out, grad_fn)


def _sgrad_y(x: Tensor) -> Tensor:
    gy = np.zeros_like(x.data)
    gy[:, :, :-1, :] = x.data[:, :, 1:, :] - x.data[:, :, :-1, :]
    out = Tensor(gy)

    def grad_fn(g):
        dx = np.zeros_like(g)
        dx[:, :, :-1, :] -= g[:, :, :-1, :]
        dx[:, :, 1:, :] += g[:, :, :-1, :]
        return (dx,)

    return _record("sgrad_y", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# shape ops

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: non-channel dims differ, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def grad_fn(g):
        return (g[:, :ca], g[:, ca:])

    return _record("concat_channels", (a, b), out, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels: range [{start},{stop}) invalid for {c} channels")
    out = Tensor(x.data[:, start:stop].copy())

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _record("slice_channels", (x,), out, grad_fn)


def repeat_channels(x: Tensor, reps: int) -> Tensor:
    """Repeat each channel ``reps`` times (channel i maps to i*reps..(i+1)*reps)."""
    if reps < 1:
        raise ValueError(f"repeat_channels: reps must be >= 1, got {reps}")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(x.data, reps, axis=1))

    def grad_fn(g):
        return (g.reshape(n, c, reps, h, w).sum(axis=2),)

    return _record("repeat_channels", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# elementwise ops

def _binary(op, a: Tensor, b: Tensor, fwd, bwd):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(fwd(a.data, b.data))
    return _record(op, (a, b), out, lambda g: bwd(g, a.data, b.data))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def scalar_mul(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * s)
    return _record("scalar_mul", (x,), out, lambda g: (g * s,))


def scalar_add(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data + s)
    return _record("scalar_add", (x,), out, lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    return _record("relu", (x,), out, lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)
    return _record("sigmoid", (x,), out, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - t * t),))


def abs_(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    # np.sign is 0 at 0, matching the documented subgradient choice
    return _record("abs", (x,), out, lambda g: (g * np.sign(x.data),))


def clamp01(x: Tensor) -> Tensor:
    return clamp(x, 0.0, 1.0)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clamp", (x,), out, lambda g: (g * inside,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: inputs must be positive (clamp before taking log)")
    out = Tensor(np.log(x.data))
    return _record("log", (x,), out, lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt: inputs must be nonnegative")
    r = np.sqrt(x.data)
    out = Tensor(r)

    def grad_fn(g):
        # subgradient 0 at 0, same convention as frobenius_norm
        safe = np.where(r > 0, r, 1.0)
        return (np.where(r > 0, g / (2.0 * safe), 0.0),)

    return _record("sqrt", (x,), out, grad_fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = Tensor(np.where(x.data > 0, x.data, slope * x.data))
    return _record("leaky_relu", (x,), out, lambda g: (g * np.where(x.data > 0, 1.0, slope),))


# ---------------------------------------------------------------------------
# reductions (scalar outputs, shape (1,1,1,1))

def _reduce(op, x: Tensor, value: float, grad_of_x) -> Tensor:
    out = Tensor(np.full(SCALAR_SHAPE, value, dtype=x.data.dtype))
    return _record(op, (x,), out, lambda g: (g.reshape(()) * grad_of_x(),))


def reduce_sum(x: Tensor) -> Tensor:
    return _reduce("sum", x, x.data.sum(), lambda: np.ones_like(x.data))


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _reduce("mean", x, x.data.mean(), lambda: np.full_like(x.data, 1.0 / n))


def l1_norm(x: Tensor) -> Tensor:
    return _reduce("l1_norm", x, np.abs(x.data).sum(), lambda: np.sign(x.data))


def frobenius_norm(x: Tensor) -> Tensor:
    v = float(np.sqrt((x.data.astype(np.float64) ** 2).sum()))

    def grad_of_x():
        if v == 0.0:
            return np.zeros_like(x.data)
        return x.data / x.data.dtype.type(v)

    return _reduce("frobenius_norm", x, v, grad_of_x)


def reduce(op_kind: str, x: Tensor) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "l1_norm": l1_norm, "frobenius_norm": frobenius_norm}
    if op_kind not in fns:
        raise ValueError(f"reduce: unknown op_kind {op_kind!r}")
    return fns[op_kind](x)


# ---------------------------------------------------------------------------
# mask renormalization (the division + zero branch of the partial convolution)

def mask_renorm(y: Tensor, mbar: Tensor, b: Tensor | None, eps: float = 1e-8) -> Tensor:
    """Per-entry y/mbar + bias where mbar > eps, else exactly 0 (bias suppressed)."""
    if y.shape != mbar.shape:
        raise ValueError(f"mask_renorm: shape mismatch {y.shape} vs {mbar.shape}")
    co = y.shape[1]
    if b is not None and b.shape != (1, co, 1, 1):
        raise ValueError(f"mask_renorm: bias shape {b.shape} != (1,{co},1,1)")
    active = mbar.data > eps
    inv = np.where(active, 1.0 / np.where(active, mbar.data, 1.0), 0.0)
    out_data = y.data * inv
    if b is not None:
        out_data = out_data + b.data * active
    out = Tensor(out_data)

    def grad_fn(g):
        dy = g * inv
        dmbar = -g * y.data * inv * inv
        db = (g * active).sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if b is not None else None
        return (dy, dmbar, db) if b is not None else (dy, dmbar)

    parents = (y, mbar, b) if b is not None else (y, mbar)
    return _record("mask_renorm", parents, out, grad_fn)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    Gradients accumulate additively, both for fan-out inside one graph and
    across repeated calls; callers zero grads between optimization steps.
    """
    if loss.shape != SCALAR_SHAPE:
        raise ValueError(f"backward: loss must be scalar (1,1,1,1), got {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        return
    nodes = _collect_nodes(loss)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        keep.pop(id(node.out), None)
        t = node.out
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        parent_grads = node.grad_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if p is None or pg is None or not p.requires_grad:
                continue
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg
                keep[id(p)] = p
    # whatever is left belongs to leaves (tensors not produced on this tape)
    for tid, g in pending.items():
        t = keep[tid]
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g


def _collect_nodes(loss: Tensor) -> list[_OpNode]:
    """All nodes reachable from *loss*, sorted by creation order.

    Creation order is a topological order because an op's inputs always
    exist before its output.
    """
    seen: set[int] = set()
    found: list[_OpNode] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        found.append(node)
        stack.extend(p for p in node.parents if p is not None)
    found.sort(key=lambda nd: nd.seq)
    return found


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_check(fn, inputs: list[Tensor], step: float = 1e-5,
                      max_coords: int = 64, seed: int = 0) -> float | None:
    """Compare analytic gradients of scalar-valued ``fn`` against central differences.

    Returns the max relative error over (a sample of) coordinates, with
    denominator max(|analytic|, |numeric|, 1e-8).  Returns None (skipped)
    when no input requires gradients.  Tensors above ``max_coords`` entries
    are probed at a seeded random coordinate subset.
    """
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return None
    for t in tracked:
        t.grad = None
    with Tape():
        out = fn(*inputs)
        if not isinstance(out, Tensor) or out.shape != SCALAR_SHAPE:
            raise ValueError("finite_diff_check: fn must return a scalar tensor")
        backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tracked]

    rng = np.random.Generator(np.random.PCG64(seed))
    worst = 0.0
    for t, a in zip(tracked, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        aflat = a.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            hi = fn(*inputs).item()
            flat[idx] = orig - step
            lo = fn(*inputs).item()
            flat[idx] = orig
            num = (hi - lo) / (2.0 * step)
            ana = float(aflat[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# debug text dump

def dump_text(t: Tensor, path) -> None:
    """Write a tensor as text: one `N C H W` header line, then row-major values."""
    n, c, h, w = t.shape
    with open(path, "w") as f:
        f.write(f"{n} {c} {h} {w}\n")
        f.write(" ".join(f"{v:.17g}" for v in t.data.reshape(-1)))
        f.write("\n")


def load_text(path, dtype=np.float64) -> Tensor:
    with open(path) as f:
        n, c, h, w = (int(v) for v in f.readline().split())
        vals = np.array(f.read().split(), dtype=dtype)
    if vals.size != n * c * h * w:
        raise ValueError(f"load_text: expected {n * c * h * w} values, found {vals.size}")
    return Tensor(vals.reshape(n, c, h, w))
