"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every differentiable operation records itself on the active :class:`Tape`
when at least one input requires gradients.  Operations are appended in
execution order, so the tape is topologically sorted by construction and
:meth:`Tape.backward` simply replays it in reverse.

Training runs in float32; gradient checks pass float64 tensors through the
same code paths (every op preserves the dtype of its inputs).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "no_grad",
    "backward",
    "conv2d",
    "instance_norm",
    "relu",
    "maxpool2",
    "upsample_bilinear2",
    "concat_channels",
    "sigmoid",
    "softmax2d",
    "extract_windows",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "GradCheckReport",
    "grad_check",
    "flip_backward",
    "branch_log",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class TapeError(RuntimeError):
    """Raised on invalid use of the differentiation tape."""


_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = None
        _local.grad_enabled = True
        _local.flipped = frozenset()
        _local.branches = None
    return _local


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; used for inference and validation."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextlib.contextmanager
def flip_backward(*op_names: str) -> Iterator[None]:
    """Test hook: negate the backward rule of the named ops."""
    st = _state()
    prev = st.flipped
    st.flipped = prev | frozenset(op_names)
    try:
        yield
    finally:
        st.flipped = prev


@contextlib.contextmanager
def branch_log() -> Iterator[list]:
    """Collect the branch choices (relu signs, clamp masks, maxpool winners)
    of every piecewise op evaluated inside the block."""
    st = _state()
    prev = st.branches
    st.branches = []
    try:
        yield st.branches
    finally:
        st.branches = prev


def _note_branch(choice: np.ndarray) -> None:
    log = _state().branches
    if log is not None:
        log.append(np.ascontiguousarray(choice).tobytes())


def current_tape() -> "Tape":
    st = _state()
    if st.stack:
        return st.stack[-1]
    if st.default is None or st.default.consumed:
        st.default = Tape()
    return st.default


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.node: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to scope recording; otherwise operations land on
    a per-thread default tape that is replaced once it has been consumed.
    """

    ops: list[_Op] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def reset(self) -> None:
        for op in self.ops:
            op.output.node = None
            op.output._tape = None
        self.ops.clear()
        self.consumed = False

    def record(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, rule) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape after backward; call reset()")
        for t in inputs:
            if t._tape is not None and t._tape is not self:
                raise TapeError(f"{name}: input recorded on a different tape")
        output.node = len(self.ops)
        output._tape = self
        self.ops.append(_Op(name, inputs, output, rule))

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self or root.node is None:
            raise TapeError("root was not recorded on this tape")
        if self.consumed:
            raise TapeError("backward already called on this tape; call reset() first")
        flipped = _state().flipped
        pending: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
        for op in reversed(self.ops[: root.node + 1]):
            g = pending.pop(op.output.node, None)
            if g is None:
                continue
            op.output.grad = g
            in_grads = op.backward(g)
            if op.name in flipped:
                in_grads = [None if ig is None else -ig for ig in in_grads]
            for inp, ig in zip(op.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.node is not None:
                    prev = pending.get(inp.node)
                    pending[inp.node] = ig if prev is None else prev + ig
                else:
                    inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
        for op in self.ops:
            for t in (*op.inputs, op.output):
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)
        # dropping the records breaks the tensor -> tape -> op -> tensor cycle,
        # so activations are freed by refcounting rather than a late gc pass
        self.ops.clear()
        self.consumed = True


def backward(root: Tensor) -> None:
    """Populate ``.grad`` for every tensor that ``root`` depends on."""
    if root._tape is None:
        raise TapeError("root is not part of any recorded graph")
    root._tape.backward(root)


# --- plumbing ---------------------------------------------------------------

def _const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule, name: str) -> Tensor:
    out = Tensor(data)
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(name, inputs, out, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const(b, a)
    b = _wrap(b)
    return _const(a, b), b


# --- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def rule(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), rule, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data**exponent

    def rule(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _result(out, (x,), rule, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping is active."""
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    _note_branch(inside)
    return _result(out, (x,), lambda g: (g * inside,), "clamp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# --- reductions and shape ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), rule, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), rule, "getitem")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack ``[N, Ci, H, W]`` tensors along the channel axis, in order."""
    inputs = tuple(_wrap(t) for t in inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {inputs[0].shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(inputs)))

    return _result(np.concatenate([t.data for t in inputs], axis=1), inputs, rule, "concat")


# --- layers -----------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-size 2-D cross-correlation for 1x1 or 3x3 kernels (zero padding 1 for 3x3)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {k}x{k2}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    if k == 1:
        return _conv1x1(x, weight, bias, inputs)

    # Channels-first, zero-padded and flattened: tap (dy, dx) is then a
    # contiguous column offset dy*wp + dx, so no im2col copy is needed.
    hp, wp = h + 2, w + 2
    padded = np.zeros((cin, n, hp, wp), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    padded = padded.reshape(cin, -1)
    span = padded.shape[1] - 2 * wp - 2
    offsets = [dy * wp + dx for dy in range(3) for dx in range(3)]
    wtap = weight.data.transpose(2, 3, 0, 1).reshape(9, cout, cin)

    taps = wtap.reshape(9 * cout, cin) @ padded
    full = np.zeros((cout, padded.shape[1]), dtype=taps.dtype)
    acc = full[:, :span]
    for t, off in enumerate(offsets):
        acc += taps[t * cout : (t + 1) * cout, off : off + span]
    del taps
    out = full.reshape(cout, n, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g):
        gfull = np.zeros((cout, n, hp, wp), dtype=g.dtype)
        gfull[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
        gflat = gfull.reshape(cout, -1)[:, :span]
        gw = np.empty((9, cout, cin), dtype=g.dtype)
        for t, off in enumerate(offsets):
            gw[t] = gflat @ padded[:, off : off + span].T
        back = wtap.transpose(0, 2, 1).reshape(9 * cin, cout) @ gflat
        gpad = np.zeros((cin, padded.shape[1]), dtype=g.dtype)
        for t, off in enumerate(offsets):
            gpad[:, off : off + span] += back[t * cin : (t + 1) * cin]
        gx = gpad.reshape(cin, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
        grads = [np.ascontiguousarray(gx), gw.reshape(3, 3, cout, cin).transpose(2, 3, 0, 1).copy()]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(out), inputs, rule, "conv2d")


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None, inputs) -> Tensor:
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    wmat = weight.data.reshape(cout, cin)
    cols = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    out = (wmat @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g):
        gflat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = (wmat.T @ gflat).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        grads = [np.ascontiguousarray(gx), (gflat @ cols.T).reshape(weight.shape)]
        if bias is not None:
            grads.append(gflat.sum(axis=1))
        return grads

    return _result(np.ascontiguousarray(out), inputs, rule, "conv2d")


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) spatial standardization with a learned affine map."""
    if x.ndim != 4:
        raise ShapeError("instance_norm expects [N, C, H, W]")
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError("instance_norm needs at least two spatial elements")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm: scale/shift must have shape ({c},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def rule(g):
        dxhat = g * scale.data[None, :, None, None]
        gx = inv * (
            dxhat
            - dxhat.mean(axis=(2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out.astype(x.dtype), (x, scale, shift), rule, "instance_norm")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError("maxpool2 expects [N, C, H, W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial size, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    _note_branch(arg.astype(np.uint8))
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _result(out, (x,), rule, "maxpool2")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Rows: output samples at half-pixel centres, clamped at the borders."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        m[i, min(max(lo, 0), n - 1)] += 1 - frac
        m[i, min(max(lo + 1, 0), n - 1)] += frac
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear2 expects [N, C, H, W]")
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = uh @ x.data @ uw.T

    def rule(g):
        return (uh.T @ g @ uw,)

    return _result(out, (x,), rule, "upsample")


def softmax2d(x: Tensor) -> Tensor:
    """Softmax over the last two axes."""
    if x.ndim < 2:
        raise ShapeError("softmax2d needs at least two axes")
    lead = x.shape[:-2]
    flat = x.data.reshape(*lead, -1)
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        gf = g.reshape(y.shape)
        return ((y * (gf - (gf * y).sum(axis=-1, keepdims=True))).reshape(x.shape),)

    return _result(y.reshape(x.shape), (x,), rule, "softmax2d")


def extract_windows(x: Tensor, samples, rows, cols, k: int, fill: float | None = None) -> Tensor:
    """Gather ``k x k`` windows from channel 0 of an ``[N, C, H, W]`` map.

    ``rows``/``cols`` are window top-left corners.  Windows that leave the map
    are filled with ``fill`` (default: reject them).
    """
    samples = np.asarray(samples, dtype=np.intp)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    n, _, h, w = x.shape
    pad = 0
    src = x.data[:, 0]
    if fill is None:
        if len(rows) and (rows.min() < 0 or cols.min() < 0 or rows.max() + k > h or cols.max() + k > w):
            raise ShapeError("extract_windows: window outside the map")
    else:
        pad = k
        src = np.pad(src, ((0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    off = np.arange(k)
    ri = (rows + pad)[:, None, None] + off[None, :, None]
    ci = (cols + pad)[:, None, None] + off[None, None, :]
    si = samples[:, None, None]
    out = src[si, ri, ci]

    def rule(g):
        full = np.zeros((n, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        np.add.at(full, (si, ri, ci), g)
        gx = np.zeros_like(x.data)
        gx[:, 0] = full[:, pad : pad + h, pad : pad + w]
        return (gx,)

    return _result(out.astype(x.dtype), (x,), rule, "extract_windows")


# --- finite-difference check ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    finite: bool = True
    worst_index: tuple | None = None
    n_kinks: int = 0

    def __str__(self) -> str:
        state = "ok" if self.passed else "FAIL"
        extra = f", {self.n_kinks} kink crossings skipped" if self.n_kinks else ""
        return f"{state} max_rel={self.max_rel_error:.3e} over {self.n_checked} coords{extra}"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor] | Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    skip: Callable[[int, tuple], bool] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``skip(i, idx)`` can exclude coordinates (e.g. kinks).  With
    ``max_coords`` a random subset of coordinates per input is checked.
    With ``skip_kinks`` a coordinate is skipped when the +/-eps evaluations
    take a different branch of a piecewise op (relu, clamp, maxpool) than the
    unperturbed point: the central difference then straddles a kink and is
    not an estimate of the derivative there.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape, branch_log() as base_branches:
        out = f(*inputs)
    if out.size != 1 or not np.all(np.isfinite(out.data)):
        return GradCheckReport(float("inf"), 0, False, finite=False)
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]

    def value() -> tuple[float, list]:
        with no_grad(), branch_log() as branches:
            return float(f(*inputs).data.reshape(-1)[0]), branches

    worst, worst_idx, count, kinks = 0.0, None, 0, 0
    for i, t in enumerate(inputs):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[j] for j in sorted(pick)]
        for idx in coords:
            if skip is not None and skip(i, idx):
                continue
            orig = t.data[idx]
            t.data[idx] = orig + eps
            fp, bp = value()
            t.data[idx] = orig - eps
            fm, bm = value()
            t.data[idx] = orig
            if skip_kinks and (bp != base_branches or bm != base_branches):
                kinks += 1
                continue
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(float("inf"), count, False, finite=False, worst_index=(i, idx))
            num = (fp - fm) / (2 * eps)
            a = float(analytic[i][idx])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            count += 1
            if rel > worst:
                worst, worst_idx = rel, (i, idx)
    return GradCheckReport(worst, count, worst <= tol, worst_index=worst_idx, n_kinks=kinks)
