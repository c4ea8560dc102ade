"""Dense array engine with reverse-mode differentiation.

Every differentiable primitive used by the flow/segmentation networks and
their losses lives here: elementwise arithmetic, conv2d, bilinear x2
upsampling, reductions, channel concatenation, plus the tape machinery,
a finite-difference gradient checker and checkpoint serialization.

Arrays are float32 by default; gradient checks run in float64 so central
differences are meaningful.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Tape misuse: replaying a consumed tape, non-scalar backward, etc."""


def _current_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    """Suspend tape recording for the enclosed forward computations."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tape:
    """Ordered record of executed operations for reverse-mode replay.

    Used as a context manager; ops executed inside the block whose inputs
    require grad are recorded. ``backward`` replays the records in exact
    reverse execution order and may be called once per tape.
    """

    def __init__(self):
        self._records = []  # (out, inputs, vjp) in execution order
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _record(self, out, inputs, vjp):
        self._records.append((out, inputs, vjp))

    def backward(self, output: "DiffArray"):
        """Populate ``grad`` on every requires-grad leaf reachable from ``output``.

        ``output`` must be scalar. Leaves that touched the tape but do not
        contribute to ``output`` receive a zero grad.
        """
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward(); re-run forward")
        if output.data.size != 1:
            raise TapeError(f"backward requires a scalar output, got shape {output.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        holders: dict[int, DiffArray] = {id(output): output}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            for inp, piece in zip(inputs, vjp(g)):
                if piece is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + piece
                else:
                    grads[key] = piece
                    holders[key] = inp
        # remaining entries are leaves; everything else was popped when visited
        for key, arr in holders.items():
            arr.grad = np.ascontiguousarray(grads[key])
        for _, inputs, _ in self._records:
            for inp in inputs:
                if inp.requires_grad and inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)


class DiffArray:
    """Dense N-dimensional array optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            # floating inputs keep their precision so float64 forward passes
            # (gradient checking) stay float64 end to end
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DiffArray":
        return DiffArray(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        return f"DiffArray(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_diff(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    return DiffArray(x, dtype=dtype)


def _coerce_pair(a, b):
    if isinstance(a, DiffArray):
        dt = a.dtype
    elif isinstance(b, DiffArray):
        dt = b.dtype
    else:
        dt = DEFAULT_DTYPE
    a = a if isinstance(a, DiffArray) else DiffArray(np.asarray(a, dtype=dt))
    b = b if isinstance(b, DiffArray) else DiffArray(np.asarray(b, dtype=dt))
    return a, b


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not broadcastable") from None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _emit(out_data, inputs, vjp) -> DiffArray:
    tape = _current_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = DiffArray(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        tape._record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    return _emit(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * ad / (bd * bd), b.shape)))


def minimum(a, b):
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "minimum")
    take_a = a.data <= b.data
    return _emit(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    return _emit(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def sigmoid(x):
    x = as_diff(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = as_diff(x)
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x):
    x = as_diff(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def leaky_relu(x, slope=0.1):
    x = as_diff(x)
    pos = x.data > 0
    return _emit(np.where(pos, x.data, slope * x.data), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def log_clamped(x, eps=1e-7):
    """log(max(x, eps)); below the clamp the gradient is zero."""
    x = as_diff(x)
    clamped = np.maximum(x.data, eps)
    active = x.data >= eps
    return _emit(np.log(clamped), (x,),
                 lambda g: (np.where(active, g / clamped, 0.0),))


def square(x):
    x = as_diff(x)
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# reductions / shape ops


def reduce_sum(x):
    x = as_diff(x)
    if x.data.size == 0:
        raise ShapeError("reduce_sum: empty input")
    shape = x.shape
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype, copy=True),))


def reduce_mean(x):
    x = as_diff(x)
    if x.data.size == 0:
        raise ShapeError("reduce_mean: empty input")
    n = x.data.size
    shape = x.shape
    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: ((np.broadcast_to(g, shape) / n).astype(x.dtype, copy=True),))


def reshape(x, shape):
    x = as_diff(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def pad2d(x, top, bottom, left, right):
    """Zero-pad the spatial dims of a [C,H,W] array."""
    x = as_diff(x)
    if x.data.ndim != 3:
        raise ShapeError(f"pad2d: expected [C,H,W], got {tuple(x.shape)}")
    _, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)))
    return _emit(out, (x,), lambda g: (g[:, top:top + h, left:left + w],))


def concat_channels(*arrays):
    """Stack [C_i, H, W] arrays along the channel axis; spatial dims must agree."""
    arrs = [as_diff(a) for a in arrays]
    if not arrs:
        raise ShapeError("concat_channels: empty input")
    spatial = arrs[0].shape[1:]
    for a in arrs:
        if a.data.ndim != 3:
            raise ShapeError(f"concat_channels: expected rank-3 arrays, got shape {tuple(a.shape)}")
        if a.shape[1:] != spatial:
            raise ShapeError(f"concat_channels: spatial dims {tuple(a.shape[1:])} != {tuple(spatial)}")
    sizes = [a.shape[0] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(arrs)))

    return _emit(np.concatenate([a.data for a in arrs], axis=0), tuple(arrs), vjp)


# ---------------------------------------------------------------------------
# conv2d


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,k,k] kernel plus bias.

    Odd kernels only; the output size (H + 2*padding - k)/stride + 1 must be
    integral. Gradients flow to input, kernel and bias.
    """
    x, kernel = as_diff(x), as_diff(kernel)
    bias = as_diff(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [C,H,W] input and [O,I,k,k] kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    c_in, h, w = x.shape
    c_out, c_in_k, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if c_in_k != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels but kernel expects {c_in_k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({c_out},)")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(f"conv2d: non-integral output size for input {h}x{w}, k={kh}, stride={stride}, padding={padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def _cols():
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        windows = windows[:, ::stride, ::stride]  # [C_in, H', W', k, k]
        return windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)

    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out = (_cols() @ kmat.T).T.reshape(c_out, h_out, w_out) + bias.data[:, None, None]

    def vjp(g):
        gmat = g.reshape(c_out, h_out * w_out)  # [O, H'*W']
        g_kernel = (gmat @ _cols()).reshape(kernel.shape)
        g_bias = gmat.sum(axis=1)
        g_cols = (kmat.T @ gmat)  # [C_in*k*k, H'*W']
        g_cols = g_cols.reshape(c_in, kh, kw, h_out, w_out)
        g_xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                g_xp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += g_cols[:, i, j]
        g_x = g_xp[:, padding:padding + h, padding:padding + w] if padding else g_xp
        return g_x, g_kernel, g_bias

    return _emit(out.astype(x.dtype, copy=False), (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# bilinear x2 upsampling (align-corners-false)


def _upsample_axis_indices(n, dtype):
    src = (np.arange(2 * n, dtype=dtype) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = (src - i0).astype(dtype)
    return i0, i1, w1


def bilinear_upsample_x2(x):
    """Upsample [C,H,W] to [C,2H,2W]; output centers map to input via (i+0.5)/2-0.5."""
    x = as_diff(x)
    if x.data.ndim != 3:
        raise ShapeError(f"bilinear_upsample_x2: expected [C,H,W], got {tuple(x.shape)}")
    c, h, w = x.shape
    y0, y1, wy = _upsample_axis_indices(h, x.dtype)
    x0, x1, wx = _upsample_axis_indices(w, x.dtype)
    wy0, wy1 = (1.0 - wy)[None, :, None], wy[None, :, None]
    wx0, wx1 = (1.0 - wx)[None, None, :], wx[None, None, :]
    d = x.data
    out = (d[:, y0][:, :, x0] * wy0 * wx0 + d[:, y0][:, :, x1] * wy0 * wx1
           + d[:, y1][:, :, x0] * wy1 * wx0 + d[:, y1][:, :, x1] * wy1 * wx1)

    def vjp(g):
        gx = np.zeros((c, h, w), dtype=g.dtype)
        for yi, wyc in ((y0, wy0), (y1, wy1)):
            for xi, wxc in ((x0, wx0), (x1, wx1)):
                contrib = g * wyc * wxc
                for ch in range(c):
                    np.add.at(gx[ch], (yi[:, None], xi[None, :]), contrib[ch])
        return (gx,)

    return _emit(out.astype(x.dtype, copy=False), (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, inputs, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given DiffArrays to a scalar DiffArray. Inputs should be
    float64 for the differences to resolve; the relative error per coordinate
    is |analytic - fd| / max(1, |fd|).
    """
    inputs = [as_diff(x, dtype=np.float64) for x in inputs]
    for x in inputs:
        x.data = np.ascontiguousarray(x.data, dtype=np.float64)
        x.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
        if out.data.size != 1:
            raise TapeError(f"grad_check requires a scalar function, got output shape {tuple(out.shape)}")
        tape.backward(out)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f(*inputs).data)
            flat[i] = orig - h
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"WSEG"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    """Malformed or unreadable checkpoint container."""


def save_checkpoint(path, params):
    """Write named parameter arrays to the binary checkpoint container.

    Layout: magic "WSEG", one version byte, then per entry: u32 name length,
    name bytes, u32 rank, u32 dims, float32 values — all little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        for name, arr in params.items():
            data = arr.data if isinstance(arr, DiffArray) else np.asarray(arr)
            data = np.ascontiguousarray(data, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint container back into a dict of float32 numpy arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob[4]}")
    params = {}
    off = 5
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.copy()
    return params
