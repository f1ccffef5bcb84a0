"""Rank-4 tensors with reverse-mode automatic differentiation.

Every operation executed while a ``Tape`` is active appends a record holding
its input tensors, its output tensor and a backward rule.  ``Tape.backward``
walks the records in reverse execution order (inputs always precede their
consumers), accumulating gradients at fan-out points, and finally adds the
result into ``grad`` of every tensor flagged ``requires_grad``.

Activations and images are ``(batch, channels, height, width)`` arrays;
convolution weights are ``(out_ch, in_ch, kh, kw)`` and biases rank-1.
Training runs at float32; gradient verification switches to float64 via the
``precision`` context manager so rounding noise does not mask real errors.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "active_tape", "record_op",
    "precision", "set_default_dtype", "default_dtype", "set_nan_debug",
    "add", "sub", "mul", "scale", "add_const", "sum_all",
    "conv2d", "transposed_conv2d", "maxpool", "activation", "concat_channels",
    "gradient_check", "save_tensors", "load_tensors",
]

_default_dtype = np.float32
_nan_debug = False


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _default_dtype = dt


def default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


def set_nan_debug(enabled: bool) -> None:
    """Toggle the optional non-finite check run after every forward op."""
    global _nan_debug
    _nan_debug = bool(enabled)


class Tensor:
    """A numeric array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype.type if arr.dtype.type in (np.float32, np.float64) else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @staticmethod
    def zeros(shape, requires_grad: bool = False, dtype=None) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

        ``loss`` must be a 1x1x1x1 tensor produced by an operation recorded on
        this tape.  Repeated calls add on top of previously stored gradients;
        call ``zero_grad`` on the tensors to reset.
        """
        if loss.data.shape != (1, 1, 1, 1):
            raise ValueError(f"backward: loss must have shape (1, 1, 1, 1), got {loss.data.shape}")
        if not any(rec.output is loss for rec in self.records):
            raise ValueError("backward: loss was not produced by an operation recorded on this tape")
        flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g = flowing.get(id(rec.output))
            if g is None:
                continue
            for t, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None:
                    continue
                key = id(t)
                if key in flowing:
                    flowing[key] = flowing[key] + ig
                else:
                    flowing[key] = ig
                    holders[key] = t
        for key, t in holders.items():
            if t.requires_grad:
                t.accumulate_grad(flowing[key])


def record_op(out_data: np.ndarray, inputs: tuple[Tensor, ...],
              backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a computed array in a Tensor and record it on the active tape."""
    if _nan_debug and not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite values produced by a forward operation")
    out = Tensor(out_data, dtype=out_data.dtype.type)
    tape = active_tape()
    if tape is not None:
        tape.records.append(_Record(inputs, out, backward))
    return out


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape {a.data.shape} does not match {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return record_op(a.data + float(c), (a,), lambda g: (g,))


def sum_all(a: Tensor) -> Tensor:
    """Sum every element into a 1x1x1x1 tensor."""
    out = a.data.sum().reshape(1, 1, 1, 1).astype(a.data.dtype)
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, g.reshape(-1)[0], dtype=g.dtype),)

    return record_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution family

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int,
            padding: int, oh: int, ow: int) -> np.ndarray:
    b, c, h, w = x_shape
    buf = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    blocks = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            buf[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += blocks[:, :, ki, kj]
    if padding:
        buf = buf[:, :, padding:padding + h, padding:padding + w]
    return buf


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution with zero padding over (batch, channels, height, width)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d: input and weight must be rank-4")
    out_c, in_c, kh, kw = weight.data.shape
    if x.data.shape[1] != in_c:
        raise ValueError(f"conv2d: input has {x.data.shape[1]} channels, weight expects {in_c}")
    if bias is not None and bias.data.shape != (out_c,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {out_c} output channels")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    b = x.data.shape[0]
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(out_c, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b, out_c, oh, ow)
    x_shape = x.data.shape

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(b, out_c, oh * ow).transpose(0, 2, 1))
        gw = (gmat.reshape(-1, out_c).T @ cols.reshape(-1, cols.shape[2])).reshape(weight.data.shape)
        gcols = gmat @ wmat
        gx = _col2im(gcols, x_shape, kh, kw, stride, padding, oh, ow)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` under the same weight.

    For compatible shapes, <conv2d(a), b> == <a, transposed_conv2d(b)> holds
    with a shared weight tensor; output spatial size is
    (H - 1) * stride - 2 * padding + kernel.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("transposed_conv2d: input and weight must be rank-4")
    conv_out_c, conv_in_c, kh, kw = weight.data.shape
    b, c, h, w = x.data.shape
    if c != conv_out_c:
        raise ValueError(f"transposed_conv2d: input has {c} channels, weight expects {conv_out_c}")
    if stride < 1:
        raise ValueError("transposed_conv2d: stride must be >= 1")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"transposed_conv2d: output size {oh}x{ow} is empty")
    wmat = weight.data.reshape(conv_out_c, -1)
    xmat = np.ascontiguousarray(x.data.reshape(b, c, h * w).transpose(0, 2, 1))
    cols = xmat @ wmat
    out = _col2im(cols, (b, conv_in_c, oh, ow), kh, kw, stride, padding, h, w)

    def backward(g):
        gcols, goh, gow = _im2col(g, kh, kw, stride, padding)
        gx = np.ascontiguousarray((gcols @ wmat.T).transpose(0, 2, 1)).reshape(b, c, h, w)
        gw = (xmat.reshape(-1, c).T @ gcols.reshape(-1, gcols.shape[2])).reshape(weight.data.shape)
        return (gx, gw)

    return record_op(out, (x, weight), backward)


def maxpool(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient flows to the first (row-major) max per window."""
    if window < 1:
        raise ValueError("maxpool: window must be >= 1")
    stride = window if stride is None else stride
    b, c, h, w = x.data.shape
    if window > h or window > w:
        raise ValueError(f"maxpool: window {window} larger than input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(b, c, oh, ow, window * window)
    idx = flat.argmax(axis=4)
    out = np.ascontiguousarray(np.take_along_axis(flat, idx[..., None], axis=4)[..., 0])
    x_shape = x.data.shape

    def backward(g):
        gx = np.zeros(x_shape, dtype=g.dtype)
        bi, ci, oi, oj = np.indices((b, c, oh, ow), sparse=True)
        rows = oi * stride + idx // window
        cols = oj * stride + idx % window
        np.add.at(gx, (np.broadcast_to(bi, idx.shape), np.broadcast_to(ci, idx.shape), rows, cols), g)
        return (gx,)

    return record_op(out, (x,), backward)


def activation(x: Tensor, kind: str, slope: float = 0.1) -> Tensor:
    """Elementwise nonlinearity: sigmoid, tanh or leaky_relu (default slope 0.1)."""
    if kind == "sigmoid":
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-x.data))
        return record_op(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return record_op(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "leaky_relu":
        pos = x.data > 0
        y = np.where(pos, x.data, x.data * slope)
        return record_op(y, (x,), lambda g: (g * np.where(pos, 1.0, slope).astype(g.dtype),))
    raise ValueError(f"activation: unknown kind {kind!r}")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving input order."""
    if not inputs:
        raise ValueError("concat_channels: need at least one tensor")
    ref = inputs[0].data.shape
    for t in inputs[1:]:
        s = t.data.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: batch/spatial mismatch {s} vs {ref}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1))

    return record_op(out, tuple(inputs), backward)


# ---------------------------------------------------------------------------
# verification

def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                   max_coords: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of scalar-valued ``f`` at ``x`` against
    central finite differences, at float64.

    Returns the max over (sampled) coordinates of
    |analytic - numeric| / max(1, |analytic|).  When ``max_coords`` is given
    a deterministic random subset of coordinates is checked.
    """
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with precision(np.float64):
        with Tape() as tape:
            y = f(probe)
        if y.data.shape != (1, 1, 1, 1):
            raise ValueError("gradient_check: f must return a 1x1x1x1 tensor")
        if not np.isfinite(y.data).all():
            raise ValueError("gradient_check: f(x) is not finite")
        tape.backward(y)
        analytic = (probe.grad if probe.grad is not None else np.zeros_like(base)).reshape(-1)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False)
        flat = base.reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint container: version header then (name, shape, little-endian data)

_CKPT_MAGIC = b"SFCP"
_CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensors(path, named: Mapping[str, "Tensor | np.ndarray"]) -> None:
    """Write named arrays as a flat little-endian binary container."""
    chunks = [_CKPT_MAGIC, struct.pack("<II", _CKPT_VERSION, len(named))]
    for name, value in named.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValueError(f"save_tensors: unsupported dtype {arr.dtype} for {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container written by ``save_tensors``; round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if len(raw) < 12:
        raise ValueError(f"corrupt checkpoint file: expected at least 12 bytes, found {len(raw)}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(raw):
            raise ValueError(f"corrupt checkpoint file: expected {pos + n} bytes, found {len(raw)}")

    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(name_len)
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(2)
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _CODE_DTYPES:
            raise ValueError(f"corrupt checkpoint file: unknown dtype code {code}")
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        need(nbytes)
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        out[name] = arr.astype(dtype.newbyteorder("="))
        pos += nbytes
    return out
