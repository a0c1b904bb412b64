"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy float64 array. Differentiable ops are
plain functions that, when a ``Tape`` is active, append one entry per op:
entries hold the op name, the input tensors, the freshly created output and a
closure implementing the backward rule (with whatever forward values it needs
captured). Entries are appended in creation order, which is already a
topological order, so the backward pass is a single reverse sweep that visits
every node exactly once.

Gradients never appear implicitly: nothing is recorded unless a tape is
active AND at least one input is tracked (a parameter with
``requires_grad=True`` or the output of an earlier recorded op). Running ops
outside a tape is the inference mode used for pseudo-label/teacher forwards,
which is what makes those branches structurally gradient-free.

All kernels reduce in a fixed order (im2col + whole-batch GEMM, bincount
scatter, dense interpolation matrices), so results are reproducible
run-to-run and do not depend on BLAS thread count.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "stop_recording",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "sum_all",
    "mean_all",
    "relu",
    "conv2d",
    "channel_norm",
    "bilinear_upsample",
    "log_softmax_channels",
]


class Tensor:
    """A numpy-backed value that can participate in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A copy that is invisible to any tape (stop-gradient boundary)."""
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Entry:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops, used as a context manager.

    The entry list is append-only and creation-ordered, so reversing it gives
    a valid reverse-topological traversal. One tape belongs to one training
    step; tapes are never shared across concurrent runs.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        # id() keys are safe because entries hold strong references for the
        # lifetime of the tape.
        self._tracked: dict[int, Tensor] = {}
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tapes must nest properly"
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def watch(self, t: Tensor) -> None:
        """Track gradients for ``t`` on this tape even if requires_grad is unset."""
        self._tracked[id(t)] = t

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, entry: _Entry) -> None:
        self._entries.append(entry)
        self._tracked[id(entry.out)] = entry.out
        # remember requires_grad leaves so backward() can publish their .grad
        for inp in entry.inputs:
            if inp.requires_grad:
                self._tracked[id(inp)] = inp

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar loss; fills the internal gradient map."""
        if loss.data.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            g_out = grads.get(id(entry.out))
            if g_out is None:
                continue
            g_inputs = entry.backward_fn(g_out)
            for inp, g in zip(entry.inputs, g_inputs):
                if g is None or not self._tracks(inp):
                    continue
                slot = grads.get(id(inp))
                if slot is None:
                    # copy when a rule passes g_out through unchanged, so two
                    # accumulation slots never alias the same buffer
                    grads[id(inp)] = g.copy() if g is g_out else np.ascontiguousarray(g)
                else:
                    slot += g
        self._grads = grads
        for t in self._tracked.values():
            if t.requires_grad:
                t.grad = self.grad(t)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() w.r.t. ``t`` (zeros if unreachable)."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


_TLS = threading.local()


def _stack() -> list:
    """Per-thread ambient tape stack, so parallel runs cannot interleave."""
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def stop_recording():
    """Structural stop-gradient: ops created inside are never taped.

    Pushes a null tape onto the ambient stack, so forwards that produce
    pseudo-label targets or teacher predictions stay off any enclosing
    training tape.
    """
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        popped = stack.pop()
        assert popped is None, "tapes must nest properly"


def backward(loss: Tensor, tape: Tape) -> None:
    """Convenience wrapper: run the tape's reverse sweep from ``loss``."""
    tape.backward(loss)


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._record(_Entry(op, tuple(inputs), out, backward_fn))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or ndarray (no gradient through ``c``)."""
    c = c if isinstance(c, (int, float)) else np.asarray(c, dtype=np.float64)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def sum_all(a: Tensor) -> Tensor:
    n_shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, n_shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at exactly 0 is 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution


_COL_INDEX_CACHE: dict[tuple, tuple[np.ndarray, int]] = {}


def _conv_geometry(H, W, k, stride, padding):
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    return Ho, Wo


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """[B,C,H,W] -> [B*Ho*Wo, C*k*k] patch matrix (single copy)."""
    B, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = _conv_geometry(H, W, k, stride, padding)
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]          # [B,C,Ho,Wo,k,k] view
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(B * Ho * Wo, C * k * k)


def _col_scatter_index(B, C, H, W, k, stride, padding) -> tuple[np.ndarray, int]:
    """Flat indices into stacked padded [B,C,Hp,Wp] planes, one entry per
    im2col column element, in (batch, window, channel, ky, kx) order."""
    key = (B, C, H, W, k, stride, padding)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = _conv_geometry(H, W, k, stride, padding)
    base = np.arange(C * Hp * Wp).reshape(C, Hp, Wp)
    ii = (np.arange(Ho) * stride)[:, None] + np.arange(k)[None, :]
    jj = (np.arange(Wo) * stride)[:, None] + np.arange(k)[None, :]
    idx = base[:, ii[:, None, :, None], jj[None, :, None, :]]           # [C,Ho,Wo,k,k]
    idx = idx.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo * C * k * k)
    plane = C * Hp * Wp
    batched = (np.arange(B)[:, None] * plane + idx[None, :]).reshape(-1)
    _COL_INDEX_CACHE[key] = (batched, plane)
    return batched, plane


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with bias over [B,Cin,H,W].

    Output size follows the floor convention H' = (H + 2·padding − k)//stride + 1;
    input positions past the last full window receive zero gradient.
    """
    if inp.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be [B,Cin,H,W], got {inp.shape}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [Cout,Cin,k,k], got {weight.shape}")
    B, Cin, H, W = inp.shape
    Cout, Cin_w, k, k2 = weight.shape
    if k != k2:
        raise DimensionError(f"conv2d: kernel must be square, got {k}x{k2}")
    if k % 2 != 1:
        raise ArgumentError(f"conv2d: kernel size must be odd, got {k}")
    if Cin_w != Cin:
        raise DimensionError(
            f"conv2d: input channel axis ({Cin}) != weight channel axis ({Cin_w})")
    if bias.shape != (Cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    if stride < 1:
        raise ArgumentError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ArgumentError(f"conv2d: padding must be >= 0, got {padding}")
    Ho, Wo = _conv_geometry(H, W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(
            f"conv2d: empty output {Ho}x{Wo} for input {H}x{W}, k={k}, "
            f"stride={stride}, padding={padding}")

    x = inp.data
    w2 = weight.data.reshape(Cout, Cin * k * k)
    cols = _im2col(x, k, stride, padding)                # [B*N, CKK]
    out = cols @ w2.T                                    # [B*N, Cout]
    out = np.ascontiguousarray(
        out.reshape(B, Ho * Wo, Cout).transpose(0, 2, 1)).reshape(
            B, Cout, Ho, Wo)
    out += bias.data[None, :, None, None]

    def backward_fn(g):
        g2 = np.ascontiguousarray(
            g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        d_bias = g.sum(axis=(0, 2, 3))
        d_w = g2.T @ cols                                          # [Cout, CKK]
        d_cols = g2 @ w2                                           # [B*N, CKK]
        # one bincount over the whole batch: per-sample column blocks are
        # offset into disjoint padded planes
        idx, plane = _col_scatter_index(B, Cin, H, W, k, stride, padding)
        d_pad = np.bincount(idx, weights=d_cols.ravel(),
                            minlength=B * plane)
        d_pad = d_pad.reshape(B, Cin, H + 2 * padding, W + 2 * padding)
        if padding:
            d_inp = d_pad[:, :, padding:padding + H, padding:padding + W]
        else:
            d_inp = d_pad
        return np.ascontiguousarray(d_inp), d_w.reshape(weight.shape), d_bias

    return _emit("conv2d", out, (inp, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# normalization


def channel_norm(inp: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane over HxW, then scale and shift.

    Batch-independent by construction: statistics never cross samples, so a
    sample's output is identical whether it is processed alone or in a batch.
    """
    if eps <= 0:
        raise ArgumentError(f"channel_norm: eps must be > 0, got {eps}")
    if inp.data.ndim != 4:
        raise DimensionError(f"channel_norm: input must be [B,C,H,W], got {inp.shape}")
    B, C, H, W = inp.shape
    if gain.shape != (C,) or shift.shape != (C,):
        raise DimensionError(
            f"channel_norm: gain {gain.shape} / shift {shift.shape} must both be ({C},)")
    x = inp.data
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    g4 = gain.data[None, :, None, None]
    out = xhat * g4 + shift.data[None, :, None, None]

    def backward_fn(g):
        d_shift = g.sum(axis=(0, 2, 3))
        d_gain = (g * xhat).sum(axis=(0, 2, 3))
        gh = g * g4
        d_x = inv_std * (gh
                         - gh.mean(axis=(2, 3), keepdims=True)
                         - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True))
        return d_x, d_gain, d_shift

    return _emit("channel_norm", out, (inp, gain, shift), backward_fn)


# ---------------------------------------------------------------------------
# bilinear upsampling


_INTERP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Dense [n_in*factor, n_in] bilinear matrix (align-corners-false)."""
    key = (n_in, factor)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(inp: Tensor, factor: int) -> Tensor:
    """Scale the two trailing spatial axes by an integer factor."""
    if factor < 1:
        raise ArgumentError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if inp.data.ndim != 4:
        raise DimensionError(f"bilinear_upsample: input must be [B,C,h,w], got {inp.shape}")
    if factor == 1:
        return _emit("bilinear_upsample", inp.data.copy(), (inp,), lambda g: (g,))
    B, C, h, w = inp.shape
    Mh = _interp_matrix(h, factor)
    Mw = _interp_matrix(w, factor)
    # out = Mh @ x @ Mw.T over the spatial axes
    tmp = np.einsum("oi,bcij->bcoj", Mh, inp.data, optimize=True)
    out = np.einsum("pj,bcoj->bcop", Mw, tmp, optimize=True)

    def backward_fn(g):
        t = np.einsum("pj,bcop->bcoj", Mw, g, optimize=True)
        return (np.einsum("oi,bcoj->bcij", Mh, t, optimize=True),)

    return _emit("bilinear_upsample", out, (inp,), backward_fn)


# ---------------------------------------------------------------------------
# log-softmax


def log_softmax_channels(logits: Tensor) -> Tensor:
    """Numerically stable per-pixel log-softmax over the channel axis."""
    if logits.data.ndim != 4:
        raise DimensionError(
            f"log_softmax_channels: input must be [B,K,H,W], got {logits.shape}")
    K = logits.shape[1]
    if K < 2:
        raise ArgumentError(f"log_softmax_channels: need K >= 2 classes, got {K}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    softmax = np.exp(out)

    def backward_fn(g):
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return _emit("log_softmax_channels", out, (logits,), backward_fn)
