"""Dense fp64 tensor kernels with tape-based reverse-mode differentiation.

Every kernel is a pure function: it computes its result eagerly with numpy
and, when any input lives on a Tape, records a node whose backward closure
produces analytic input gradients. Reduction orders inside each kernel are
fixed, so repeated runs are bitwise identical.

Multiply-accumulate instrumentation: kernels that perform dense arithmetic
(matmul, linear, depthwise_conv, elementwise multiplies) report MAC counts
to any active MacCounter. Softmax, normalization, pooling and resampling are
deliberately uncounted; the complexity model only prices score/weighted-sum
and projection stages.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, fields, is_dataclass
from functools import lru_cache
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes violate a kernel's contract."""


# ---------------------------------------------------------------------------
# Tensor and Tape
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable dense fp64 array value, optionally registered on a Tape."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data, tape: Optional["Tape"] = None, tid: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.tape = tape
        self.tid = tid

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"


def tensor(data) -> Tensor:
    """Construct a constant Tensor from external data, rejecting non-finite values."""
    t = Tensor(data)
    if t.size and not np.isfinite(t.data).all():
        raise ValueError("tensor data must be finite")
    return t


@dataclass
class _Node:
    out_id: int
    input_ids: tuple[Optional[int], ...]
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tape:
    """Reverse-mode differentiation record.

    Single-owner: record and replay on one logical thread. Backward visits
    nodes in strict reverse recording order and accumulates gradients per
    tensor id; gradient arrays always match the shapes of their tensors.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0

    def _new_id(self) -> int:
        tid = self._next_id
        self._next_id += 1
        return tid

    def leaf(self, data) -> Tensor:
        """Register external data (parameters, inputs) as a differentiable leaf."""
        return Tensor(data, tape=self, tid=self._new_id())

    def record(self, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
        out = Tensor(out_data, tape=self, tid=self._new_id())
        self.nodes.append(_Node(out.tid, tuple(t.tid for t in inputs), backward_fn))
        return out


def _common_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor(out_data)
    return tape.record(out_data, inputs, backward_fn)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Accumulate gradients of a scalar loss for every tensor reachable from it.

    Returns a map from tensor id to gradient Tensor. Leaves or intermediates
    the loss does not depend on are absent from the map.
    """
    if loss.tape is not tape or loss.tid is None:
        raise ValueError("loss tensor was not recorded on this tape")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for tid, contrib in zip(node.input_ids, node.backward_fn(g)):
            if tid is None or contrib is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + contrib
            else:
                grads[tid] = contrib
    return {tid: Tensor(g) for tid, g in grads.items()}


# Test hook: when enabled, the softmax backward pass is deliberately scaled by
# a wrong factor so negative-control checks can confirm gradient verification
# actually detects a corrupted adjoint.
_TAMPER_BACKWARD = False


def set_backward_tamper(enabled: bool) -> None:
    global _TAMPER_BACKWARD
    _TAMPER_BACKWARD = bool(enabled)


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------


class MacCounter:
    """Tallies multiply-accumulate counts and activation sizes per region."""

    def __init__(self):
        self.total = 0
        self.by_region: dict[str, int] = {}
        self.peak_elems = 0
        self.peak_by_region: dict[str, int] = {}

    def region_total(self, *names: str) -> int:
        return sum(self.by_region.get(n, 0) for n in names)


_COUNTERS: list[MacCounter] = []
_REGIONS: list[str] = []


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextmanager
def mac_region(name: str) -> Iterator[None]:
    _REGIONS.append(name)
    try:
        yield
    finally:
        _REGIONS.pop()


def _tally(macs: int, out_elems: int) -> None:
    if not _COUNTERS:
        return
    region = _REGIONS[-1] if _REGIONS else "other"
    for c in _COUNTERS:
        c.total += macs
        c.by_region[region] = c.by_region.get(region, 0) + macs
        if out_elems > c.peak_elems:
            c.peak_elems = out_elems
        if out_elems > c.peak_by_region.get(region, 0):
            c.peak_by_region[region] = out_elems


# ---------------------------------------------------------------------------
# Parameter containers and tape binding
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    """Affine map y = x @ weight.T + bias; weight is [out, in], bias is [out]."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None


def flatten_params(obj, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    """Depth-first list of (dotted name, array) over a nested parameter bundle."""
    out: list[tuple[str, np.ndarray]] = []
    if isinstance(obj, np.ndarray):
        out.append((prefix, obj))
    elif isinstance(obj, Tensor):
        raise TypeError(f"parameter {prefix!r} is already bound; flatten storage arrays")
    elif is_dataclass(obj):
        for f in fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(flatten_params(getattr(obj, f.name), name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(flatten_params(item, f"{prefix}[{i}]"))
    return out


def bind_params(obj, tape: Optional[Tape], prefix: str = ""):
    """Wrap every array in a parameter bundle as a Tensor, sharing buffers.

    With a tape, arrays become differentiable leaves. Returns the bound bundle
    and a map from dotted parameter name to its leaf Tensor.
    """
    leaves: dict[str, Tensor] = {}

    def walk(node, path):
        if isinstance(node, np.ndarray):
            t = tape.leaf(node) if tape is not None else Tensor(node)
            leaves[path] = t
            return t
        if is_dataclass(node):
            kwargs = {}
            for f in fields(node):
                sub = f"{path}.{f.name}" if path else f.name
                kwargs[f.name] = walk(getattr(node, f.name), sub)
            return type(node)(**kwargs)
        if isinstance(node, list):
            return [walk(item, f"{path}[{i}]") for i, item in enumerate(node)]
        if isinstance(node, tuple):
            return tuple(walk(item, f"{path}[{i}]") for i, item in enumerate(node))
        return node

    return walk(obj, prefix), leaves


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch extents must match or broadcast from 1.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    _tally(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * n * k, out.size)

    a_shape, b_shape = a.shape, b.shape

    def backward_fn(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a_shape)
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b_shape)
        return ga, gb

    return _emit(out, (a, b), backward_fn)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """x @ weight.T + bias over the trailing axis."""
    w = p.weight
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear input extent {x.shape[-1]} != weight in extent {w.shape[1]}")
    out_dim, in_dim = w.shape
    out = np.matmul(x.data, w.data.T)
    if p.bias is not None:
        out = out + p.bias.data
    _tally((x.size // in_dim) * out_dim * in_dim, out.size)

    x_shape = x.shape
    has_bias = p.bias is not None

    def backward_fn(g):
        gx = np.matmul(g, w.data)
        g2 = g.reshape(-1, out_dim)
        gw = np.matmul(g2.T, x.data.reshape(-1, in_dim))
        if has_bias:
            return gx.reshape(x_shape), gw, g2.sum(axis=0)
        return gx.reshape(x_shape), gw

    inputs = (x, w, p.bias) if has_bias else (x, w)
    return _emit(out, inputs, backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a last extent >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        lead = g * 1.05 if _TAMPER_BACKWARD else g
        return (out * (lead - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward_fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the trailing channel axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _emit(out, (x, gamma, beta), backward_fn)


def depthwise_conv(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel spatial cross-correlation with zero same-padding.

    x is [B, C, H, W]; kernel is [C, kh, kw] with kh, kw in {1, 3}.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"depthwise_conv input must be [B,C,H,W], got {x.shape}")
    if kernel.data.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"kernel shape {kernel.shape} incompatible with input {x.shape}")
    channels, kh, kw = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ShapeError(f"unsupported kernel size {kh}x{kw}; only 1 and 3 allowed")
    if bias is not None and bias.shape != (channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({channels},)")
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((b, c, h, w))
    for dy in range(kh):
        for dx in range(kw):
            out += kernel.data[:, dy, dx][None, :, None, None] * xp[:, :, dy : dy + h, dx : dx + w]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _tally(b * c * h * w * kh * kw, out.size)

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros((channels, kh, kw))
        for dy in range(kh):
            for dx in range(kw):
                gxp[:, :, dy : dy + h, dx : dx + w] += (
                    kernel.data[:, dy, dx][None, :, None, None] * g
                )
                gk[:, dy, dx] = (g * xp[:, :, dy : dy + h, dx : dx + w]).sum(axis=(0, 2, 3))
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is not None:
            return gx, gk, g.sum(axis=(0, 2, 3))
        return gx, gk

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit(out, inputs, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a [B, C, H, W] tensor, yielding [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _emit(out, (x,), backward_fn)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean over non-overlapping cells; spatial extents must divide evenly."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise ShapeError(f"cannot pool {h}x{w} to {out_h}x{out_w}: non-divisible target")
    sh, sw = h // out_h, w // out_w
    cells = x.data.reshape(b, c, out_h, sh, out_w, sw)
    out = cells.mean(axis=(3, 5))

    def backward_fn(g):
        g_cells = np.broadcast_to(
            g[:, :, :, None, :, None] / (sh * sw), (b, c, out_h, sh, out_w, sw)
        )
        return (g_cells.reshape(b, c, h, w).copy(),)

    return _emit(out, (x,), backward_fn)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-center bilinear resampling.

    Source position for output index d is (d + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1]; each output row mixes at most two neighbors.
    """
    m = np.zeros((n_out, n_in))
    for d in range(n_out):
        src = (d + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[d, lo] += 1.0 - t
        m[d, hi] += t
    m.flags.writeable = False
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling with half-pixel centers and edge clamping."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize input must be [B,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target {out_h}x{out_w} must be positive")
    _, _, h, w = x.shape
    rows = _interp_matrix(h, out_h)
    cols = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward_fn(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _emit(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _emit(out, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def backward_fn(g):
        return (g * (cdf + x.data * pdf),)

    return _emit(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return g, g

    return _emit(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul operands differ: {a.shape} vs {b.shape}")
    out = a.data * b.data
    _tally(out.size, out.size)

    def backward_fn(g):
        return g * b.data, g * a.data

    return _emit(out, (a, b), backward_fn)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    out = x.data * c
    _tally(out.size, out.size)

    def backward_fn(g):
        return (g * c,)

    return _emit(out, (x,), backward_fn)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply a [B, C, H, W] tensor by a per-(batch, channel) gate [B, C]."""
    if x.data.ndim != 4 or gate.shape != x.shape[:2]:
        raise ShapeError(f"scale_channels: gate {gate.shape} must match leading dims of {x.shape}")
    out = x.data * gate.data[:, :, None, None]
    _tally(out.size, out.size)

    def backward_fn(g):
        return g * gate.data[:, :, None, None], (g * x.data).sum(axis=(2, 3))

    return _emit(out, (x, gate), backward_fn)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_lastdim needs at least one operand")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat leading extents differ: {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    extents = [p.shape[-1] for p in parts]

    def backward_fn(g):
        grads = []
        start = 0
        for e in extents:
            grads.append(g[..., start : start + e])
            start += e
        return tuple(grads)

    return _emit(out, tuple(parts), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    x_shape = x.shape

    def backward_fn(g):
        return (g.reshape(x_shape),)

    return _emit(out, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit(out, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    x_shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, x_shape).copy() if x_shape else np.asarray(g),)

    return _emit(out, (x,), backward_fn)
