"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every operation whose inputs live on it.  Leaves are
registered by name with :meth:`Tape.param`; :meth:`Tape.backward` walks the
recorded nodes once, in reverse order, and returns a gradient for every named
node (zeros for names the loss does not reach).

Tensors that are not on a tape are plain immutable values.  Every op runs the
same numpy code whether or not its inputs are taped, so taped and tape-free
results agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "LayerParams",
    "ShapeError",
    "DomainError",
    "DegenerateBatchError",
    "apply_op",
    "add",
    "sub",
    "mul",
    "matmul",
    "exp",
    "ln",
    "relu",
    "sigmoid",
    "scale",
    "clamp",
    "tensor_sum",
    "broadcast_rows",
    "reshape",
    "pad2d",
    "conv2d",
    "batchnorm",
    "global_max_pool",
    "affine",
    "backward",
    "GradCheckReport",
    "grad_check",
]

FLOAT64 = np.float64
FLOAT32 = np.float32


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class DomainError(ValueError):
    """Input outside the domain of an op (strict mode only)."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values per channel."""


# When set, ln() rejects non-positive input instead of returning -inf/nan.
STRICT = {"ln": True}


class Tensor:
    """An n-dimensional float array, optionally a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (FLOAT32, FLOAT64):
            arr = arr.astype(FLOAT64)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def on_tape(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.on_tape else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    # maps the output gradient to one gradient per input (None where not needed)
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    dtype: np.dtype


@dataclass
class Tape:
    """Ordered record of operations for one forward/backward pass."""

    nodes: list[_Node] = field(default_factory=list)
    names: dict[int, str] = field(default_factory=dict)

    def param(self, name: str, value) -> Tensor:
        """Register a named leaf and return it as a taped tensor."""
        if name in self.names.values():
            raise KeyError(f"duplicate tape name {name!r}")
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        t = Tensor(arr)
        node_id = self._record("leaf", (), None, t.data)
        t.tape, t.node_id = self, node_id
        self.names[node_id] = name
        return t

    def mark(self, name: str, tensor: Tensor) -> Tensor:
        """Name an intermediate tensor so backward() reports its gradient."""
        if tensor.tape is not self:
            raise ValueError("can only mark tensors recorded on this tape")
        self.names[tensor.node_id] = name
        return tensor

    def _record(self, op, inputs, vjp, out: np.ndarray) -> int:
        for i in inputs:
            if i is not None and i >= len(self.nodes):
                raise RuntimeError("tape inputs must precede their consumer")
        self.nodes.append(_Node(op, tuple(inputs), vjp, out.shape, out.dtype))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every named node on the tape."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        for k in range(loss.node_id, -1, -1):
            g = grads.get(k)
            if g is None:
                continue
            node = self.nodes[k]
            if node.vjp is None:
                continue
            if k not in self.names:
                del grads[k]
            for i, gi in zip(node.inputs, node.vjp(g)):
                if i is None or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for node_id, name in self.names.items():
            node = self.nodes[node_id]
            g = grads.get(node_id)
            out[name] = g if g is not None else np.zeros(node.shape, dtype=node.dtype)
        return out


def backward(scalar_loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient map (name -> array) of ``scalar_loss`` over its tape."""
    if scalar_loss.tape is None:
        raise ValueError("loss is not on a tape")
    return scalar_loss.tape.backward(scalar_loss)


@dataclass
class LayerParams:
    """Named parameter arrays of one layer."""

    arrays: dict[str, Tensor]

    def __getitem__(self, key: str) -> Tensor:
        return self.arrays[key]

    def __contains__(self, key: str) -> bool:
        return key in self.arrays


def _tape_of(inputs: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    node_id = tape._record(op, [t.node_id for t in inputs], vjp, out)
    return Tensor(out, tape, node_id)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def ln(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    if STRICT["ln"] and np.any(xd <= 0):
        bad = np.argwhere(xd <= 0)[0]
        raise DomainError(f"ln: non-positive value {xd[tuple(bad)]!r} at index {tuple(bad)}")
    return _emit("ln", np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.dtype.type(factor)
    return _emit("scale", x.data * f, (x,), lambda g: (g * f,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _emit("clamp", out, (x,), lambda g: (g * inside,))


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    out = np.asarray(x.data.sum(), dtype=dtype).reshape(())
    return _emit("sum", out, (x,), lambda g: (np.full(shape, g.reshape(()), dtype=dtype),))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a length-D vector into an n x D matrix."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"broadcast_rows: expected a vector, got shape {x.shape}")
    out = np.broadcast_to(x.data, (n, x.shape[0])).copy()
    return _emit("broadcast_rows", out, (x,), lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def pad2d(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad both spatial axes of an NCHW tensor, ``before`` rows/cols ahead and ``after`` behind.

    A negative ``after`` drops that many trailing rows/cols instead.
    """
    x = _as_tensor(x)
    h, w = x.shape[2:] if x.data.ndim == 4 else (0, 0)
    if x.data.ndim != 4 or before < 0 or after <= -min(h, w):
        raise ShapeError(f"pad2d: bad input {x.shape} or padding ({before}, {after})")
    if before == after == 0:
        return x
    keep_h, keep_w = h + min(after, 0), w + min(after, 0)
    grow = max(after, 0)
    out = np.pad(x.data[:, :, :keep_h, :keep_w], ((0, 0), (0, 0), (before, grow), (before, grow)))

    def vjp(g):
        inner = g[:, :, before:before + keep_h, before:before + keep_w]
        if after >= 0:
            return (inner,)
        return (np.pad(inner, ((0, 0), (0, 0), (0, h - keep_h), (0, w - keep_w))),)

    return _emit("pad2d", out, (x,), vjp)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "exp": exp,
    "ln": ln,
    "relu": relu,
    "sigmoid": sigmoid,
    "scale": scale,
}


def apply_op(kind: str, inputs: Sequence[Tensor], *args) -> Tensor:
    """Apply a primitive by name; ``scale`` takes its factor as an extra arg."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, *args)


# -------------------------------------------------------------------- layers


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, Ho, Wo, C, k, k)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with per-channel bias; weight is (Cout, Cin, K, K)."""
    w, b = params["weight"], params["bias"]
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input, got shape {x.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    n, cin, h, wd = x.shape
    cout, wcin, k, k2 = w.shape
    if wcin != cin or k != k2 or b.shape != (cout,):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    span_h, span_w = h + 2 * padding - k, wd + 2 * padding - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: input {x.shape} with kernel {k}, stride {stride}, padding {padding} "
            "does not tile to an integer output size"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride).reshape(n, ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    # stacked per-sample products: a sample's output does not depend on its batch position
    out = (cols @ wmat.T).reshape(n, ho, wo, cout) + b.data
    cols = cols.reshape(n * ho * wo, cin * k * k)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, b), vjp)


def batchnorm(
    x: Tensor,
    params: LayerParams,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
    running: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    ``running`` holds ``running_mean``/``running_var`` arrays; train mode
    replaces them in that dict with the momentum-updated statistics.
    """
    gamma, beta = params["gamma"], params["beta"]
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    gd = gamma.data.reshape(1, c, 1, 1)
    bd = beta.data.reshape(1, c, 1, 1)
    dt = x.dtype.type

    if mode == "eval":
        if running is None:
            raise ValueError("batchnorm eval mode needs running statistics")
        rm = running["running_mean"].astype(x.dtype).reshape(1, c, 1, 1)
        rv = running["running_var"].astype(x.dtype).reshape(1, c, 1, 1)
        inv = 1 / np.sqrt(rv + dt(eps))
        xhat = (x.data - rm) * inv
        out = gd * xhat + bd

        def vjp_eval(g):
            return (g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _emit("batchnorm_eval", out, (x, gamma, beta), vjp_eval)
    if mode != "train":
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    count = n * h * w
    if count < 2:
        raise DegenerateBatchError(f"batchnorm: {count} value(s) per channel, need at least 2")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + dt(eps))
    xhat = centered * inv
    out = gd * xhat + bd

    if running is not None:
        m = running["running_mean"].dtype.type(momentum)
        unbiased = var.reshape(c) * (count / (count - 1))
        running["running_mean"] = ((1 - m) * running["running_mean"] + m * mean.reshape(c)).astype(
            running["running_mean"].dtype
        )
        running["running_var"] = ((1 - m) * running["running_var"] + m * unbiased).astype(
            running["running_var"].dtype
        )

    def vjp_train(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batchnorm_train", out, (x, gamma, beta), vjp_train)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max per sample and channel; N x C x H x W -> N x C."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_max_pool: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def vjp(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(n, c, h, w),)

    return _emit("global_max_pool", out, (x,), vjp)


def affine(x: Tensor, params: LayerParams) -> Tensor:
    """``x @ W + b`` with W of shape (D, K) and b of shape (K,)."""
    w, b = params["weight"], params["bias"]
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    xd, wd = x.data, w.data
    out = (xd[:, None, :] @ wd)[:, 0, :] + b.data
    return _emit("affine", out, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_index: tuple[int, ...] | None = None
    kinks: list[tuple[int, ...]] = field(default_factory=list)
    # both gradients below the finite-difference roundoff floor; nothing to compare
    unresolved: list[tuple[int, ...]] = field(default_factory=list)
    non_finite: list[tuple[int, ...]] = field(default_factory=list)
    checked: int = 0


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare the taped gradient of ``function`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  Coordinates where
    the one-sided slopes disagree sit on a kink (relu at 0, a max-pool tie)
    and are excluded; so are coordinates where both gradients are smaller
    than the roundoff in the difference quotient itself.
    """
    x0 = np.array(point, dtype=FLOAT64)
    tape = Tape()
    xt = tape.param("x", x0)
    analytic = tape.backward(function(xt))["x"]

    def f(arr):
        return float(function(Tensor(arr)).data.reshape(()))

    f0 = f(x0)
    report = GradCheckReport(0.0, True)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += step
        xm[idx] -= step
        fp, fm = f(xp), f(xm)
        a = analytic[idx]
        numeric = (fp - fm) / (2 * step)
        if not (np.isfinite(a) and np.isfinite(numeric)):
            report.non_finite.append(idx)
            report.passed = False
            continue
        right, left = (fp - f0) / step, (f0 - fm) / step
        if abs(right - left) > max(1e-3, 1e3 * tolerance) * max(abs(right), abs(left), 1.0):
            report.kinks.append(idx)
            continue
        floor = 100 * np.finfo(FLOAT64).eps * max(abs(f0), abs(fp), abs(fm), 1.0) / step
        if max(abs(a), abs(numeric)) < floor:
            report.unresolved.append(idx)
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        report.checked += 1
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst_index = idx
    if report.max_rel_error >= tolerance:
        report.passed = False
    return report
